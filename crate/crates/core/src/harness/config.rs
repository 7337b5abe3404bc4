use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::criteria::LossWeights;
use crate::diffcore::AdamWConfig;
use crate::grounding::{BoxHeadKind, GroundingConfig};
use crate::prompt::PromptVariant;
use crate::reasoner::ReasonerConfig;
use crate::segmenter::SegmenterConfig;
use crate::shapeworld::DatasetManifest;

/// Pipeline variant under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Semantic prompt → spatial prompt (semantic embedding only) → box → mask.
    Ppcr,
    /// Semantic prompt straight to the segmenter; no box.
    NoSpatial,
    /// Spatial prompt built from the raw expression only.
    ReOnly,
    /// Spatial prompt with both the raw expression and the semantic embedding.
    RePlusSem,
    /// As `Ppcr`, with the attention box head.
    AttnBox,
    /// Ground-truth boxes fed to the segmenter of a `Ppcr` checkpoint.
    GtBoxOracle,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ppcr,
        Variant::NoSpatial,
        Variant::ReOnly,
        Variant::RePlusSem,
        Variant::AttnBox,
        Variant::GtBoxOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ppcr => "ppcr",
            Variant::NoSpatial => "no_spatial",
            Variant::ReOnly => "re_only",
            Variant::RePlusSem => "re_plus_sem",
            Variant::AttnBox => "attn_box",
            Variant::GtBoxOracle => "gt_box_oracle",
        }
    }

    /// The variant whose checkpoint this one evaluates.
    pub fn training_variant(self) -> Variant {
        match self {
            Variant::GtBoxOracle => Variant::Ppcr,
            v => v,
        }
    }

    /// Spatial prompt construction, when the reasoner runs a spatial pass.
    pub fn spatial_prompt(self) -> Option<PromptVariant> {
        match self {
            Variant::Ppcr | Variant::AttnBox => Some(PromptVariant::Ppcr),
            Variant::ReOnly => Some(PromptVariant::ReOnly),
            Variant::RePlusSem => Some(PromptVariant::RePlusSem),
            Variant::NoSpatial | Variant::GtBoxOracle => None,
        }
    }

    /// Whether the segmenter receives a box prompt.
    pub fn uses_box(self) -> bool {
        self != Variant::NoSpatial
    }

    pub fn box_head(self) -> Option<BoxHeadKind> {
        match self.training_variant() {
            Variant::NoSpatial => None,
            Variant::AttnBox => Some(BoxHeadKind::Attention),
            _ => Some(BoxHeadKind::Mlp),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters, stored as `model.json` next to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    pub reasoner: ReasonerConfig,
    pub grounding: GroundingConfig,
    pub segmenter: SegmenterConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f32,
    pub floor_lr: f32,
    /// Fraction of all optimizer steps spent warming up.
    pub warmup_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            floor_lr: 0.0,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: AdamWConfig,
    pub loss_weights: LossWeights,
    /// Seed of a single run.
    pub seed: u64,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
    pub train: DatasetManifest,
    pub eval: DatasetManifest,
    /// Load the splits from these directories instead of generating them.
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    /// Template bank; the built-in bank when absent.
    pub templates: Option<PathBuf>,
    pub model: ModelConfig,
    pub threshold: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ppcr,
            epochs: 5,
            batch_size: 8,
            schedule: ScheduleConfig::default(),
            optimizer: AdamWConfig::default(),
            loss_weights: LossWeights::default(),
            seed: 0,
            seeds: vec![0, 1, 2],
            train: DatasetManifest::new("train", 512, 1_000),
            eval: DatasetManifest::new("eval", 128, 2_000),
            train_dir: None,
            eval_dir: None,
            templates: None,
            model: ModelConfig::default(),
            threshold: crate::segmenter::DEFAULT_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.schedule.warmup_fraction) {
            return bad(format!(
                "warmup_fraction {} outside [0, 1)",
                self.schedule.warmup_fraction
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        self.loss_weights.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.model.reasoner.validate()?;
        self.model.segmenter.validate()?;
        for m in [&self.train, &self.eval] {
            if m.canvas_w != self.model.reasoner.canvas || m.canvas_h != self.model.reasoner.canvas {
                return bad(format!(
                    "split {} is {}x{}, model canvas is {}",
                    m.split, m.canvas_w, m.canvas_h, self.model.reasoner.canvas
                ));
            }
        }
        if self.model.segmenter.canvas != self.model.reasoner.canvas {
            return bad("reasoner and segmenter canvas sizes differ".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Short digest of the serialized config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(&digest[..8])
    }

    pub fn with_variant(&self, variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            ..self.clone()
        }
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        (self.epochs * train_len.div_ceil(self.batch_size)) as u64
    }
}
