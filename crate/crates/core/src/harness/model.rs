use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use super::HarnessError;
use crate::diffcore::{load_checkpoint, save_checkpoint, AdamWConfig, CheckpointManifest, ParamId, ParamStore};
use crate::grounding::{GroundingConfig, GroundingHeads};
use crate::nn::Branch;
use crate::prompt::{TemplateBank, Vocab};
use crate::reasoner::Reasoner;
use crate::segmenter::Segmenter;

pub const MODEL_FILE: &str = "model.json";
pub const TEMPLATES_FILE: &str = "templates.json";
const MODEL_FORMAT: u32 = 1;

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub variant: Variant,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
}

/// Reasoner, grounding heads and segmenter over one parameter store.
#[derive(Debug, Clone)]
pub struct PpcrModel {
    pub variant: Variant,
    pub config: ModelConfig,
    pub store: ParamStore,
    pub reasoner: Reasoner,
    pub grounding: Option<GroundingHeads>,
    pub segmenter: Segmenter,
    pub templates: TemplateBank,
}

impl PpcrModel {
    /// Fresh model for `variant`, initialized from `seed`.
    pub fn new(
        config: ModelConfig,
        variant: Variant,
        templates: TemplateBank,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let vocab = Vocab::from_bank(&templates)?;
        Self::build(config, variant.training_variant(), templates, vocab, seed)
    }

    fn build(
        config: ModelConfig,
        variant: Variant,
        templates: TemplateBank,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let reasoner = Reasoner::new(&mut store, &mut rng, config.reasoner, vocab)?;
        let grounding = match variant.box_head() {
            Some(head) if variant.spatial_prompt().is_some() => {
                let cfg = GroundingConfig {
                    head,
                    ..config.grounding
                };
                Some(GroundingHeads::new(&mut store, &mut rng, config.reasoner.d_model, cfg)?)
            }
            _ => None,
        };
        let segmenter = Segmenter::new(&mut store, &mut rng, config.segmenter, config.reasoner.d_model)?;
        Ok(Self {
            variant,
            config,
            store,
            reasoner,
            grounding,
            segmenter,
            templates,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        self.reasoner.vocab()
    }

    pub fn model_file(&self) -> ModelFile {
        ModelFile {
            format_version: MODEL_FORMAT,
            variant: self.variant,
            config: self.config,
            vocab: self.vocab().words().to_vec(),
        }
    }

    /// Parameters that must never change during training.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn adapter_params(&self, branch: Branch) -> Vec<ParamId> {
        self.reasoner.adapter_params(branch)
    }

    /// Writes `model.json`, `templates.json` and the weight checkpoint.
    pub fn save(&self, dir: &Path, seed: u64, optimizer: AdamWConfig) -> Result<CheckpointManifest, HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_FILE), serde_json::to_vec_pretty(&self.model_file())?)?;
        fs::write(dir.join(TEMPLATES_FILE), self.templates.to_json())?;
        Ok(save_checkpoint(dir, &self.store, seed, optimizer)?)
    }

    /// Rebuilds the architecture from `model.json` and fills it with the
    /// stored tensors, which must match by name, shape and trainability.
    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest), HarnessError> {
        let file: ModelFile = serde_json::from_slice(&fs::read(dir.join(MODEL_FILE))?)
            .map_err(|e| HarnessError::Integrity(format!("{MODEL_FILE}: {e}")))?;
        if file.format_version != MODEL_FORMAT {
            return Err(HarnessError::Integrity(format!(
                "model format {} unsupported",
                file.format_version
            )));
        }
        let templates = TemplateBank::load(&dir.join(TEMPLATES_FILE))?;
        let vocab = Vocab::new(file.vocab)?;
        let (stored, manifest) = load_checkpoint(dir)?;
        let mut model = Self::build(file.config, file.variant, templates, vocab, manifest.seed)?;
        if stored.len() != model.store.len() {
            return Err(HarnessError::Integrity(format!(
                "checkpoint has {} tensors, architecture needs {}",
                stored.len(),
                model.store.len()
            )));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let src = stored
                .id(&name)
                .map(|s| stored.get(s))
                .ok_or_else(|| HarnessError::Integrity(format!("tensor {name} missing from checkpoint")))?;
            if src.trainable != model.store.get(id).trainable {
                return Err(HarnessError::Integrity(format!(
                    "tensor {name} has the wrong trainable flag"
                )));
            }
            model
                .store
                .set(id, src.tensor.clone())
                .map_err(|e| HarnessError::Integrity(format!("tensor {name}: {e}")))?;
        }
        Ok((model, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::eval::predict_sample;
    use crate::harness::fixtures::{fresh_model, samples};
    use crate::shapeworld::DatasetManifest;

    #[test]
    fn roundtrip_reproduces_predictions_and_seed() {
        let dir = tempfile::tempdir().unwrap();
        let model = fresh_model(Variant::Ppcr, 17);
        let manifest = model.save(dir.path(), 17, AdamWConfig::default()).unwrap();
        let (loaded, back) = PpcrModel::load(dir.path()).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.seed, 17);
        assert_eq!(loaded.model_file(), model.model_file());
        for s in samples(&DatasetManifest::new("probe", 3, 5)) {
            let a = predict_sample(&model, &s, Variant::Ppcr, 0, 0.5).unwrap();
            let b = predict_sample(&loaded, &s, Variant::Ppcr, 0, 0.5).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corrupted_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let model = fresh_model(Variant::NoSpatial, 2);
        let manifest = model.save(dir.path(), 2, AdamWConfig::default()).unwrap();
        let entry = &manifest.tensors[3];
        let path = dir.path().join(&entry.file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        let err = PpcrModel::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains(&entry.name), "{err}");
    }

    #[test]
    fn architecture_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = fresh_model(Variant::Ppcr, 2);
        model.save(dir.path(), 2, AdamWConfig::default()).unwrap();
        let mut file = model.model_file();
        file.variant = Variant::NoSpatial;
        fs::write(dir.path().join(MODEL_FILE), serde_json::to_vec(&file).unwrap()).unwrap();
        assert!(matches!(PpcrModel::load(dir.path()), Err(HarnessError::Integrity(_))));
    }

    #[test]
    fn variants_differ_only_in_grounding() {
        let ppcr = fresh_model(Variant::Ppcr, 0);
        let base = fresh_model(Variant::NoSpatial, 0);
        assert!(ppcr.grounding.is_some() && base.grounding.is_none());
        assert_eq!(fresh_model(Variant::GtBoxOracle, 0).variant, Variant::Ppcr);
        assert!(!ppcr.frozen_params().is_empty());
        assert!(!ppcr.adapter_params(Branch::A).is_empty());
    }
}
