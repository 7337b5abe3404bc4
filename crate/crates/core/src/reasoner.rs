//! Toy multimodal reasoner: a frozen patch encoder and a frozen two-block
//! transformer over `[visual patches ‖ prompt tokens ‖ readout]`, with two
//! LoRA branches on every projection. Branch A produces the semantic
//! segmentation prompt, branch B the spatial one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, LoraConfig, ParamId, ParamStore, Tensor, Var};
use crate::nn::{attention, patchify, position_code_1d, position_code_2d, Branch, DualLora, Linear};
use crate::prompt::{PromptError, PromptVariant, SemanticPrompt, SpatialPrompt, Vocab, BOS, EOS, READOUT, SEM_TOKEN};
use crate::raster::RgbImage;

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("image is {got_w}x{got_h}, model expects {expected}x{expected}")]
    Size {
        expected: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("invalid reasoner config: {0}")]
    Config(String),
    #[error("spatial prompt has injection slots but no semantic prompt was given")]
    MissingSemantic,
    #[error("variant {0:?} takes no semantic prompt")]
    UnexpectedSemantic(PromptVariant),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReasonerConfig {
    pub canvas: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub lora: LoraConfig,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            patch: 8,
            d_model: 64,
            heads: 4,
            blocks: 2,
            ffn_hidden: 128,
            lora: LoraConfig::default(),
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<(), ReasonerError> {
        let bad = |m: &str| Err(ReasonerError::Config(m.to_string()));
        if self.patch == 0 || !self.canvas.is_multiple_of(self.patch) {
            return bad("canvas must be a multiple of the patch size");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a multiple of heads");
        }
        if self.blocks == 0 || self.ffn_hidden == 0 {
            return bad("blocks and ffn_hidden must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }
}

/// Patch embeddings of one image, `[grid², d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub tokens: Tensor,
    pub grid: usize,
    pub image_w: usize,
    pub image_h: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticSegPrompt {
    /// `[1, d]`.
    pub embedding: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialSegPrompt {
    pub embedding: Tensor,
    pub variant: PromptVariant,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    q: DualLora,
    k: DualLora,
    v: DualLora,
    o: DualLora,
    ffn_in: DualLora,
    ffn_out: DualLora,
}

impl Block {
    fn projections(&self) -> [&DualLora; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ffn_in, &self.ffn_out]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reasoner {
    cfg: ReasonerConfig,
    patch_embed: Linear,
    token_embed: ParamId,
    blocks: Vec<Block>,
    vocab: Vocab,
    visual_pos: Tensor,
}

fn image_pixels(img: &RgbImage) -> Vec<f32> {
    img.raw().iter().map(|&b| f32::from(b) / 255.0).collect()
}

impl Reasoner {
    /// Registers all parameters under `reasoner.*`. Base weights are frozen,
    /// adapters trainable.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: ReasonerConfig,
        vocab: Vocab,
    ) -> Result<Self, ReasonerError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let patch_embed = Linear::new(store, rng, "reasoner.patch_embed", patch_dim, d, false, false)?;
        let token_embed = store.add(
            "reasoner.token_embed",
            Tensor::randn(rng, &[vocab.len(), d], 1.0),
            false,
        )?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let mut proj = |name: &str, d_in: usize, d_out: usize| {
                DualLora::new(store, rng, &format!("reasoner.block{i}.{name}"), d_in, d_out, cfg.lora)
            };
            blocks.push(Block {
                q: proj("q", d, d)?,
                k: proj("k", d, d)?,
                v: proj("v", d, d)?,
                o: proj("o", d, d)?,
                ffn_in: proj("ffn_in", d, cfg.ffn_hidden)?,
                ffn_out: proj("ffn_out", cfg.ffn_hidden, d)?,
            });
        }
        let grid = cfg.grid();
        let mut pos = Vec::with_capacity(grid * grid * d);
        for gy in 0..grid {
            for gx in 0..grid {
                pos.extend(position_code_2d(gx as f32, gy as f32, d));
            }
        }
        Ok(Self {
            cfg,
            patch_embed,
            token_embed,
            blocks,
            vocab,
            visual_pos: Tensor::new(vec![grid * grid, d], pos)?,
        })
    }

    pub fn config(&self) -> &ReasonerConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Every adapter parameter of `branch`.
    pub fn adapter_params(&self, branch: Branch) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.projections())
            .filter_map(|p| p.adapter(branch))
            .flat_map(|a| [a.down, a.up])
            .collect()
    }

    /// Frozen parameters: patch encoder, token table and base projections.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut out = self.patch_embed.ids();
        out.push(self.token_embed);
        out.extend(self.blocks.iter().flat_map(|b| b.projections()).map(|p| p.base));
        out
    }

    /// Frozen patch encoder with 2-D sinusoidal positions.
    pub fn encode_image(&self, store: &ParamStore, img: &RgbImage) -> Result<VisualFeatures, ReasonerError> {
        let c = self.cfg.canvas;
        if img.width() != c || img.height() != c {
            return Err(ReasonerError::Size {
                expected: c,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
        let patches = patchify(&image_pixels(img), c, c, 3, self.cfg.patch)?;
        let mut tokens = self.patch_embed.apply(store, &patches)?;
        for (t, p) in tokens.data_mut().iter_mut().zip(self.visual_pos.data()) {
            *t += p;
        }
        Ok(VisualFeatures {
            tokens,
            grid: self.cfg.grid(),
            image_w: c,
            image_h: c,
        })
    }

    fn token_row(&self, store: &ParamStore, word: &str, pos: usize) -> Result<Vec<f32>, ReasonerError> {
        let id = self.vocab.id(word)?;
        let table = store.tensor(self.token_embed);
        let code = position_code_1d(pos as f32, self.cfg.d_model);
        Ok(table.row_slice(id).iter().zip(code).map(|(e, p)| e + p).collect())
    }

    /// Embeds `[BOS, tokens…, EOS, READOUT]`; `<sem>` positions take `sem`.
    fn embed_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &VisualFeatures,
        tokens: &[String],
        sem: Option<Var>,
    ) -> Result<Var, ReasonerError> {
        let d = self.cfg.d_model;
        let mut words: Vec<&str> = Vec::with_capacity(tokens.len() + 3);
        words.push(BOS);
        words.extend(tokens.iter().map(String::as_str));
        words.push(EOS);
        words.push(READOUT);

        let mut parts = vec![g.constant(feats.tokens.clone())?];
        let mut pending: Vec<f32> = Vec::new();
        for (pos, w) in words.iter().enumerate() {
            if *w == SEM_TOKEN {
                let sem = sem.ok_or(ReasonerError::MissingSemantic)?;
                if !pending.is_empty() {
                    let rows = pending.len() / d;
                    parts.push(g.constant(Tensor::new(vec![rows, d], std::mem::take(&mut pending))?)?);
                }
                let code = g.constant(Tensor::row(position_code_1d(pos as f32, d)))?;
                parts.push(g.add(sem, code)?);
            } else {
                pending.extend(self.token_row(store, w, pos)?);
            }
        }
        let rows = pending.len() / d;
        parts.push(g.constant(Tensor::new(vec![rows, d], pending)?)?);
        Ok(g.concat_rows(&parts)?)
    }

    /// Backbone pass; returns the final embedding at the readout position, `[1, d]`.
    fn backbone(&self, g: &mut Graph, store: &ParamStore, mut x: Var, branch: Branch) -> Result<Var, ReasonerError> {
        let heads = self.cfg.heads;
        let last = self.blocks.len() - 1;
        for (i, b) in self.blocks.iter().enumerate() {
            let h = g.layer_norm_rows(x)?;
            // Only the readout row feeds anything after the last block.
            let (hq, xq) = if i == last {
                let n = g.value(x).rows();
                (g.slice_rows(h, n - 1, 1)?, g.slice_rows(x, n - 1, 1)?)
            } else {
                (h, x)
            };
            let q = b.q.forward(g, store, hq, branch)?;
            let k = b.k.forward(g, store, h, branch)?;
            let v = b.v.forward(g, store, h, branch)?;
            let a = attention(g, q, k, v, heads)?;
            let a = b.o.forward(g, store, a, branch)?;
            let x1 = g.add(xq, a)?;
            let h1 = g.layer_norm_rows(x1)?;
            let f = b.ffn_in.forward(g, store, h1, branch)?;
            let f = g.gelu(f)?;
            let f = b.ffn_out.forward(g, store, f, branch)?;
            x = g.add(x1, f)?;
        }
        Ok(g.layer_norm_rows(x)?)
    }

    /// Semantic pass on the tape (branch A).
    pub fn semantic_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &VisualFeatures,
        prompt: &SemanticPrompt,
    ) -> Result<Var, ReasonerError> {
        self.semantic_forward_with(g, store, feats, prompt, Branch::A)
    }

    /// Semantic pass with an explicit branch; `Branch::Base` gives the adapter-free backbone.
    pub fn semantic_forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &VisualFeatures,
        prompt: &SemanticPrompt,
        branch: Branch,
    ) -> Result<Var, ReasonerError> {
        if prompt.tokens.iter().any(|t| t == SEM_TOKEN) {
            return Err(ReasonerError::UnexpectedSemantic(PromptVariant::Ppcr));
        }
        let x = self.embed_sequence(g, store, feats, &prompt.tokens, None)?;
        self.backbone(g, store, x, branch)
    }

    /// Spatial pass on the tape (branch B). The semantic prompt is injected
    /// detached, so spatial losses never reach branch A through it.
    pub fn spatial_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &VisualFeatures,
        prompt: &SpatialPrompt,
        sem: Option<Var>,
    ) -> Result<Var, ReasonerError> {
        self.spatial_forward_with(g, store, feats, prompt, sem, Branch::B)
    }

    pub fn spatial_forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &VisualFeatures,
        prompt: &SpatialPrompt,
        sem: Option<Var>,
        branch: Branch,
    ) -> Result<Var, ReasonerError> {
        let sem = match (prompt.sem_slot_positions.is_empty(), sem) {
            (false, None) => return Err(ReasonerError::MissingSemantic),
            (true, Some(_)) => return Err(ReasonerError::UnexpectedSemantic(prompt.variant)),
            (false, Some(s)) => Some(g.detach(s)),
            (true, None) => None,
        };
        let x = self.embed_sequence(g, store, feats, &prompt.tokens, sem)?;
        self.backbone(g, store, x, branch)
    }

    pub fn generate_semantic_sp(
        &self,
        store: &ParamStore,
        feats: &VisualFeatures,
        prompt: &SemanticPrompt,
    ) -> Result<SemanticSegPrompt, ReasonerError> {
        let mut g = Graph::new();
        let v = self.semantic_forward(&mut g, store, feats, prompt)?;
        Ok(SemanticSegPrompt {
            embedding: g.value(v).clone(),
        })
    }

    pub fn generate_spatial_sp(
        &self,
        store: &ParamStore,
        feats: &VisualFeatures,
        prompt: &SpatialPrompt,
        sem: Option<&SemanticSegPrompt>,
    ) -> Result<SpatialSegPrompt, ReasonerError> {
        let mut g = Graph::new();
        let sem = sem.map(|s| g.constant(s.embedding.clone())).transpose()?;
        let v = self.spatial_forward(&mut g, store, feats, prompt, sem)?;
        Ok(SpatialSegPrompt {
            embedding: g.value(v).clone(),
            variant: prompt.variant,
        })
    }
}
