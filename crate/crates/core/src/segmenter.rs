//! Promptable mask decoder in the style of SAM, at toy scale: a frozen patch
//! encoder, a prompt encoder over the semantic prompt and box corners, and a
//! two-way attention decoder with a per-pixel refinement term.

use std::f32::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::grounding::PixelBox;
use crate::nn::{bilinear_matrix, patchify, position_code_2d, AttentionLayer, Linear, Mlp};
use crate::raster::{Mask, RgbImage};
use crate::reasoner::SemanticSegPrompt;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SegmenterError {
    #[error("image is {got_w}x{got_h}, segmenter expects {expected}x{expected}")]
    Size {
        expected: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("box {0:?} outside the {1}x{2} image")]
    BoxOutOfBounds([f32; 4], usize, usize),
    #[error("invalid segmenter config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub canvas: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub decoder_blocks: usize,
    /// Width of the frozen per-pixel colour features.
    pub pixel_channels: usize,
    /// Std of the Gaussian frequencies encoding box corners.
    pub fourier_scale: f32,
    /// Initial value of the output logit bias.
    pub logit_bias: f32,
    /// Initial gain of the dense inside-box prior.
    pub box_prior_gain: f32,
    /// Width in pixels of the soft box edge.
    pub box_edge_px: f32,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            patch: 4,
            d_model: 64,
            heads: 4,
            decoder_blocks: 2,
            pixel_channels: 16,
            fourier_scale: 1.0,
            logit_bias: -3.0,
            box_prior_gain: 3.0,
            box_edge_px: 1.0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmenterError> {
        let bad = |m: &str| Err(SegmenterError::Config(m.into()));
        if self.patch == 0 || !self.canvas.is_multiple_of(self.patch) {
            return bad("canvas must be a multiple of the patch size");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even and a multiple of heads");
        }
        if self.decoder_blocks == 0 || self.pixel_channels == 0 {
            return bad("decoder_blocks and pixel_channels must be positive");
        }
        if self.box_edge_px.is_nan() || self.box_edge_px <= 0.0 {
            return bad("box_edge_px must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.canvas / self.patch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterFeatures {
    /// `[grid², d]`.
    pub map: Tensor,
    /// `[H·W, pixel_channels]`.
    pub pixels: Tensor,
    pub grid: usize,
    pub width: usize,
    pub height: usize,
}

/// Prompt tokens `[semantic, top-left, bottom-right]`, or only the semantic
/// token when no box is given. The box itself is kept for the dense prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub box_unit: Option<[f32; 4]>,
}

impl PromptEmbedding {
    pub fn has_box(&self) -> bool {
        self.box_unit.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    /// `[H, W]`.
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderBlock {
    self_attn: AttentionLayer,
    token_to_image: AttentionLayer,
    mlp: Mlp,
    image_to_token: AttentionLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmenter {
    cfg: SegmenterConfig,
    enc_in: Linear,
    enc_out: Linear,
    pixel_proj: Linear,
    image_pe: Tensor,
    sem_proj: Linear,
    fourier: ParamId,
    corner_embed: ParamId,
    mask_token: ParamId,
    blocks: Vec<DecoderBlock>,
    final_attn: AttentionLayer,
    hyper: Mlp,
    pixel_hyper: Linear,
    logit_bias: ParamId,
    box_gain: ParamId,
    /// Pixel-centre coordinates in unit space, `[1, W]` and `[1, H]`.
    centres_x: Tensor,
    centres_y: Tensor,
    up_y: Tensor,
    up_x_t: Tensor,
}

impl Segmenter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: SegmenterConfig,
        sem_dim: usize,
    ) -> Result<Self, SegmenterError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let patch_dim = cfg.patch * cfg.patch * 3;
        let enc_in = Linear::new(store, rng, "segmenter.encoder.in", patch_dim, d, true, false)?;
        let enc_out = Linear::new(store, rng, "segmenter.encoder.out", d, d, true, false)?;
        let pixel_proj = Linear::with_std(
            store,
            rng,
            "segmenter.encoder.pixel",
            3,
            cfg.pixel_channels,
            true,
            false,
            2.0,
        )?;
        if let Some(b) = pixel_proj.bias {
            store.set(b, Tensor::randn(rng, &[1, cfg.pixel_channels], 1.0))?;
        }
        let grid = cfg.grid();
        let mut pe = Vec::with_capacity(grid * grid * d);
        for gy in 0..grid {
            for gx in 0..grid {
                pe.extend(position_code_2d(gx as f32, gy as f32, d));
            }
        }
        let sem_proj = Linear::new(store, rng, "segmenter.prompt.sem", sem_dim, d, true, true)?;
        let fourier = store.add(
            "segmenter.prompt.fourier",
            Tensor::randn(rng, &[2, d / 2], cfg.fourier_scale),
            false,
        )?;
        let corner_embed = store.add("segmenter.prompt.corner", Tensor::randn(rng, &[2, d], 1.0), true)?;
        let mask_token = store.add("segmenter.decoder.mask_token", Tensor::randn(rng, &[1, d], 1.0), true)?;
        let mut blocks = Vec::with_capacity(cfg.decoder_blocks);
        for i in 0..cfg.decoder_blocks {
            let n = format!("segmenter.decoder.block{i}");
            blocks.push(DecoderBlock {
                self_attn: AttentionLayer::new(store, rng, &format!("{n}.self"), d, cfg.heads, true)?,
                token_to_image: AttentionLayer::new(store, rng, &format!("{n}.t2i"), d, cfg.heads, true)?,
                mlp: Mlp::new(store, rng, &format!("{n}.mlp"), d, 2 * d, d, true)?,
                image_to_token: AttentionLayer::new(store, rng, &format!("{n}.i2t"), d, cfg.heads, true)?,
            });
        }
        let final_attn = AttentionLayer::new(store, rng, "segmenter.decoder.final", d, cfg.heads, true)?;
        let hyper = Mlp::new(store, rng, "segmenter.decoder.hyper", d, d, d, true)?;
        let pixel_hyper = Linear::new(
            store,
            rng,
            "segmenter.decoder.pixel_hyper",
            d,
            cfg.pixel_channels,
            true,
            true,
        )?;
        let logit_bias = store.add("segmenter.decoder.bias", Tensor::scalar(cfg.logit_bias), true)?;
        let box_gain = store.add("segmenter.decoder.box_gain", Tensor::scalar(cfg.box_prior_gain), true)?;
        let centres = Tensor::row((0..cfg.canvas).map(|i| (i as f32 + 0.5) / cfg.canvas as f32).collect());
        Ok(Self {
            cfg,
            enc_in,
            enc_out,
            pixel_proj,
            image_pe: Tensor::new(vec![grid * grid, d], pe)?,
            sem_proj,
            fourier,
            corner_embed,
            mask_token,
            blocks,
            final_attn,
            hyper,
            pixel_hyper,
            logit_bias,
            box_gain,
            centres_x: centres.clone(),
            centres_y: centres,
            up_y: bilinear_matrix(cfg.canvas, grid),
            up_x_t: bilinear_matrix(cfg.canvas, grid).transpose(),
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut out = self.enc_in.ids();
        out.extend(self.enc_out.ids());
        out.extend(self.pixel_proj.ids());
        out.push(self.fourier);
        out
    }

    pub fn sem_proj_params(&self) -> Vec<ParamId> {
        self.sem_proj.ids()
    }

    pub fn encode_image_seg(&self, store: &ParamStore, img: &RgbImage) -> Result<SegmenterFeatures, SegmenterError> {
        let c = self.cfg.canvas;
        if img.width() != c || img.height() != c {
            return Err(SegmenterError::Size {
                expected: c,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
        let rgb: Vec<f32> = img.raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        let patches = patchify(&rgb, c, c, 3, self.cfg.patch)?;
        let mut h = self.enc_in.apply(store, &patches)?;
        for v in h.data_mut() {
            *v = crate::diffcore::gelu(*v);
        }
        let map = self.enc_out.apply(store, &h)?;
        let mut pixels = self.pixel_proj.apply(store, &Tensor::new(vec![c * c, 3], rgb)?)?;
        for v in pixels.data_mut() {
            *v = crate::diffcore::gelu(*v);
        }
        Ok(SegmenterFeatures {
            map,
            pixels,
            grid: self.cfg.grid(),
            width: c,
            height: c,
        })
    }

    /// Prompt tokens on the tape. `box_unit` is `[1, 4]` in unit coordinates.
    pub fn prompt_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sem: Var,
        box_unit: Option<Var>,
    ) -> Result<Var, SegmenterError> {
        let sem_tok = self.sem_proj.forward(g, store, sem)?;
        let Some(b) = box_unit else {
            return Ok(sem_tok);
        };
        let corners = g.reshape(b, &[2, 2])?;
        // map to [-1, 1] before the random Fourier projection
        let centred = g.scale(corners, 2.0)?;
        let ones = g.constant(Tensor::full(&[2, 2], -1.0))?;
        let centred = g.add(centred, ones)?;
        let freqs = g.param(store, self.fourier);
        let proj = g.matmul(centred, freqs)?;
        let proj = g.scale(proj, 2.0 * PI)?;
        let s = g.sin(proj)?;
        let c = g.cos(proj)?;
        let pe = g.concat_cols(&[s, c])?;
        let offsets = g.param(store, self.corner_embed);
        let box_toks = g.add(pe, offsets)?;
        Ok(g.concat_rows(&[sem_tok, box_toks])?)
    }

    /// Soft inside-box indicator `[H, W]`: a product of edge sigmoids along each axis.
    fn box_prior(&self, g: &mut Graph, box_unit: Var, w: usize, h: usize) -> Result<Var, SegmenterError> {
        let axis = |g: &mut Graph, lo: usize, hi: usize, centres: &Tensor, n: usize| -> Result<Var, DiffError> {
            let sharp = n as f32 / self.cfg.box_edge_px;
            let ones = g.constant(Tensor::full(&[1, n], 1.0))?;
            let u = g.constant(centres.clone())?;
            let lo = g.slice_cols(box_unit, lo, 1)?;
            let hi = g.slice_cols(box_unit, hi, 1)?;
            let lo = g.matmul(lo, ones)?;
            let hi = g.matmul(hi, ones)?;
            let above = g.sub(u, lo)?;
            let above = g.scale(above, sharp)?;
            let above = g.sigmoid(above)?;
            let below = g.sub(hi, u)?;
            let below = g.scale(below, sharp)?;
            let below = g.sigmoid(below)?;
            g.mul(above, below)
        };
        let ix = axis(g, 0, 2, &self.centres_x, w)?;
        let iy = axis(g, 1, 3, &self.centres_y, h)?;
        let iy = g.reshape(iy, &[h, 1])?;
        Ok(g.matmul(iy, ix)?)
    }

    /// Mask logits `[H, W]` on the tape. `box_unit` adds the dense box prior.
    pub fn decode_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &SegmenterFeatures,
        prompts: Var,
        box_unit: Option<Var>,
    ) -> Result<Var, SegmenterError> {
        let d = self.cfg.d_model;
        if g.value(prompts).cols() != d || feats.map.cols() != d || feats.grid != self.cfg.grid() {
            return Err(SegmenterError::Config(format!(
                "prompts {:?} / features {:?} do not match d_model {d}",
                g.value(prompts).shape(),
                feats.map.shape()
            )));
        }
        let mask_tok = g.param(store, self.mask_token);
        let token_pe = g.concat_rows(&[mask_tok, prompts])?;
        let mut queries = token_pe;
        let mut keys = g.constant(feats.map.clone())?;
        let key_pe = g.constant(self.image_pe.clone())?;
        for b in &self.blocks {
            let q = g.add(queries, token_pe)?;
            let a = b.self_attn.forward(g, store, q, q, queries)?;
            let x = g.add(queries, a)?;
            queries = g.layer_norm_rows(x)?;

            let q = g.add(queries, token_pe)?;
            let k = g.add(keys, key_pe)?;
            let a = b.token_to_image.forward(g, store, q, k, keys)?;
            let x = g.add(queries, a)?;
            queries = g.layer_norm_rows(x)?;

            let m = b.mlp.forward(g, store, queries)?;
            let x = g.add(queries, m)?;
            queries = g.layer_norm_rows(x)?;

            let q = g.add(queries, token_pe)?;
            let a = b.image_to_token.forward(g, store, k, q, queries)?;
            let x = g.add(keys, a)?;
            keys = g.layer_norm_rows(x)?;
        }
        let q = g.add(queries, token_pe)?;
        let k = g.add(keys, key_pe)?;
        let a = self.final_attn.forward(g, store, q, k, keys)?;
        let x = g.add(queries, a)?;
        queries = g.layer_norm_rows(x)?;

        let out_tok = g.slice_rows(queries, 0, 1)?;
        let grid = self.cfg.grid();
        let v = self.hyper.forward(g, store, out_tok)?;
        let low = g.matmul_bt(keys, v)?;
        let low = g.reshape(low, &[grid, grid])?;
        let uy = g.constant(self.up_y.clone())?;
        let uxt = g.constant(self.up_x_t.clone())?;
        let up = g.matmul(uy, low)?;
        let up = g.matmul(up, uxt)?;

        let (w, h) = (feats.width, feats.height);
        let pv = self.pixel_hyper.forward(g, store, out_tok)?;
        let pix = g.constant(feats.pixels.clone())?;
        let fine = g.matmul_bt(pix, pv)?;
        let fine = g.reshape(fine, &[h, w])?;
        let mut logits = g.add(up, fine)?;
        if let Some(b) = box_unit {
            let prior = self.box_prior(g, b, w, h)?;
            let prior = g.reshape(prior, &[h * w, 1])?;
            let gain = g.param(store, self.box_gain);
            let prior = g.matmul(prior, gain)?;
            let prior = g.reshape(prior, &[h, w])?;
            logits = g.add(logits, prior)?;
        }
        let logits = g.reshape(logits, &[h * w, 1])?;
        let bias = g.param(store, self.logit_bias);
        let logits = g.add_row(logits, bias)?;
        Ok(g.reshape(logits, &[h, w])?)
    }

    pub fn encode_prompts(
        &self,
        store: &ParamStore,
        sem: &SemanticSegPrompt,
        bbox: Option<&PixelBox>,
        image_size: (usize, usize),
    ) -> Result<PromptEmbedding, SegmenterError> {
        let (w, h) = image_size;
        let mut g = Graph::new();
        let s = g.constant(sem.embedding.clone())?;
        let box_unit = match bbox {
            Some(b) => {
                if !b.within(w, h) {
                    return Err(SegmenterError::BoxOutOfBounds(b.to_array(), w, h));
                }
                Some(b.normalized(w, h).to_array())
            }
            None => None,
        };
        let b = box_unit.map(|u| g.constant(Tensor::row(u.to_vec()))).transpose()?;
        let v = self.prompt_forward(&mut g, store, s, b)?;
        Ok(PromptEmbedding {
            tokens: g.value(v).clone(),
            box_unit,
        })
    }

    pub fn decode_mask(
        &self,
        store: &ParamStore,
        feats: &SegmenterFeatures,
        prompts: &PromptEmbedding,
    ) -> Result<MaskLogits, SegmenterError> {
        let mut g = Graph::new();
        let p = g.constant(prompts.tokens.clone())?;
        let b = prompts
            .box_unit
            .map(|u| g.constant(Tensor::row(u.to_vec())))
            .transpose()?;
        let v = self.decode_forward(&mut g, store, feats, p, b)?;
        Ok(MaskLogits {
            logits: g.value(v).clone(),
        })
    }
}

/// `sigmoid(logit) > threshold`; a probability exactly at the threshold is background.
pub fn binarize(logits: &MaskLogits, threshold: f32) -> Mask {
    let (h, w) = (logits.logits.rows(), logits.logits.cols());
    let data = logits.logits.data();
    Mask::from_fn(w, h, |x, y| sigmoid(data[y * w + x]) > threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, Segmenter) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let s = Segmenter::new(&mut store, &mut rng, SegmenterConfig::default(), 64).unwrap();
        (store, s)
    }

    fn image() -> RgbImage {
        let mut img = RgbImage::filled(64, 64, [24, 24, 28]);
        for y in 20..30 {
            for x in 5..15 {
                img.put(x, y, [50, 90, 230]);
            }
        }
        img
    }

    fn sem(seed: u64) -> SemanticSegPrompt {
        SemanticSegPrompt {
            embedding: Tensor::randn(&mut ChaCha8Rng::seed_from_u64(seed), &[1, 64], 1.0),
        }
    }

    #[test]
    fn encoder_contracts() {
        let (store, s) = setup();
        let a = s.encode_image_seg(&store, &image()).unwrap();
        assert_eq!(a, s.encode_image_seg(&store, &image()).unwrap());
        assert_eq!(a.map.shape(), &[256, 64]);
        let mut other = image();
        other.put(40, 40, [255, 255, 255]);
        let b = s.encode_image_seg(&store, &other).unwrap();
        assert_ne!(a.map, b.map);
        for id in s.frozen_params() {
            assert!(!store.get(id).trainable);
        }
        assert!(s.encode_image_seg(&store, &RgbImage::filled(48, 48, [0; 3])).is_err());
    }

    #[test]
    fn prompt_encoder_contracts() {
        let (store, s) = setup();
        let b = PixelBox::new(10.0, 12.0, 30.0, 40.0);
        let p = s.encode_prompts(&store, &sem(1), Some(&b), (64, 64)).unwrap();
        assert_eq!(p.tokens.shape(), &[3, 64]);
        assert_eq!(p, s.encode_prompts(&store, &sem(1), Some(&b), (64, 64)).unwrap());

        // Same two corner points with their roles exchanged.
        let corner_tokens = |bx: [f32; 4]| {
            let mut g = Graph::new();
            let sv = g.constant(sem(1).embedding).unwrap();
            let b = g.constant(Tensor::row(bx.to_vec())).unwrap();
            let v = s.prompt_forward(&mut g, &store, sv, Some(b)).unwrap();
            g.value(v).clone()
        };
        let fwd = corner_tokens([0.2, 0.3, 0.6, 0.7]);
        let rev = corner_tokens([0.6, 0.7, 0.2, 0.3]);
        assert_ne!(fwd.row_slice(1), rev.row_slice(2));
        assert_ne!(fwd.row_slice(2), rev.row_slice(1));

        let moved = PixelBox::new(13.0, 15.0, 33.0, 43.0);
        let m = s.encode_prompts(&store, &sem(1), Some(&moved), (64, 64)).unwrap();
        assert_eq!(p.tokens.row_slice(0), m.tokens.row_slice(0));
        assert_ne!(p.tokens.row_slice(1), m.tokens.row_slice(1));

        let outside = PixelBox::new(10.0, 12.0, 70.0, 40.0);
        assert!(matches!(
            s.encode_prompts(&store, &sem(1), Some(&outside), (64, 64)),
            Err(SegmenterError::BoxOutOfBounds(..))
        ));
        let only = s.encode_prompts(&store, &sem(1), None, (64, 64)).unwrap();
        assert!(!only.has_box());
    }

    #[test]
    fn decoder_shape_and_box_sensitivity() {
        let (store, s) = setup();
        let f = s.encode_image_seg(&store, &image()).unwrap();
        let a = s
            .encode_prompts(&store, &sem(2), Some(&PixelBox::new(5.0, 20.0, 15.0, 30.0)), (64, 64))
            .unwrap();
        let b = s
            .encode_prompts(&store, &sem(2), Some(&PixelBox::new(30.0, 30.0, 50.0, 60.0)), (64, 64))
            .unwrap();
        let la = s.decode_mask(&store, &f, &a).unwrap();
        let lb = s.decode_mask(&store, &f, &b).unwrap();
        assert_eq!(la.logits.shape(), &[64, 64]);
        assert!(la.logits.max_abs_diff(&lb.logits) > 0.0);
        let only = s.encode_prompts(&store, &sem(2), None, (64, 64)).unwrap();
        assert_eq!(s.decode_mask(&store, &f, &only).unwrap().logits.shape(), &[64, 64]);
    }

    #[test]
    fn binarize_rules() {
        let l = |v: f32| MaskLogits {
            logits: Tensor::full(&[4, 5], v),
        };
        assert_eq!(binarize(&l(10.0), 0.5).count(), 20);
        assert_eq!(binarize(&l(-10.0), 0.5).count(), 0);
        assert_eq!(binarize(&l(0.0), 0.5).count(), 0);
        let m = binarize(&l(10.0), 0.5);
        assert_eq!((m.width(), m.height()), (5, 4));
    }

    #[test]
    fn gradient_into_semantic_token() {
        let (mut store, s) = setup();
        let f = s.encode_image_seg(&store, &image()).unwrap();
        let gt = Mask::from_fn(64, 64, |x, y| (5..15).contains(&x) && (20..30).contains(&y));
        let probe = store.add("probe.sem", sem(3).embedding, true).unwrap();
        let bx = Tensor::row(vec![0.1, 0.3, 0.25, 0.45]);
        let report = grad_check(
            &mut store,
            &[probe],
            GradCheckConfig {
                step: 1e-2,
                tolerance: 1e-3,
                max_coords: None,
            },
            |g, st| {
                let sv = g.param(st, probe);
                let b = g.constant(bx.clone())?;
                let p = s.prompt_forward(g, st, sv, Some(b)).map_err(into_diff)?;
                let z = s.decode_forward(g, st, &f, p, Some(b)).map_err(into_diff)?;
                let z = g.reshape(z, &[1, 64 * 64])?;
                g.bce_with_logits(z, std::rc::Rc::new(gt.to_f32()))
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.params);
    }

    fn into_diff(e: SegmenterError) -> DiffError {
        match e {
            SegmenterError::Diff(d) => d,
            other => DiffError::Domain(other.to_string()),
        }
    }
}
