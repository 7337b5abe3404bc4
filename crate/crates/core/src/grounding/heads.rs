use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxes::NormalizedBox;
use crate::diffcore::{DiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{AttentionLayer, Linear, Mlp};
use crate::reasoner::{SpatialSegPrompt, VisualFeatures};

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("non-finite spatial prompt")]
    NonFinite,
    #[error("box head {expected:?} required, model has {found:?}")]
    WrongHead { expected: BoxHeadKind, found: BoxHeadKind },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxHeadKind {
    /// Two-layer perceptron on the spatial prompt.
    Mlp,
    /// Self- and cross-attention over the visual features before the perceptron.
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub hidden: usize,
    pub coord_bins: usize,
    pub head: BoxHeadKind,
    pub heads: usize,
    /// Box predicted before training; sets the output bias of the perceptron.
    pub init_box: [f32; 4],
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            coord_bins: crate::criteria::COORD_BINS,
            head: BoxHeadKind::Mlp,
            heads: 4,
            init_box: [0.1, 0.1, 0.9, 0.9],
        }
    }
}

/// `sigmoid(fc2(gelu(fc1(p))))`, a `[1, 4]` box in unit coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct MapHead {
    pub mlp: Mlp,
}

impl MapHead {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: Var) -> Result<Var, DiffError> {
        let z = self.mlp.forward(g, store, p)?;
        g.sigmoid(z)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.mlp.param_count(store)
    }
}

/// A learned box query attends with the prompt, then over the visual features.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBoxHead {
    pub query: ParamId,
    pub self_attn: AttentionLayer,
    pub cross_attn: AttentionLayer,
    pub out: MapHead,
}

impl AttnBoxHead {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: &VisualFeatures, p: Var) -> Result<Var, DiffError> {
        let q = g.param(store, self.query);
        let x = g.concat_rows(&[p, q])?;
        let a = self.self_attn.forward(g, store, x, x, x)?;
        let x = g.add(x, a)?;
        let x = g.layer_norm_rows(x)?;
        let fv = g.constant(feats.tokens.clone())?;
        let a = self.cross_attn.forward(g, store, x, fv, fv)?;
        let x = g.add(x, a)?;
        let x = g.layer_norm_rows(x)?;
        let qrow = g.slice_rows(x, 1, 1)?;
        self.out.forward(g, store, qrow)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.tensor(self.query).len()
            + self.self_attn.param_count(store)
            + self.cross_attn.param_count(store)
            + self.out.param_count(store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoxPredictor {
    Mlp(MapHead),
    Attention(AttnBoxHead),
}

/// Box predictor plus the auxiliary coordinate-bin classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingHeads {
    pub cfg: GroundingConfig,
    pub predictor: BoxPredictor,
    /// `d → 4·K` logits over coordinate bins.
    pub coord_head: Linear,
}

impl GroundingHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        cfg: GroundingConfig,
    ) -> Result<Self, DiffError> {
        if cfg.init_box.iter().any(|c| !(*c > 0.0 && *c < 1.0)) {
            return Err(DiffError::Domain(format!("init_box {:?} outside (0, 1)", cfg.init_box)));
        }
        let map = |store: &mut ParamStore, rng: &mut R, name: &str| -> Result<MapHead, DiffError> {
            let mlp = Mlp::new(store, rng, name, d, cfg.hidden, 4, true)?;
            if let Some(b) = mlp.fc2.bias {
                let logits = cfg.init_box.iter().map(|c| (c / (1.0 - c)).ln()).collect();
                store.set(b, Tensor::row(logits))?;
            }
            Ok(MapHead { mlp })
        };
        let predictor = match cfg.head {
            BoxHeadKind::Mlp => BoxPredictor::Mlp(map(store, rng, "grounding.map")?),
            BoxHeadKind::Attention => BoxPredictor::Attention(AttnBoxHead {
                query: store.add("grounding.attn.query", Tensor::randn(rng, &[1, d], 1.0), true)?,
                self_attn: AttentionLayer::new(store, rng, "grounding.attn.self", d, cfg.heads, true)?,
                cross_attn: AttentionLayer::new(store, rng, "grounding.attn.cross", d, cfg.heads, true)?,
                out: map(store, rng, "grounding.attn.map")?,
            }),
        };
        let coord_head = Linear::new(store, rng, "grounding.coord", d, 4 * cfg.coord_bins, true, true)?;
        Ok(Self {
            cfg,
            predictor,
            coord_head,
        })
    }

    pub fn kind(&self) -> BoxHeadKind {
        match self.predictor {
            BoxPredictor::Mlp(_) => BoxHeadKind::Mlp,
            BoxPredictor::Attention(_) => BoxHeadKind::Attention,
        }
    }

    /// Raw (unrepaired) box `[1, 4]` on the tape.
    pub fn box_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &VisualFeatures,
        p: Var,
    ) -> Result<Var, GroundingError> {
        if !g.value(p).is_finite() {
            return Err(GroundingError::NonFinite);
        }
        Ok(match &self.predictor {
            BoxPredictor::Mlp(h) => h.forward(g, store, p)?,
            BoxPredictor::Attention(h) => h.forward(g, store, feats, p)?,
        })
    }

    /// Coordinate-bin logits `[4, K]`.
    pub fn coord_forward(&self, g: &mut Graph, store: &ParamStore, p: Var) -> Result<Var, GroundingError> {
        let z = self.coord_head.forward(g, store, p)?;
        Ok(g.reshape(z, &[4, self.cfg.coord_bins])?)
    }

    pub fn box_param_count(&self, store: &ParamStore) -> usize {
        match &self.predictor {
            BoxPredictor::Mlp(h) => h.param_count(store),
            BoxPredictor::Attention(h) => h.param_count(store),
        }
    }
}

fn to_box(t: &Tensor) -> NormalizedBox {
    let d = t.data();
    NormalizedBox::new(d[0], d[1], d[2], d[3])
}

/// Perceptron box head applied to a spatial prompt. The result is raw:
/// corners may be out of order until rescaling repairs them.
pub fn map_to_box(
    store: &ParamStore,
    heads: &GroundingHeads,
    p: &SpatialSegPrompt,
) -> Result<NormalizedBox, GroundingError> {
    let BoxPredictor::Mlp(h) = &heads.predictor else {
        return Err(GroundingError::WrongHead {
            expected: BoxHeadKind::Mlp,
            found: heads.kind(),
        });
    };
    if !p.embedding.is_finite() {
        return Err(GroundingError::NonFinite);
    }
    let mut g = Graph::new();
    let pv = g.constant(p.embedding.clone())?;
    let b = h.forward(&mut g, store, pv)?;
    Ok(to_box(g.value(b)))
}

pub fn attn_box_predict(
    store: &ParamStore,
    heads: &GroundingHeads,
    feats: &VisualFeatures,
    p: &SpatialSegPrompt,
) -> Result<NormalizedBox, GroundingError> {
    let BoxPredictor::Attention(h) = &heads.predictor else {
        return Err(GroundingError::WrongHead {
            expected: BoxHeadKind::Attention,
            found: heads.kind(),
        });
    };
    if !p.embedding.is_finite() {
        return Err(GroundingError::NonFinite);
    }
    let mut g = Graph::new();
    let pv = g.constant(p.embedding.clone())?;
    let b = h.forward(&mut g, store, feats, pv)?;
    Ok(to_box(g.value(b)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::l1_box_loss;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use crate::prompt::PromptVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 64;

    fn heads(kind: BoxHeadKind) -> (ParamStore, GroundingHeads) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = GroundingConfig {
            head: kind,
            ..Default::default()
        };
        let h = GroundingHeads::new(&mut store, &mut rng, D, cfg).unwrap();
        (store, h)
    }

    fn prompt(rng: &mut ChaCha8Rng, std: f32) -> SpatialSegPrompt {
        SpatialSegPrompt {
            embedding: Tensor::randn(rng, &[1, D], std),
            variant: PromptVariant::Ppcr,
        }
    }

    fn feats(rng: &mut ChaCha8Rng) -> VisualFeatures {
        VisualFeatures {
            tokens: Tensor::randn(rng, &[64, D], 1.0),
            grid: 8,
            image_w: 64,
            image_h: 64,
        }
    }

    #[test]
    fn zero_output_layer_gives_centre() {
        let (mut store, h) = heads(BoxHeadKind::Mlp);
        let BoxPredictor::Mlp(m) = &h.predictor else {
            unreachable!()
        };
        for id in m.mlp.fc2.ids() {
            let shape = store.tensor(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = map_to_box(&store, &h, &prompt(&mut rng, 1.0)).unwrap();
        assert_eq!(b.to_array(), [0.5; 4]);
    }

    #[test]
    fn outputs_stay_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, h) = heads(BoxHeadKind::Mlp);
        for _ in 0..1000 {
            let b = map_to_box(&store, &h, &prompt(&mut rng, 3.0)).unwrap();
            assert!(b.to_array().iter().all(|&c| c > 0.0 && c < 1.0));
        }
        let (store, h) = heads(BoxHeadKind::Attention);
        let f = feats(&mut rng);
        for _ in 0..1000 {
            let b = attn_box_predict(&store, &h, &f, &prompt(&mut rng, 3.0)).unwrap();
            assert!(b.to_array().iter().all(|&c| c > 0.0 && c < 1.0));
        }
    }

    #[test]
    fn attention_head_is_larger_and_deterministic() {
        let (ms, mh) = heads(BoxHeadKind::Mlp);
        let (s, h) = heads(BoxHeadKind::Attention);
        assert!(h.box_param_count(&s) > mh.box_param_count(&ms));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = feats(&mut rng);
        let p = prompt(&mut rng, 1.0);
        assert_eq!(
            attn_box_predict(&s, &h, &f, &p).unwrap(),
            attn_box_predict(&s, &h, &f, &p).unwrap()
        );
        assert!(matches!(map_to_box(&s, &h, &p), Err(GroundingError::WrongHead { .. })));
    }

    #[test]
    fn non_finite_prompt_rejected() {
        let (store, h) = heads(BoxHeadKind::Mlp);
        let mut p = prompt(&mut ChaCha8Rng::seed_from_u64(3), 1.0);
        p.embedding.data_mut()[5] = f32::NAN;
        assert!(matches!(map_to_box(&store, &h, &p), Err(GroundingError::NonFinite)));
    }

    #[test]
    fn l1_gradient_through_map_head() {
        let (mut store, h) = heads(BoxHeadKind::Mlp);
        let BoxPredictor::Mlp(m) = h.predictor.clone() else {
            unreachable!()
        };
        let ids: Vec<ParamId> = m.mlp.fc1.ids().into_iter().chain(m.mlp.fc2.ids()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = NormalizedBox::new(0.05, 0.1, 0.95, 0.9);
        for _ in 0..10 {
            let p = Tensor::randn(&mut rng, &[1, D], 1.0);
            let report = grad_check(
                &mut store,
                &ids,
                GradCheckConfig {
                    step: 1e-2,
                    ..Default::default()
                },
                |g, s| {
                    let pv = g.constant(p.clone())?;
                    let b = m.forward(g, s, pv)?;
                    l1_box_loss(g, b, gt).map_err(|e| DiffError::Domain(e.to_string()))
                },
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.params);
        }
    }
}
