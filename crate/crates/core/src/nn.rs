//! Layers shared by the reasoner, grounding heads and segmenter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    linear_forward, lora_forward, DiffError, Graph, LoraAdapter, LoraConfig, ParamId, ParamStore, Tensor, Var,
};

/// `y = x·Wᵀ + b`, with `W` drawn from `N(0, 1/d_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
    ) -> Result<Self, DiffError> {
        let std = 1.0 / (d_in as f32).sqrt();
        Self::with_std(store, rng, name, d_in, d_out, bias, trainable, std)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        std: f32,
    ) -> Result<Self, DiffError> {
        let weight = store.add(format!("{name}.w"), Tensor::randn(rng, &[d_out, d_in], std), trainable)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]), trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        linear_forward(g, store, self.weight, self.bias, x)
    }

    /// Forward pass outside any graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, DiffError> {
        let mut y = x.matmul(&store.tensor(self.weight).transpose())?;
        if let Some(b) = self.bias {
            let b = store.tensor(b).data().to_vec();
            let cols = y.cols();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += b[i % cols];
            }
        }
        Ok(y)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).len() + self.bias.map_or(0, |b| store.tensor(b).len())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Which low-rank branch is active in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Frozen weights only.
    Base,
    A,
    B,
}

/// Frozen projection carrying two adapters, at most one active per pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLora {
    pub base: ParamId,
    pub branch_a: LoraAdapter,
    pub branch_b: LoraAdapter,
}

impl DualLora {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        lora: LoraConfig,
    ) -> Result<Self, DiffError> {
        let base = Linear::new(store, rng, name, d_in, d_out, false, false)?.weight;
        let branch_a = LoraAdapter::attach(store, rng, base, "a", lora)?;
        let branch_b = LoraAdapter::attach(store, rng, base, "b", lora)?;
        Ok(Self {
            base,
            branch_a,
            branch_b,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, branch: Branch) -> Result<Var, DiffError> {
        match branch {
            Branch::Base => linear_forward(g, store, self.base, None, x),
            Branch::A => lora_forward(g, store, self.base, &self.branch_a, x),
            Branch::B => lora_forward(g, store, self.base, &self.branch_b, x),
        }
    }

    pub fn adapter(&self, branch: Branch) -> Option<&LoraAdapter> {
        match branch {
            Branch::Base => None,
            Branch::A => Some(&self.branch_a),
            Branch::B => Some(&self.branch_b),
        }
    }
}

/// Scaled dot-product attention with `heads` equal column groups.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, DiffError> {
    let d = g.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) || g.value(k).cols() != d || g.value(v).cols() != d {
        return Err(DiffError::Shape(format!(
            "attention: q{:?} k{:?} v{:?} heads {heads}",
            g.value(q).shape(),
            g.value(k).shape(),
            g.value(v).shape()
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.matmul_bt(qh, kh)?;
        let s = g.scale(s, scale)?;
        let p = g.softmax_rows(s)?;
        outs.push(g.matmul(p, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Attention block with its own projections: `o(attn(q(xq), k(xk), v(xv)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        trainable: bool,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true, trainable)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, true, trainable)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true, trainable)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true, trainable)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xk: Var, xv: Var) -> Result<Var, DiffError> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xk)?;
        let v = self.v.forward(g, store, xv)?;
        let a = attention(g, q, k, v, self.heads)?;
        self.o.forward(g, store, a)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .map(|l| l.param_count(store))
            .sum()
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        trainable: bool,
    ) -> Result<Self, DiffError> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden, true, trainable)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out, true, trainable)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, store, h)
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.fc1.param_count(store) + self.fc2.param_count(store)
    }
}

/// Sinusoidal code of a grid position: the first half of the width encodes
/// the column, the second half the row.
pub fn position_code_2d(x: f32, y: f32, d: usize) -> Vec<f32> {
    let half = d / 2;
    let mut out = position_code_1d(x, half);
    out.extend(position_code_1d(y, d - half));
    out
}

/// Transformer-style `sin/cos(pos / 10000^(2i/d))` code.
pub fn position_code_1d(pos: f32, d: usize) -> Vec<f32> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let freq = 1.0 / 10000f32.powf(2.0 * i as f32 / d as f32);
            if j % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// `U[out, inp]` with `y = U·x` the 1-D bilinear resize using half-pixel centers.
pub fn bilinear_matrix(out: usize, inp: usize) -> Tensor {
    let mut u = Tensor::zeros(&[out, inp]);
    let ratio = inp as f32 / out as f32;
    for i in 0..out {
        let src = ((i as f32 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f32);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f32;
        u.data_mut()[i * inp + lo] += 1.0 - frac;
        u.data_mut()[i * inp + hi] += frac;
    }
    u
}

/// Row-major patches of an `h×w×c` image flattened to `[(h/p)·(w/p), p·p·c]`.
pub fn patchify(pixels: &[f32], w: usize, h: usize, c: usize, p: usize) -> Result<Tensor, DiffError> {
    if !w.is_multiple_of(p) || !h.is_multiple_of(p) || pixels.len() != w * h * c {
        return Err(DiffError::Shape(format!("{w}x{h}x{c} image, patch {p}")));
    }
    let (gw, gh) = (w / p, h / p);
    let mut data = Vec::with_capacity(w * h * c);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let row = (py * p + dy) * w + px * p;
                data.extend_from_slice(&pixels[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(vec![gw * gh, p * p * c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f32> {
        let (n, m, d) = (q.rows(), k.rows(), q.cols());
        let dh = d / heads;
        let mut out = vec![0.0f32; n * d];
        for h in 0..heads {
            for i in 0..n {
                let mut s: Vec<f64> = (0..m)
                    .map(|j| {
                        (0..dh)
                            .map(|c| f64::from(q.at(i, h * dh + c)) * f64::from(k.at(j, h * dh + c)))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = s
                    .iter_mut()
                    .map(|x| {
                        *x = (*x - mx).exp();
                        *x
                    })
                    .sum();
                for c in 0..dh {
                    out[i * d + h * dh + c] =
                        (0..m).map(|j| s[j] / z * f64::from(v.at(j, h * dh + c))).sum::<f64>() as f32;
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let k = Tensor::randn(&mut rng, &[5, 8], 1.0);
        let v = Tensor::randn(&mut rng, &[5, 8], 1.0);
        for heads in [1, 2, 4] {
            let mut g = Graph::new();
            let (qv, kv, vv) = (
                g.constant(q.clone()).unwrap(),
                g.constant(k.clone()).unwrap(),
                g.constant(v.clone()).unwrap(),
            );
            let a = attention(&mut g, qv, kv, vv, heads).unwrap();
            let expected = naive_attention(&q, &k, &v, heads);
            for (x, y) in g.value(a).data().iter().zip(&expected) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        let mut g = Graph::new();
        let qv = g.constant(q).unwrap();
        assert!(attention(&mut g, qv, qv, qv, 3).is_err());
    }

    #[test]
    fn attention_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, &mut rng, "att", 8, 2, true).unwrap();
        let x = Tensor::randn(&mut rng, &[2, 8], 1.0);
        let ctx = Tensor::randn(&mut rng, &[4, 8], 1.0);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            GradCheckConfig {
                step: 1e-2,
                ..Default::default()
            },
            |g, s| {
                let xv = g.constant(x.clone())?;
                let cv = g.constant(ctx.clone())?;
                let y = layer.forward(g, s, xv, cv, cv)?;
                let y = g.sin(y)?;
                g.sum(y)
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.params);
    }

    #[test]
    fn bilinear_rows_sum_to_one_and_preserve_constants() {
        let u = bilinear_matrix(64, 16);
        for r in 0..64 {
            let s: f32 = u.row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // interior output 10 samples source (10.5)/4 - 0.5 = 2.125
        assert!((u.at(10, 2) - 0.875).abs() < 1e-6);
        assert!((u.at(10, 3) - 0.125).abs() < 1e-6);
        assert_eq!(u.at(0, 0), 1.0);
        assert_eq!(u.at(63, 15), 1.0);
    }

    #[test]
    fn patchify_layout() {
        let pixels: Vec<f32> = (0..4 * 4).map(|i| i as f32).collect();
        let p = patchify(&pixels, 4, 4, 1, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row_slice(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row_slice(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(patchify(&pixels, 4, 4, 1, 3).is_err());
    }

    #[test]
    fn dual_lora_branches_start_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = DualLora::new(&mut store, &mut rng, "p", 8, 8, LoraConfig::default()).unwrap();
        let x = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let mut outs = Vec::new();
        for b in [Branch::Base, Branch::A, Branch::B] {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let y = lin.forward(&mut g, &store, xv, b).unwrap();
            outs.push(g.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[0], outs[2]);
        assert!(!store.get(lin.base).trainable);
    }

    #[test]
    fn position_codes_differ() {
        assert_ne!(position_code_2d(1.0, 2.0, 16), position_code_2d(2.0, 1.0, 16));
        assert_eq!(position_code_1d(0.0, 4), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
