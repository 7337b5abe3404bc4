use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::{DiffError, Tensor};

/// `y = x·Wᵀ + b` for row-major batches `x[n, d_in]`, `W[d_out, d_in]`.
pub fn linear_forward(
    g: &mut Graph,
    store: &ParamStore,
    w: ParamId,
    b: Option<ParamId>,
    x: Var,
) -> Result<Var, DiffError> {
    let wt = store.tensor(w);
    if g.value(x).cols() != wt.cols() {
        return Err(DiffError::Shape(format!(
            "linear {}: input width {} vs weight {:?}",
            store.get(w).name,
            g.value(x).cols(),
            wt.shape()
        )));
    }
    let wv = g.param(store, w);
    let y = g.matmul_bt(x, wv)?;
    match b {
        Some(b) => {
            let bv = g.param(store, b);
            g.add_row(y, bv)
        }
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    /// Std of the Gaussian initialization of the down-projection.
    pub init_std: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            init_std: 0.02,
        }
    }
}

/// Low-rank pair attached to a frozen weight `W[d_out, d_in]`:
/// `down` is `A[r, d_in]`, `up` is `B[d_out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f32,
    pub attached_to: String,
}

impl LoraAdapter {
    /// Registers `A ~ N(0, init_std²)` and `B = 0` as trainable parameters.
    pub fn attach<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        base: ParamId,
        tag: &str,
        cfg: LoraConfig,
    ) -> Result<Self, DiffError> {
        let (d_out, d_in) = {
            let t = store.tensor(base);
            (t.rows(), t.cols())
        };
        if cfg.rank == 0 || cfg.rank > d_in.min(d_out) {
            return Err(DiffError::Shape(format!(
                "lora rank {} invalid for {d_out}x{d_in}",
                cfg.rank
            )));
        }
        let base_name = store.get(base).name.clone();
        let down = store.add(
            format!("{base_name}.lora_{tag}.down"),
            Tensor::randn(rng, &[cfg.rank, d_in], cfg.init_std),
            true,
        )?;
        let up = store.add(
            format!("{base_name}.lora_{tag}.up"),
            Tensor::zeros(&[d_out, cfg.rank]),
            true,
        )?;
        Ok(Self {
            down,
            up,
            rank: cfg.rank,
            alpha: cfg.alpha,
            attached_to: base_name,
        })
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    fn check(&self, store: &ParamStore, w: ParamId) -> Result<(), DiffError> {
        let (wt, a, b) = (store.tensor(w), store.tensor(self.down), store.tensor(self.up));
        let ok = a.rows() == self.rank && b.cols() == self.rank && a.cols() == wt.cols() && b.rows() == wt.rows();
        if ok {
            Ok(())
        } else {
            Err(DiffError::Shape(format!(
                "adapter A{:?} B{:?} does not fit W{:?}",
                a.shape(),
                b.shape(),
                wt.shape()
            )))
        }
    }
}

/// `y = x·Wᵀ + (alpha/r)·(x·Aᵀ)·Bᵀ`. With `W` frozen, gradients reach only `A` and `B`.
pub fn lora_forward(
    g: &mut Graph,
    store: &ParamStore,
    w: ParamId,
    adapter: &LoraAdapter,
    x: Var,
) -> Result<Var, DiffError> {
    adapter.check(store, w)?;
    let base = linear_forward(g, store, w, None, x)?;
    let a = g.param(store, adapter.down);
    let b = g.param(store, adapter.up);
    let h = g.matmul_bt(x, a)?;
    let d = g.matmul_bt(h, b)?;
    let d = g.scale(d, adapter.scale())?;
    g.add(base, d)
}

/// `W' = W + (alpha/r)·B·A`.
pub fn merge_lora(store: &ParamStore, w: ParamId, adapter: &LoraAdapter) -> Result<Tensor, DiffError> {
    adapter.check(store, w)?;
    let delta = store.tensor(adapter.up).matmul(store.tensor(adapter.down))?;
    let s = adapter.scale();
    let mut merged = store.tensor(w).clone();
    for (m, d) in merged.data_mut().iter_mut().zip(delta.data()) {
        *m += s * d;
    }
    Ok(merged)
}
