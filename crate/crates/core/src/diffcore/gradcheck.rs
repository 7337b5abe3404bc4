//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::{DiffError, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference half step.
    pub step: f32,
    pub tolerance: f64,
    /// Check at most this many evenly strided coordinates per parameter.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    /// Largest gradient magnitude seen by either route.
    pub scale: f64,
    /// `max_abs_err / scale`; equals `max_abs_err` when both routes are ~0.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }
}

const ZERO_SCALE: f64 = 1e-7;

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for each listed parameter. The listed parameters are treated
/// as trainable for the duration of the check; the store is restored after.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    let saved_flags: Vec<bool> = params.iter().map(|&p| store.get(p).trainable).collect();
    for &p in params {
        store.set_trainable(p, true);
    }
    let result = run_check(store, params, cfg, &mut f);
    for (&p, &flag) in params.iter().zip(&saved_flags) {
        store.set_trainable(p, flag);
    }
    result
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Result<f64, DiffError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(DiffError::Shape(format!(
            "grad_check needs a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(f64::from(v.data()[0]))
}

fn run_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: GradCheckConfig,
    f: &mut F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut report = Vec::with_capacity(params.len());
    for &id in params {
        let n = store.tensor(id).len();
        let analytic = grads
            .params()
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape()));
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let mut max_abs_err = 0.0f64;
        let mut scale = 0.0f64;
        for &c in &coords {
            let orig = store.tensor(id).data()[c];
            let (up, down) = (orig + cfg.step, orig - cfg.step);
            store.tensor_mut(id).data_mut()[c] = up;
            let plus = eval(store, f);
            store.tensor_mut(id).data_mut()[c] = down;
            let minus = eval(store, f);
            store.tensor_mut(id).data_mut()[c] = orig;
            // Divide by the perturbation f32 actually applied.
            let numeric = (plus? - minus?) / (f64::from(up) - f64::from(down));
            let a = f64::from(analytic.data()[c]);
            max_abs_err = max_abs_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let max_rel_err = if scale < ZERO_SCALE {
            max_abs_err
        } else {
            max_abs_err / scale
        };
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords_checked: coords.len(),
            max_abs_err,
            scale,
            max_rel_err,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    #[test]
    fn sigmoid_bce_at_zero_logit() {
        let mut store = ParamStore::new();
        let z = store.add("z", Tensor::scalar(0.0), true).unwrap();
        let target = Rc::new(vec![1.0f32]);
        let mut g = Graph::new();
        let zv = g.param(&store, z);
        let l = g.bce_with_logits(zv, target.clone()).unwrap();
        let grads = g.backward(l).unwrap();
        assert!((grads.params().get(z).unwrap().data()[0] + 0.5).abs() < 1e-7);

        let report = grad_check(
            &mut store,
            &[z],
            GradCheckConfig {
                tolerance: 1e-4,
                ..GradCheckConfig::default()
            },
            |g, s| {
                let zv = g.param(s, z);
                g.bce_with_logits(zv, target.clone())
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.0, -2.0, 0.5]), false).unwrap();
        let report = grad_check(&mut store, &[w], GradCheckConfig::default(), |g, _| {
            g.constant(Tensor::scalar(4.0))
        })
        .unwrap();
        assert_eq!(report.params[0].max_abs_err, 0.0);
        assert_eq!(report.params[0].scale, 0.0);
        assert!(!store.get(w).trainable);
    }
}
