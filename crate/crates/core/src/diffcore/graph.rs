//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Graph`] records every operation as a node holding its value. Calling
//! [`Graph::backward`] walks the tape in reverse and produces gradients for
//! every node that requires one, plus per-parameter gradients for trainable
//! parameters that entered the graph through [`Graph::param`].

use std::collections::HashMap;
use std::rc::Rc;

use super::param::{ParamGrads, ParamId, ParamStore};
use super::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into};
use super::{DiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f32>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BceLogits {
        logits: Var,
        target: Rc<Vec<f32>>,
    },
    Dice {
        logits: Var,
        target: Rc<Vec<f32>>,
        eps: f32,
    },
    L1 {
        pred: Var,
        target: Vec<f32>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if one flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> DiffError {
    DiffError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, false)
    }

    /// A free input; gradients are reported through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, true)
    }

    /// Bring a parameter into the graph. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` a `[out, in]` weight this is a linear map of rows of `a`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_bt", ta.shape(), tb.shape()));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; n * m];
        matmul_bt_into(ta.data(), tb.data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMulBt(a, b), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n×m] + row[1×m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta.shape(), tr.shape()));
        }
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (o, &r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, row]);
        self.push(t, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f32::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, f32::cos, Op::Cos(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let m = ta.cols();
        let mut data = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(m) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / m as f64;
            let r = (1.0 / (var + f64::from(LN_EPS)).sqrt()) as f32;
            let mean = mean as f32;
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push(t, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat_rows of nothing".into()))?;
        let m = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != m {
                return Err(shape_err("concat_rows", &[rows, m], t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(vec![rows, m], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or_else(|| DiffError::Shape("concat_cols of nothing".into()))?;
        let n = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != n {
                return Err(shape_err("concat_cols", &[n, total], t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..n {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row_slice(r));
            }
            off += c;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(vec![n, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if start + len > ta.rows() || len == 0 {
            return Err(DiffError::Shape(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                ta.shape()
            )));
        }
        let m = ta.cols();
        let data = ta.data()[start * m..(start + len) * m].to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_parts(vec![len, m], data),
            Op::SliceRows { x: a, start },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let m = ta.cols();
        if start + len > m || len == 0 {
            return Err(DiffError::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                ta.shape()
            )));
        }
        let n = ta.rows();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&ta.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::from_parts(vec![n, len], data),
            Op::SliceCols { x: a, start },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().map(|&v| f64::from(v)).sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        let s = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Mean(a), rg)
    }

    /// Mean sigmoid cross-entropy in the stable `max(z,0) - z·y + ln(1+e^{-|z|})` form.
    pub fn bce_with_logits(&mut self, logits: Var, target: Rc<Vec<f32>>) -> Result<Var, DiffError> {
        let tz = self.value(logits);
        if tz.len() != target.len() {
            return Err(shape_err("bce", tz.shape(), &[target.len()]));
        }
        let n = tz.len() as f64;
        let s: f64 = tz
            .data()
            .iter()
            .zip(target.iter())
            .map(|(&z, &y)| {
                let z = f64::from(z);
                z.max(0.0) - z * f64::from(y) + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar((s / n) as f32), Op::BceLogits { logits, target }, rg)
    }

    /// `1 - (2Σpg + eps) / (Σp + Σg + eps)` with `p = sigmoid(logits)`.
    pub fn dice_loss(&mut self, logits: Var, target: Rc<Vec<f32>>, eps: f32) -> Result<Var, DiffError> {
        let tz = self.value(logits);
        if tz.len() != target.len() {
            return Err(shape_err("dice", tz.shape(), &[target.len()]));
        }
        let (inter, denom) = dice_sums(tz.data(), &target);
        let e = f64::from(eps);
        let loss = 1.0 - (2.0 * inter + e) / (denom + e);
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(loss as f32), Op::Dice { logits, target, eps }, rg)
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var, DiffError> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return Err(shape_err("l1", tp.shape(), &[target.len()]));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| f64::from((p - t).abs()))
            .sum();
        let rg = self.rg(&[pred]);
        self.push(
            Tensor::scalar((s / target.len() as f64) as f32),
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        )
    }

    /// Mean over rows of softmax cross-entropy against class indices.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let tz = self.value(logits);
        if tz.rows() != targets.len() {
            return Err(shape_err("cross_entropy", tz.shape(), &[targets.len()]));
        }
        let k = tz.cols();
        let mut s = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(DiffError::Domain(format!("target class {t} out of range 0..{k}")));
            }
            let row = tz.row_slice(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let lse = f64::from(max) + row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
            s += lse - f64::from(row[t]);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar((s / targets.len() as f64) as f32),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = ParamGrads::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { nodes: grads, params });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads, &mut params)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(
        &self,
        node: &Node,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut ParamGrads,
    ) -> Result<(), DiffError> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, gy),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_bt_into(gy.data(), tb.data(), &mut ga, n, m, k);
                    acc(grads, *a, ta.shape(), ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * m];
                    matmul_at_into(ta.data(), gy.data(), &mut gb, n, k, m);
                    acc(grads, *b, tb.shape(), gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_into(gy.data(), tb.data(), &mut ga, n, m, k);
                    acc(grads, *a, ta.shape(), ga);
                }
                if needs(*b) {
                    let mut gb = vec![0.0; m * k];
                    matmul_at_into(gy.data(), ta.data(), &mut gb, n, m, k);
                    acc(grads, *b, tb.shape(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(grads, v, gy.shape(), gy.data().to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(grads, *a, gy.shape(), gy.data().to_vec());
                }
                if needs(*b) {
                    acc(grads, *b, gy.shape(), gy.data().iter().map(|g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    let g = gy.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    acc(grads, *a, ta.shape(), g);
                }
                if needs(*b) {
                    let g = gy.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    acc(grads, *b, tb.shape(), g);
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    acc(grads, *a, gy.shape(), gy.data().to_vec());
                }
                if needs(*row) {
                    let m = gy.cols();
                    let mut g = vec![0.0; m];
                    for chunk in gy.data().chunks(m) {
                        for (o, v) in g.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    acc(grads, *row, val(*row).shape(), g);
                }
            }
            Op::Scale(a, c) => {
                acc(grads, *a, gy.shape(), gy.data().iter().map(|g| g * c).collect());
            }
            Op::Gelu(a) => {
                let g = gy
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                acc(grads, *a, gy.shape(), g);
            }
            Op::Sigmoid(a) => {
                let g = gy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                acc(grads, *a, gy.shape(), g);
            }
            Op::Sin(a) => {
                let g = gy.data().iter().zip(val(*a).data()).map(|(g, x)| g * x.cos()).collect();
                acc(grads, *a, gy.shape(), g);
            }
            Op::Cos(a) => {
                let g = gy
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, x)| -g * x.sin())
                    .collect();
                acc(grads, *a, gy.shape(), g);
            }
            Op::SoftmaxRows(a) => {
                let m = gy.cols();
                let mut g = vec![0.0; gy.len()];
                for ((o, y), dy) in g
                    .chunks_mut(m)
                    .zip(node.value.data().chunks(m))
                    .zip(gy.data().chunks(m))
                {
                    let s = dot(y, dy);
                    for ((o, &yv), &d) in o.iter_mut().zip(y).zip(dy) {
                        *o = yv * (d - s);
                    }
                }
                acc(grads, *a, gy.shape(), g);
            }
            Op::LayerNormRows { x, inv_std } => {
                let m = gy.cols();
                let mut g = vec![0.0; gy.len()];
                for (((o, y), dy), &r) in g
                    .chunks_mut(m)
                    .zip(node.value.data().chunks(m))
                    .zip(gy.data().chunks(m))
                    .zip(inv_std)
                {
                    let mean_dy = dy.iter().map(|&v| f64::from(v)).sum::<f64>() / m as f64;
                    let mean_dyy = y
                        .iter()
                        .zip(dy)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
                        / m as f64;
                    let (mean_dy, mean_dyy) = (mean_dy as f32, mean_dyy as f32);
                    for ((o, &yv), &d) in o.iter_mut().zip(y).zip(dy) {
                        *o = r * (d - mean_dy - yv * mean_dyy);
                    }
                }
                acc(grads, *x, gy.shape(), g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        acc(grads, p, val(p).shape(), gy.data()[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gy.cols();
                let rows = gy.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if needs(p) {
                        let mut g = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            g.extend_from_slice(&gy.data()[r * total + off..r * total + off + c]);
                        }
                        acc(grads, p, val(p).shape(), g);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let m = tx.cols();
                let mut g = vec![0.0; tx.len()];
                g[start * m..start * m + gy.len()].copy_from_slice(gy.data());
                acc(grads, *x, tx.shape(), g);
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (m, c) = (tx.cols(), gy.cols());
                let mut g = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    g[r * m + start..r * m + start + c].copy_from_slice(gy.row_slice(r));
                }
                acc(grads, *x, tx.shape(), g);
            }
            Op::Reshape(a) => {
                acc(grads, *a, val(*a).shape(), gy.data().to_vec());
            }
            Op::Sum(a) => {
                let t = val(*a);
                acc(grads, *a, t.shape(), vec![gy.data()[0]; t.len()]);
            }
            Op::Mean(a) => {
                let t = val(*a);
                let g = gy.data()[0] / t.len() as f32;
                acc(grads, *a, t.shape(), vec![g; t.len()]);
            }
            Op::BceLogits { logits, target } => {
                let tz = val(*logits);
                let scale = gy.data()[0] / tz.len() as f32;
                let g = tz
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                acc(grads, *logits, tz.shape(), g);
            }
            Op::Dice { logits, target, eps } => {
                let tz = val(*logits);
                let (inter, denom) = dice_sums(tz.data(), target);
                let e = f64::from(*eps);
                let (num, den) = (2.0 * inter + e, denom + e);
                let up = f64::from(gy.data()[0]);
                let g = tz
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&z, &t)| {
                        let p = f64::from(sigmoid(z));
                        let dl_dp = -(2.0 * f64::from(t) * den - num) / (den * den);
                        (up * dl_dp * p * (1.0 - p)) as f32
                    })
                    .collect();
                acc(grads, *logits, tz.shape(), g);
            }
            Op::L1 { pred, target } => {
                let tp = val(*pred);
                let scale = gy.data()[0] / target.len() as f32;
                let g = tp
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d = p - t;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *pred, tp.shape(), g);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let tz = val(*logits);
                let k = tz.cols();
                let scale = gy.data()[0] / targets.len() as f32;
                let mut g = tz.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut g[r * k..(r + 1) * k];
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                acc(grads, *logits, tz.shape(), g);
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f32>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (o, d) in g.data_mut().iter_mut().zip(&data) {
                *o += d;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), data)),
    }
}

fn dice_sums(logits: &[f32], target: &[f32]) -> (f64, f64) {
    let mut inter = 0.0f64;
    let mut denom = 0.0f64;
    for (&z, &t) in logits.iter().zip(target) {
        let p = f64::from(sigmoid(z));
        inter += p * f64::from(t);
        denom += p + f64::from(t);
    }
    (inter, denom)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut s = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += f64::from(*v);
    }
    let inv = (1.0 / s) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
