//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! Every [`DiffTensor`] produced by an operation keeps a reference to its
//! parents only when at least one parent requires a gradient, so untracked
//! computation (teacher rollouts, evaluation) frees intermediates as soon as
//! they go out of scope. The graph is rebuilt on each forward pass.
//!
//! ```
//! use rats_core::autodiff::DiffTensor;
//! use rats_core::tensor::Tensor;
//!
//! let x = DiffTensor::param(Tensor::scalar(3.0));
//! let loss = x.mul(&x).unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().item(), Some(6.0));
//! ```

use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Result, Tensor, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct DiffTensor {
    node: Rc<Node>,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    history: Option<History>,
}

struct History {
    op: Op,
    parents: Vec<DiffTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    MatMul,
    Sum,
    Mean,
    Tanh,
    Square,
    Sqrt,
    Exp,
    Log,
    Dot,
    FrobeniusSq,
    ConcatCols,
    SumRows,
    AddRowVector,
    LogSumExpRows,
    Reshape,
}

enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    MatMul,
    Sum,
    Mean,
    Tanh,
    Square,
    Sqrt,
    Exp,
    Log,
    Dot,
    FrobeniusSq,
    ConcatCols(Vec<usize>),
    SumRows,
    AddRowVector,
    LogSumExpRows,
    Reshape,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Neg => OpKind::Neg,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::MatMul => OpKind::MatMul,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Tanh => OpKind::Tanh,
            Op::Square => OpKind::Square,
            Op::Sqrt => OpKind::Sqrt,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Dot => OpKind::Dot,
            Op::FrobeniusSq => OpKind::FrobeniusSq,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SumRows => OpKind::SumRows,
            Op::AddRowVector => OpKind::AddRowVector,
            Op::LogSumExpRows => OpKind::LogSumExpRows,
            Op::Reshape => OpKind::Reshape,
        }
    }
}

/// Gradients of a scalar with respect to the trainable leaves it depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_leaf: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &DiffTensor) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.id())
    }

    pub fn contains(&self, leaf: &DiffTensor) -> bool {
        self.by_leaf.contains_key(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn leaf_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_leaf.keys().copied()
    }
}

impl DiffTensor {
    /// A trainable leaf.
    pub fn param(value: Tensor) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    fn leaf(value: Tensor, requires_grad: bool) -> Self {
        Self {
            node: Rc::new(Node {
                id: next_id(),
                value,
                requires_grad,
                history: None,
            }),
        }
    }

    fn record(value: Tensor, op: Op, parents: Vec<DiffTensor>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let history = requires_grad.then_some(History { op, parents });
        Self {
            node: Rc::new(Node {
                id: next_id(),
                value,
                requires_grad,
                history,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn value(&self) -> &Tensor {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.node.value.data()
    }

    pub fn item(&self) -> Option<f64> {
        self.node.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when this tensor was produced by a recorded operation.
    pub fn has_history(&self) -> bool {
        self.node.history.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.history.is_none()
    }

    /// The producing operation, if recorded.
    pub fn op(&self) -> Option<OpKind> {
        self.node.history.as_ref().map(|h| h.op.kind())
    }

    /// Same values, no history and no gradient.
    pub fn stop_gradient(&self) -> Self {
        Self::constant(self.node.value.clone())
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        let v = self.value().zip_map(rhs.value(), "add", |a, b| a + b)?;
        Ok(Self::record(v, Op::Add, vec![self.clone(), rhs.clone()]))
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        let v = self.value().zip_map(rhs.value(), "sub", |a, b| a - b)?;
        Ok(Self::record(v, Op::Sub, vec![self.clone(), rhs.clone()]))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        let v = self.value().zip_map(rhs.value(), "mul", |a, b| a * b)?;
        Ok(Self::record(v, Op::Mul, vec![self.clone(), rhs.clone()]))
    }

    /// Elementwise quotient.
    pub fn div(&self, rhs: &Self) -> Result<Self> {
        let v = self.value().zip_map(rhs.value(), "div", |a, b| a / b)?;
        Ok(Self::record(v, Op::Div, vec![self.clone(), rhs.clone()]))
    }

    pub fn neg(&self) -> Self {
        Self::record(self.value().map(|a| -a), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::record(self.value().map(|a| a * s), Op::Scale(s), vec![self.clone()])
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        Self::record(self.value().map(|a| a + s), Op::AddScalar, vec![self.clone()])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let v = self.value().matmul(rhs.value())?;
        Ok(Self::record(v, Op::MatMul, vec![self.clone(), rhs.clone()]))
    }

    pub fn sum(&self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        Self::record(v, Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Self {
        let v = Tensor::scalar(self.value().mean());
        Self::record(v, Op::Mean, vec![self.clone()])
    }

    pub fn tanh(&self) -> Self {
        Self::record(self.value().map(f64::tanh), Op::Tanh, vec![self.clone()])
    }

    pub fn square(&self) -> Self {
        Self::record(self.value().map(|a| a * a), Op::Square, vec![self.clone()])
    }

    pub fn sqrt(&self) -> Self {
        Self::record(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    pub fn exp(&self) -> Self {
        Self::record(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Self {
        Self::record(self.value().map(f64::ln), Op::Log, vec![self.clone()])
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&self, rhs: &Self) -> Result<Self> {
        let v = Tensor::scalar(self.value().dot(rhs.value())?);
        Ok(Self::record(v, Op::Dot, vec![self.clone(), rhs.clone()]))
    }

    /// Squared Frobenius norm.
    pub fn frobenius_sq(&self) -> Self {
        let v = Tensor::scalar(self.value().norm_sq());
        Self::record(v, Op::FrobeniusSq, vec![self.clone()])
    }

    /// Concatenates `[b, n_i]` matrices along the column axis.
    pub fn concat_cols(parts: &[DiffTensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = first.shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            p.value().expect_rank(2, "concat_cols")?;
            if p.shape()[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(p.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value().row(r));
            }
        }
        let v = Tensor::matrix(rows, total, data)?;
        Ok(Self::record(v, Op::ConcatCols(widths), parts.to_vec()))
    }

    /// `[b, n] -> [b]`, summing each row.
    pub fn sum_rows(&self) -> Result<Self> {
        self.value().expect_rank(2, "sum_rows")?;
        let t = self.value();
        let sums = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        Ok(Self::record(Tensor::vector(sums), Op::SumRows, vec![self.clone()]))
    }

    /// Adds a length-`n` vector to every row of a `[b, n]` matrix.
    pub fn add_row_vector(&self, v: &Self) -> Result<Self> {
        self.value().expect_rank(2, "add_row_vector")?;
        v.value().expect_rank(1, "add_row_vector")?;
        let n = self.shape()[1];
        if v.shape()[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let mut out = self.value().clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(v.data()) {
                *o += b;
            }
        }
        Ok(Self::record(out, Op::AddRowVector, vec![self.clone(), v.clone()]))
    }

    /// Numerically stable `log(sum(exp(row)))` for each row of a `[b, k]` matrix.
    pub fn logsumexp_rows(&self) -> Result<Self> {
        self.value().expect_rank(2, "logsumexp_rows")?;
        let t = self.value();
        let out = (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !m.is_finite() {
                    return m;
                }
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        Ok(Self::record(Tensor::vector(out), Op::LogSumExpRows, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape)?;
        Ok(Self::record(v, Op::Reshape, vec![self.clone()]))
    }

    /// Gradients of this scalar with respect to every reachable trainable leaf.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value().len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", self.shape()),
            });
        }
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return Ok(out);
        }

        let order = self.topological_order();
        let mut pending: HashMap<u64, Tensor> = HashMap::new();
        pending.insert(self.id(), Tensor::full(self.shape(), 1.0));

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(history) = &node.node.history else {
                out.by_leaf.insert(node.id(), grad);
                continue;
            };
            let parent_grads = node.local_backward(history, &grad)?;
            for (parent, g) in history.parents.iter().zip(parent_grads) {
                if !parent.requires_grad() {
                    continue;
                }
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        pending.insert(parent.id(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn topological_order(&self) -> Vec<DiffTensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(DiffTensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(h) = &t.node.history {
                for p in &h.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }

    fn local_backward(&self, history: &History, g: &Tensor) -> Result<Vec<Tensor>> {
        let ps = &history.parents;
        let pv = |i: usize| ps[i].value();
        let out = self.value();
        let grads = match &history.op {
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|x| -x)],
            Op::Mul => vec![
                g.zip_map(pv(1), "mul", |a, b| a * b)?,
                g.zip_map(pv(0), "mul", |a, b| a * b)?,
            ],
            Op::Div => {
                let ga = g.zip_map(pv(1), "div", |a, b| a / b)?;
                let q = out.zip_map(pv(1), "div", |o, b| o / b)?;
                let gb = g.zip_map(&q, "div", |a, q| -a * q)?;
                vec![ga, gb]
            }
            Op::Neg => vec![g.map(|x| -x)],
            Op::Scale(s) => vec![g.map(|x| x * s)],
            Op::AddScalar => vec![g.clone()],
            Op::MatMul => vec![
                g.matmul(&pv(1).transpose()?)?,
                pv(0).transpose()?.matmul(g)?,
            ],
            Op::Sum => vec![Tensor::full(pv(0).shape(), g.data()[0])],
            Op::Mean => {
                let n = pv(0).len() as f64;
                vec![Tensor::full(pv(0).shape(), g.data()[0] / n)]
            }
            Op::Tanh => vec![g.zip_map(out, "tanh", |a, y| a * (1.0 - y * y))?],
            Op::Square => vec![g.zip_map(pv(0), "square", |a, x| 2.0 * a * x)?],
            Op::Sqrt => vec![g.zip_map(out, "sqrt", |a, y| a / (2.0 * y))?],
            Op::Exp => vec![g.zip_map(out, "exp", |a, y| a * y)?],
            Op::Log => vec![g.zip_map(pv(0), "log", |a, x| a / x)?],
            Op::Dot => {
                let s = g.data()[0];
                vec![pv(1).map(|b| b * s), pv(0).map(|a| a * s)]
            }
            Op::FrobeniusSq => {
                let s = g.data()[0];
                vec![pv(0).map(|a| 2.0 * a * s)]
            }
            Op::ConcatCols(widths) => {
                let rows = g.rows();
                let total: usize = widths.iter().sum();
                let mut parts: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let row = &g.data()[r * total..(r + 1) * total];
                    let mut off = 0;
                    for (part, &w) in parts.iter_mut().zip(widths) {
                        part.extend_from_slice(&row[off..off + w]);
                        off += w;
                    }
                }
                parts
                    .into_iter()
                    .zip(widths)
                    .map(|(d, &w)| Tensor::matrix(rows, w, d))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::SumRows => {
                let x = pv(0);
                let cols = x.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gr| std::iter::repeat_n(gr, cols))
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), data)?]
            }
            Op::AddRowVector => {
                let n = pv(1).len();
                let mut gv = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gv.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![g.clone(), Tensor::vector(gv)]
            }
            Op::LogSumExpRows => {
                let x = pv(0);
                let k = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for r in 0..x.rows() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    data.extend(x.row(r).iter().map(|&v| gr * (v - lse).exp()));
                }
                debug_assert_eq!(data.len(), x.rows() * k);
                vec![Tensor::new(x.shape().to_vec(), data)?]
            }
            Op::Reshape => vec![g.reshape(pv(0).shape())?],
        };
        Ok(grads)
    }
}

impl std::fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffTensor")
            .field("id", &self.id())
            .field("value", self.value())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_param(v: &[f64]) -> DiffTensor {
        DiffTensor::param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn add_elementwise() {
        let a = vec_param(&[1.0, 2.0]);
        let b = vec_param(&[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = vec_param(&[1.0, 2.0]);
        let b = vec_param(&[1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "add", .. }), "{err}");
        let m = DiffTensor::param(Tensor::zeros(&[2, 3]));
        assert!(m.matmul(&m).is_err());
    }

    #[test]
    fn identity_matmul() {
        let x = DiffTensor::constant(Tensor::matrix(2, 1, vec![0.3, -1.7]).unwrap());
        let i2 = DiffTensor::constant(Tensor::identity(2));
        assert_eq!(i2.matmul(&x).unwrap().data(), x.data());
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let x = vec_param(&[1.0, -2.0, 5.0, 0.5]);
        let g = x.mean().backward().unwrap();
        for v in g.get(&x).unwrap().data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn square_of_scalar() {
        let x = DiffTensor::param(Tensor::scalar(3.0));
        let g = x.mul(&x).unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn stop_gradient_detaches() {
        let x = vec_param(&[1.0, 2.0, 3.0]);
        let y = vec_param(&[-1.0, 0.5, 2.0]);
        let loss = x.stop_gradient().mul(&y).unwrap().sum();
        let g = loss.backward().unwrap();
        assert!(!g.contains(&x));
        assert_eq!(g.get(&y).unwrap().data(), x.data());
    }

    #[test]
    fn stop_gradient_keeps_values_and_drops_history() {
        let x = vec_param(&[1.0, 2.0]);
        let y = x.tanh().scale(2.0);
        assert!(y.has_history());
        let d = y.stop_gradient();
        assert_eq!(d.data(), y.data());
        assert!(!d.has_history());
        assert!(!d.requires_grad());
        let dd = d.stop_gradient();
        assert_eq!(dd.data(), y.data());
        assert!(!dd.has_history());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = vec_param(&[1.0, 2.0]);
        assert!(x.square().backward().is_err());
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let a = DiffTensor::constant(Tensor::vector(vec![1.0, 2.0]));
        let b = a.exp().add(&a).unwrap();
        assert!(!b.has_history());
        assert!(b.sum().backward().unwrap().is_empty());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x*x + x) => df/dx = 2x + 1
        let x = vec_param(&[0.5, -1.5]);
        let f = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = f.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn concat_and_row_ops_shapes() {
        let a = DiffTensor::param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = DiffTensor::param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = DiffTensor::concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = c.sum_rows().unwrap();
        assert_eq!(s.data(), &[8.0, 13.0]);
        let bias = vec_param(&[1.0, 1.0, 1.0]);
        let g = c.add_row_vector(&bias).unwrap().sum().backward().unwrap();
        assert_eq!(g.get(&bias).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(&a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let x = DiffTensor::constant(Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap());
        let v = x.logsumexp_rows().unwrap();
        assert!((v.data()[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
