use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

/// Added to every norm before dividing by it (row normalisation and cosine).
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The fixed op catalog. Attribute-carrying kinds hold their constants inline.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `m×n` matrix plus a length-`n` vector added to every row.
    AddRow,
    /// Tensor plus a one-element tensor.
    AddScalar,
    /// Tensor times a one-element tensor.
    MulScalar,
    Scale(f64),
    AddConst(f64),
    MatMul,
    Transpose,
    Sum,
    MeanAxis(usize),
    SumAxis(usize),
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Sqrt,
    /// `max(x, 0)`, subgradient 0 at the kink.
    Relu,
    Clamp { lo: f64, hi: f64 },
    SmoothL1(f64),
    /// Softmax along the last axis.
    RowSoftmax,
    /// L2 normalisation along the last axis.
    RowNormalize,
    /// Cosine similarity of two vectors.
    Cosine,
    /// Per-row `log Σ exp` over the entries selected by a row-major mask.
    MaskedLogSumExp(Vec<bool>),
    Reshape(Vec<usize>),
    /// Stacks `n` equal-length vectors into an `n×d` matrix.
    StackRows,
    /// Picks one element (flat index) as a scalar.
    Select(usize),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddRow => "add_row",
            OpKind::AddScalar => "add_scalar",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Scale(_) => "scale",
            OpKind::AddConst(_) => "add_const",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::MeanAxis(_) => "mean_axis",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Relu => "relu",
            OpKind::Clamp { .. } => "clamp",
            OpKind::SmoothL1(_) => "smooth_l1",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::RowNormalize => "row_normalize",
            OpKind::Cosine => "cosine",
            OpKind::MaskedLogSumExp(_) => "masked_logsumexp",
            OpKind::Reshape(_) => "reshape",
            OpKind::StackRows => "stack_rows",
            OpKind::Select(_) => "select",
        }
    }

    /// Number of inputs, `None` for variadic kinds.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::AddRow
            | OpKind::AddScalar
            | OpKind::MulScalar
            | OpKind::MatMul
            | OpKind::Cosine => Some(2),
            OpKind::StackRows => None,
            _ => Some(1),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the attribute-free kinds by name. Kinds that need constants
/// (`scale`, `clamp`, ...) must be built directly.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "add_row" => OpKind::AddRow,
            "add_scalar" => OpKind::AddScalar,
            "mul_scalar" => OpKind::MulScalar,
            "matmul" => OpKind::MatMul,
            "transpose" => OpKind::Transpose,
            "sum" => OpKind::Sum,
            "sigmoid" => OpKind::Sigmoid,
            "tanh" => OpKind::Tanh,
            "softplus" => OpKind::Softplus,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "sqrt" => OpKind::Sqrt,
            "relu" => OpKind::Relu,
            "row_softmax" => OpKind::RowSoftmax,
            "row_normalize" => OpKind::RowNormalize,
            "cosine" => OpKind::Cosine,
            "stack_rows" => OpKind::StackRows,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Param,
    Const,
    Op { kind: OpKind, inputs: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
    needs_grad: bool,
}

/// Append-only record of a computation, differentiated in reverse.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    min_kink: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_var: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_var.iter().map(|(v, t)| (*v, t))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn last_axis(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            min_kink: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can be reused for the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.min_kink = f64::INFINITY;
    }

    /// Smallest distance of any hinge, clamp or smooth-L1 argument to its
    /// kink seen so far. Finite-difference checks are only meaningful when
    /// this is well above the step size.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Param, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Origin::Const, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, value: Tensor, origin: Origin, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignVar(var.0))
        }
    }

    fn note_kink(&mut self, d: f64) {
        if d < self.min_kink {
            self.min_kink = d;
        }
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(Error::Invalid(format!(
                    "{kind} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Invalid(format!("{kind} needs at least one input")));
        }
        let value = self.forward(kind, inputs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(
            value,
            Origin::Op {
                kind: kind.clone(),
                inputs: inputs.iter().map(|v| v.0).collect(),
            },
            needs_grad,
        ))
    }

    fn forward(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let name = kind.name();
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let mut kink = None;
        let out = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(Error::shape(name, &[a.shape(), b.shape()]));
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    OpKind::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                if matches!(kind, OpKind::Div) && b.data().iter().any(|&y| y == 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        msg: "division by zero".into(),
                    });
                }
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            OpKind::AddRow => {
                let (x, r) = (val(0), val(1));
                if x.ndim() != 2 || r.ndim() != 1 || r.len() != x.cols() {
                    return Err(Error::shape(name, &[x.shape(), r.shape()]));
                }
                let c = x.cols();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + r.data()[i % c])
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            OpKind::AddScalar | OpKind::MulScalar => {
                let (x, s) = (val(0), val(1));
                if s.len() != 1 {
                    return Err(Error::shape(name, &[x.shape(), s.shape()]));
                }
                let s = s.item();
                let data = if matches!(kind, OpKind::AddScalar) {
                    x.data().iter().map(|v| v + s).collect()
                } else {
                    x.data().iter().map(|v| v * s).collect()
                };
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            OpKind::Scale(c) => map(val(0), |v| v * c),
            OpKind::AddConst(c) => map(val(0), |v| v + c),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
                    return Err(Error::shape(name, &[a.shape(), b.shape()]));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut out = vec![0.0; m * n];
                matmul_into(a.data(), b.data(), &mut out, m, k, n);
                Tensor::from_parts(vec![m, n], out)
            }
            OpKind::Transpose => {
                let x = val(0);
                if x.ndim() != 2 {
                    return Err(Error::shape(name, &[x.shape()]));
                }
                let (r, c) = (x.rows(), x.cols());
                Tensor::from_parts(vec![c, r], transpose(x.data(), r, c))
            }
            OpKind::Sum => Tensor::scalar(val(0).data().iter().sum()),
            OpKind::MeanAxis(axis) | OpKind::SumAxis(axis) => {
                let x = val(0);
                if x.ndim() != 2 || *axis > 1 {
                    return Err(Error::shape(name, &[x.shape()]));
                }
                let (r, c) = (x.rows(), x.cols());
                let mean = matches!(kind, OpKind::MeanAxis(_));
                let out = if *axis == 0 {
                    let mut o = vec![0.0; c];
                    for i in 0..r {
                        for (oj, v) in o.iter_mut().zip(x.row(i)) {
                            *oj += v;
                        }
                    }
                    if mean {
                        o.iter_mut().for_each(|v| *v /= r as f64);
                    }
                    o
                } else {
                    (0..r)
                        .map(|i| {
                            let s: f64 = x.row(i).iter().sum();
                            if mean {
                                s / c as f64
                            } else {
                                s
                            }
                        })
                        .collect()
                };
                Tensor::vector(out)
            }
            OpKind::Sigmoid => map(val(0), sigmoid),
            OpKind::Tanh => map(val(0), f64::tanh),
            OpKind::Softplus => map(val(0), softplus),
            OpKind::Exp => map(val(0), f64::exp),
            OpKind::Log => {
                if val(0).data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        msg: "log of non-positive value".into(),
                    });
                }
                map(val(0), f64::ln)
            }
            OpKind::Sqrt => {
                if val(0).data().iter().any(|&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: name,
                        msg: "sqrt of non-positive value".into(),
                    });
                }
                map(val(0), f64::sqrt)
            }
            OpKind::Relu => {
                let x = val(0);
                kink = Some(x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
                map(x, |v| v.max(0.0))
            }
            OpKind::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::Domain {
                        op: name,
                        msg: format!("lo {lo} > hi {hi}"),
                    });
                }
                let x = val(0);
                kink = Some(
                    x.data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min((v - lo).abs()).min((v - hi).abs())),
                );
                map(x, |v| v.clamp(*lo, *hi))
            }
            OpKind::SmoothL1(beta) => {
                if *beta <= 0.0 {
                    return Err(Error::Domain {
                        op: name,
                        msg: "beta must be positive".into(),
                    });
                }
                let x = val(0);
                kink = Some(
                    x.data()
                        .iter()
                        .fold(f64::INFINITY, |m, v| m.min((v.abs() - beta).abs())),
                );
                map(x, |v| {
                    if v.abs() < *beta {
                        0.5 * v * v / beta
                    } else {
                        v.abs() - 0.5 * beta
                    }
                })
            }
            OpKind::RowSoftmax => {
                let x = val(0);
                let c = last_axis(x.shape());
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(c) {
                    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= s);
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            OpKind::RowNormalize => {
                let x = val(0);
                let c = last_axis(x.shape());
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(c) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
                    row.iter_mut().for_each(|v| *v /= n);
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            OpKind::Cosine => {
                let (a, b) = (val(0), val(1));
                if a.ndim() != 1 || a.shape() != b.shape() {
                    return Err(Error::shape(name, &[a.shape(), b.shape()]));
                }
                Tensor::scalar(cosine(a.data(), b.data()))
            }
            OpKind::MaskedLogSumExp(mask) => {
                let x = val(0);
                if x.ndim() != 2 || mask.len() != x.len() {
                    return Err(Error::shape(name, &[x.shape(), &[mask.len()]]));
                }
                let c = x.cols();
                let mut out = Vec::with_capacity(x.rows());
                for (i, row) in x.data().chunks(c).enumerate() {
                    let sel = &mask[i * c..(i + 1) * c];
                    let m = row
                        .iter()
                        .zip(sel)
                        .filter(|(_, &s)| s)
                        .fold(f64::NEG_INFINITY, |a, (&b, _)| a.max(b));
                    if !sel.iter().any(|&s| s) {
                        return Err(Error::Domain {
                            op: name,
                            msg: format!("row {i} selects no entries"),
                        });
                    }
                    let s: f64 = row
                        .iter()
                        .zip(sel)
                        .filter(|(_, &s)| s)
                        .map(|(&v, _)| (v - m).exp())
                        .sum();
                    // NaN or infinite inputs propagate instead of erroring
                    out.push(if m.is_finite() {
                        m + s.ln()
                    } else if m == f64::NEG_INFINITY && !s.is_nan() {
                        m
                    } else {
                        m + s
                    });
                }
                Tensor::vector(out)
            }
            OpKind::Reshape(shape) => {
                let x = val(0);
                if shape.iter().product::<usize>() != x.len() {
                    return Err(Error::shape(name, &[x.shape(), shape]));
                }
                Tensor::from_parts(shape.clone(), x.data().to_vec())
            }
            OpKind::StackRows => {
                let d = val(0).len();
                let mut data = Vec::with_capacity(d * inputs.len());
                for i in 0..inputs.len() {
                    let r = val(i);
                    if r.ndim() != 1 || r.len() != d {
                        return Err(Error::shape(name, &[val(0).shape(), r.shape()]));
                    }
                    data.extend_from_slice(r.data());
                }
                Tensor::from_parts(vec![inputs.len(), d], data)
            }
            OpKind::Select(i) => {
                let x = val(0);
                if *i >= x.len() {
                    return Err(Error::shape(name, &[x.shape(), &[*i]]));
                }
                Tensor::scalar(x.data()[*i])
            }
        };
        if let Some(k) = kink {
            self.note_kink(k);
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar root. Every parameter leaf gets an entry,
    /// zero-filled when the root does not depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.origin {
                Origin::Op { kind, inputs } if node.needs_grad => {
                    self.vjp(kind, inputs, &node.value, &g, &mut grads);
                }
                Origin::Param => grads[idx] = Some(g),
                _ => {}
            }
        }
        let mut by_var = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Origin::Param = node.origin {
                let data = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_var.insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { by_var })
    }

    fn vjp(
        &self,
        kind: &OpKind,
        inputs: &[usize],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |i: usize| &self.nodes[inputs[i]].value;
        let needs = |i: usize| self.nodes[inputs[i]].needs_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[inputs[i]].needs_grad {
                return;
            }
            let len = self.nodes[inputs[i]].value.len();
            let slot = grads[inputs[i]].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match kind {
            OpKind::Add => {
                acc(0, &mut |s| add_assign(s, g));
                acc(1, &mut |s| add_assign(s, g));
            }
            OpKind::Sub => {
                acc(0, &mut |s| add_assign(s, g));
                acc(1, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a -= b));
            }
            OpKind::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                acc(0, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * b[i];
                    }
                });
                acc(1, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * a[i];
                    }
                });
            }
            OpKind::Div => {
                let (a, b) = (val(0).data(), val(1).data());
                acc(0, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / b[i];
                    }
                });
                acc(1, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * a[i] / (b[i] * b[i]);
                    }
                });
            }
            OpKind::AddRow => {
                let c = val(1).len();
                acc(0, &mut |s| add_assign(s, g));
                acc(1, &mut |s| {
                    for row in g.chunks(c) {
                        add_assign(s, row);
                    }
                });
            }
            OpKind::AddScalar => {
                acc(0, &mut |s| add_assign(s, g));
                acc(1, &mut |s| s[0] += g.iter().sum::<f64>());
            }
            OpKind::MulScalar => {
                let x = val(0).data();
                let sc = val(1).item();
                acc(0, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b * sc));
                acc(1, &mut |s| s[0] += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
            }
            OpKind::Scale(c) => acc(0, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c)),
            OpKind::AddConst(_) => acc(0, &mut |s| add_assign(s, g)),
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if needs(0) {
                    // dA = G · Bᵀ
                    let bt = transpose(b.data(), k, n);
                    let mut tmp = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut tmp, m, n, k);
                    acc(0, &mut |s| add_assign(s, &tmp));
                }
                if needs(1) {
                    // dB = Aᵀ · G
                    let at = transpose(a.data(), m, k);
                    let mut tmp = vec![0.0; k * n];
                    matmul_into(&at, g, &mut tmp, k, m, n);
                    acc(1, &mut |s| add_assign(s, &tmp));
                }
            }
            OpKind::Transpose => {
                let (r, c) = (val(0).rows(), val(0).cols());
                let gt = transpose(g, c, r);
                acc(0, &mut |s| add_assign(s, &gt));
            }
            OpKind::Sum => acc(0, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            OpKind::MeanAxis(axis) | OpKind::SumAxis(axis) => {
                let x = val(0);
                let (r, c) = (x.rows(), x.cols());
                let mean = matches!(kind, OpKind::MeanAxis(_));
                acc(0, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            let (gv, n) = if *axis == 0 { (g[j], r) } else { (g[i], c) };
                            s[i * c + j] += if mean { gv / n as f64 } else { gv };
                        }
                    }
                });
            }
            OpKind::Sigmoid => elementwise(&mut acc, g, out.data(), |_, y| y * (1.0 - y), val(0).data()),
            OpKind::Tanh => elementwise(&mut acc, g, out.data(), |_, y| 1.0 - y * y, val(0).data()),
            OpKind::Softplus => elementwise(&mut acc, g, out.data(), |x, _| sigmoid(x), val(0).data()),
            OpKind::Exp => elementwise(&mut acc, g, out.data(), |_, y| y, val(0).data()),
            OpKind::Log => elementwise(&mut acc, g, out.data(), |x, _| 1.0 / x, val(0).data()),
            OpKind::Sqrt => elementwise(&mut acc, g, out.data(), |_, y| 0.5 / y, val(0).data()),
            OpKind::Relu => elementwise(
                &mut acc,
                g,
                out.data(),
                |x, _| if x > 0.0 { 1.0 } else { 0.0 },
                val(0).data(),
            ),
            OpKind::Clamp { lo, hi } => elementwise(
                &mut acc,
                g,
                out.data(),
                |x, _| if x > *lo && x < *hi { 1.0 } else { 0.0 },
                val(0).data(),
            ),
            OpKind::SmoothL1(beta) => elementwise(
                &mut acc,
                g,
                out.data(),
                |x, _| if x.abs() < *beta { x / beta } else { x.signum() },
                val(0).data(),
            ),
            OpKind::RowSoftmax => {
                let c = last_axis(out.shape());
                acc(0, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            OpKind::RowNormalize => {
                let x = val(0);
                let c = last_axis(x.shape());
                acc(0, &mut |s| {
                    for ((srow, xrow), grow) in s.chunks_mut(c).zip(x.data().chunks(c)).zip(g.chunks(c)) {
                        let n = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let d = n + NORM_EPS;
                        let xg: f64 = xrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let k = if n > 0.0 { xg / (n * d * d) } else { 0.0 };
                        for j in 0..c {
                            srow[j] += grow[j] / d - xrow[j] * k;
                        }
                    }
                });
            }
            OpKind::Cosine => {
                let (a, b) = (val(0).data(), val(1).data());
                let s = out.item();
                let na = norm(a);
                let nb = norm(b);
                let (da, db) = (na + NORM_EPS, nb + NORM_EPS);
                let gs = g[0];
                // ∂s/∂a = b/(da·db) − s·a/(na·da)
                let ka = if na > 0.0 { s / (na * da) } else { 0.0 };
                let kb = if nb > 0.0 { s / (nb * db) } else { 0.0 };
                acc(0, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gs * (b[i] / (da * db) - ka * a[i]);
                    }
                });
                acc(1, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += gs * (a[i] / (da * db) - kb * b[i]);
                    }
                });
            }
            OpKind::MaskedLogSumExp(mask) => {
                let x = val(0);
                let c = x.cols();
                acc(0, &mut |s| {
                    for (i, row) in x.data().chunks(c).enumerate() {
                        let lse = out.data()[i];
                        for j in 0..c {
                            if mask[i * c + j] {
                                s[i * c + j] += g[i] * (row[j] - lse).exp();
                            }
                        }
                    }
                });
            }
            OpKind::Reshape(_) => acc(0, &mut |s| add_assign(s, g)),
            OpKind::StackRows => {
                let d = val(0).len();
                for (i, chunk) in g.chunks(d).enumerate() {
                    acc(i, &mut |s| add_assign(s, chunk));
                }
            }
            OpKind::Select(i) => acc(0, &mut |s| s[*i] += g[0]),
        }
    }

    // Convenience wrappers. Shape errors propagate through `Result`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Div, &[a, b])
    }
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.apply(&OpKind::AddRow, &[x, row])
    }
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(&OpKind::AddScalar, &[x, s])
    }
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(&OpKind::MulScalar, &[x, s])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(&OpKind::Scale(c), &[x])
    }
    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(&OpKind::AddConst(c), &[x])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Transpose, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(&OpKind::MeanAxis(axis), &[x])
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(&OpKind::SumAxis(axis), &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Tanh, &[x])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Softplus, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Exp, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Log, &[x])
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Sqrt, &[x])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::Relu, &[x])
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(&OpKind::Clamp { lo, hi }, &[x])
    }
    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        self.apply(&OpKind::SmoothL1(beta), &[x])
    }
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::RowSoftmax, &[x])
    }
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(&OpKind::RowNormalize, &[x])
    }
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(&OpKind::Cosine, &[a, b])
    }
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.apply(&OpKind::MaskedLogSumExp(mask), &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(&OpKind::Reshape(shape.to_vec()), &[x])
    }
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        self.apply(&OpKind::StackRows, rows)
    }
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        self.apply(&OpKind::Select(i), &[x])
    }

    /// `max(a, b)` elementwise, built from a hinge.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let h = self.relu(d)?;
        self.add(b, h)
    }

    /// `min(a, b)` elementwise, built from a hinge.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let h = self.relu(d)?;
        self.sub(a, h)
    }

    /// Affine map `x·W + b` over the rows of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn elementwise(
    acc: &mut impl FnMut(usize, &mut dyn FnMut(&mut [f64])),
    g: &[f64],
    y: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    x: &[f64],
) {
    acc(0, &mut |s| {
        for i in 0..s.len() {
            s[i] += g[i] * deriv(x[i], y[i]);
        }
    });
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with [`NORM_EPS`] added to each norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / ((norm(a) + NORM_EPS) * (norm(b) + NORM_EPS))
}

fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    if k == 0 || n == 0 {
        return;
    }
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
