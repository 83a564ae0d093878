//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] is an arena of nodes. Every operation appends a node holding
//! its forward value and the indices of its inputs; [`Tape::backward`] walks
//! the arena in reverse, which is a valid reverse topological order because
//! inputs always precede their consumers.
//!
//! All tensors are two-dimensional. Vectors are `1 × n` and scalars `1 × 1`.
//! The only broadcast is a `1 × n` bias added to every row.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got {0}")]
    NonScalarLoss(Shape),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.rows, self.cols)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TapeError> {
        if data.len() != rows * cols {
            return Err(TapeError::InvalidArgument {
                op: "tensor",
                msg: format!("{} values for shape [{rows}, {cols}]", data.len()),
            });
        }
        Ok(Self { shape: Shape::new(rows, cols), data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { shape: Shape::new(rows, cols), data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Shape::new(1, 1), data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: Shape::new(1, data.len()), data }
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.shape.cols..(i + 1) * self.shape.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Exp(Var),
    Neg(Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    L1Distance(Var, Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Mean(Var),
    Sum(Var),
    GradReversal(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    train: bool,
    dropout_rng: Option<ChaCha8Rng>,
    branch_hash: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, bit: u64) -> u64 {
    (h ^ bit).wrapping_mul(0x100_0000_01b3).rotate_left(5)
}

impl Tape {
    /// A tape in evaluation mode (dropout is the identity).
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), train: false, dropout_rng: None, branch_hash: 0xcbf2_9ce4_8422_2325 }
    }

    /// A tape in training mode whose dropout masks come from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self { train: true, dropout_rng: Some(rng), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every non-smooth branch taken so far (ReLU and l1 signs).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, TapeError> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { value: t.clone(), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(TapeError::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        let mut out = vec![0.0; m * n];
        {
            let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, w) in orow.iter_mut().zip(brow) {
                        *o += x * w;
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor { shape: Shape::new(m, n), data: out }, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::ShapeMismatch { op: "add", left: sa, right: sb });
        }
        let data = self.nodes[a.0].value.data.iter().zip(&self.nodes[b.0].value.data).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        self.push("add", Tensor { shape: sa, data }, Op::Add(a, b), rg)
    }

    /// `x + bias` with a `1 × n` bias repeated over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TapeError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.rows != 1 || sb.cols != sx.cols {
            return Err(TapeError::ShapeMismatch { op: "add_bias", left: sx, right: sb });
        }
        let b = &self.nodes[bias.0].value.data;
        let data = self.nodes[x.0].value.data.iter().enumerate().map(|(i, v)| v + b[i % sx.cols]).collect();
        let rg = self.rg(&[x, bias]);
        self.push("add_bias", Tensor { shape: sx, data }, Op::AddBias(x, bias), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TapeError> {
        let mut h = self.branch_hash;
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| {
                h = mix(h, (v > 0.0) as u64);
                v.max(0.0)
            })
            .collect();
        self.branch_hash = h;
        let shape = self.shape(x);
        let rg = self.rg(&[x]);
        self.push("relu", Tensor { shape, data }, Op::Relu(x), rg)
    }

    /// Inverted dropout with drop probability `p`; identity in eval mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TapeError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TapeError::InvalidArgument { op: "dropout", msg: format!("p = {p} outside [0, 1)") });
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let n = self.shape(x).len();
        let rng = self.dropout_rng.as_mut().ok_or(TapeError::InvalidArgument {
            op: "dropout",
            msg: "training tape without a dropout generator".into(),
        })?;
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.nodes[x.0].value.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x);
        let rg = self.rg(&[x]);
        self.push("dropout", Tensor { shape, data }, Op::Dropout(x, mask), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TapeError> {
        let data = self.nodes[x.0].value.data.iter().map(|v| v.exp()).collect();
        let shape = self.shape(x);
        let rg = self.rg(&[x]);
        self.push("exp", Tensor { shape, data }, Op::Exp(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TapeError> {
        let data = self.nodes[x.0].value.data.iter().map(|v| -v).collect();
        let shape = self.shape(x);
        let rg = self.rg(&[x]);
        self.push("negate", Tensor { shape, data }, Op::Neg(x), rg)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TapeError> {
        let data = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let shape = self.shape(x);
        let rg = self.rg(&[x]);
        self.push("scalar_mul", Tensor { shape, data }, Op::Scale(x, c), rg)
    }

    /// Multiplication by a `1 × 1` tensor on the tape.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TapeError> {
        let ss = self.shape(s);
        if ss != Shape::new(1, 1) {
            return Err(TapeError::ShapeMismatch { op: "mul_scalar", left: self.shape(x), right: ss });
        }
        let c = self.nodes[s.0].value.data[0];
        let data = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let shape = self.shape(x);
        let rg = self.rg(&[x, s]);
        self.push("mul_scalar", Tensor { shape, data }, Op::MulScalar(x, s), rg)
    }

    /// Row-wise l1 distance: `[m, n] × [m, n] → [m, 1]`.
    /// The subgradient at a zero difference is 0.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TapeError::ShapeMismatch { op: "l1_distance", left: sa, right: sb });
        }
        let mut h = self.branch_hash;
        let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        let data: Vec<f64> = (0..sa.rows)
            .map(|i| {
                (0..sa.cols)
                    .map(|j| {
                        let d = av[i * sa.cols + j] - bv[i * sa.cols + j];
                        h = mix(h, (d > 0.0) as u64 + 2 * (d < 0.0) as u64);
                        d.abs()
                    })
                    .sum()
            })
            .collect();
        self.branch_hash = h;
        let rg = self.rg(&[a, b]);
        self.push("l1_distance", Tensor { shape: Shape::new(sa.rows, 1), data }, Op::L1Distance(a, b), rg)
    }

    /// Per-row softmax cross-entropy: `[m, K]` logits and `m` labels → `[m, 1]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TapeError> {
        let s = self.shape(logits);
        if labels.len() != s.rows {
            return Err(TapeError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: s,
                right: Shape::new(labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s.cols) {
            return Err(TapeError::InvalidArgument {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {} classes", s.cols),
            });
        }
        let lv = &self.nodes[logits.0].value.data;
        let data = (0..s.rows)
            .map(|i| {
                let row = &lv[i * s.cols..(i + 1) * s.cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[labels[i]]
            })
            .collect();
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor { shape: Shape::new(s.rows, 1), data },
            Op::SoftmaxCrossEntropy(logits, labels.to_vec()),
            rg,
        )
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TapeError> {
        let first = parts.first().ok_or(TapeError::InvalidArgument { op: "concat", msg: "no inputs".into() })?;
        let cols = self.shape(*first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.cols != cols {
                return Err(TapeError::ShapeMismatch { op: "concat", left: self.shape(*first), right: s });
            }
            rows += s.rows;
            data.extend_from_slice(&self.nodes[p.0].value.data);
        }
        let rg = self.rg(parts);
        self.push("concat", Tensor { shape: Shape::new(rows, cols), data }, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TapeError> {
        let s = self.shape(x);
        if start > end || end > s.rows {
            return Err(TapeError::InvalidArgument { op: "slice_rows", msg: format!("{start}..{end} of {s}") });
        }
        let data = self.nodes[x.0].value.data[start * s.cols..end * s.cols].to_vec();
        let rg = self.rg(&[x]);
        self.push("slice_rows", Tensor { shape: Shape::new(end - start, s.cols), data }, Op::SliceRows(x, start), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TapeError> {
        let v = &self.nodes[x.0].value.data;
        if v.is_empty() {
            return Err(TapeError::InvalidArgument { op: "mean", msg: "empty tensor".into() });
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TapeError> {
        let s = self.nodes[x.0].value.data.iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Result<Var, TapeError> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(TapeError::InvalidArgument {
                op: "gradient_reversal",
                msg: format!("lambda must be a finite nonnegative number (got {lambda})"),
            });
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x]);
        self.push("gradient_reversal", value, Op::GradReversal(x, lambda), rg)
    }

    /// Accumulates d`loss`/d`v` into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TapeError> {
        let s = self.shape(loss);
        if s != Shape::new(1, 1) {
            return Err(TapeError::NonScalarLoss(s));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<(), TapeError> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                if self.needs(a) {
                    let bv = &self.nodes[b.0].value.data;
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let av = &self.nodes[a.0].value.data;
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::AddBias(x, b) => {
                self.accumulate(x, g.to_vec());
                if self.needs(b) {
                    let cols = self.shape(b).cols;
                    let mut db = vec![0.0; cols];
                    for (j, v) in g.iter().enumerate() {
                        db[j % cols] += v;
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Relu(x) => {
                let d = self.nodes[x.0].value.data.iter().zip(g).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(x, d);
            }
            Op::Dropout(x, mask) => {
                let d = mask.iter().zip(g).map(|(m, gv)| m * gv).collect();
                self.accumulate(x, d);
            }
            Op::Exp(x) => {
                let d = self.nodes[i].value.data.iter().zip(g).map(|(e, gv)| e * gv).collect();
                self.accumulate(x, d);
            }
            Op::Neg(x) => self.accumulate(x, g.iter().map(|v| -v).collect()),
            Op::Scale(x, c) => self.accumulate(x, g.iter().map(|v| v * c).collect()),
            Op::MulScalar(x, s) => {
                let c = self.nodes[s.0].value.data[0];
                if self.needs(s) {
                    let ds: f64 = self.nodes[x.0].value.data.iter().zip(g).map(|(v, gv)| v * gv).sum();
                    self.accumulate(s, vec![ds]);
                }
                self.accumulate(x, g.iter().map(|v| v * c).collect());
            }
            Op::L1Distance(a, b) => {
                let s = self.shape(a);
                let (av, bv) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                let da: Vec<f64> = (0..s.len())
                    .map(|idx| {
                        let d = av[idx] - bv[idx];
                        let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                        sign * g[idx / s.cols]
                    })
                    .collect();
                if self.needs(b) {
                    self.accumulate(b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(a, da);
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let s = self.shape(logits);
                let lv = &self.nodes[logits.0].value.data;
                let mut d = vec![0.0; s.len()];
                for r in 0..s.rows {
                    let row = &lv[r * s.cols..(r + 1) * s.cols];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for c in 0..s.cols {
                        let p = (row[c] - max).exp() / z;
                        d[r * s.cols + c] = g[r] * (p - if c == labels[r] { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(logits, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(p).len();
                    self.accumulate(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                let s = self.shape(x);
                let mut d = vec![0.0; s.len()];
                d[start * s.cols..start * s.cols + g.len()].copy_from_slice(g);
                self.accumulate(x, d);
            }
            Op::Mean(x) => {
                let n = self.shape(x).len();
                self.accumulate(x, vec![g[0] / n as f64; n]);
            }
            Op::Sum(x) => {
                let n = self.shape(x).len();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::GradReversal(x, lambda) => self.accumulate(x, g.iter().map(|v| -lambda * v).collect()),
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// One update of every parameter in `params` using `grads` (same order
    /// and shapes as at construction).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<(), TapeError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TapeError::InvalidArgument {
                op: "adam_step",
                msg: format!("{} params / {} grads for {} slots", params.len(), grads.len(), self.m.len()),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.data.len() != g.len() || g.len() != self.m[slot].len() {
                return Err(TapeError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape,
                    right: Shape::new(1, g.len()),
                });
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Result of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±h evaluations crossed a ReLU or l1 kink.
    pub skipped: usize,
    pub max_relative_error: f64,
    /// `(tensor index, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn eval_with<F>(f: &mut F, ps: &[Tensor]) -> Result<(f64, u64), TapeError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.scalar_value(loss), tape.branch_signature()))
}

/// Gradients of the scalar recorded by `f` with respect to `params`, as
/// computed by [`Tape::backward`].
///
/// `f` records a scalar loss on the given tape from leaves created with
/// [`Tape::param`] in the order of `params`.
pub fn analytic_gradient<F>(params: &[Tensor], mut f: F) -> Result<Vec<Vec<f64>>, TapeError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.data.len()]))
        .collect())
}

/// Five-point central differences with outer step `h`, accurate to O(h⁴).
/// Elements whose evaluations cross a ReLU or l1 kink are `None`.
pub fn numeric_gradient<F>(params: &[Tensor], h: f64, mut f: F) -> Result<Vec<Vec<Option<f64>>>, TapeError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let (_, base_sig) = eval_with(&mut f, params)?;
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut g = Vec::with_capacity(p.data.len());
        for j in 0..p.data.len() {
            let orig = p.data[j];
            let mut at = |dx: f64| {
                work[pi].data[j] = orig + dx;
                eval_with(&mut f, &work)
            };
            let (f2p, s2p) = at(h)?;
            let (f2m, s2m) = at(-h)?;
            let (f1p, s1p) = at(h / 2.0)?;
            let (f1m, s1m) = at(-h / 2.0)?;
            work[pi].data[j] = orig;
            let smooth = [s2p, s2m, s1p, s1m].iter().all(|s| *s == base_sig);
            g.push(smooth.then(|| (8.0 * (f1p - f1m) - (f2p - f2m)) / (6.0 * h)));
        }
        out.push(g);
    }
    Ok(out)
}

/// Below this magnitude gradients are compared absolutely.
pub const GRADIENT_FLOOR: f64 = 1e-4;

/// Element-wise relative error `|a − n| / max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<Option<f64>>]) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (pi, (ag, ng)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (a, n)) in ag.iter().zip(ng).enumerate() {
            let Some(n) = n else {
                report.skipped += 1;
                continue;
            };
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRADIENT_FLOOR);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((pi, j, *a, *n));
            }
            report.checked += 1;
        }
    }
    report
}

/// Compares the analytic gradient of `f` against central differences with
/// step `h` over every element of every tensor in `params`.
pub fn gradient_check<F>(params: &[Tensor], h: f64, mut f: F) -> Result<GradCheckReport, TapeError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, TapeError>,
{
    let analytic = analytic_gradient(params, &mut f)?;
    let numeric = numeric_gradient(params, h, &mut f)?;
    Ok(compare_gradients(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn relu_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn l1_of_equal_vectors_is_zero() {
        let mut t = Tape::new();
        let a = t.param(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let d = t.l1_distance(a, b).unwrap();
        assert_eq!(t.scalar_value(d), 0.0);
        let s = t.sum(d).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((t.scalar_value(ce) - 2f64.ln()).abs() < 1e-15);
        let l4 = t.constant(Tensor::vector(vec![0.0; 4]));
        let ce4 = t.softmax_cross_entropy(l4, &[3]).unwrap();
        assert!((t.scalar_value(ce4) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn square_and_relu_gradients() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::scalar(3.0));
        let y = t.matmul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![-1.0, 2.0]));
        let r = t.relu(x).unwrap();
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(t.backward(x), Err(TapeError::NonScalarLoss(Shape::new(1, 2))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let e = t.matmul(a, b).unwrap_err();
        assert_eq!(e.to_string(), "matmul: shape mismatch between [2, 3] and [2, 3]");
    }

    #[test]
    fn non_finite_is_reported() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1000.0));
        assert_eq!(t.exp(x), Err(TapeError::NonFinite { op: "exp" }));
    }

    #[test]
    fn gradient_reversal_semantics() {
        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![0.5, -1.5, 2.0]));
        let r = t.gradient_reversal(x, 1.0).unwrap();
        assert_eq!(t.value(r), t.value(x));
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[-1.0, -1.0, -1.0]);

        let mut t = Tape::new();
        let x = t.param(&Tensor::vector(vec![0.5, -1.5]));
        let r = t.gradient_reversal(x, 0.0).unwrap();
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|v| *v == 0.0));
        assert!(t.gradient_reversal(x, -0.5).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0; 100]));
        let y = t.dropout(x, 0.5).unwrap();
        assert_eq!(y, x);
        let run = || {
            let mut t = Tape::training(ChaCha8Rng::seed_from_u64(9));
            let x = t.constant(Tensor::vector(vec![1.0; 100]));
            let y = t.dropout(x, 0.5).unwrap();
            t.value(y).data.clone()
        };
        let a = run();
        assert_eq!(a, run());
        let zeros = a.iter().filter(|v| **v == 0.0).count();
        assert!((30..70).contains(&zeros));
        assert!(a.iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new(&[&p]);
        st.step(&mut [&mut p], &[&[0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        // Closed form of the first step: m̂ = g, v̂ = g², Δ = lr·g/(|g|+ε).
        for g in [0.3, -2.0, 1e-3] {
            let mut p = Tensor::scalar(0.0);
            let mut st = AdamState::new(&[&p]);
            let lr = 1e-5;
            st.step(&mut [&mut p], &[&[g]], lr).unwrap();
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((p.data[0] - expected).abs() < 1e-18, "{} vs {expected}", p.data[0]);
        }
    }

    #[test]
    fn adam_descends_against_constant_gradient() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[&p]);
        for _ in 0..100 {
            st.step(&mut [&mut p], &[&[0.7]], 1e-2).unwrap();
        }
        assert!(p.data[0] < -0.5);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(5, 4);
        let params = vec![rand_t(4, 6), rand_t(1, 6), rand_t(6, 3), rand_t(1, 3)];
        let target = rand_t(5, 3);
        let labels = [0usize, 2, 1, 1, 0];
        let report = gradient_check(&params, 1e-4, |t, v| {
            let xi = t.constant(x.clone());
            let h = t.matmul(xi, v[0])?;
            let h = t.add_bias(h, v[1])?;
            let h = t.relu(h)?;
            let o = t.matmul(h, v[2])?;
            let o = t.add_bias(o, v[3])?;
            let tg = t.constant(target.clone());
            let d = t.l1_distance(o, tg)?;
            let ce = t.softmax_cross_entropy(o, &labels)?;
            let both = t.add(d, ce)?;
            let e = t.scale(both, 0.5)?;
            let e = t.exp(e)?;
            t.mean(e)
        })
        .unwrap();
        assert!(report.checked > 40);
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut t = Tape::new();
        let a = t.param(&Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.param(&Tensor::new(1, 2, vec![5.0, 6.0]).unwrap());
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.value(c).shape, Shape::new(3, 2));
        let s = t.slice_rows(c, 1, 3).unwrap();
        let s = t.scale(s, 2.0).unwrap();
        let l = t.sum(s).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
    }
}
