//! Reverse-mode differentiation over a flat op tape.
//!
//! Every forward pass (training or not) records primitive ops onto a
//! [`Tape`]; [`Tape::backward`] replays them once in reverse and returns
//! accumulated gradients for every registered parameter. The primitive
//! set is deliberately small: matrix-vector product, elementwise add /
//! mul / relu / tanh / sigmoid / log, stable softmax, concat, sum and
//! scalar scaling (by a constant or by a tracked 1x1 scalar).
//!
//! Intermediate values are always column vectors; matrices appear only
//! as leaves (parameters). Gradients accumulate by summation where a
//! value fans out. Every op checks its output for NaN/Inf and fails
//! hard, so a numeric problem surfaces at the op that produced it.

use crate::error::{GbError, Result};
use crate::tensor::{softmax_slice, Tensor};

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<u32> },
    MatVec(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat(Box<[Var]>),
    Sum(Var),
    Log(Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients indexed by parameter id, as registered via [`Tape::param`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Gradients { slots: (0..n_params).map(|_| None).collect() }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, param: usize) -> Option<&Tensor> {
        self.slots.get(param).and_then(|s| s.as_ref())
    }

    /// `self += other * scale`, used to reduce per-image gradients.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize_with(other.slots.len(), || None);
        }
        for (dst, src) in self.slots.iter_mut().zip(other.slots.iter()) {
            if let Some(s) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.as_mut_slice().iter_mut().zip(s.as_slice()) {
                            *a += b * scale;
                        }
                    }
                    None => {
                        let mut t = s.clone();
                        for v in t.as_mut_slice() {
                            *v *= scale;
                        }
                        *dst = Some(t);
                    }
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(GbError::Numeric(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.push_unchecked(value, op)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if id > u32::MAX as usize {
            return Err(GbError::State("tape overflow".into()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(id as u32))
    }

    /// Untracked input value.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf { param: None })
    }

    /// Tracked parameter; `id` indexes the returned [`Gradients`].
    pub fn param(&mut self, id: usize, value: &Tensor) -> Result<Var> {
        self.n_params = self.n_params.max(id + 1);
        self.push(value.clone(), Op::Leaf { param: Some(id as u32) })
    }

    /// Matrix-vector product.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let value = self.value(w).matvec(self.value(x))?;
        self.push(value, Op::MatVec(w, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(GbError::Shape(format!(
                "add: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let data: Vec<f64> = ta.as_slice().iter().zip(tb.as_slice()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(value, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() || ta.cols() != tb.cols() {
            return Err(GbError::Shape(format!(
                "mul: {}x{} vs {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let data: Vec<f64> = ta.as_slice().iter().zip(tb.as_slice()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Stable softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_vector() || ta.is_empty() {
            return Err(GbError::Shape(format!(
                "softmax expects a non-empty vector, got {}x{}",
                ta.rows(),
                ta.cols()
            )));
        }
        let value = Tensor::vector(&softmax_slice(ta.as_slice()));
        self.push(value, Op::Softmax(a))
    }

    /// Concatenate vectors into one column vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GbError::Shape("concat of zero vectors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(GbError::Shape("concat expects vectors".into()));
            }
            data.extend_from_slice(t.as_slice());
        }
        let value = Tensor::vector(&data);
        self.push(value, Op::Concat(parts.to_vec().into_boxed_slice()))
    }

    /// Sum of all entries, as a 1x1 scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).as_slice().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Scale by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Scale a vector by a tracked 1x1 scalar.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(GbError::Shape(format!(
                "scale_by expects a 1x1 scalar, got {}x{}",
                ts.rows(),
                ts.cols()
            )));
        }
        let c = ts.as_slice()[0];
        let value = self.map(a, |v| v * c);
        self.push(value, Op::ScaleVar(a, s))
    }

    /// Dot product of two vectors: `sum(mul(a, b))`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// Extract entry `idx` of a vector as a 1x1 scalar (one-hot mul + sum).
    pub fn pick(&mut self, v: Var, idx: usize) -> Result<Var> {
        let t = self.value(v);
        if !t.is_vector() || idx >= t.rows() {
            return Err(GbError::Shape(format!(
                "pick index {} out of range for {}x{}",
                idx,
                t.rows(),
                t.cols()
            )));
        }
        let mut onehot = vec![0.0; t.rows()];
        onehot[idx] = 1.0;
        let oh = self.constant(Tensor::vector(&onehot))?;
        self.dot(v, oh)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        let data: Vec<f64> = t.as_slice().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(t.rows(), t.cols(), data).expect("same shape")
    }

    /// Reverse sweep from a scalar loss. Consumes the recorded graph:
    /// the tape is cleared afterwards and all `Var`s become invalid.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(GbError::State("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(GbError::State(format!(
                "loss must be a 1x1 scalar, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.idx()] = Some(vec![1.0]);

        let mut out = Gradients::zeros(self.n_params);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Split borrows: the node being visited vs its inputs.
            let (op, value) = {
                let node = &self.nodes[i];
                (node.op.clone(), &node.value)
            };
            match op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        let slot = &mut out.slots[pid as usize];
                        match slot {
                            Some(t) => {
                                for (a, b) in t.as_mut_slice().iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            None => {
                                let mut t = Tensor::zeros(value.rows(), value.cols());
                                t.as_mut_slice().copy_from_slice(&g);
                                *slot = Some(t);
                            }
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (wt, xt) = (&self.nodes[w.idx()].value, &self.nodes[x.idx()].value);
                    let (rows, cols) = (wt.rows(), wt.cols());
                    {
                        let gw = slot_mut(&mut grads, w, rows * cols);
                        for r in 0..rows {
                            let gr = g[r];
                            let dst = &mut gw[r * cols..(r + 1) * cols];
                            for (d, xv) in dst.iter_mut().zip(xt.as_slice()) {
                                *d += gr * xv;
                            }
                        }
                    }
                    {
                        let gx = slot_mut(&mut grads, x, cols);
                        for r in 0..rows {
                            let gr = g[r];
                            let row = &wt.as_slice()[r * cols..(r + 1) * cols];
                            for (d, wv) in gx.iter_mut().zip(row) {
                                *d += gr * wv;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, &g);
                    accumulate(&mut grads, b, &g);
                }
                Op::Mul(a, b) => {
                    let other_b: Vec<f64> = self.nodes[b.idx()]
                        .value
                        .as_slice()
                        .iter()
                        .zip(&g)
                        .map(|(v, gg)| v * gg)
                        .collect();
                    let other_a: Vec<f64> = self.nodes[a.idx()]
                        .value
                        .as_slice()
                        .iter()
                        .zip(&g)
                        .map(|(v, gg)| v * gg)
                        .collect();
                    accumulate(&mut grads, a, &other_b);
                    accumulate(&mut grads, b, &other_a);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = self.nodes[a.idx()]
                        .value
                        .as_slice()
                        .iter()
                        .zip(&g)
                        .map(|(&x, gg)| if x > 0.0 { *gg } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::Tanh(a) => {
                    let da: Vec<f64> =
                        value.as_slice().iter().zip(&g).map(|(&y, gg)| gg * (1.0 - y * y)).collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::Sigmoid(a) => {
                    let da: Vec<f64> =
                        value.as_slice().iter().zip(&g).map(|(&y, gg)| gg * y * (1.0 - y)).collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::Softmax(a) => {
                    let y = value.as_slice();
                    let gy: f64 = y.iter().zip(&g).map(|(yv, gg)| yv * gg).sum();
                    let da: Vec<f64> =
                        y.iter().zip(&g).map(|(yv, gg)| yv * (gg - gy)).collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts.iter() {
                        let len = self.nodes[p.idx()].value.len();
                        accumulate(&mut grads, p, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.idx()].value.len();
                    let da = vec![g[0]; len];
                    accumulate(&mut grads, a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = self.nodes[a.idx()]
                        .value
                        .as_slice()
                        .iter()
                        .zip(&g)
                        .map(|(&x, gg)| gg / x)
                        .collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|gg| gg * c).collect();
                    accumulate(&mut grads, a, &da);
                }
                Op::ScaleVar(a, s) => {
                    let sv = self.nodes[s.idx()].value.as_slice()[0];
                    let da: Vec<f64> = g.iter().map(|gg| gg * sv).collect();
                    let ds: f64 = self.nodes[a.idx()]
                        .value
                        .as_slice()
                        .iter()
                        .zip(&g)
                        .map(|(v, gg)| v * gg)
                        .sum();
                    accumulate(&mut grads, a, &da);
                    accumulate(&mut grads, s, &[ds]);
                }
            }
        }

        self.nodes.clear();
        Ok(out)
    }
}

fn slot_mut(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    let slot = &mut grads[v.idx()];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    let slot = slot_mut(grads, v, delta.len());
    for (a, b) in slot.iter_mut().zip(delta) {
        *a += b;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::MatVec(..) => "matvec",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softmax(..) => "softmax",
        Op::Concat(..) => "concat",
        Op::Sum(..) => "sum",
        Op::Log(..) => "log",
        Op::Scale(..) => "scale",
        Op::ScaleVar(..) => "scale_by",
    }
}
