//! Reverse-mode automatic differentiation over a recorded graph.
//!
//! A [`Tape`] is built once per minibatch: leaves (parameters, constants,
//! named placeholders) are added first, then operations, each referring to
//! earlier nodes only, so node order is a topological order. [`Tape::forward`]
//! evaluates every node in order and [`Tape::backward`] sweeps them once in
//! reverse.
//!
//! Detached nodes (constants, [`Tape::detach`] and anything computed only
//! from detached nodes) never pass adjoint to their inputs. This is how the
//! clean distribution `p(y|x, θ̂)` and the perturbation `r` are held fixed
//! when differentiating the objective with respect to θ.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::divergence::{entropy_row, kl_row, log_softmax_row, nll_row, softmax_row};
use crate::tensor::{gemm, Tensor};
use crate::{Error, Result};

static BACKPROPS: AtomicU64 = AtomicU64::new(0);

/// Number of reverse sweeps run by every tape in this process.
pub fn total_backprops() -> u64 {
    BACKPROPS.load(Ordering::Relaxed)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Detach(Var),
    KlRows { target: Var, logits: Var },
    Nll { logits: Var, labels: Vec<usize> },
    EntropyRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::Detach(_) => "detach",
            Op::KlRows { .. } => "kl_rows",
            Op::Nll { .. } => "nll",
            Op::EntropyRows(_) => "entropy_rows",
        }
    }

    fn inputs(&self) -> ([Option<Var>; 2], usize) {
        use Op::*;
        match *self {
            Input(_) | Leaf | Constant => ([None, None], 0),
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => ([Some(a), Some(b)], 2),
            KlRows { target, logits } => ([Some(target), Some(logits)], 2),
            Scale(a, _) | Relu(a) | Tanh(a) | Exp(a) | Ln(a) | Square(a) | Sum(a) | Mean(a)
            | SumRows(a) | LogSoftmax(a) | Softmax(a) | Detach(a) | EntropyRows(a) => {
                ([Some(a), None], 1)
            }
            Nll { logits, .. } => ([Some(logits), None], 1),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    adjoint: Option<Tensor>,
    detached: bool,
}

/// A recorded computation graph with per-node values and adjoints.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_calls: u64,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweeps run on this tape.
    pub fn backward_calls(&self) -> u64 {
        self.backward_calls
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.node(v)?.shape)
    }

    pub fn is_detached(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.detached)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.node(v)?.value.as_ref().ok_or(Error::NotEvaluated)
    }

    /// Adjoint left on a node by the last reverse sweep, if it was reached.
    pub fn adjoint(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|n| n.adjoint.as_ref())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> Var {
        let detached = match &op {
            Op::Constant | Op::Detach(_) => true,
            Op::Input(_) | Op::Leaf => false,
            other => {
                let (ins, n) = other.inputs();
                ins[..n].iter().all(|v| self.nodes[v.unwrap().0].detached)
            }
        };
        self.nodes.push(Node { op, shape, value, adjoint: None, detached });
        Var(self.nodes.len() - 1)
    }

    /// Named placeholder, fed at [`Tape::forward`].
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Var {
        self.push(Op::Input(name.to_string()), shape.to_vec(), None)
    }

    /// Differentiable leaf with a fixed value (parameters, perturbations).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Leaf, shape, Some(value))
    }

    /// Detached leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    fn shape_of(&self, v: Var) -> Result<Vec<usize>> {
        Ok(self.node(v)?.shape.clone())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa != sb {
            return Err(mismatch(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(sa)
    }

    fn matrix_shape(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape_of(a)?;
        if s.len() != 2 {
            return Err(mismatch(op, format!("expected a matrix, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_shape("matmul", a)?;
        let (k2, n) = self.matrix_shape("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{}, {}] x [{}, {}]", m, k, k2, n)));
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n], None))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_shape("add_bias", a)?;
        let sb = self.shape_of(bias)?;
        if sb != [n] {
            return Err(mismatch("add_bias", format!("bias {:?} for width {}", sb, n)));
        }
        Ok(self.push(Op::AddBias(a, bias), vec![m, n], None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s, None))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s, None))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.shape_of(a)?;
        Ok(self.push(Op::Scale(a, c), s, None))
    }

    fn unary(&mut self, op: Op, a: Var) -> Result<Var> {
        let s = self.shape_of(a)?;
        Ok(self.push(op, s, None))
    }

    /// ReLU; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a), a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp(a), a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Ln(a), a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square(a), a)
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Detach(a), a)
    }

    /// Sum of all entries (scalar).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.node(a)?;
        Ok(self.push(Op::Sum(a), Vec::new(), None))
    }

    /// Mean of all entries (scalar).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.node(a)?.shape.iter().product::<usize>() == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(self.push(Op::Mean(a), Vec::new(), None))
    }

    /// `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.matrix_shape("sum_rows", a)?;
        Ok(self.push(Op::SumRows(a), vec![m], None))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.matrix_shape("log_softmax", a)?;
        self.unary(Op::LogSoftmax(a), a)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.matrix_shape("softmax", a)?;
        self.unary(Op::Softmax(a), a)
    }

    /// Per-row `KL[target_i || softmax(logits_i)]`, shape `[m]`.
    ///
    /// `target` holds probabilities and must be detached: the divergence is
    /// only ever differentiated through its second argument.
    pub fn kl_rows(&mut self, target: Var, logits: Var) -> Result<Var> {
        let (m, _) = self.matrix_shape("kl_rows", logits)?;
        self.same_shape("kl_rows", target, logits)?;
        if !self.node(target)?.detached {
            return Err(Error::AttachedTarget);
        }
        Ok(self.push(Op::KlRows { target, logits }, vec![m], None))
    }

    /// Mean one-hot negative log-likelihood (scalar).
    pub fn nll(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_shape("nll", logits)?;
        if labels.len() != m {
            return Err(mismatch("nll", format!("{} labels for {} rows", labels.len(), m)));
        }
        if m == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n) {
            return Err(Error::LabelOutOfRange { label: y, classes: n });
        }
        Ok(self.push(Op::Nll { logits, labels: labels.to_vec() }, Vec::new(), None))
    }

    /// Per-row entropy of `softmax(logits)`, shape `[m]`.
    pub fn entropy_rows(&mut self, logits: Var) -> Result<Var> {
        let (m, _) = self.matrix_shape("entropy_rows", logits)?;
        Ok(self.push(Op::EntropyRows(logits), vec![m], None))
    }

    /// Evaluates every node in order. Placeholders are looked up in `feeds`.
    pub fn forward(&mut self, feeds: &[(&str, &Tensor)]) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {
                    let v = self.nodes[i].value.as_ref().ok_or(Error::NotEvaluated)?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite { node: i, op: self.nodes[i].op.name() });
                    }
                    continue;
                }
                Op::Input(name) => {
                    let (_, t) = feeds
                        .iter()
                        .find(|(n, _)| n == name)
                        .ok_or_else(|| Error::MissingInput(name.clone()))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(mismatch(
                            "forward",
                            format!("input `{}` expects {:?}, fed {:?}", name, self.nodes[i].shape, t.shape()),
                        ));
                    }
                    (*t).clone()
                }
                _ => self.eval_node(i)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i, op: self.nodes[i].op.name() });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.as_ref().expect("inputs are evaluated before their consumers")
    }

    fn eval_node(&self, i: usize) -> Result<Tensor> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let map = |a: Var, f: &dyn Fn(f64) -> f64| self.val(a).map(f);
        let out = match &node.op {
            Op::Input(_) | Op::Leaf | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, n) = (shape[0], shape[1]);
                let k = self.nodes[a.0].shape[1];
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, 1.0, self.val(*a).data(), false, self.val(*b).data(), false, 0.0, &mut out);
                Tensor::new(shape, out)?
            }
            Op::AddBias(a, b) => {
                let mut out = self.val(*a).clone();
                let bias = self.val(*b).data();
                for r in 0..out.rows() {
                    for (o, &bv) in out.row_mut(r).iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Add(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x + y)?,
            Op::Sub(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x - y)?,
            Op::Mul(a, b) => self.val(*a).zip_map(self.val(*b), |x, y| x * y)?,
            Op::Scale(a, c) => {
                let c = *c;
                map(*a, &move |x| c * x)
            }
            Op::Relu(a) => map(*a, &|x| if x > 0.0 { x } else { 0.0 }),
            Op::Tanh(a) => map(*a, &libm::tanh),
            Op::Exp(a) => map(*a, &libm::exp),
            Op::Ln(a) => map(*a, &libm::log),
            Op::Square(a) => map(*a, &|x| x * x),
            Op::Detach(a) => self.val(*a).clone(),
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let v = self.val(*a);
                Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
            }
            Op::SumRows(a) => {
                let v = self.val(*a);
                Tensor::vector((0..v.rows()).map(|r| v.row(r).iter().sum()).collect())
            }
            Op::LogSoftmax(a) => {
                let v = self.val(*a);
                let mut out = Tensor::zeros(v.shape());
                for r in 0..v.rows() {
                    log_softmax_row(v.row(r), out.row_mut(r));
                }
                out
            }
            Op::Softmax(a) => {
                let v = self.val(*a);
                let mut out = Tensor::zeros(v.shape());
                for r in 0..v.rows() {
                    softmax_row(v.row(r), out.row_mut(r));
                }
                out
            }
            Op::KlRows { target, logits } => {
                let (p, q) = (self.val(*target), self.val(*logits));
                Tensor::vector((0..q.rows()).map(|r| kl_row(p.row(r), q.row(r))).collect())
            }
            Op::Nll { logits, labels } => {
                let q = self.val(*logits);
                let total: f64 = labels
                    .iter()
                    .enumerate()
                    .map(|(r, &y)| nll_row(q.row(r), y))
                    .sum();
                Tensor::scalar(total / labels.len() as f64)
            }
            Op::EntropyRows(a) => {
                let v = self.val(*a);
                Tensor::vector((0..v.rows()).map(|r| entropy_row(v.row(r))).collect())
            }
        };
        Ok(out)
    }

    /// Gradient of the scalar `output` with respect to each node in `wrt`.
    ///
    /// Runs exactly one reverse sweep and bumps the backprop counters by one.
    /// Nodes in `wrt` that `output` does not depend on get zero gradients.
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out_node = self.node(output)?;
        for w in wrt {
            self.node(*w)?;
        }
        if out_node.value.is_none() {
            return Err(Error::NotEvaluated);
        }
        if out_node.shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar { node: output.0, shape: out_node.shape.clone() });
        }
        self.backward_calls += 1;
        BACKPROPS.fetch_add(1, Ordering::Relaxed);

        let n = output.0 + 1;
        let mut needs = vec![false; self.nodes.len()];
        for w in wrt {
            needs[w.0] = true;
        }
        for i in 0..n {
            let node = &self.nodes[i];
            if needs[i] || node.detached {
                continue;
            }
            let (ins, k) = node.op.inputs();
            needs[i] = ins[..k].iter().any(|v| needs[v.unwrap().0]);
        }

        for node in self.nodes.iter_mut() {
            node.adjoint = None;
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        if needs[output.0] {
            adj[output.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].detached {
                self.propagate(i, &g, &needs, &mut adj);
            }
            let shape = self.nodes[i].shape.clone();
            self.nodes[i].adjoint = Some(Tensor::new(shape, g)?);
        }

        Ok(wrt
            .iter()
            .map(|w| {
                self.nodes[w.0]
                    .adjoint
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[w.0].shape))
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f64], needs: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !needs[v.0] {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot => *slot = Some(contrib),
            }
        };
        let elementwise = |f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            g.iter().enumerate().map(|(j, &gj)| f(j, gj)).collect()
        };
        match &node.op {
            Op::Input(_) | Op::Leaf | Op::Constant | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                if needs[a.0] {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g, false, self.val(*b).data(), true, 0.0, &mut da);
                    send(*a, da);
                }
                if needs[b.0] {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, self.val(*a).data(), true, g, false, 0.0, &mut db);
                    send(*b, db);
                }
            }
            Op::AddBias(a, b) => {
                if needs[b.0] {
                    let n = node.shape[1];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    send(*b, db);
                }
                send(*a, g.to_vec());
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if needs[a.0] {
                    send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if needs[b.0] {
                    send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| c * v).collect()),
            Op::Relu(a) => {
                let x = self.val(*a).data();
                send(*a, elementwise(&|j, gj| if x[j] > 0.0 { gj } else { 0.0 }));
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().unwrap().data();
                send(*a, elementwise(&|j, gj| gj * (1.0 - y[j] * y[j])));
            }
            Op::Exp(a) => {
                let y = node.value.as_ref().unwrap().data();
                send(*a, elementwise(&|j, gj| gj * y[j]));
            }
            Op::Ln(a) => {
                let x = self.val(*a).data();
                send(*a, elementwise(&|j, gj| gj / x[j]));
            }
            Op::Square(a) => {
                let x = self.val(*a).data();
                send(*a, elementwise(&|j, gj| 2.0 * x[j] * gj));
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[a.0].shape.iter().product()]),
            Op::Mean(a) => {
                let len: usize = self.nodes[a.0].shape.iter().product();
                send(*a, vec![g[0] / len as f64; len]);
            }
            Op::SumRows(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut d = Vec::with_capacity(m * n);
                for &gr in g.iter().take(m) {
                    d.extend(core::iter::repeat(gr).take(n));
                }
                send(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.as_ref().unwrap();
                let n = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let gr = &g[r * n..(r + 1) * n];
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = gr[j] - libm::exp(y.row(r)[j]) * gs;
                    }
                }
                send(*a, d);
            }
            Op::Softmax(a) => {
                let s = node.value.as_ref().unwrap();
                let n = s.cols();
                let mut d = vec![0.0; s.len()];
                for r in 0..s.rows() {
                    let gr = &g[r * n..(r + 1) * n];
                    let sr = s.row(r);
                    let inner: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = sr[j] * (gr[j] - inner);
                    }
                }
                send(*a, d);
            }
            Op::KlRows { target, logits } => {
                // d/dq of -sum_j p_j log_softmax(q)_j = softmax(q) * sum(p) - p
                let (p, q) = (self.val(*target), self.val(*logits));
                let n = q.cols();
                let mut d = vec![0.0; q.len()];
                let mut s = vec![0.0; n];
                for r in 0..q.rows() {
                    softmax_row(q.row(r), &mut s);
                    let pr = p.row(r);
                    let mass: f64 = pr.iter().sum();
                    for j in 0..n {
                        d[r * n + j] = g[r] * (s[j] * mass - pr[j]);
                    }
                }
                send(*logits, d);
            }
            Op::Nll { logits, labels } => {
                let q = self.val(*logits);
                let n = q.cols();
                let scale = g[0] / labels.len() as f64;
                let mut d = vec![0.0; q.len()];
                for (r, &y) in labels.iter().enumerate() {
                    softmax_row(q.row(r), &mut d[r * n..(r + 1) * n]);
                    d[r * n + y] -= 1.0;
                    d[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= scale);
                }
                send(*logits, d);
            }
            Op::EntropyRows(a) => {
                // dH/dx_j = -s_j (log s_j + H)
                let x = self.val(*a);
                let h = node.value.as_ref().unwrap().data();
                let n = x.cols();
                let mut d = vec![0.0; x.len()];
                let mut ls = vec![0.0; n];
                for r in 0..x.rows() {
                    log_softmax_row(x.row(r), &mut ls);
                    for j in 0..n {
                        let s = libm::exp(ls[j]);
                        d[r * n + j] = -g[r] * s * (ls[j] + h[r]);
                    }
                }
                send(*a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_scalar_square() {
        let mut t = Tape::new();
        let x = t.input("x", &[]);
        let y = t.square(x).unwrap();
        t.forward(&[("x", &Tensor::scalar(3.0))]).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[9.0]);
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
        assert_eq!(t.backward_calls(), 1);
    }

    #[test]
    fn identity_graph() {
        let mut t = Tape::new();
        let x = t.input("x", &[2]);
        t.forward(&[("x", &Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        assert_eq!(t.value(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_sum_value_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0, -3.0, 4.0]));
        let r = t.relu(x).unwrap();
        let y = t.sum(r).unwrap();
        t.forward(&[]).unwrap();
        assert_eq!(t.value(y).unwrap().data(), &[6.0]);
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0]));
        let r = t.relu(x).unwrap();
        let y = t.sum(r).unwrap();
        t.forward(&[]).unwrap();
        assert_eq!(t.backward(y, &[x]).unwrap()[0].data(), &[0.0]);
    }

    #[test]
    fn detached_copy_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.5, -2.0]));
        let xd = t.detach(x).unwrap();
        let s = t.square(xd).unwrap();
        let y = t.sum(s).unwrap();
        t.forward(&[]).unwrap();
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert!(t.is_detached(y).unwrap());
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = t.square(x).unwrap();
        assert_eq!(t.backward(y, &[x]), Err(Error::NotEvaluated));
        t.forward(&[]).unwrap();
        assert!(matches!(t.backward(y, &[x]), Err(Error::NotScalar { .. })));
        let s = t.sum(y).unwrap();
        t.forward(&[]).unwrap();
        assert_eq!(t.backward(s, &[Var(99)]), Err(Error::UnknownNode(99)));
    }

    #[test]
    fn forward_errors() {
        let mut t = Tape::new();
        let x = t.input("x", &[2]);
        let y = t.ln(x).unwrap();
        let _ = t.sum(y).unwrap();
        assert_eq!(t.forward(&[]), Err(Error::MissingInput("x".into())));
        assert!(matches!(
            t.forward(&[("x", &Tensor::vector(vec![1.0]))]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert_eq!(
            t.forward(&[("x", &Tensor::vector(vec![1.0, -1.0]))]),
            Err(Error::NonFinite { node: 1, op: "ln" })
        );
    }

    #[test]
    fn kl_requires_detached_target() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap());
        let q = t.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        assert_eq!(t.kl_rows(p, q), Err(Error::AttachedTarget));
        let pd = t.detach(p).unwrap();
        assert!(t.kl_rows(pd, q).is_ok());
    }

    #[test]
    fn counter_counts_each_sweep() {
        let before = total_backprops();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.square(x).unwrap();
        t.forward(&[]).unwrap();
        t.backward(y, &[x]).unwrap();
        t.backward(y, &[x]).unwrap();
        assert_eq!(t.backward_calls(), 2);
        assert!(total_backprops() >= before + 2);
    }

    #[test]
    fn matmul_bias_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[3, 4]));
        let b = t.leaf(Tensor::zeros(&[5, 2]));
        assert!(t.matmul(a, b).is_err());
        let w = t.leaf(Tensor::zeros(&[4, 2]));
        let y = t.matmul(a, w).unwrap();
        assert_eq!(t.shape(y).unwrap(), &[3, 2]);
        let bias = t.leaf(Tensor::zeros(&[3]));
        assert!(t.add_bias(y, bias).is_err());
    }
}
