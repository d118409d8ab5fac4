//! Reverse-mode tape over dense tensors.
//!
//! Every backward formula is itself expressed through taped primitive ops, so
//! the result of a reverse sweep stays differentiable. That is what lets the
//! norm-preservation regularizer take gradients of an input-cotangent product
//! with respect to network parameters in one extra sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::param::{Param, ParamId};
use crate::autodiff::tensor::Tensor;
use crate::real::Real;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(u32);

impl Val {
    #[inline]
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// Ray/sample segment layout in CSR form: `offsets.len() == count + 1`.
#[derive(Clone, Debug)]
pub struct Segments {
    offsets: Vec<u32>,
}

impl Segments {
    pub fn from_lens(lens: &[usize]) -> Arc<Self> {
        let mut offsets = Vec::with_capacity(lens.len() + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for &l in lens {
            acc += l as u32;
            offsets.push(acc);
        }
        Arc::new(Segments { offsets })
    }

    pub fn count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap() as usize
    }

    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r] as usize..self.offsets[r + 1] as usize
    }
}

#[derive(Clone, Copy, Debug)]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Relu,
    Softplus,
    Sigmoid,
}

#[derive(Clone, Copy, Debug)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub enum MatKind {
    /// `[n,k] x [k,m] -> [n,m]`
    Nn,
    /// `a^T b`: `[n,k] x [n,m] -> [k,m]`
    Tn,
    /// `a b^T`: `[n,m] x [p,m] -> [n,p]`
    Nt,
}

#[derive(Clone, Debug)]
pub enum Op<T: Real> {
    Leaf,
    Unary { kind: UnaryKind, x: Val },
    LeakyRelu { x: Val, alpha: T },
    AddScalar { x: Val, c: T },
    MulScalar { x: Val, c: T },
    Clamp { x: Val, lo: T, hi: T },
    MaxScalar { x: Val, c: T },
    Binary { kind: BinKind, a: Val, b: Val },
    Matmul { kind: MatKind, a: Val, b: Val },
    AddRow { x: Val, row: Val },
    MulCol { x: Val, col: Val },
    SumAll { x: Val },
    SumRows { x: Val },
    SumCols { x: Val },
    BroadcastScalar { x: Val, shape: Vec<usize> },
    BroadcastRow { row: Val, n: usize },
    BroadcastCol { col: Val, m: usize },
    ConcatCols { parts: Vec<Val> },
    SliceCols { x: Val, start: usize, len: usize },
    PadCols { x: Val, start: usize, total: usize },
    Reshape { x: Val, shape: Vec<usize> },
    Gather { table: Val, idx: Arc<Vec<u32>> },
    ScatterAdd { values: Val, idx: Arc<Vec<u32>>, rows: usize },
    SegSum { x: Val, segs: Arc<Segments> },
    SegBroadcast { x: Val, segs: Arc<Segments> },
    /// Exclusive prefix sum within each segment.
    SegCumsumExcl { x: Val, segs: Arc<Segments> },
    /// Exclusive suffix sum within each segment.
    SegSuffixExcl { x: Val, segs: Arc<Segments> },
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Val> {
        match self {
            Op::Leaf => vec![],
            Op::Unary { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::AddScalar { x, .. }
            | Op::MulScalar { x, .. }
            | Op::Clamp { x, .. }
            | Op::MaxScalar { x, .. }
            | Op::SumAll { x }
            | Op::SumRows { x }
            | Op::SumCols { x }
            | Op::BroadcastScalar { x, .. }
            | Op::SliceCols { x, .. }
            | Op::PadCols { x, .. }
            | Op::Reshape { x, .. }
            | Op::SegSum { x, .. }
            | Op::SegBroadcast { x, .. }
            | Op::SegCumsumExcl { x, .. }
            | Op::SegSuffixExcl { x, .. } => vec![*x],
            Op::BroadcastRow { row, .. } => vec![*row],
            Op::BroadcastCol { col, .. } => vec![*col],
            Op::Binary { a, b, .. } | Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::AddRow { x, row } => vec![*x, *row],
            Op::MulCol { x, col } => vec![*x, *col],
            Op::ConcatCols { parts } => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::ScatterAdd { values, .. } => vec![*values],
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    param_of: Option<ParamId>,
}

/// Structural record of which table rows a parameter was gathered with.
#[derive(Default)]
struct TouchState {
    dense: bool,
    rows: Vec<Arc<Vec<u32>>>,
}

/// Gradient of one parameter. `rows: None` means every scalar was touched;
/// `rows: Some(..)` restricts the touched set to the listed table rows.
#[derive(Clone, Debug)]
pub struct GradEntry<T> {
    pub tensor: Tensor<T>,
    pub rows: Option<Vec<u32>>,
}

/// Gradients keyed by parameter id. Parameters the tape never reached are
/// simply absent, which is the marker the lazy optimizer consumes.
pub type GradMap<T> = HashMap<ParamId, GradEntry<T>>;

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Val>,
    touches: HashMap<ParamId, TouchState>,
    sweeps: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            touches: HashMap::new(),
            sweeps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of reverse sweeps performed so far.
    pub fn sweep_count(&self) -> usize {
        self.sweeps
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    /// Drops all recorded nodes, keeping the sweep counter.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_leaves.clear();
        self.touches.clear();
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Val {
        // Structural use tracking for the lazy optimizer: any non-gather use
        // of a parameter leaf makes its gradient dense.
        match &op {
            Op::Leaf => {}
            Op::Gather { table, idx } => {
                if let Some(pid) = self.nodes[table.index()].param_of {
                    if self.nodes[table.index()].requires_grad {
                        self.touches.entry(pid).or_default().rows.push(idx.clone());
                    }
                }
            }
            other => {
                for v in other.inputs() {
                    if let Some(pid) = self.nodes[v.index()].param_of {
                        if self.nodes[v.index()].requires_grad {
                            self.touches.entry(pid).or_default().dense = true;
                        }
                    }
                }
            }
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { op, value, requires_grad, param_of: None });
        Val(id)
    }

    /// Constant leaf: carries no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Val {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Val {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable input leaf (used for input-cotangent products).
    pub fn input(&mut self, value: Tensor<T>) -> Val {
        self.push(Op::Leaf, value, true)
    }

    /// Registers a parameter leaf (cached per id, so repeated uses share one
    /// node and gradient contributions accumulate).
    pub fn param(&mut self, p: &Param<T>, trainable: bool) -> Val {
        if let Some(&v) = self.param_leaves.get(&p.id) {
            return v;
        }
        let v = self.push(Op::Leaf, p.value.clone(), trainable);
        self.nodes[v.index()].param_of = Some(p.id);
        self.param_leaves.insert(p.id, v);
        v
    }

    /// Re-enters a value as a constant, severing gradient flow.
    pub fn detach(&mut self, v: Val) -> Val {
        let t = self.nodes[v.index()].value.clone();
        self.constant(t)
    }

    fn rg(&self, v: Val) -> bool {
        self.nodes[v.index()].requires_grad
    }

    // ---- elementwise -----------------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: Val) -> Val {
        let value = kernels::unary(kind, self.value(x));
        let rg = self.rg(x);
        self.push(Op::Unary { kind, x }, value, rg)
    }

    pub fn neg(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn ln(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Ln, x)
    }
    pub fn sqrt(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn abs(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn relu(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn softplus(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn sigmoid(&mut self, x: Val) -> Val {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Val, alpha: T) -> Val {
        let value = self.value(x).map(|v| if v >= T::zero() { v } else { v * alpha });
        let rg = self.rg(x);
        self.push(Op::LeakyRelu { x, alpha }, value, rg)
    }

    pub fn add_scalar(&mut self, x: Val, c: T) -> Val {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(Op::AddScalar { x, c }, value, rg)
    }

    pub fn mul_scalar(&mut self, x: Val, c: T) -> Val {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(Op::MulScalar { x, c }, value, rg)
    }

    pub fn clamp(&mut self, x: Val, lo: T, hi: T) -> Val {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, value, rg)
    }

    pub fn max_scalar(&mut self, x: Val, c: T) -> Val {
        let value = self.value(x).map(|v| v.max(c));
        let rg = self.rg(x);
        self.push(Op::MaxScalar { x, c }, value, rg)
    }

    fn binary(&mut self, kind: BinKind, a: Val, b: Val) -> Val {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise {:?} on mismatched shapes",
            kind
        );
        let value = kernels::binary(kind, self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Binary { kind, a, b }, value, rg)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Val, b: Val) -> Val {
        self.binary(BinKind::Div, a, b)
    }

    // ---- linear algebra ---------------------------------------------------

    fn matmul_any(&mut self, kind: MatKind, a: Val, b: Val) -> Val {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = kernels::matmul(kind, ta, tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul { kind, a, b }, value, rg)
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Val {
        self.matmul_any(MatKind::Nn, a, b)
    }
    pub fn matmul_tn(&mut self, a: Val, b: Val) -> Val {
        self.matmul_any(MatKind::Tn, a, b)
    }
    pub fn matmul_nt(&mut self, a: Val, b: Val) -> Val {
        self.matmul_any(MatKind::Nt, a, b)
    }

    pub fn add_row(&mut self, x: Val, row: Val) -> Val {
        let value = kernels::add_row(self.value(x), self.value(row));
        let rg = self.rg(x) || self.rg(row);
        self.push(Op::AddRow { x, row }, value, rg)
    }

    pub fn mul_col(&mut self, x: Val, col: Val) -> Val {
        let value = kernels::mul_col(self.value(x), self.value(col));
        let rg = self.rg(x) || self.rg(col);
        self.push(Op::MulCol { x, col }, value, rg)
    }

    // ---- reductions and broadcasts -----------------------------------------

    pub fn sum_all(&mut self, x: Val) -> Val {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), rg)
    }

    pub fn sum_rows(&mut self, x: Val) -> Val {
        let value = kernels::sum_rows(self.value(x));
        let rg = self.rg(x);
        self.push(Op::SumRows { x }, value, rg)
    }

    pub fn sum_cols(&mut self, x: Val) -> Val {
        let value = kernels::sum_cols(self.value(x));
        let rg = self.rg(x);
        self.push(Op::SumCols { x }, value, rg)
    }

    pub fn broadcast_scalar(&mut self, x: Val, shape: Vec<usize>) -> Val {
        let v = self.value(x).item();
        let rg = self.rg(x);
        let value = Tensor::full(shape.clone(), v);
        self.push(Op::BroadcastScalar { x, shape }, value, rg)
    }

    pub fn broadcast_row(&mut self, row: Val, n: usize) -> Val {
        let r = self.value(row);
        let m = r.numel();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(r.data());
        }
        let rg = self.rg(row);
        self.push(Op::BroadcastRow { row, n }, Tensor::matrix(n, m, data), rg)
    }

    pub fn broadcast_col(&mut self, col: Val, m: usize) -> Val {
        let c = self.value(col);
        let n = c.numel();
        let mut data = Vec::with_capacity(n * m);
        for &v in c.iter() {
            data.extend(std::iter::repeat(v).take(m));
        }
        let rg = self.rg(col);
        self.push(Op::BroadcastCol { col, m }, Tensor::matrix(n, m, data), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat_cols on empty part list");
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![T::zero(); n * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            let m = t.cols();
            for i in 0..n {
                data[i * total + off..i * total + off + m]
                    .copy_from_slice(&t.data()[i * m..(i + 1) * m]);
            }
            off += m;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, Tensor::matrix(n, total, data), rg)
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> Val {
        let value = kernels::slice_cols(self.value(x), start, len);
        let rg = self.rg(x);
        self.push(Op::SliceCols { x, start, len }, value, rg)
    }

    pub fn pad_cols(&mut self, x: Val, start: usize, total: usize) -> Val {
        let value = kernels::pad_cols(self.value(x), start, total);
        let rg = self.rg(x);
        self.push(Op::PadCols { x, start, total }, value, rg)
    }

    pub fn reshape(&mut self, x: Val, shape: Vec<usize>) -> Val {
        let t = self.value(x);
        assert_eq!(
            t.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            t.shape(),
            shape
        );
        let value = Tensor::new(shape.clone(), t.data().to_vec());
        let rg = self.rg(x);
        self.push(Op::Reshape { x, shape }, value, rg)
    }

    // ---- gather / scatter ---------------------------------------------------

    pub fn gather(&mut self, table: Val, idx: Arc<Vec<u32>>) -> Val {
        let value = kernels::gather(self.value(table), &idx);
        let rg = self.rg(table);
        self.push(Op::Gather { table, idx }, value, rg)
    }

    pub fn scatter_add(&mut self, values: Val, idx: Arc<Vec<u32>>, rows: usize) -> Val {
        let value = kernels::scatter_add(self.value(values), &idx, rows);
        let rg = self.rg(values);
        self.push(Op::ScatterAdd { values, idx, rows }, value, rg)
    }

    // ---- segment ops ---------------------------------------------------------

    pub fn seg_sum(&mut self, x: Val, segs: Arc<Segments>) -> Val {
        let value = kernels::seg_sum(self.value(x), &segs);
        let rg = self.rg(x);
        self.push(Op::SegSum { x, segs }, value, rg)
    }

    pub fn seg_broadcast(&mut self, x: Val, segs: Arc<Segments>) -> Val {
        let value = kernels::seg_broadcast(self.value(x), &segs);
        let rg = self.rg(x);
        self.push(Op::SegBroadcast { x, segs }, value, rg)
    }

    pub fn seg_cumsum_excl(&mut self, x: Val, segs: Arc<Segments>) -> Val {
        let value = kernels::seg_cumsum_excl(self.value(x), &segs);
        let rg = self.rg(x);
        self.push(Op::SegCumsumExcl { x, segs }, value, rg)
    }

    pub fn seg_suffix_excl(&mut self, x: Val, segs: Arc<Segments>) -> Val {
        let value = kernels::seg_suffix_excl(self.value(x), &segs);
        let rg = self.rg(x);
        self.push(Op::SegSuffixExcl { x, segs }, value, rg)
    }

    // ---- reverse sweeps --------------------------------------------------------

    fn accumulate(&mut self, adj: &mut [Option<Val>], target: Val, contrib: Val) {
        adj[target.index()] = Some(match adj[target.index()] {
            Some(prev) => self.add(prev, contrib),
            None => contrib,
        });
    }

    /// One reverse sweep from the seeded outputs. Returns the adjoint handle
    /// per pre-sweep node. Adjoints are tape values: differentiating through
    /// them is what provides second-order gradients.
    fn vjp_sweep(&mut self, seeds: &[(Val, Val)]) -> Vec<Option<Val>> {
        self.sweeps += 1;
        let frontier = self.nodes.len();
        let mut adj: Vec<Option<Val>> = vec![None; frontier];
        let mut max_id = 0usize;
        for &(out, cot) in seeds {
            assert_eq!(
                self.shape(out),
                self.shape(cot),
                "cotangent shape must match output shape"
            );
            self.accumulate(&mut adj, out, cot);
            max_id = max_id.max(out.index());
        }
        for id in (0..=max_id).rev() {
            let Some(cot) = adj[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(Val(id as u32), cot, &mut adj);
        }
        adj
    }

    fn backward_node(&mut self, node: Val, cot: Val, adj: &mut [Option<Val>]) {
        let op = self.nodes[node.index()].op.clone();
        match op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                if !self.rg(x) {
                    return;
                }
                let contrib = match kind {
                    UnaryKind::Neg => self.neg(cot),
                    UnaryKind::Exp => self.mul(cot, node),
                    UnaryKind::Ln => self.div(cot, x),
                    UnaryKind::Sqrt => {
                        // Guarded so a zero input yields zero, not NaN.
                        let g = self.max_scalar(node, T::grad_guard());
                        let den = self.mul_scalar(g, T::from_f64c(2.0));
                        self.div(cot, den)
                    }
                    UnaryKind::Abs => {
                        // Right-derivative convention: sign(0) = +1.
                        let sign = self.value(x).map(|v| {
                            if v >= T::zero() {
                                T::one()
                            } else {
                                -T::one()
                            }
                        });
                        let s = self.constant(sign);
                        self.mul(cot, s)
                    }
                    UnaryKind::Relu => {
                        let mask = self
                            .value(x)
                            .map(|v| if v >= T::zero() { T::one() } else { T::zero() });
                        let m = self.constant(mask);
                        self.mul(cot, m)
                    }
                    UnaryKind::Softplus => {
                        let s = self.sigmoid(x);
                        self.mul(cot, s)
                    }
                    UnaryKind::Sigmoid => {
                        let neg = self.neg(node);
                        let om = self.add_scalar(neg, T::one());
                        let d = self.mul(node, om);
                        self.mul(cot, d)
                    }
                };
                self.accumulate(adj, x, contrib);
            }
            Op::LeakyRelu { x, alpha } => {
                if !self.rg(x) {
                    return;
                }
                let mask = self
                    .value(x)
                    .map(|v| if v >= T::zero() { T::one() } else { alpha });
                let m = self.constant(mask);
                let contrib = self.mul(cot, m);
                self.accumulate(adj, x, contrib);
            }
            Op::AddScalar { x, .. } => {
                if self.rg(x) {
                    self.accumulate(adj, x, cot);
                }
            }
            Op::MulScalar { x, c } => {
                if self.rg(x) {
                    let contrib = self.mul_scalar(cot, c);
                    self.accumulate(adj, x, contrib);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(x) {
                    let mask = self.value(x).map(|v| {
                        if v > lo && v < hi {
                            T::one()
                        } else {
                            T::zero()
                        }
                    });
                    let m = self.constant(mask);
                    let contrib = self.mul(cot, m);
                    self.accumulate(adj, x, contrib);
                }
            }
            Op::MaxScalar { x, c } => {
                if self.rg(x) {
                    let mask = self
                        .value(x)
                        .map(|v| if v >= c { T::one() } else { T::zero() });
                    let m = self.constant(mask);
                    let contrib = self.mul(cot, m);
                    self.accumulate(adj, x, contrib);
                }
            }
            Op::Binary { kind, a, b } => {
                match kind {
                    BinKind::Add => {
                        if self.rg(a) {
                            self.accumulate(adj, a, cot);
                        }
                        if self.rg(b) {
                            self.accumulate(adj, b, cot);
                        }
                    }
                    BinKind::Sub => {
                        if self.rg(a) {
                            self.accumulate(adj, a, cot);
                        }
                        if self.rg(b) {
                            let n = self.neg(cot);
                            self.accumulate(adj, b, n);
                        }
                    }
                    BinKind::Mul => {
                        if self.rg(a) {
                            let c = self.mul(cot, b);
                            self.accumulate(adj, a, c);
                        }
                        if self.rg(b) {
                            let c = self.mul(cot, a);
                            self.accumulate(adj, b, c);
                        }
                    }
                    BinKind::Div => {
                        if self.rg(a) {
                            let c = self.div(cot, b);
                            self.accumulate(adj, a, c);
                        }
                        if self.rg(b) {
                            // d(a/b)/db = -out/b
                            let co = self.mul(cot, node);
                            let cb = self.div(co, b);
                            let c = self.neg(cb);
                            self.accumulate(adj, b, c);
                        }
                    }
                }
            }
            Op::Matmul { kind, a, b } => match kind {
                MatKind::Nn => {
                    if self.rg(a) {
                        let c = self.matmul_nt(cot, b);
                        self.accumulate(adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.matmul_tn(a, cot);
                        self.accumulate(adj, b, c);
                    }
                }
                MatKind::Tn => {
                    if self.rg(a) {
                        let c = self.matmul_nt(b, cot);
                        self.accumulate(adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.matmul(a, cot);
                        self.accumulate(adj, b, c);
                    }
                }
                MatKind::Nt => {
                    if self.rg(a) {
                        let c = self.matmul(cot, b);
                        self.accumulate(adj, a, c);
                    }
                    if self.rg(b) {
                        let c = self.matmul_tn(cot, a);
                        self.accumulate(adj, b, c);
                    }
                }
            },
            Op::AddRow { x, row } => {
                if self.rg(x) {
                    self.accumulate(adj, x, cot);
                }
                if self.rg(row) {
                    let c = self.sum_rows(cot);
                    self.accumulate(adj, row, c);
                }
            }
            Op::MulCol { x, col } => {
                if self.rg(x) {
                    let c = self.mul_col(cot, col);
                    self.accumulate(adj, x, c);
                }
                if self.rg(col) {
                    let p = self.mul(cot, x);
                    let c = self.sum_cols(p);
                    self.accumulate(adj, col, c);
                }
            }
            Op::SumAll { x } => {
                if self.rg(x) {
                    let shape = self.shape(x).to_vec();
                    let c = self.broadcast_scalar(cot, shape);
                    self.accumulate(adj, x, c);
                }
            }
            Op::SumRows { x } => {
                if self.rg(x) {
                    let n = self.value(x).rows();
                    let c = self.broadcast_row(cot, n);
                    self.accumulate(adj, x, c);
                }
            }
            Op::SumCols { x } => {
                if self.rg(x) {
                    let m = self.value(x).cols();
                    let c = self.broadcast_col(cot, m);
                    self.accumulate(adj, x, c);
                }
            }
            Op::BroadcastScalar { x, .. } => {
                if self.rg(x) {
                    let c = self.sum_all(cot);
                    self.accumulate(adj, x, c);
                }
            }
            Op::BroadcastRow { row, .. } => {
                if self.rg(row) {
                    let c = self.sum_rows(cot);
                    self.accumulate(adj, row, c);
                }
            }
            Op::BroadcastCol { col, .. } => {
                if self.rg(col) {
                    let c = self.sum_cols(cot);
                    self.accumulate(adj, col, c);
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in &parts {
                    let m = self.value(p).cols();
                    if self.rg(p) {
                        let c = self.slice_cols(cot, off, m);
                        self.accumulate(adj, p, c);
                    }
                    off += m;
                }
            }
            Op::SliceCols { x, start, .. } => {
                if self.rg(x) {
                    let total = self.value(x).cols();
                    let c = self.pad_cols(cot, start, total);
                    self.accumulate(adj, x, c);
                }
            }
            Op::PadCols { x, start, .. } => {
                if self.rg(x) {
                    let len = self.value(x).cols();
                    let c = self.slice_cols(cot, start, len);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Reshape { x, .. } => {
                if self.rg(x) {
                    let shape = self.shape(x).to_vec();
                    let c = self.reshape(cot, shape);
                    self.accumulate(adj, x, c);
                }
            }
            Op::Gather { table, idx } => {
                if self.rg(table) {
                    let rows = self.value(table).rows();
                    let c = self.scatter_add(cot, idx, rows);
                    self.accumulate(adj, table, c);
                }
            }
            Op::ScatterAdd { values, idx, .. } => {
                if self.rg(values) {
                    let c = self.gather(cot, idx);
                    self.accumulate(adj, values, c);
                }
            }
            Op::SegSum { x, segs } => {
                if self.rg(x) {
                    let c = self.seg_broadcast(cot, segs);
                    self.accumulate(adj, x, c);
                }
            }
            Op::SegBroadcast { x, segs } => {
                if self.rg(x) {
                    let c = self.seg_sum(cot, segs);
                    self.accumulate(adj, x, c);
                }
            }
            Op::SegCumsumExcl { x, segs } => {
                if self.rg(x) {
                    let c = self.seg_suffix_excl(cot, segs);
                    self.accumulate(adj, x, c);
                }
            }
            Op::SegSuffixExcl { x, segs } => {
                if self.rg(x) {
                    let c = self.seg_cumsum_excl(cot, segs);
                    self.accumulate(adj, x, c);
                }
            }
        }
    }

    /// Gradient of a scalar with respect to the given parameters. Parameters
    /// the tape never reached are absent from the map.
    pub fn gradient<'a>(
        &mut self,
        scalar: Val,
        params: impl IntoIterator<Item = &'a Param<T>>,
    ) -> GradMap<T>
    where
        T: 'a,
    {
        assert!(
            self.value(scalar).is_scalar(),
            "gradient target must be a scalar, got shape {:?}",
            self.shape(scalar)
        );
        let one = self.constant_scalar(T::one());
        let adj = self.vjp_sweep(&[(scalar, one)]);
        let mut map = GradMap::new();
        for p in params {
            let Some(&leaf) = self.param_leaves.get(&p.id) else { continue };
            let Some(a) = adj[leaf.index()] else { continue };
            let rows = match self.touches.get(&p.id) {
                Some(t) if !t.dense => {
                    let mut rows: Vec<u32> =
                        t.rows.iter().flat_map(|r| r.iter().copied()).collect();
                    rows.sort_unstable();
                    rows.dedup();
                    Some(rows)
                }
                _ => None,
            };
            map.insert(p.id, GradEntry { tensor: self.value(a).clone(), rows });
        }
        map
    }

    /// Input-cotangent product `J_x^T e` in a single reverse sweep. The result
    /// is a tape value and stays differentiable with respect to anything the
    /// evaluation of `output` depended on.
    pub fn input_vjp(&mut self, output: Val, input: Val, cotangent: Val) -> Val {
        let adj = self.vjp_sweep(&[(output, cotangent)]);
        match adj[input.index()] {
            Some(v) => v,
            None => {
                let shape = self.shape(input).to_vec();
                self.constant(Tensor::zeros(shape))
            }
        }
    }

    /// Recomputes every node from its recorded inputs and checks bit-identity
    /// with the stored values. Exercised by determinism tests.
    pub fn replay_check(&self) -> bool {
        for (id, node) in self.nodes.iter().enumerate() {
            let recomputed = match &node.op {
                Op::Leaf => continue,
                op => self.recompute(op),
            };
            if recomputed != self.nodes[id].value {
                return false;
            }
        }
        true
    }

    fn recompute(&self, op: &Op<T>) -> Tensor<T> {
        match op {
            Op::Leaf => unreachable!(),
            Op::Unary { kind, x } => kernels::unary(*kind, self.value(*x)),
            Op::LeakyRelu { x, alpha } => {
                let a = *alpha;
                self.value(*x).map(|v| if v >= T::zero() { v } else { v * a })
            }
            Op::AddScalar { x, c } => {
                let c = *c;
                self.value(*x).map(|v| v + c)
            }
            Op::MulScalar { x, c } => {
                let c = *c;
                self.value(*x).map(|v| v * c)
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.value(*x).map(|v| v.max(lo).min(hi))
            }
            Op::MaxScalar { x, c } => {
                let c = *c;
                self.value(*x).map(|v| v.max(c))
            }
            Op::Binary { kind, a, b } => kernels::binary(*kind, self.value(*a), self.value(*b)),
            Op::Matmul { kind, a, b } => kernels::matmul(*kind, self.value(*a), self.value(*b)),
            Op::AddRow { x, row } => kernels::add_row(self.value(*x), self.value(*row)),
            Op::MulCol { x, col } => kernels::mul_col(self.value(*x), self.value(*col)),
            Op::SumAll { x } => Tensor::scalar(self.value(*x).iter().copied().sum()),
            Op::SumRows { x } => kernels::sum_rows(self.value(*x)),
            Op::SumCols { x } => kernels::sum_cols(self.value(*x)),
            Op::BroadcastScalar { x, shape } => Tensor::full(shape.clone(), self.value(*x).item()),
            Op::BroadcastRow { row, n } => {
                let r = self.value(*row);
                let mut data = Vec::with_capacity(n * r.numel());
                for _ in 0..*n {
                    data.extend_from_slice(r.data());
                }
                Tensor::matrix(*n, r.numel(), data)
            }
            Op::BroadcastCol { col, m } => {
                let c = self.value(*col);
                let mut data = Vec::with_capacity(c.numel() * m);
                for &v in c.iter() {
                    data.extend(std::iter::repeat(v).take(*m));
                }
                Tensor::matrix(c.numel(), *m, data)
            }
            Op::ConcatCols { parts } => {
                let n = self.value(parts[0]).rows();
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = vec![T::zero(); n * total];
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let m = t.cols();
                    for i in 0..n {
                        data[i * total + off..i * total + off + m]
                            .copy_from_slice(&t.data()[i * m..(i + 1) * m]);
                    }
                    off += m;
                }
                Tensor::matrix(n, total, data)
            }
            Op::SliceCols { x, start, len } => kernels::slice_cols(self.value(*x), *start, *len),
            Op::PadCols { x, start, total } => kernels::pad_cols(self.value(*x), *start, *total),
            Op::Reshape { x, shape } => {
                Tensor::new(shape.clone(), self.value(*x).data().to_vec())
            }
            Op::Gather { table, idx } => kernels::gather(self.value(*table), idx),
            Op::ScatterAdd { values, idx, rows } => {
                kernels::scatter_add(self.value(*values), idx, *rows)
            }
            Op::SegSum { x, segs } => kernels::seg_sum(self.value(*x), segs),
            Op::SegBroadcast { x, segs } => kernels::seg_broadcast(self.value(*x), segs),
            Op::SegCumsumExcl { x, segs } => kernels::seg_cumsum_excl(self.value(*x), segs),
            Op::SegSuffixExcl { x, segs } => kernels::seg_suffix_excl(self.value(*x), segs),
        }
    }
}

mod kernels {
    use super::{BinKind, MatKind, Segments, UnaryKind};
    use crate::autodiff::tensor::Tensor;
    use crate::real::Real;

    pub fn unary<T: Real>(kind: UnaryKind, x: &Tensor<T>) -> Tensor<T> {
        match kind {
            UnaryKind::Neg => x.map(|v| -v),
            UnaryKind::Exp => x.map(|v| v.exp()),
            UnaryKind::Ln => x.map(|v| v.ln()),
            UnaryKind::Sqrt => x.map(|v| v.sqrt()),
            UnaryKind::Abs => x.map(|v| v.abs()),
            UnaryKind::Relu => x.map(|v| if v >= T::zero() { v } else { T::zero() }),
            UnaryKind::Softplus => x.map(softplus),
            UnaryKind::Sigmoid => x.map(sigmoid),
        }
    }

    /// Numerically stable log(1 + e^x).
    fn softplus<T: Real>(v: T) -> T {
        if v > T::zero() {
            v + (T::one() + (-v).exp()).ln()
        } else {
            (T::one() + v.exp()).ln()
        }
    }

    fn sigmoid<T: Real>(v: T) -> T {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    }

    pub fn binary<T: Real>(kind: BinKind, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        let f: fn(T, T) -> T = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        let data = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn dot<T: Real>(a: &[T], b: &[T]) -> T {
        let mut acc = [T::zero(); 8];
        let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (xa, xb) in ca.zip(cb) {
            for l in 0..8 {
                acc[l] = acc[l] + xa[l] * xb[l];
            }
        }
        let mut s = T::zero();
        for l in 0..8 {
            s = s + acc[l];
        }
        for (x, y) in ra.iter().zip(rb) {
            s = s + *x * *y;
        }
        s
    }

    pub fn matmul<T: Real>(kind: MatKind, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        match kind {
            MatKind::Nn => {
                let (n, k) = (a.rows(), a.cols());
                let (kb, m) = (b.rows(), b.cols());
                assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
                let mut c = vec![T::zero(); n * m];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..n {
                    let crow = &mut c[i * m..(i + 1) * m];
                    for (kk, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
                        let brow = &bd[kk * m..(kk + 1) * m];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
                Tensor::matrix(n, m, c)
            }
            MatKind::Tn => {
                let (n, k) = (a.rows(), a.cols());
                let (nb, m) = (b.rows(), b.cols());
                assert_eq!(n, nb, "matmul_tn outer dims {n} vs {nb}");
                let mut c = vec![T::zero(); k * m];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..n {
                    let arow = &ad[i * k..(i + 1) * k];
                    let brow = &bd[i * m..(i + 1) * m];
                    for (kk, &av) in arow.iter().enumerate() {
                        let crow = &mut c[kk * m..(kk + 1) * m];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
                Tensor::matrix(k, m, c)
            }
            MatKind::Nt => {
                let (n, m) = (a.rows(), a.cols());
                let (p, mb) = (b.rows(), b.cols());
                assert_eq!(m, mb, "matmul_nt inner dims {m} vs {mb}");
                let mut c = vec![T::zero(); n * p];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..n {
                    let arow = &ad[i * m..(i + 1) * m];
                    for jp in 0..p {
                        c[i * p + jp] = dot(arow, &bd[jp * m..(jp + 1) * m]);
                    }
                }
                Tensor::matrix(n, p, c)
            }
        }
    }

    pub fn add_row<T: Real>(x: &Tensor<T>, row: &Tensor<T>) -> Tensor<T> {
        let (n, m) = (x.rows(), x.cols());
        assert_eq!(row.numel(), m, "add_row length {} vs {m}", row.numel());
        let mut data = x.data().to_vec();
        let rd = row.data();
        for i in 0..n {
            for (v, &r) in data[i * m..(i + 1) * m].iter_mut().zip(rd) {
                *v = *v + r;
            }
        }
        Tensor::matrix(n, m, data)
    }

    pub fn mul_col<T: Real>(x: &Tensor<T>, col: &Tensor<T>) -> Tensor<T> {
        let (n, m) = (x.rows(), x.cols());
        assert_eq!(col.numel(), n, "mul_col length {} vs {n}", col.numel());
        let mut data = x.data().to_vec();
        for (i, &s) in col.iter().enumerate() {
            for v in data[i * m..(i + 1) * m].iter_mut() {
                *v = *v * s;
            }
        }
        Tensor::matrix(n, m, data)
    }

    pub fn sum_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        let (n, m) = (x.rows(), x.cols());
        let mut out = vec![T::zero(); m];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(&x.data()[i * m..(i + 1) * m]) {
                *o = *o + v;
            }
        }
        Tensor::vector(out)
    }

    pub fn sum_cols<T: Real>(x: &Tensor<T>) -> Tensor<T> {
        let (n, m) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(x.data()[i * m..(i + 1) * m].iter().copied().sum());
        }
        Tensor::vector(out)
    }

    pub fn slice_cols<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
        let (n, m) = (x.rows(), x.cols());
        assert!(start + len <= m, "slice_cols {start}+{len} > {m}");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&x.data()[i * m + start..i * m + start + len]);
        }
        Tensor::matrix(n, len, data)
    }

    pub fn pad_cols<T: Real>(x: &Tensor<T>, start: usize, total: usize) -> Tensor<T> {
        let (n, m) = (x.rows(), x.cols());
        assert!(start + m <= total, "pad_cols {start}+{m} > {total}");
        let mut data = vec![T::zero(); n * total];
        for i in 0..n {
            data[i * total + start..i * total + start + m]
                .copy_from_slice(&x.data()[i * m..(i + 1) * m]);
        }
        Tensor::matrix(n, total, data)
    }

    pub fn gather<T: Real>(table: &Tensor<T>, idx: &[u32]) -> Tensor<T> {
        let (rows, f) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            let i = i as usize;
            assert!(i < rows, "gather index {i} out of {rows} rows");
            data.extend_from_slice(&table.data()[i * f..(i + 1) * f]);
        }
        Tensor::matrix(idx.len(), f, data)
    }

    pub fn scatter_add<T: Real>(values: &Tensor<T>, idx: &[u32], rows: usize) -> Tensor<T> {
        let (n, f) = (values.rows(), values.cols());
        assert_eq!(n, idx.len(), "scatter_add count {n} vs {}", idx.len());
        let mut data = vec![T::zero(); rows * f];
        for (i, &r) in idx.iter().enumerate() {
            let r = r as usize;
            for (o, &v) in data[r * f..(r + 1) * f]
                .iter_mut()
                .zip(&values.data()[i * f..(i + 1) * f])
            {
                *o = *o + v;
            }
        }
        Tensor::matrix(rows, f, data)
    }

    pub fn seg_sum<T: Real>(x: &Tensor<T>, segs: &Segments) -> Tensor<T> {
        assert_eq!(x.numel(), segs.total(), "seg_sum length mismatch");
        let mut out = Vec::with_capacity(segs.count());
        for r in 0..segs.count() {
            out.push(x.data()[segs.range(r)].iter().copied().sum());
        }
        Tensor::vector(out)
    }

    pub fn seg_broadcast<T: Real>(x: &Tensor<T>, segs: &Segments) -> Tensor<T> {
        assert_eq!(x.numel(), segs.count(), "seg_broadcast count mismatch");
        let mut out = Vec::with_capacity(segs.total());
        for (r, &v) in x.iter().enumerate() {
            out.extend(std::iter::repeat(v).take(segs.range(r).len()));
        }
        Tensor::vector(out)
    }

    pub fn seg_cumsum_excl<T: Real>(x: &Tensor<T>, segs: &Segments) -> Tensor<T> {
        assert_eq!(x.numel(), segs.total(), "seg_cumsum length mismatch");
        let mut out = Vec::with_capacity(segs.total());
        for r in 0..segs.count() {
            let mut acc = T::zero();
            for &v in &x.data()[segs.range(r)] {
                out.push(acc);
                acc = acc + v;
            }
        }
        Tensor::vector(out)
    }

    pub fn seg_suffix_excl<T: Real>(x: &Tensor<T>, segs: &Segments) -> Tensor<T> {
        assert_eq!(x.numel(), segs.total(), "seg_suffix length mismatch");
        let mut out = vec![T::zero(); segs.total()];
        for r in 0..segs.count() {
            let range = segs.range(r);
            let mut acc = T::zero();
            for i in range.rev() {
                out[i] = acc;
                acc = acc + x.data()[i];
            }
        }
        Tensor::vector(out)
    }
}
