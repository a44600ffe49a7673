//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to replay its adjoint. Nodes are only ever appended, so the
//! node order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{NdError, Result};
use crate::tensor::{axis_extents, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Recip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Unary(UnaryKind, Var),
    ClampMin(Var, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    /// Flat input index chosen for each output element.
    Max(Var, Vec<usize>),
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single forward pass worth of recorded operations.
///
/// A tape is owned by one thread; independent tapes share nothing and can be
/// driven from different threads at the same time.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `param` leaf, if a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad mirrors value shape"))
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Accumulates d`out`/d`leaf` into every reachable `param` leaf.
    ///
    /// Calling it again without [`Tape::zero_grad`] adds to the existing
    /// gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let out_shape = self.shape(out).to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(NdError::Shape {
                op: "backward",
                lhs: out_shape,
                rhs: vec![1],
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(vec![1.0]);
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();

        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_updates.push((idx, g)),
                op => self.propagate(op, &node.value, &g, &mut adj),
            }
        }

        for (idx, g) in leaf_updates {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let bd = bv.data();
                    self.accumulate(adj, *a, |da| {
                        if n == 1 && k > 0 {
                            for (drow, &gi) in da.chunks_exact_mut(k).zip(g) {
                                drow.iter_mut().zip(bd).for_each(|(d, b)| *d += gi * b);
                            }
                            return;
                        }
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let ad = av.data();
                    self.accumulate(adj, *b, |db| {
                        if n == 1 && k > 0 {
                            for (arow, &gi) in ad.chunks_exact(k).zip(g) {
                                db.iter_mut().zip(arow).for_each(|(d, a)| *d += gi * a);
                            }
                            return;
                        }
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = ad[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                drow.iter_mut().zip(grow).for_each(|(d, x)| *d += a_ip * x);
                            }
                        }
                    });
                }
            }
            Op::Binary(kind, lhs, rhs) => self.binary_backward(*kind, *lhs, *rhs, out, g, adj),
            Op::AddScalar(a) => self.accumulate(adj, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }),
            Op::MulScalar(a, c) => self.accumulate(adj, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
            }),
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                self.accumulate(adj, *a, |da| {
                    for i in 0..da.len() {
                        let local = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / x[i],
                            UnaryKind::Abs => {
                                if x[i] > 0.0 {
                                    1.0
                                } else if x[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Square => 2.0 * x[i],
                            UnaryKind::Sqrt => 0.5 / y[i],
                            UnaryKind::Recip => -y[i] * y[i],
                        };
                        da[i] += local * g[i];
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                self.accumulate(adj, *a, |da| {
                    for i in 0..da.len() {
                        if x[i] > *floor {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let scale = match op {
                    Op::Mean(..) => {
                        let count = match axis {
                            Some(ax) => shape[*ax],
                            None => shape.iter().product(),
                        };
                        1.0 / count as f64
                    }
                    _ => 1.0,
                };
                self.accumulate(adj, *a, |da| match axis {
                    None => da.iter_mut().for_each(|d| *d += g[0] * scale),
                    Some(ax) => {
                        let (outer, len, inner) = axis_extents(&shape, *ax);
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    da[(o * len + k) * inner + i] += g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::Max(a, argmax) => self.accumulate(adj, *a, |da| {
                for (o, &src) in argmax.iter().enumerate() {
                    da[src] += g[o];
                }
            }),
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = y.iter().zip(g).map(|(p, x)| p * x).sum();
                self.accumulate(adj, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(adj, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(adj, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }),
            Op::Concat(inputs, axis) => {
                let out_shape = out.shape();
                let (outer, total, inner) = axis_extents(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    self.accumulate(adj, *v, |da| {
                        for o in 0..outer {
                            for k in 0..len {
                                let src = (o * total + offset + k) * inner;
                                let dst = (o * len + k) * inner;
                                for i in 0..inner {
                                    da[dst + i] += g[src + i];
                                }
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, total, inner) = axis_extents(&in_shape, *axis);
                let len = out.shape()[*axis];
                self.accumulate(adj, *input, |da| {
                    for o in 0..outer {
                        for k in 0..len {
                            let dst = (o * total + start + k) * inner;
                            let src = (o * len + k) * inner;
                            for i in 0..inner {
                                da[dst + i] += g[src + i];
                            }
                        }
                    }
                });
            }
        }
    }

    fn binary_backward(
        &self,
        kind: BinaryKind,
        lhs: Var,
        rhs: Var,
        out: &Tensor,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let l = self.value(lhs).data();
        let r = self.value(rhs).data();
        let n = out.numel();
        let li = |i: usize| if l.len() == 1 { 0 } else { i };
        let ri = |i: usize| if r.len() == 1 { 0 } else { i };
        let y = out.data();
        if self.requires_grad(lhs) {
            self.accumulate(adj, lhs, |dl| {
                for i in 0..n {
                    let local = match kind {
                        BinaryKind::Add | BinaryKind::Sub => 1.0,
                        BinaryKind::Mul => r[ri(i)],
                        BinaryKind::Div => 1.0 / r[ri(i)],
                    };
                    dl[li(i)] += local * g[i];
                }
            });
        }
        if self.requires_grad(rhs) {
            self.accumulate(adj, rhs, |dr| {
                for i in 0..n {
                    let local = match kind {
                        BinaryKind::Add => 1.0,
                        BinaryKind::Sub => -1.0,
                        BinaryKind::Mul => l[li(i)],
                        BinaryKind::Div => -y[i] / r[ri(i)],
                    };
                    dr[ri(i)] += local * g[i];
                }
            });
        }
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }
}
