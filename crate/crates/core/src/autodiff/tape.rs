//! Append-only Wengert tape. Values are computed eagerly as operations are
//! recorded; `backward` replays the records in reverse insertion order.

use super::array::{self, Array};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    LogSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the root or is
    /// not tracked.
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = array::matmul(self.value(a), self.value(b))?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise add; `b` may be one row broadcast over `a`'s batch dim.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = array::add(self.value(a), self.value(b))?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = array::mul(self.value(a), self.value(b))?;
        let rg = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies by a constant; recorded as `mul` against a constant leaf.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = Array::full(self.value(a).shape().to_vec(), factor);
        let c = self.constant(c);
        self.mul(a, c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = array::relu(self.value(a));
        let rg = self.tracked(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = array::log_softmax(self.value(a))?;
        let rg = self.tracked(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let out = array::gather_rows(self.value(a), index)?;
        let rg = self.tracked(a);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = array::sum(self.value(a));
        let rg = self.tracked(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = array::mean(self.value(a));
        let rg = self.tracked(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Reverse sweep from a scalar root. Deterministic for a fixed tape.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Array>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Array::full(root_value.shape().to_vec(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            // leaves keep their accumulated adjoint
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = adj[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let g = array::matmul_transpose_b(&upstream, self.value(*b));
                        accumulate(&mut adj, *a, g);
                    }
                    if self.tracked(*b) {
                        let g = array::matmul_transpose_a(self.value(*a), &upstream);
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*b) {
                        let b_shape = self.value(*b).shape();
                        let g = if b_shape == upstream.shape() {
                            upstream.clone()
                        } else {
                            reduce_rows(&upstream, b_shape)
                        };
                        accumulate(&mut adj, *b, g);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, upstream.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, array::mul(&upstream, self.value(*b))?);
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, array::mul(&upstream, self.value(*a))?);
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = upstream;
                    for (g, &x) in g.data_mut().iter_mut().zip(x.data()) {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::LogSoftmax(a) => {
                    // dx = dy - softmax * rowsum(dy)
                    let y = &node.value;
                    let c = y.cols();
                    let mut g = upstream;
                    for (g_row, y_row) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: f64 = g_row.iter().sum();
                        for (g, &ly) in g_row.iter_mut().zip(y_row) {
                            *g -= ly.exp() * s;
                        }
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::GatherRows(a, index) => {
                    let shape = self.value(*a).shape().to_vec();
                    let c = shape[1];
                    let mut g = Array::zeros(shape);
                    for (i, (&j, &u)) in index.iter().zip(upstream.data()).enumerate() {
                        g.data_mut()[i * c + j] = u;
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut adj, *a, Array::full(shape, upstream.item()));
                }
                Op::Mean(a) => {
                    let v = self.value(*a);
                    let g = Array::full(v.shape().to_vec(), upstream.item() / v.len() as f64);
                    accumulate(&mut adj, *a, g);
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Array>], v: Var, g: Array) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn reduce_rows(upstream: &Array, target_shape: &[usize]) -> Array {
    let mut out = Array::zeros(target_shape.to_vec());
    let c = out.len();
    for row in upstream.data().chunks(c) {
        for (o, x) in out.data_mut().iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}
