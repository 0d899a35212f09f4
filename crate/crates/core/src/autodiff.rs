//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded into a [`Graph`] arena during the forward pass and
//! replayed in reverse by [`Graph::backward`]. A [`Tensor`] is a cheap handle
//! (graph reference + node index); all storage lives in the arena.

use std::cell::RefCell;
use std::fmt;

/// Result alias for tensor operations.
pub type TensorResult<T> = Result<T, TensorError>;

/// Errors emitted by tensor kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Two operands had incompatible shapes for the requested operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A reshape changed the element count.
    BadReshape { from: Vec<usize>, to: Vec<usize> },
    /// `backward` was called on a tensor with more than one element.
    NonScalarBackward { shape: Vec<usize> },
    /// A constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// A row index was out of bounds for the tensor's first dimension.
    RowOutOfBounds { rows: usize, index: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            TensorError::BadReshape { from, to } => {
                write!(f, "reshape: cannot view {from:?} as {to:?} (element counts differ)")
            }
            TensorError::NonScalarBackward { shape } => {
                write!(f, "backward requires a single-element tensor, got shape {shape:?}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape (expected {expected})")
            }
            TensorError::RowOutOfBounds { rows, index } => {
                write!(f, "row index {index} out of bounds for {rows} rows")
            }
        }
    }
}

impl std::error::Error for TensorError {}

type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Silu(NodeId),
    Abs(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SqNorm(NodeId),
    Norm(NodeId),
    /// Select one row of a matrix (used for embedding lookup).
    Row(NodeId, usize),
    /// Broadcast-add a row vector to every row of a matrix.
    AddRow(NodeId, NodeId),
    /// Concatenate two matrices with equal row counts along columns.
    ConcatCols(NodeId, NodeId),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Arena holding one forward computation. Dropped wholesale when the pass
/// (and any backward over it) is finished.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major matrix multiply: a is (m,k), b is (k,n), result (m,n).
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, data, grad: None, requires_grad, op });
        nodes.len() - 1
    }

    /// Register a leaf tensor.
    pub fn leaf(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> TensorResult<Tensor<'_>> {
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength { expected: numel(&shape), got: data.len() });
        }
        let id = self.push(shape, data, requires_grad, Op::Leaf);
        Ok(Tensor { graph: self, id })
    }

    /// Register a non-differentiable constant.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Tensor<'_>> {
        self.leaf(shape, data, false)
    }

    /// Scalar constant with shape `[1]`.
    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.leaf(vec![1], vec![v], false).expect("scalar leaf")
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a single-element output. Seeds the output gradient
    /// with 1 and accumulates into every `requires_grad` node that
    /// participated. Repeated calls without [`Graph::zero_grads`] accumulate.
    pub fn backward(&self, output: Tensor<'_>) -> TensorResult<()> {
        {
            let nodes = self.nodes.borrow();
            let out = &nodes[output.id];
            if numel(&out.shape) != 1 {
                return Err(TensorError::NonScalarBackward { shape: out.shape.clone() });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let n = nodes.len();
        // Local adjoint buffers for this pass; merged into persistent grads at
        // the end so repeated backward calls accumulate.
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[output.id] = Some(vec![1.0]);

        for i in (0..=output.id).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[i].requires_grad {
                continue;
            }
            let op = nodes[i].op.clone();
            let send = |nodes: &Vec<Node>, adj: &mut Vec<Option<Vec<f64>>>, to: NodeId, contrib: Vec<f64>| {
                if !nodes[to].requires_grad {
                    return;
                }
                match &mut adj[to] {
                    Some(buf) => {
                        for (b, c) in buf.iter_mut().zip(&contrib) {
                            *b += c;
                        }
                    }
                    None => adj[to] = Some(contrib),
                }
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(&nodes, &mut adj, a, g.clone());
                    send(&nodes, &mut adj, b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(&nodes, &mut adj, a, g.clone());
                    send(&nodes, &mut adj, b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(&nodes[b].data).map(|(gv, bv)| gv * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&nodes[a].data).map(|(gv, av)| gv * av).collect();
                    send(&nodes, &mut adj, a, da);
                    send(&nodes, &mut adj, b, db);
                }
                Op::Scale(a, c) => {
                    send(&nodes, &mut adj, a, g.iter().map(|v| v * c).collect());
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let nn = nodes[b].shape[1];
                    // dA = G . B^T, dB = A^T . G
                    let bt = transpose(&nodes[b].data, k, nn);
                    let da = matmul_raw(&g, &bt, m, nn, k);
                    let at = transpose(&nodes[a].data, m, k);
                    let db = matmul_raw(&at, &g, k, m, nn);
                    send(&nodes, &mut adj, a, da);
                    send(&nodes, &mut adj, b, db);
                }
                Op::Silu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[a].data)
                        .map(|(gv, &x)| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    send(&nodes, &mut adj, a, da);
                }
                Op::Abs(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[a].data)
                        .map(|(gv, &x)| gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                        .collect();
                    send(&nodes, &mut adj, a, da);
                }
                Op::Reshape(a) => {
                    send(&nodes, &mut adj, a, g.clone());
                }
                Op::Sum(a) => {
                    let len = nodes[a].data.len();
                    send(&nodes, &mut adj, a, vec![g[0]; len]);
                }
                Op::Mean(a) => {
                    let len = nodes[a].data.len();
                    send(&nodes, &mut adj, a, vec![g[0] / len as f64; len]);
                }
                Op::SqNorm(a) => {
                    let da: Vec<f64> = nodes[a].data.iter().map(|&x| 2.0 * x * g[0]).collect();
                    send(&nodes, &mut adj, a, da);
                }
                Op::Norm(a) => {
                    let norm = nodes[i].data[0];
                    let da: Vec<f64> = if norm > 0.0 {
                        nodes[a].data.iter().map(|&x| g[0] * x / norm).collect()
                    } else {
                        vec![0.0; nodes[a].data.len()]
                    };
                    send(&nodes, &mut adj, a, da);
                }
                Op::Row(a, r) => {
                    let cols = nodes[a].shape[1];
                    let mut da = vec![0.0; nodes[a].data.len()];
                    da[r * cols..(r + 1) * cols].copy_from_slice(&g);
                    send(&nodes, &mut adj, a, da);
                }
                Op::AddRow(a, row) => {
                    send(&nodes, &mut adj, a, g.clone());
                    let cols = nodes[row].data.len();
                    let rows = nodes[a].shape[0];
                    let mut dr = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dr[c] += g[r * cols + c];
                        }
                    }
                    send(&nodes, &mut adj, row, dr);
                }
                Op::ConcatCols(a, b) => {
                    let rows = nodes[a].shape[0];
                    let ca = nodes[a].shape[1];
                    let cb = nodes[b].shape[1];
                    let mut da = vec![0.0; rows * ca];
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    send(&nodes, &mut adj, a, da);
                    send(&nodes, &mut adj, b, db);
                }
            }
            // Fold this node's adjoint into its persistent grad buffer.
            let node = &mut nodes[i];
            match &mut node.grad {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(&g) {
                        *b += c;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Clear all accumulated gradients.
    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

impl<'g> Tensor<'g> {
    /// The graph this tensor lives in.
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn data(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].data.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, if a backward pass has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        debug_assert_eq!(nodes[self.id].data.len(), 1);
        nodes[self.id].data[0]
    }

    fn unary(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Op,
    ) -> Tensor<'g> {
        let req = self.graph.requires(self.id);
        let id = self.graph.push(shape, data, req, op);
        Tensor { graph: self.graph, id }
    }

    fn same_shape(&self, other: &Tensor<'g>, op: &'static str) -> TensorResult<()> {
        let nodes = self.graph.nodes.borrow();
        if nodes[self.id].shape != nodes[other.id].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: nodes[self.id].shape.clone(),
                right: nodes[other.id].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<'g>) -> TensorResult<Tensor<'g>> {
        self.same_shape(other, "add")?;
        let (data, shape, req) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            (
                a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                a.shape.clone(),
                a.requires_grad || b.requires_grad,
            )
        };
        let id = self.graph.push(shape, data, req, Op::Add(self.id, other.id));
        Ok(Tensor { graph: self.graph, id })
    }

    pub fn sub(&self, other: &Tensor<'g>) -> TensorResult<Tensor<'g>> {
        self.same_shape(other, "sub")?;
        let (data, shape, req) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            (
                a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
                a.shape.clone(),
                a.requires_grad || b.requires_grad,
            )
        };
        let id = self.graph.push(shape, data, req, Op::Sub(self.id, other.id));
        Ok(Tensor { graph: self.graph, id })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<'g>) -> TensorResult<Tensor<'g>> {
        self.same_shape(other, "mul")?;
        let (data, shape, req) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            (
                a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
                a.shape.clone(),
                a.requires_grad || b.requires_grad,
            )
        };
        let id = self.graph.push(shape, data, req, Op::Mul(self.id, other.id));
        Ok(Tensor { graph: self.graph, id })
    }

    /// Multiply by a plain scalar.
    pub fn scale(&self, c: f64) -> Tensor<'g> {
        let (data, shape) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.data.iter().map(|x| x * c).collect(), a.shape.clone())
        };
        self.unary(data, shape, Op::Scale(self.id, c))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<'g>) -> TensorResult<Tensor<'g>> {
        let (data, shape, req) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            (
                matmul_raw(&a.data, &b.data, m, k, n),
                vec![m, n],
                a.requires_grad || b.requires_grad,
            )
        };
        let id = self.graph.push(shape, data, req, Op::MatMul(self.id, other.id));
        Ok(Tensor { graph: self.graph, id })
    }

    /// Smooth nonlinearity x * sigmoid(x).
    pub fn silu(&self) -> Tensor<'g> {
        let (data, shape) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.data.iter().map(|&x| x * sigmoid(x)).collect(), a.shape.clone())
        };
        self.unary(data, shape, Op::Silu(self.id))
    }

    /// Elementwise absolute value (subgradient 0 at the origin).
    pub fn abs(&self) -> Tensor<'g> {
        let (data, shape) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            (a.data.iter().map(|x| x.abs()).collect(), a.shape.clone())
        };
        self.unary(data, shape, Op::Abs(self.id))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult<Tensor<'g>> {
        let (data, from) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            if numel(&shape) != a.data.len() {
                return Err(TensorError::BadReshape { from: a.shape.clone(), to: shape });
            }
            (a.data.clone(), a.shape.clone())
        };
        let _ = from;
        Ok(self.unary(data, shape, Op::Reshape(self.id)))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Tensor<'g> {
        let total = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].data.iter().sum()
        };
        self.unary(vec![total], vec![1], Op::Sum(self.id))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Tensor<'g> {
        let (total, len) = {
            let nodes = self.graph.nodes.borrow();
            let d = &nodes[self.id].data;
            (d.iter().sum::<f64>(), d.len())
        };
        self.unary(vec![total / len as f64], vec![1], Op::Mean(self.id))
    }

    /// Squared L2 norm over all elements, as a `[1]` tensor.
    pub fn sqnorm(&self) -> Tensor<'g> {
        let total = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].data.iter().map(|x| x * x).sum::<f64>()
        };
        self.unary(vec![total], vec![1], Op::SqNorm(self.id))
    }

    /// L2 norm over all elements, as a `[1]` tensor.
    pub fn norm(&self) -> Tensor<'g> {
        let total = {
            let nodes = self.graph.nodes.borrow();
            nodes[self.id].data.iter().map(|x| x * x).sum::<f64>()
        };
        self.unary(vec![total.sqrt()], vec![1], Op::Norm(self.id))
    }

    /// Select row `r` of a rank-2 tensor, as a `[1, cols]` tensor.
    pub fn row(&self, r: usize) -> TensorResult<Tensor<'g>> {
        let (data, cols) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let rows = a.shape[0];
            let cols = a.shape[1];
            if r >= rows {
                return Err(TensorError::RowOutOfBounds { rows, index: r });
            }
            (a.data[r * cols..(r + 1) * cols].to_vec(), cols)
        };
        Ok(self.unary(data, vec![1, cols], Op::Row(self.id, r)))
    }

    /// Add a `[1, cols]` row vector to every row of a `[rows, cols]` matrix.
    pub fn add_row(&self, row: &Tensor<'g>) -> TensorResult<Tensor<'g>> {
        let (data, shape, req) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let r = &nodes[row.id];
            if a.shape.len() != 2 || numel(&r.shape) != a.shape[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    left: a.shape.clone(),
                    right: r.shape.clone(),
                });
            }
            let cols = a.shape[1];
            let mut data = a.data.clone();
            for chunk in data.chunks_mut(cols) {
                for (v, b) in chunk.iter_mut().zip(&r.data) {
                    *v += b;
                }
            }
            (data, a.shape.clone(), a.requires_grad || r.requires_grad)
        };
        let id = self.graph.push(shape, data, req, Op::AddRow(self.id, row.id));
        Ok(Tensor { graph: self.graph, id })
    }

    /// Concatenate along columns: `[r, a] ++ [r, b] -> [r, a+b]`.
    pub fn concat_cols(&self, other: &Tensor<'g>) -> TensorResult<Tensor<'g>> {
        let (data, shape, req) = {
            let nodes = self.graph.nodes.borrow();
            let a = &nodes[self.id];
            let b = &nodes[other.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: a.shape.clone(),
                    right: b.shape.clone(),
                });
            }
            let rows = a.shape[0];
            let (ca, cb) = (a.shape[1], b.shape[1]);
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
            }
            (data, vec![rows, ca + cb], a.requires_grad || b.requires_grad)
        };
        let id = self.graph.push(shape, data, req, Op::ConcatCols(self.id, other.id));
        Ok(Tensor { graph: self.graph, id })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t<'g>(g: &'g Graph, shape: Vec<usize>, data: Vec<f64>) -> Tensor<'g> {
        g.leaf(shape, data, true).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let g = Graph::new();
        let a = t(&g, vec![2], vec![1.0, 2.0]);
        let b = t(&g, vec![2], vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), vec![4.0, 6.0]);
    }

    #[test]
    fn sqnorm_value() {
        let g = Graph::new();
        let a = t(&g, vec![2], vec![3.0, 4.0]);
        assert_eq!(a.sqnorm().item(), 25.0);
        assert_eq!(a.norm().item(), 5.0);
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let eye = t(&g, vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = t(&g, vec![3, 2], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = t(&g, vec![2], vec![1.0, 2.0]);
        let b = t(&g, vec![3], vec![1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let g = Graph::new();
        let x = t(&g, vec![3], vec![1.0, 2.0, 3.0]);
        let y = x.sum();
        g.backward(y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sqnorm_is_two_x() {
        let g = Graph::new();
        let x = t(&g, vec![2], vec![3.0, 4.0]);
        let y = x.sqnorm();
        g.backward(y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = t(&g, vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarBackward { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = t(&g, vec![2], vec![1.0, 2.0]);
        let y = x.sum();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    /// Central finite differences of `f` at `x0`, step 1e-5. Independent of
    /// the backward pass: it only re-evaluates the forward computation.
    fn finite_diff<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        let mut grad = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let up = f(&x);
            x[i] = x0[i] - h;
            let dn = f(&x);
            x[i] = x0[i];
            grad[i] = (up - dn) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Two-layer net loss used for the gradient-check oracle.
    fn two_layer_loss(params: &[f64], x: &[f64], dim: usize) -> f64 {
        let g = Graph::new();
        let n = dim * dim;
        let w1 = g.leaf(vec![dim, dim], params[..n].to_vec(), true).unwrap();
        let b1 = g.leaf(vec![1, dim], params[n..n + dim].to_vec(), true).unwrap();
        let w2 = g.leaf(vec![dim, dim], params[n + dim..2 * n + dim].to_vec(), true).unwrap();
        let xs = g.constant(vec![dim, dim], x.to_vec()).unwrap();
        let h = xs.matmul(&w1).unwrap().add_row(&b1).unwrap().silu();
        let out = h.matmul(&w2).unwrap();
        let target = xs.abs();
        out.sub(&target).unwrap().sqnorm().mean().item()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let dim = 3;
            let n_params = 2 * dim * dim + dim;
            let params: Vec<f64> = (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();

            // Backward gradients.
            let g = Graph::new();
            let nsq = dim * dim;
            let w1 = g.leaf(vec![dim, dim], params[..nsq].to_vec(), true).unwrap();
            let b1 = g.leaf(vec![1, dim], params[nsq..nsq + dim].to_vec(), true).unwrap();
            let w2 = g.leaf(vec![dim, dim], params[nsq + dim..].to_vec(), true).unwrap();
            let xs = g.constant(vec![dim, dim], x.clone()).unwrap();
            let h = xs.matmul(&w1).unwrap().add_row(&b1).unwrap().silu();
            let out = h.matmul(&w2).unwrap();
            let target = xs.abs();
            let loss = out.sub(&target).unwrap().sqnorm().mean();
            g.backward(loss).unwrap();
            let mut got = w1.grad().unwrap();
            got.extend(b1.grad().unwrap());
            got.extend(w2.grad().unwrap());

            let want = finite_diff(|p| two_layer_loss(p, &x, dim), &params);
            assert!(max_rel_err(&got, &want) < 1e-4);
        }
    }

    #[test]
    fn all_kernels_gradcheck() {
        // One composed expression touching every differentiable kernel.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &[f64]| {
            let g = Graph::new();
            let a = g.leaf(vec![2, 2], p[..4].to_vec(), true).unwrap();
            let b = g.leaf(vec![2, 2], p[4..].to_vec(), true).unwrap();
            let c = a.matmul(&b).unwrap();
            let d = c.add(&a).unwrap().sub(&b).unwrap().mul(&c).unwrap().scale(0.5);
            let e = d.silu().abs().reshape(vec![4, 1]).unwrap();
            let f1 = e.concat_cols(&a.reshape(vec![4, 1]).unwrap()).unwrap();
            let row = b.row(1).unwrap();
            let g2 = a.add_row(&row).unwrap();
            let s = f1.sqnorm().add(&g2.norm()).unwrap().add(&e.mean()).unwrap().add(&e.sum()).unwrap();
            s.mean().item()
        };
        let g = Graph::new();
        let a = g.leaf(vec![2, 2], x0[..4].to_vec(), true).unwrap();
        let b = g.leaf(vec![2, 2], x0[4..].to_vec(), true).unwrap();
        let c = a.matmul(&b).unwrap();
        let d = c.add(&a).unwrap().sub(&b).unwrap().mul(&c).unwrap().scale(0.5);
        let e = d.silu().abs().reshape(vec![4, 1]).unwrap();
        let f1 = e.concat_cols(&a.reshape(vec![4, 1]).unwrap()).unwrap();
        let row = b.row(1).unwrap();
        let g2 = a.add_row(&row).unwrap();
        let s = f1.sqnorm().add(&g2.norm()).unwrap().add(&e.mean()).unwrap().add(&e.sum()).unwrap();
        let loss = s.mean();
        g.backward(loss).unwrap();
        let mut got = a.grad().unwrap();
        got.extend(b.grad().unwrap());
        let want = finite_diff(f, &x0);
        assert!(max_rel_err(&got, &want) < 1e-4);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let g = Graph::new();
            let a = t(&g, vec![2, 2], vec![0.3, -0.7, 0.11, 0.9]);
            let b = t(&g, vec![2, 2], vec![1.5, 0.2, -0.4, 0.8]);
            a.matmul(&b).unwrap().silu().sqnorm().item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
