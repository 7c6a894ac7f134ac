//! Append-only computation graph with reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are appended, so node ids are already
//! in topological order and the backward sweep is a single reverse pass.
//! A graph is built for one forward pass, differentiated once, then dropped.

use std::fmt;

use crate::tensor::Tensor;

/// Handle to a node in one [`Graph`]. Ids from different graphs must not be mixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub enum GraphError {
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    Domain {
        op: &'static str,
        value: f64,
    },
    NotScalarRoot {
        shape: (usize, usize),
    },
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    EmptyInput {
        op: &'static str,
    },
    BackwardAlreadyRun,
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::ShapeMismatch { op, lhs, rhs } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            GraphError::Domain { op, value } => {
                write!(f, "{op}: value {value} outside the operation's domain")
            }
            GraphError::NotScalarRoot { shape } => write!(
                f,
                "backward root must be 1x1, got {}x{}",
                shape.0, shape.1
            ),
            GraphError::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            GraphError::EmptyInput { op } => write!(f, "{op}: empty input"),
            GraphError::BackwardAlreadyRun => {
                write!(f, "backward has already been run on this graph")
            }
        }
    }
}

impl std::error::Error for GraphError {}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    // The added constant is folded into the forward value and has unit
    // gradient, so the op only keeps its input.
    AddConst(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    OneMinus(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    MulScalar(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    LogSumExp(NodeId),
    SelectRow(NodeId, usize),
    EmbedRow(NodeId, usize),
    ConcatRows(Vec<NodeId>),
}

impl Op {
    fn visit_parents(&self, mut f: impl FnMut(NodeId)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::MulScalar(a, b)
            | Op::Dot(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::OneMinus(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::LogSumExp(a)
            | Op::SelectRow(a, _)
            | Op::EmbedRow(a, _) => f(*a),
            Op::ConcatRows(parts) => {
                for p in parts {
                    f(*p);
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    backward_run: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            backward_run: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.ops.len());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.ops.push(op);
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.cols() != vb.rows() {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let value = va.matmul(vb);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn elementwise_pair(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), GraphError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise_pair("add", a, b)?;
        let value = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise_pair("sub", a, b)?;
        let value = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise_pair("hadamard", a, b)?;
        let value = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        Ok(self.push(Op::Hadamard(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a.0].map(|x| c * x);
        self.push(Op::Scale(a, c), value)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.values[a.0].map(|x| x + c);
        self.push(Op::AddConst(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        if let Some(&bad) = self.values[a.0].data().iter().find(|&&x| x <= 0.0) {
            return Err(GraphError::Domain { op: "log", value: bad });
        }
        let value = self.values[a.0].map(f64::ln);
        Ok(self.push(Op::Log(a), value))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        if let Some(&bad) = self.values[a.0].data().iter().find(|&&x| x < 0.0) {
            return Err(GraphError::Domain { op: "sqrt", value: bad });
        }
        let value = self.values[a.0].map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), value))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        if self.values[a.0].data().iter().any(|&x| x == 0.0) {
            return Err(GraphError::Domain { op: "recip", value: 0.0 });
        }
        let value = self.values[a.0].map(f64::recip);
        Ok(self.push(Op::Recip(a), value))
    }

    /// `1 - x`, element-wise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(|x| 1.0 - x);
        self.push(Op::OneMinus(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.values[a.0].map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    /// Clamp into `[lo, hi]`. Gradients are zero where the value was clipped.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        if !(lo < hi) {
            return Err(GraphError::Domain { op: "clamp", value: lo });
        }
        let value = self.values[a.0].map(|x| x.clamp(lo, hi));
        Ok(self.push(Op::Clamp(a, lo, hi), value))
    }

    /// Multiply a tensor by a 1×1 scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, GraphError> {
        let vs = &self.values[s.0];
        if !vs.is_scalar() {
            return Err(GraphError::ShapeMismatch {
                op: "mul_scalar",
                lhs: self.values[a.0].shape(),
                rhs: vs.shape(),
            });
        }
        let c = vs.item();
        let value = self.values[a.0].map(|x| c * x);
        Ok(self.push(Op::MulScalar(a, s), value))
    }

    /// Inner product of two same-shaped tensors, as a 1×1 node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise_pair("dot", a, b)?;
        let v = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data().iter())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].sum();
        self.push(Op::Sum(a), Tensor::scalar(v))
    }

    /// `log Σ exp(xᵢ)` over all elements, max-shifted for stability.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let data = self.values[a.0].data();
        if data.is_empty() {
            return Err(GraphError::EmptyInput { op: "log_sum_exp" });
        }
        let m = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = m + data.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        Ok(self.push(Op::LogSumExp(a), Tensor::scalar(v)))
    }

    /// Element `i` of a column vector, as a 1×1 node.
    pub fn select_row(&mut self, a: NodeId, i: usize) -> Result<NodeId, GraphError> {
        let va = &self.values[a.0];
        if !va.is_column() {
            return Err(GraphError::ShapeMismatch {
                op: "select_row",
                lhs: va.shape(),
                rhs: (va.rows(), 1),
            });
        }
        if i >= va.rows() {
            return Err(GraphError::IndexOutOfRange {
                op: "select_row",
                index: i,
                len: va.rows(),
            });
        }
        let v = va.get(i, 0);
        Ok(self.push(Op::SelectRow(a, i), Tensor::scalar(v)))
    }

    /// Row `i` of a table node, as a column vector. Gradients scatter back
    /// into that row only.
    pub fn embed_row(&mut self, table: NodeId, i: usize) -> Result<NodeId, GraphError> {
        let vt = &self.values[table.0];
        if i >= vt.rows() {
            return Err(GraphError::IndexOutOfRange {
                op: "embed_row",
                index: i,
                len: vt.rows(),
            });
        }
        let row: Vec<f64> = (0..vt.cols()).map(|c| vt.get(i, c)).collect();
        Ok(self.push(Op::EmbedRow(table, i), Tensor::column(&row)))
    }

    /// Stack column vectors vertically into one column.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::EmptyInput { op: "concat_rows" });
        }
        let mut data = Vec::new();
        for &p in parts {
            let vp = &self.values[p.0];
            if !vp.is_column() {
                return Err(GraphError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vp.shape(),
                    rhs: (vp.rows(), 1),
                });
            }
            data.extend_from_slice(vp.data());
        }
        let value = Tensor::column(&data);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Reverse sweep from a scalar root. Accumulates into every reachable
    /// node's gradient buffer. A graph can be differentiated once.
    pub fn backward(&mut self, root: NodeId) -> Result<(), GraphError> {
        if self.backward_run {
            return Err(GraphError::BackwardAlreadyRun);
        }
        let root_shape = self.values[root.0].shape();
        if root_shape != (1, 1) {
            return Err(GraphError::NotScalarRoot { shape: root_shape });
        }
        self.backward_run = true;

        let mut reachable = vec![false; self.ops.len()];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            self.ops[i].visit_parents(|p| {
                if !reachable[p.0] {
                    stack.push(p.0);
                }
            });
        }

        self.grads[root.0] = Tensor::scalar(1.0);

        for i in (0..=root.0).rev() {
            if !reachable[i] {
                continue;
            }
            let dout = self.grads[i].clone();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = dout.matmul_nt(&self.values[b.0]);
                    let db = self.values[a.0].matmul_tn(&dout);
                    self.grads[a.0].add_assign(&da);
                    self.grads[b.0].add_assign(&db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.grads[a.0].add_assign(&dout);
                    self.grads[b.0].add_assign(&dout);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.grads[a.0].add_assign(&dout);
                    self.grads[b.0].scaled_add_assign(-1.0, &dout);
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = dout.zip_map(&self.values[b.0], |d, y| d * y);
                    let db = dout.zip_map(&self.values[a.0], |d, x| d * x);
                    self.grads[a.0].add_assign(&da);
                    self.grads[b.0].add_assign(&db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.grads[a.0].scaled_add_assign(c, &dout);
                }
                Op::AddConst(a) => {
                    let a = *a;
                    self.grads[a.0].add_assign(&dout);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[i], |d, s| d * s * (1.0 - s));
                    self.grads[a.0].add_assign(&da);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[i], |d, t| d * (1.0 - t * t));
                    self.grads[a.0].add_assign(&da);
                }
                Op::Log(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[a.0], |d, x| d / x);
                    self.grads[a.0].add_assign(&da);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[i], |d, e| d * e);
                    self.grads[a.0].add_assign(&da);
                }
                Op::Sqrt(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[i], |d, s| d * 0.5 / s);
                    self.grads[a.0].add_assign(&da);
                }
                Op::Recip(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[a.0], |d, x| -d / (x * x));
                    self.grads[a.0].add_assign(&da);
                }
                Op::OneMinus(a) => {
                    let a = *a;
                    self.grads[a.0].scaled_add_assign(-1.0, &dout);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da = dout.zip_map(&self.values[a.0], |d, x| if x > 0.0 { d } else { 0.0 });
                    self.grads[a.0].add_assign(&da);
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let da = dout.zip_map(&self.values[a.0], |d, x| {
                        if x > lo && x < hi {
                            d
                        } else {
                            0.0
                        }
                    });
                    self.grads[a.0].add_assign(&da);
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    let c = self.values[s.0].item();
                    self.grads[a.0].scaled_add_assign(c, &dout);
                    let ds: f64 = dout
                        .data()
                        .iter()
                        .zip(self.values[a.0].data().iter())
                        .map(|(d, x)| d * x)
                        .sum();
                    self.grads[s.0].add_assign(&Tensor::scalar(ds));
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let d = dout.item();
                    let db = self.values[a.0].clone();
                    let da = self.values[b.0].clone();
                    self.grads[a.0].scaled_add_assign(d, &da);
                    self.grads[b.0].scaled_add_assign(d, &db);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let d = dout.item();
                    let ones = Tensor::full(self.values[a.0].rows(), self.values[a.0].cols(), 1.0);
                    self.grads[a.0].scaled_add_assign(d, &ones);
                }
                Op::LogSumExp(a) => {
                    let a = *a;
                    let d = dout.item();
                    let out = self.values[i].item();
                    let da = self.values[a.0].map(|x| d * (x - out).exp());
                    self.grads[a.0].add_assign(&da);
                }
                Op::SelectRow(a, r) => {
                    let (a, r) = (*a, *r);
                    let d = dout.item();
                    let cur = self.grads[a.0].get(r, 0);
                    self.grads[a.0].set(r, 0, cur + d);
                }
                Op::EmbedRow(table, r) => {
                    let (table, r) = (*table, *r);
                    for c in 0..dout.rows() {
                        let cur = self.grads[table.0].get(r, c);
                        self.grads[table.0].set(r, c, cur + dout.get(c, 0));
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let n = self.values[p.0].rows();
                        for r in 0..n {
                            let cur = self.grads[p.0].get(r, 0);
                            self.grads[p.0].set(r, 0, cur + dout.get(offset + r, 0));
                        }
                        offset += n;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn sigmoid_values() {
        assert_close(sigmoid(0.0), 0.5, 1e-15);
        // 1/(1+e^-1) = 0.7310585786300049
        assert_close(sigmoid(1.0), 0.7310585786300049, 1e-15);
        assert_close(sigmoid(40.0), 1.0, 1e-15);
        assert!(sigmoid(-40.0) < 1e-15);
        assert!(sigmoid(-745.0) >= 0.0); // no underflow panic, no NaN
        assert!(!sigmoid(-745.0).is_nan());
    }

    #[test]
    fn matmul_forward_and_backward() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let x = g.leaf(Tensor::column(&[5.0, 6.0]));
        let y = g.matmul(a, x).unwrap();
        assert_eq!(g.value(y), &Tensor::column(&[17.0, 39.0]));
        let s = g.sum(y);
        g.backward(s).unwrap();
        // d/dA sum(Ax) = 1 xᵀ ; d/dx = Aᵀ 1
        assert_eq!(g.grad(a), &Tensor::new(2, 2, vec![5.0, 6.0, 5.0, 6.0]));
        assert_eq!(g.grad(x), &Tensor::column(&[4.0, 6.0]));
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3));
        let b = g.leaf(Tensor::zeros(2, 1));
        match g.matmul(a, b) {
            Err(GraphError::ShapeMismatch { op: "matmul", .. }) => {}
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn hadamard_square_doubles_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[3.0]));
        let sq = g.hadamard(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        // d(x²)/dx = 2x = 6
        assert_eq!(g.grad(x), &Tensor::column(&[6.0]));
    }

    #[test]
    fn sigmoid_backward_matches_closed_form() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[0.3, -1.2]));
        let y = g.sigmoid(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        for (r, &xv) in [0.3, -1.2].iter().enumerate() {
            let sv = sigmoid(xv);
            assert_close(g.grad(x).get(r, 0), sv * (1.0 - sv), 1e-15);
        }
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[1.0, 0.0]));
        match g.log(x) {
            Err(GraphError::Domain { op: "log", value }) => assert_eq!(value, 0.0),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn log_sum_exp_is_stable_and_correct() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[1000.0, 1000.0]));
        let l = g.log_sum_exp(x).unwrap();
        // ln(2e^1000) = 1000 + ln 2
        assert_close(g.value(l).item(), 1000.0 + 2.0f64.ln(), 1e-9);
        g.backward(l).unwrap();
        assert_close(g.grad(x).get(0, 0), 0.5, 1e-12);
        assert_close(g.grad(x).get(1, 0), 0.5, 1e-12);
    }

    #[test]
    fn log_sum_exp_small_case() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[0.0, (2.0f64).ln()]));
        let l = g.log_sum_exp(x).unwrap();
        // ln(1 + 2) = ln 3
        assert_close(g.value(l).item(), 3.0f64.ln(), 1e-12);
    }

    #[test]
    fn mul_scalar_routes_both_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[2.0, -1.0]));
        let s = g.leaf(Tensor::scalar(3.0));
        let y = g.mul_scalar(x, s).unwrap();
        assert_eq!(g.value(y), &Tensor::column(&[6.0, -3.0]));
        let w = g.leaf(Tensor::column(&[1.0, 10.0]));
        let d = g.dot(y, w).unwrap();
        g.backward(d).unwrap();
        // d/dx (s x·w) = s w ; d/ds = x·w = 2 - 10 = -8
        assert_eq!(g.grad(x), &Tensor::column(&[3.0, 30.0]));
        assert_close(g.grad(s).item(), -8.0, 1e-15);
    }

    #[test]
    fn embed_row_scatters_gradient() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = g.embed_row(table, 1).unwrap();
        assert_eq!(g.value(e), &Tensor::column(&[3.0, 4.0]));
        let w = g.leaf(Tensor::column(&[10.0, 20.0]));
        let d = g.dot(e, w).unwrap();
        g.backward(d).unwrap();
        let expect = Tensor::new(3, 2, vec![0.0, 0.0, 10.0, 20.0, 0.0, 0.0]);
        assert_eq!(g.grad(table), &expect);
    }

    #[test]
    fn embed_same_row_twice_accumulates() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let e1 = g.embed_row(table, 0).unwrap();
        let e2 = g.embed_row(table, 0).unwrap();
        let both = g.add(e1, e2).unwrap();
        let s = g.sum(both);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table), &Tensor::new(2, 2, vec![2.0, 2.0, 0.0, 0.0]));
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::column(&[1.0, 2.0]));
        let b = g.leaf(Tensor::column(&[3.0]));
        let cat = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(cat), &Tensor::column(&[1.0, 2.0, 3.0]));
        let w = g.leaf(Tensor::column(&[10.0, 20.0, 30.0]));
        let d = g.dot(cat, w).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(a), &Tensor::column(&[10.0, 20.0]));
        assert_eq!(g.grad(b), &Tensor::column(&[30.0]));
    }

    #[test]
    fn clamp_zeroes_gradient_outside_band() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[0.5, 2.0, -1.0]));
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c), &Tensor::column(&[0.5, 1.0, 0.0]));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &Tensor::column(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn relu_gradient_gate() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[2.0, -3.0, 0.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &Tensor::column(&[1.0, 0.0, 0.0]));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x² ; dy/dx = 1 + 2x = 7 at x = 3
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[3.0]));
        let sq = g.hadamard(x, x).unwrap();
        let y = g.add(x, sq).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &Tensor::column(&[7.0]));
    }

    #[test]
    fn unreachable_nodes_keep_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[1.0]));
        let unused = g.leaf(Tensor::column(&[5.0]));
        let _dead = g.scale(unused, 2.0);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused), &Tensor::column(&[0.0]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(&[1.0, 2.0]));
        match g.backward(x) {
            Err(GraphError::NotScalarRoot { shape }) => assert_eq!(shape, (2, 1)),
            other => panic!("expected NotScalarRoot, got {other:?}"),
        }
    }

    #[test]
    fn second_backward_is_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0);
        g.backward(y).unwrap();
        match g.backward(y) {
            Err(GraphError::BackwardAlreadyRun) => {}
            other => panic!("expected BackwardAlreadyRun, got {other:?}"),
        }
    }

    #[test]
    fn chain_through_many_ops_matches_hand_derivative() {
        // f(x) = log(1 + exp(x)) at x = 0.7 ; f'(x) = sigmoid(x)
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.7));
        let e = g.exp(x);
        let p = g.add_const(e, 1.0);
        let l = g.log(p).unwrap();
        g.backward(l).unwrap();
        assert_close(g.grad(x).item(), sigmoid(0.7), 1e-12);
    }

    #[test]
    fn sqrt_recip_compose() {
        // f(x) = 1/sqrt(x) at x = 4 -> 0.5 ; f' = -1/(2 x^{3/2}) = -1/16
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(4.0));
        let r = g.sqrt(x).unwrap();
        let inv = g.recip(r).unwrap();
        assert_close(g.value(inv).item(), 0.5, 1e-15);
        g.backward(inv).unwrap();
        assert_close(g.grad(x).item(), -1.0 / 16.0, 1e-12);
    }
}
