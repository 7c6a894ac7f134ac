//! LSTM cells and their input-gated variants.
//!
//! The gated cell multiplies the whole input vector by one scalar gate
//! computed from the current input and the previous hidden state, then runs
//! an ordinary LSTM step on the scaled input. The memory and output rows are
//! untouched, so a fully open gate reproduces the plain cell exactly.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, NodeId};
use crate::params::ParamBlock;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Hidden state of one LSTM layer: memory cell `m` and output `y`.
#[derive(Clone, Copy, Debug)]
pub struct State {
    pub m: NodeId,
    pub y: NodeId,
}

pub fn zero_state(g: &mut Graph, hidden: usize) -> State {
    State {
        m: g.leaf(Tensor::zeros(hidden, 1)),
        y: g.leaf(Tensor::zeros(hidden, 1)),
    }
}

pub(crate) fn init_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut RngStream) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(rows, cols);
    rng.fill_uniform(&mut t, -bound, bound);
    t
}

/// Weights of one LSTM layer: input, recurrent, and bias terms for the block
/// input (`z`) and the input/forget/output gates.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_z: Tensor,
    pub r_z: Tensor,
    pub b_z: Tensor,
    pub w_i: Tensor,
    pub r_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub r_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub r_o: Tensor,
    pub b_o: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmNodes {
    pub w_z: NodeId,
    pub r_z: NodeId,
    pub b_z: NodeId,
    pub w_i: NodeId,
    pub r_i: NodeId,
    pub b_i: NodeId,
    pub w_f: NodeId,
    pub r_f: NodeId,
    pub b_f: NodeId,
    pub w_o: NodeId,
    pub r_o: NodeId,
    pub b_o: NodeId,
}

impl LstmParams {
    /// Uniform ±1/√fan_in weights, zero biases, forget bias 1.
    pub fn new(input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let w = |rng: &mut RngStream| init_matrix(hidden, input_dim, input_dim, rng);
        let r = |rng: &mut RngStream| init_matrix(hidden, hidden, hidden, rng);
        LstmParams {
            w_z: w(rng),
            r_z: r(rng),
            b_z: Tensor::zeros(hidden, 1),
            w_i: w(rng),
            r_i: r(rng),
            b_i: Tensor::zeros(hidden, 1),
            w_f: w(rng),
            r_f: r(rng),
            b_f: Tensor::full(hidden, 1, 1.0),
            w_o: w(rng),
            r_o: r(rng),
            b_o: Tensor::zeros(hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }
}

impl ParamBlock for LstmParams {
    type Nodes = LstmNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        for n in [
            "w_z", "r_z", "b_z", "w_i", "r_i", "b_i", "w_f", "r_f", "b_f", "w_o", "r_o", "b_o",
        ] {
            out.push(format!("{prefix}{n}"));
        }
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.extend([
            &self.w_z, &self.r_z, &self.b_z, &self.w_i, &self.r_i, &self.b_i, &self.w_f,
            &self.r_f, &self.b_f, &self.w_o, &self.r_o, &self.b_o,
        ]);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([
            &mut self.w_z,
            &mut self.r_z,
            &mut self.b_z,
            &mut self.w_i,
            &mut self.r_i,
            &mut self.b_i,
            &mut self.w_f,
            &mut self.r_f,
            &mut self.b_f,
            &mut self.w_o,
            &mut self.r_o,
            &mut self.b_o,
        ]);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> LstmNodes {
        let mut leaf = |t: &Tensor| {
            let id = g.leaf(t.clone());
            ids.push(id);
            id
        };
        LstmNodes {
            w_z: leaf(&self.w_z),
            r_z: leaf(&self.r_z),
            b_z: leaf(&self.b_z),
            w_i: leaf(&self.w_i),
            r_i: leaf(&self.r_i),
            b_i: leaf(&self.b_i),
            w_f: leaf(&self.w_f),
            r_f: leaf(&self.r_f),
            b_f: leaf(&self.b_f),
            w_o: leaf(&self.w_o),
            r_o: leaf(&self.r_o),
            b_o: leaf(&self.b_o),
        }
    }
}

fn affine(
    g: &mut Graph,
    w: NodeId,
    x: NodeId,
    r: NodeId,
    y: NodeId,
    b: NodeId,
) -> Result<NodeId, GraphError> {
    let wx = g.matmul(w, x)?;
    let ry = g.matmul(r, y)?;
    let s = g.add(wx, ry)?;
    g.add(s, b)
}

/// One plain LSTM step.
pub fn lstm_step(
    g: &mut Graph,
    p: &LstmNodes,
    x: NodeId,
    prev: &State,
) -> Result<State, GraphError> {
    let za = affine(g, p.w_z, x, p.r_z, prev.y, p.b_z)?;
    let z = g.tanh(za);
    let ia = affine(g, p.w_i, x, p.r_i, prev.y, p.b_i)?;
    let i = g.sigmoid(ia);
    let fa = affine(g, p.w_f, x, p.r_f, prev.y, p.b_f)?;
    let f = g.sigmoid(fa);
    let oa = affine(g, p.w_o, x, p.r_o, prev.y, p.b_o)?;
    let o = g.sigmoid(oa);

    let iz = g.hadamard(i, z)?;
    let fm = g.hadamard(f, prev.m)?;
    let m = g.add(iz, fm)?;
    let tm = g.tanh(m);
    let y = g.hadamard(o, tm)?;
    Ok(State { m, y })
}

/// Functional form of the scalar input gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Linear,
    Quad,
}

/// Parameters of the scalar input gate. The linear form is
/// `σ(pᵀx + qᵀy_prev + b)`; the quadratic form adds a bilinear term
/// `y_prevᵀ W x`.
#[derive(Clone, Debug)]
pub enum GateParams {
    Linear { p: Tensor, q: Tensor, b: Tensor },
    Quad { w: Tensor, p: Tensor, q: Tensor, b: Tensor },
}

#[derive(Clone, Copy, Debug)]
pub enum GateNodes {
    Linear { p: NodeId, q: NodeId, b: NodeId },
    Quad { w: NodeId, p: NodeId, q: NodeId, b: NodeId },
}

impl GateParams {
    pub fn new(kind: GateKind, input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let p = init_matrix(input_dim, 1, input_dim, rng);
        let q = init_matrix(hidden, 1, hidden, rng);
        let b = Tensor::scalar(0.0);
        match kind {
            GateKind::Linear => GateParams::Linear { p, q, b },
            GateKind::Quad => GateParams::Quad {
                w: init_matrix(hidden, input_dim, input_dim, rng),
                p,
                q,
                b,
            },
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            GateParams::Linear { .. } => GateKind::Linear,
            GateParams::Quad { .. } => GateKind::Quad,
        }
    }
}

impl ParamBlock for GateParams {
    type Nodes = GateNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        match self {
            GateParams::Linear { .. } => {
                out.push(format!("{prefix}p"));
                out.push(format!("{prefix}q"));
                out.push(format!("{prefix}b"));
            }
            GateParams::Quad { .. } => {
                out.push(format!("{prefix}w"));
                out.push(format!("{prefix}p"));
                out.push(format!("{prefix}q"));
                out.push(format!("{prefix}b"));
            }
        }
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        match self {
            GateParams::Linear { p, q, b } => out.extend([p, q, b]),
            GateParams::Quad { w, p, q, b } => out.extend([w, p, q, b]),
        }
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            GateParams::Linear { p, q, b } => out.extend([p, q, b]),
            GateParams::Quad { w, p, q, b } => out.extend([w, p, q, b]),
        }
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> GateNodes {
        let mut leaf = |t: &Tensor| {
            let id = g.leaf(t.clone());
            ids.push(id);
            id
        };
        match self {
            GateParams::Linear { p, q, b } => GateNodes::Linear {
                p: leaf(p),
                q: leaf(q),
                b: leaf(b),
            },
            GateParams::Quad { w, p, q, b } => GateNodes::Quad {
                w: leaf(w),
                p: leaf(p),
                q: leaf(q),
                b: leaf(b),
            },
        }
    }
}

/// Scalar gate activation in (0, 1), as a 1×1 node.
pub fn gate_value(
    g: &mut Graph,
    gate: &GateNodes,
    x: NodeId,
    y_prev: NodeId,
) -> Result<NodeId, GraphError> {
    let pre = match gate {
        GateNodes::Linear { p, q, b } => {
            let px = g.dot(*p, x)?;
            let qy = g.dot(*q, y_prev)?;
            let s = g.add(px, qy)?;
            g.add(s, *b)?
        }
        GateNodes::Quad { w, p, q, b } => {
            let wx = g.matmul(*w, x)?;
            let ywx = g.dot(y_prev, wx)?;
            let px = g.dot(*p, x)?;
            let qy = g.dot(*q, y_prev)?;
            let s1 = g.add(ywx, px)?;
            let s2 = g.add(s1, qy)?;
            g.add(s2, *b)?
        }
    };
    Ok(g.sigmoid(pre))
}

/// One gated LSTM step: scale the input by the scalar gate, then run the
/// plain cell on the scaled input. Returns the new state and the gate node.
pub fn gated_lstm_step(
    g: &mut Graph,
    lstm: &LstmNodes,
    gate: &GateNodes,
    x: NodeId,
    prev: &State,
) -> Result<(State, NodeId), GraphError> {
    let gv = gate_value(g, gate, x, prev.y)?;
    let xg = g.mul_scalar(x, gv)?;
    let state = lstm_step(g, lstm, xg, prev)?;
    Ok((state, gv))
}

/// Single-layer LSTM with a scalar input gate.
#[derive(Clone, Debug)]
pub struct GatedLstm {
    pub lstm: LstmParams,
    pub gate: GateParams,
}

#[derive(Clone, Copy, Debug)]
pub struct GatedLstmNodes {
    pub lstm: LstmNodes,
    pub gate: GateNodes,
}

impl GatedLstm {
    pub fn new(kind: GateKind, input_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        GatedLstm {
            lstm: LstmParams::new(input_dim, hidden, rng),
            gate: GateParams::new(kind, input_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }
}

impl ParamBlock for GatedLstm {
    type Nodes = GatedLstmNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        self.lstm.push_names(&format!("{prefix}lstm."), out);
        self.gate.push_names(&format!("{prefix}gate."), out);
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.lstm.push_tensors(out);
        self.gate.push_tensors(out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.lstm.push_tensors_mut(out);
        self.gate.push_tensors_mut(out);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> GatedLstmNodes {
        GatedLstmNodes {
            lstm: self.lstm.bind(g, ids),
            gate: self.gate.bind(g, ids),
        }
    }
}

/// Run a gated LSTM over a token sequence. Returns the state after each step
/// and the per-step gate nodes.
pub fn run_gated_sequence(
    g: &mut Graph,
    nodes: &GatedLstmNodes,
    xs: &[NodeId],
    start: State,
) -> Result<(Vec<State>, Vec<NodeId>), GraphError> {
    if xs.is_empty() {
        return Err(GraphError::EmptyInput { op: "run_gated_sequence" });
    }
    let mut states = Vec::with_capacity(xs.len());
    let mut gates = Vec::with_capacity(xs.len());
    let mut prev = start;
    for &x in xs {
        let (state, gv) = gated_lstm_step(g, &nodes.lstm, &nodes.gate, x, &prev)?;
        states.push(state);
        gates.push(gv);
        prev = state;
    }
    Ok((states, gates))
}

/// Stack of plain LSTM layers behind one scalar input gate. The gate is
/// conditioned on the raw input and the *top* layer's previous output, and
/// scales only the bottom layer's input.
#[derive(Clone, Debug)]
pub struct StackedGatedParams {
    pub layers: Vec<LstmParams>,
    pub gate: GateParams,
}

#[derive(Clone, Debug)]
pub struct StackedGatedNodes {
    pub layers: Vec<LstmNodes>,
    pub gate: GateNodes,
}

impl StackedGatedParams {
    pub fn new(
        kind: GateKind,
        input_dim: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut RngStream,
    ) -> Self {
        assert!(n_layers >= 1, "stack needs at least one layer");
        let mut layers = Vec::with_capacity(n_layers);
        layers.push(LstmParams::new(input_dim, hidden, rng));
        for _ in 1..n_layers {
            layers.push(LstmParams::new(hidden, hidden, rng));
        }
        StackedGatedParams {
            layers,
            gate: GateParams::new(kind, input_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

impl ParamBlock for StackedGatedParams {
    type Nodes = StackedGatedNodes;

    fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.push_names(&format!("{prefix}layer{i}."), out);
        }
        self.gate.push_names(&format!("{prefix}gate."), out);
    }

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        for layer in &self.layers {
            layer.push_tensors(out);
        }
        self.gate.push_tensors(out);
    }

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for layer in &mut self.layers {
            layer.push_tensors_mut(out);
        }
        self.gate.push_tensors_mut(out);
    }

    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> StackedGatedNodes {
        StackedGatedNodes {
            layers: self.layers.iter().map(|l| l.bind(g, ids)).collect(),
            gate: self.gate.bind(g, ids),
        }
    }
}

/// One step of the gated stack. `pre_layer(g, layer_index, input)` lets the
/// caller transform each layer's input (dropout during training); it sees the
/// gated input for layer 0 and the lower layer's fresh output above that.
pub fn stacked_gated_step_with<F>(
    g: &mut Graph,
    nodes: &StackedGatedNodes,
    x: NodeId,
    prev: &[State],
    mut pre_layer: F,
) -> Result<(Vec<State>, NodeId), GraphError>
where
    F: FnMut(&mut Graph, usize, NodeId) -> Result<NodeId, GraphError>,
{
    assert_eq!(prev.len(), nodes.layers.len(), "state count must match layer count");
    let top_prev_y = prev.last().expect("at least one layer").y;
    let gv = gate_value(g, &nodes.gate, x, top_prev_y)?;
    let xg = g.mul_scalar(x, gv)?;

    let mut states = Vec::with_capacity(nodes.layers.len());
    let mut input = xg;
    for (k, layer) in nodes.layers.iter().enumerate() {
        let input_k = pre_layer(g, k, input)?;
        let state = lstm_step(g, layer, input_k, &prev[k])?;
        input = state.y;
        states.push(state);
    }
    Ok((states, gv))
}

pub fn stacked_gated_step(
    g: &mut Graph,
    nodes: &StackedGatedNodes,
    x: NodeId,
    prev: &[State],
) -> Result<(Vec<State>, NodeId), GraphError> {
    stacked_gated_step_with(g, nodes, x, prev, |_, _, input| Ok(input))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::graph::sigmoid;
    use crate::params;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    /// Plain-scalar reference evaluation of one LSTM step, kept independent
    /// of the graph machinery.
    fn ref_lstm_step(
        p: &LstmParams,
        x: &[f64],
        m_prev: &[f64],
        y_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let h = p.hidden();
        let d = p.input_dim();
        let pre = |w: &Tensor, r: &Tensor, b: &Tensor, row: usize| {
            let mut acc = b.get(row, 0);
            for c in 0..d {
                acc += w.get(row, c) * x[c];
            }
            for c in 0..h {
                acc += r.get(row, c) * y_prev[c];
            }
            acc
        };
        let mut m = vec![0.0; h];
        let mut y = vec![0.0; h];
        for row in 0..h {
            let z = pre(&p.w_z, &p.r_z, &p.b_z, row).tanh();
            let i = sigmoid(pre(&p.w_i, &p.r_i, &p.b_i, row));
            let f = sigmoid(pre(&p.w_f, &p.r_f, &p.b_f, row));
            let o = sigmoid(pre(&p.w_o, &p.r_o, &p.b_o, row));
            m[row] = i * z + f * m_prev[row];
            y[row] = o * m[row].tanh();
        }
        (m, y)
    }

    fn graph_lstm_step(p: &LstmParams, x: &[f64], m_prev: &[f64], y_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(p, &mut g);
        let xn = g.leaf(Tensor::column(x));
        let prev = State {
            m: g.leaf(Tensor::column(m_prev)),
            y: g.leaf(Tensor::column(y_prev)),
        };
        let s = lstm_step(&mut g, &nodes, xn, &prev).unwrap();
        (g.value(s.m).data().to_vec(), g.value(s.y).data().to_vec())
    }

    #[test]
    fn lstm_step_matches_scalar_reference() {
        let mut rng = RngStream::new(11);
        let p = LstmParams::new(3, 4, &mut rng);
        let x = [0.3, -1.1, 0.7];
        let m_prev = [0.2, -0.4, 0.0, 1.3];
        let y_prev = [-0.5, 0.1, 0.9, -0.2];
        let (m_ref, y_ref) = ref_lstm_step(&p, &x, &m_prev, &y_prev);
        let (m, y) = graph_lstm_step(&p, &x, &m_prev, &y_prev);
        for (a, b) in m.iter().zip(m_ref.iter()) {
            assert_close(*a, *b, 1e-14);
        }
        for (a, b) in y.iter().zip(y_ref.iter()) {
            assert_close(*a, *b, 1e-14);
        }
    }

    #[test]
    fn lstm_step_frozen_hand_case() {
        // 1-d cell, all weights zero, b_z = b_i = 10, zero start state:
        // m = σ(10)·tanh(10) ≈ 0.99995460, y = σ(0)·tanh(m) ≈ 0.38078753.
        let mut p = LstmParams::new(1, 1, &mut RngStream::new(0));
        for t in [
            &mut p.w_z, &mut p.r_z, &mut p.w_i, &mut p.r_i, &mut p.w_f, &mut p.r_f, &mut p.w_o,
            &mut p.r_o, &mut p.b_f, &mut p.b_o,
        ] {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        p.b_z = Tensor::scalar(10.0);
        p.b_i = Tensor::scalar(10.0);
        let (m, y) = graph_lstm_step(&p, &[0.0], &[0.0], &[0.0]);
        assert_close(m[0], 0.99995460, 1e-7);
        assert_close(y[0], 0.38078753, 1e-7);
    }

    #[test]
    fn forget_gate_carries_memory() {
        // Zero weights, b_f = 40 (σ ≈ 1): memory passes through unchanged,
        // since i·z = 0.5·tanh(0) = 0.
        let mut p = LstmParams::new(1, 1, &mut RngStream::new(0));
        for t in [
            &mut p.w_z, &mut p.r_z, &mut p.b_z, &mut p.w_i, &mut p.r_i, &mut p.b_i, &mut p.w_f,
            &mut p.r_f, &mut p.w_o, &mut p.r_o, &mut p.b_o,
        ] {
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        p.b_f = Tensor::scalar(40.0);
        let (m, _) = graph_lstm_step(&p, &[0.5], &[0.77], &[0.0]);
        assert_close(m[0], 0.77, 1e-12);
    }

    #[test]
    fn default_init_sets_forget_bias_one() {
        let p = LstmParams::new(3, 2, &mut RngStream::new(5));
        assert_eq!(p.b_f, Tensor::full(2, 1, 1.0));
        assert_eq!(p.b_i, Tensor::zeros(2, 1));
        let bound = 1.0 / (3.0f64).sqrt();
        assert!(p.w_z.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn linear_gate_matches_closed_form() {
        let gate = GateParams::Linear {
            p: Tensor::column(&[1.0, -2.0]),
            q: Tensor::column(&[0.5]),
            b: Tensor::scalar(0.25),
        };
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(&gate, &mut g);
        let x = g.leaf(Tensor::column(&[0.3, 0.1]));
        let y = g.leaf(Tensor::column(&[-0.8]));
        let gv = gate_value(&mut g, &nodes, x, y).unwrap();
        // pre = 0.3 - 0.2 - 0.4 + 0.25 = -0.05
        assert_close(g.value(gv).item(), sigmoid(-0.05), 1e-14);
    }

    #[test]
    fn quad_gate_matches_closed_form() {
        let gate = GateParams::Quad {
            w: Tensor::new(1, 2, vec![2.0, -1.0]),
            p: Tensor::column(&[0.0, 1.0]),
            q: Tensor::column(&[3.0]),
            b: Tensor::scalar(-0.5),
        };
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(&gate, &mut g);
        let x = g.leaf(Tensor::column(&[0.4, 0.2]));
        let y = g.leaf(Tensor::column(&[0.6]));
        let gv = gate_value(&mut g, &nodes, x, y).unwrap();
        // yᵀWx = 0.6·(0.8 - 0.2) = 0.36 ; pᵀx = 0.2 ; qᵀy = 1.8 ; b = -0.5
        assert_close(g.value(gv).item(), sigmoid(0.36 + 0.2 + 1.8 - 0.5), 1e-14);
    }

    #[test]
    fn open_gate_reproduces_plain_cell_exactly() {
        let mut rng = RngStream::new(21);
        let lstm = LstmParams::new(3, 2, &mut rng);
        let gate = GateParams::Linear {
            p: Tensor::zeros(3, 1),
            q: Tensor::zeros(2, 1),
            b: Tensor::scalar(40.0),
        };
        let x = [0.4, -0.9, 1.2];
        let m_prev = [0.3, -0.1];
        let y_prev = [0.2, 0.5];

        let mut g = Graph::new();
        let (ln, _) = params::bind_all(&lstm, &mut g);
        let (gn, _) = params::bind_all(&gate, &mut g);
        let xn = g.leaf(Tensor::column(&x));
        let prev = State {
            m: g.leaf(Tensor::column(&m_prev)),
            y: g.leaf(Tensor::column(&y_prev)),
        };
        let (gated, gv) = gated_lstm_step(&mut g, &ln, &gn, xn, &prev).unwrap();
        let plain = lstm_step(&mut g, &ln, xn, &prev).unwrap();

        assert_eq!(g.value(gv).item(), 1.0);
        assert_eq!(g.value(gated.m), g.value(plain.m));
        assert_eq!(g.value(gated.y), g.value(plain.y));
    }

    #[test]
    fn closed_gate_blocks_the_input() {
        let mut rng = RngStream::new(22);
        let lstm = LstmParams::new(3, 2, &mut rng);
        let gate = GateParams::Linear {
            p: Tensor::zeros(3, 1),
            q: Tensor::zeros(2, 1),
            b: Tensor::scalar(-40.0),
        };
        let x = [5.0, -3.0, 2.0];
        let m_prev = [0.3, -0.1];
        let y_prev = [0.2, 0.5];

        let mut g = Graph::new();
        let (ln, _) = params::bind_all(&lstm, &mut g);
        let (gn, _) = params::bind_all(&gate, &mut g);
        let xn = g.leaf(Tensor::column(&x));
        let zero = g.leaf(Tensor::zeros(3, 1));
        let prev = State {
            m: g.leaf(Tensor::column(&m_prev)),
            y: g.leaf(Tensor::column(&y_prev)),
        };
        let (gated, gv) = gated_lstm_step(&mut g, &ln, &gn, xn, &prev).unwrap();
        let blanked = lstm_step(&mut g, &ln, zero, &prev).unwrap();

        assert!(g.value(gv).item() < 1e-15);
        for r in 0..2 {
            assert_close(g.value(gated.m).get(r, 0), g.value(blanked.m).get(r, 0), 1e-9);
            assert_close(g.value(gated.y).get(r, 0), g.value(blanked.y).get(r, 0), 1e-9);
        }
    }

    #[test]
    fn stack_gate_reads_top_layer_state() {
        // Make the gate depend only on qᵀ·(top y_prev); distinct top/bottom
        // previous states then pin which layer feeds the gate.
        let mut rng = RngStream::new(30);
        let stack = StackedGatedParams {
            layers: vec![
                LstmParams::new(2, 1, &mut rng),
                LstmParams::new(1, 1, &mut rng),
            ],
            gate: GateParams::Linear {
                p: Tensor::zeros(2, 1),
                q: Tensor::column(&[10.0]),
                b: Tensor::scalar(0.0),
            },
        };
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(&stack, &mut g);
        let x = g.leaf(Tensor::column(&[0.1, 0.2]));
        let prev = vec![
            State {
                m: g.leaf(Tensor::column(&[0.0])),
                y: g.leaf(Tensor::column(&[-0.9])), // bottom
            },
            State {
                m: g.leaf(Tensor::column(&[0.0])),
                y: g.leaf(Tensor::column(&[0.7])), // top
            },
        ];
        let (states, gv) = stacked_gated_step(&mut g, &nodes, x, &prev).unwrap();
        assert_eq!(states.len(), 2);
        assert_close(g.value(gv).item(), sigmoid(7.0), 1e-12);
    }

    #[test]
    fn stack_layers_chain_within_a_step() {
        // With a fully open gate, layer 1's input must be layer 0's fresh
        // output, not its previous state.
        let mut rng = RngStream::new(31);
        let stack = StackedGatedParams {
            layers: vec![
                LstmParams::new(2, 3, &mut rng),
                LstmParams::new(3, 3, &mut rng),
            ],
            gate: GateParams::Linear {
                p: Tensor::zeros(2, 1),
                q: Tensor::zeros(3, 1),
                b: Tensor::scalar(40.0),
            },
        };
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(&stack, &mut g);
        let x = g.leaf(Tensor::column(&[0.5, -0.3]));
        let prev = vec![zero_state(&mut g, 3), zero_state(&mut g, 3)];
        let (states, _) = stacked_gated_step(&mut g, &nodes, x, &prev).unwrap();

        let bottom = lstm_step(&mut g, &nodes.layers[0], x, &prev[0]).unwrap();
        let top = lstm_step(&mut g, &nodes.layers[1], bottom.y, &prev[1]).unwrap();
        assert_eq!(g.value(states[0].y), g.value(bottom.y));
        assert_eq!(g.value(states[1].y), g.value(top.y));
    }

    #[test]
    fn sequence_runner_rejects_empty_input() {
        let mut rng = RngStream::new(40);
        let cell = GatedLstm::new(GateKind::Linear, 2, 2, &mut rng);
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(&cell, &mut g);
        let start = zero_state(&mut g, 2);
        match run_gated_sequence(&mut g, &nodes, &[], start) {
            Err(GraphError::EmptyInput { .. }) => {}
            other => panic!("expected EmptyInput, got {other:?}"),
        }
    }

    #[test]
    fn sequence_runner_threads_state() {
        // Two identical inputs through a gated cell: states must differ
        // across steps (memory accumulates) and gates must be in (0, 1).
        let mut rng = RngStream::new(41);
        let cell = GatedLstm::new(GateKind::Quad, 2, 3, &mut rng);
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(&cell, &mut g);
        let x1 = g.leaf(Tensor::column(&[1.0, -1.0]));
        let x2 = g.leaf(Tensor::column(&[1.0, -1.0]));
        let start = zero_state(&mut g, 3);
        let (states, gates) = run_gated_sequence(&mut g, &nodes, &[x1, x2], start).unwrap();
        assert_eq!(states.len(), 2);
        assert_eq!(gates.len(), 2);
        assert_ne!(g.value(states[0].y), g.value(states[1].y));
        for &gv in &gates {
            let v = g.value(gv).item();
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn gated_step_gradients_match_finite_differences() {
        let mut rng = RngStream::new(50);
        let cell = GatedLstm::new(GateKind::Quad, 3, 2, &mut rng);
        let names = params::names(&cell, "");
        let mut theta: Vec<(String, Tensor)> = names
            .into_iter()
            .zip(params::tensors(&cell).into_iter().cloned())
            .collect();
        let kind = cell.gate.kind();

        let report = grad_check(&mut theta, 1e-5, 1e-6, move |g, ids| {
            // Reassemble the node handles from the flat leaf list.
            let lstm = LstmNodes {
                w_z: ids[0], r_z: ids[1], b_z: ids[2],
                w_i: ids[3], r_i: ids[4], b_i: ids[5],
                w_f: ids[6], r_f: ids[7], b_f: ids[8],
                w_o: ids[9], r_o: ids[10], b_o: ids[11],
            };
            let gate = match kind {
                GateKind::Linear => GateNodes::Linear { p: ids[12], q: ids[13], b: ids[14] },
                GateKind::Quad => GateNodes::Quad { w: ids[12], p: ids[13], q: ids[14], b: ids[15] },
            };
            let x1 = g.leaf(Tensor::column(&[0.5, -0.2, 0.8]));
            let x2 = g.leaf(Tensor::column(&[-1.0, 0.3, 0.1]));
            let start = zero_state(g, 2);
            let nodes = GatedLstmNodes { lstm, gate };
            let (states, gates) = run_gated_sequence(g, &nodes, &[x1, x2], start)?;
            let y_sum = g.sum(states.last().unwrap().y);
            let g_cat = g.concat_rows(&gates)?;
            let g_sum = g.sum(g_cat);
            g.add(y_sum, g_sum)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn stacked_step_gradients_match_finite_differences() {
        let mut rng = RngStream::new(51);
        let stack = StackedGatedParams::new(GateKind::Quad, 2, 2, 3, &mut rng);
        let names = params::names(&stack, "");
        let mut theta: Vec<(String, Tensor)> = names
            .into_iter()
            .zip(params::tensors(&stack).into_iter().cloned())
            .collect();

        let report = grad_check(&mut theta, 1e-5, 1e-6, move |g, ids| {
            let mut k = 0;
            let mut next = || {
                let id = ids[k];
                k += 1;
                id
            };
            let mut layers = Vec::new();
            for _ in 0..3 {
                layers.push(LstmNodes {
                    w_z: next(), r_z: next(), b_z: next(),
                    w_i: next(), r_i: next(), b_i: next(),
                    w_f: next(), r_f: next(), b_f: next(),
                    w_o: next(), r_o: next(), b_o: next(),
                });
            }
            let gate = GateNodes::Quad { w: next(), p: next(), q: next(), b: next() };
            let nodes = StackedGatedNodes { layers, gate };

            let x1 = g.leaf(Tensor::column(&[0.4, -0.6]));
            let x2 = g.leaf(Tensor::column(&[0.9, 0.2]));
            let mut state: Vec<State> = (0..3).map(|_| zero_state(g, 2)).collect();
            let mut gates = Vec::new();
            for x in [x1, x2] {
                let (s, gv) = stacked_gated_step(g, &nodes, x, &state)?;
                state = s;
                gates.push(gv);
            }
            let y_sum = g.sum(state.last().unwrap().y);
            let g_cat = g.concat_rows(&gates)?;
            let g_sum = g.sum(g_cat);
            g.add(y_sum, g_sum)
        })
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn bind_wiring_matches_field_order() {
        // Distinct fill values per tensor catch any permutation between the
        // flat leaf list and the typed node handles.
        let mut lstm = LstmParams::new(2, 2, &mut RngStream::new(0));
        let fields: Vec<&mut Tensor> = vec![
            &mut lstm.w_z, &mut lstm.r_z, &mut lstm.b_z, &mut lstm.w_i, &mut lstm.r_i,
            &mut lstm.b_i, &mut lstm.w_f, &mut lstm.r_f, &mut lstm.b_f, &mut lstm.w_o,
            &mut lstm.r_o, &mut lstm.b_o,
        ];
        for (k, t) in fields.into_iter().enumerate() {
            *t = Tensor::full(t.rows(), t.cols(), k as f64);
        }
        let mut g = Graph::new();
        let (nodes, ids) = params::bind_all(&lstm, &mut g);
        assert_eq!(ids.len(), 12);
        assert_eq!(g.value(nodes.w_z).get(0, 0), 0.0);
        assert_eq!(g.value(nodes.b_z).get(0, 0), 2.0);
        assert_eq!(g.value(nodes.w_f).get(0, 0), 6.0);
        assert_eq!(g.value(nodes.b_o).get(0, 0), 11.0);
        for (k, &id) in ids.iter().enumerate() {
            assert_eq!(g.value(id).get(0, 0), k as f64);
        }
    }

    #[test]
    fn gate_param_names_by_kind() {
        let mut rng = RngStream::new(1);
        let lin = GateParams::new(GateKind::Linear, 2, 3, &mut rng);
        assert_eq!(params::names(&lin, "g."), vec!["g.p", "g.q", "g.b"]);
        let quad = GateParams::new(GateKind::Quad, 2, 3, &mut rng);
        assert_eq!(params::names(&quad, "g."), vec!["g.w", "g.p", "g.q", "g.b"]);
        assert_eq!(params::count(&quad), 6 + 2 + 3 + 1);
    }
}
