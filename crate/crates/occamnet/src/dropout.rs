//! Inverted dropout as a graph transform.

use crate::graph::{Graph, GraphError, NodeId};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Whether a forward pass is for training (dropout active) or evaluation.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut RngStream },
}

impl Mode<'_> {
    /// Apply dropout with probability `p` in training mode; identity in
    /// evaluation mode.
    pub fn dropout(&mut self, g: &mut Graph, x: NodeId, p: f64) -> Result<NodeId, GraphError> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { rng } => dropout(g, x, p, rng),
        }
    }
}

/// Zero each element with probability `p` and scale survivors by 1/(1−p),
/// so the expected value is unchanged. `p` must lie in [0, 1).
pub fn dropout(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    rng: &mut RngStream,
) -> Result<NodeId, GraphError> {
    if !(0.0..1.0).contains(&p) {
        return Err(GraphError::Domain { op: "dropout", value: p });
    }
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let shape = g.value(x).shape();
    let mut mask = Tensor::zeros(shape.0, shape.1);
    for v in mask.data_mut() {
        if rng.bernoulli(keep) {
            *v = 1.0 / keep;
        }
    }
    let m = g.leaf(mask);
    g.hadamard(x, m)
}
