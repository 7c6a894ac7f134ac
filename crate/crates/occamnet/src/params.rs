//! Uniform traversal over model parameters.
//!
//! Every parameter struct exposes its tensors in one fixed order through
//! [`ParamBlock`]. Optimizer state, checkpoints, snapshots, and graph leaf
//! binding all walk that same order, so they stay aligned by construction.
//! `bind` must create leaves in the exact order `push_tensors` lists them;
//! each implementation has a wiring test pinning this.

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub trait ParamBlock {
    /// Typed handle to the graph leaves created by [`ParamBlock::bind`].
    type Nodes;

    /// Append one name per tensor, in traversal order. `prefix` already
    /// carries a trailing separator when non-empty, e.g. `"fact.lstm."`.
    fn push_names(&self, prefix: &str, out: &mut Vec<String>);

    fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>);

    fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    /// Create one leaf per tensor in traversal order, appending each id to
    /// `ids`, and return the typed node handle.
    fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> Self::Nodes;
}

pub fn names<B: ParamBlock>(block: &B, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    block.push_names(prefix, &mut out);
    out
}

pub fn tensors<B: ParamBlock>(block: &B) -> Vec<&Tensor> {
    let mut out = Vec::new();
    block.push_tensors(&mut out);
    out
}

pub fn tensors_mut<B: ParamBlock>(block: &mut B) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    block.push_tensors_mut(&mut out);
    out
}

pub fn bind_all<B: ParamBlock>(block: &B, g: &mut Graph) -> (B::Nodes, Vec<NodeId>) {
    let mut ids = Vec::new();
    let nodes = block.bind(g, &mut ids);
    (nodes, ids)
}

pub fn snapshot<B: ParamBlock>(block: &B) -> Vec<Tensor> {
    tensors(block).into_iter().cloned().collect()
}

pub fn restore<B: ParamBlock>(block: &mut B, saved: &[Tensor]) {
    let mut dst = tensors_mut(block);
    assert_eq!(dst.len(), saved.len(), "snapshot tensor count mismatch");
    for (d, s) in dst.iter_mut().zip(saved.iter()) {
        assert_eq!(d.shape(), s.shape(), "snapshot tensor shape mismatch");
        **d = s.clone();
    }
}

/// Total number of scalar parameters in a block.
pub fn count<B: ParamBlock>(block: &B) -> usize {
    tensors(block).iter().map(|t| t.len()).sum()
}
