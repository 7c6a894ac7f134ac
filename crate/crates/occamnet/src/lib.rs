//! Sparsity-gated recurrent networks.
//!
//! The crate implements Gated LSTMs (an LSTM whose whole input vector is
//! multiplied by a scalar "Occam" gate), Gated Stacked LSTMs, and a two-level
//! hierarchical model for question answering over fact sequences. Gates are
//! trained with an L1 activation penalty under flat/linear/quadratic
//! annealing schedules, and their per-token activations can be captured and
//! rendered as highlight heatmaps.
//!
//! Everything runs on a small dense-tensor engine with reverse-mode
//! differentiation ([`graph::Graph`]); a graph is built per forward pass and
//! consumed by one backward pass. Minibatch gradients are evaluated one
//! example per graph, in parallel when the `parallel` feature (default) is
//! enabled, and reduced in example order so results are bit-identical with
//! and without the feature.

pub mod cells;
pub mod checkpoint;
pub mod data;
pub mod dropout;
pub mod gradcheck;
pub mod graph;
pub mod hierarchical;
pub mod models;
pub mod objectives;
pub mod parallel;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod train;

pub use graph::{Graph, GraphError, NodeId};
pub use rng::RngStream;
pub use tensor::Tensor;
