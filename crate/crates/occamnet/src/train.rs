//! Optimization and the training loop: AdaDelta with global-norm clipping,
//! minibatches averaged per example, seeded shuffling and dropout streams,
//! early stopping on the validation metric, and line-delimited metrics.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedLabeled, EncodedPair, EncodedStory};
use crate::dropout::Mode;
use crate::graph::{Graph, GraphError, NodeId};
use crate::hierarchical::HgParams;
use crate::models::{ParaphraseScorer, PlainSeqReader, SequenceClassifier};
use crate::objectives::{lambda_at, SparsityConfig};
use crate::parallel::batch_map;
use crate::params::{self, ParamBlock};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum TrainError {
    Graph(GraphError),
    InvalidConfig {
        what: &'static str,
    },
    EmptySplit {
        which: &'static str,
    },
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    ShapeMismatch {
        what: &'static str,
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Graph(e) => write!(f, "graph error: {e}"),
            TrainError::InvalidConfig { what } => write!(f, "invalid config: {what}"),
            TrainError::EmptySplit { which } => write!(f, "{which} split is empty"),
            TrainError::CountMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected {expected} entries, found {found}"),
            TrainError::ShapeMismatch {
                what,
                index,
                expected,
                found,
            } => write!(
                f,
                "{what} at index {index}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
        }
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            TrainError::Graph(e) => Some(e),
            _ => None,
        }
    }
}

impl From<GraphError> for TrainError {
    fn from(e: GraphError) -> Self {
        TrainError::Graph(e)
    }
}

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

/// Per-parameter accumulators for the adaptive update
/// `Δx = −(√(E[Δx²]+ε)/√(E[g²]+ε))·g`.
#[derive(Clone, Debug)]
pub struct AdaDelta {
    rho: f64,
    eps: f64,
    grad_accum: Vec<Tensor>,
    delta_accum: Vec<Tensor>,
}

impl AdaDelta {
    pub fn new(shapes: &[(usize, usize)], rho: f64, eps: f64) -> Self {
        assert!((0.0..1.0).contains(&rho), "decay must lie in [0,1)");
        assert!(eps > 0.0, "epsilon must be positive");
        AdaDelta {
            rho,
            eps,
            grad_accum: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            delta_accum: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
        }
    }

    pub fn for_block<B: ParamBlock>(block: &B, rho: f64, eps: f64) -> Self {
        let shapes: Vec<(usize, usize)> =
            params::tensors(block).iter().map(|t| t.shape()).collect();
        AdaDelta::new(&shapes, rho, eps)
    }

    /// `(E[g²], E[Δx²])` in parameter order.
    pub fn accumulators(&self) -> (&[Tensor], &[Tensor]) {
        (&self.grad_accum, &self.delta_accum)
    }

    pub fn step(
        &mut self,
        parameters: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<(), TrainError> {
        if parameters.len() != self.grad_accum.len() || grads.len() != self.grad_accum.len() {
            return Err(TrainError::CountMismatch {
                what: "adadelta step",
                expected: self.grad_accum.len(),
                found: parameters.len().min(grads.len()),
            });
        }
        for (i, ((p, g), (eg2, ed2))) in parameters
            .iter_mut()
            .zip(grads.iter())
            .zip(self.grad_accum.iter_mut().zip(self.delta_accum.iter_mut()))
            .enumerate()
        {
            if p.shape() != g.shape() || p.shape() != eg2.shape() {
                return Err(TrainError::ShapeMismatch {
                    what: "adadelta step",
                    index: i,
                    expected: eg2.shape(),
                    found: if p.shape() != eg2.shape() {
                        p.shape()
                    } else {
                        g.shape()
                    },
                });
            }
            for k in 0..p.len() {
                let gk = g.data()[k];
                let eg = self.rho * eg2.data()[k] + (1.0 - self.rho) * gk * gk;
                let dx = -((ed2.data()[k] + self.eps).sqrt() / (eg + self.eps).sqrt()) * gk;
                eg2.data_mut()[k] = eg;
                ed2.data_mut()[k] = self.rho * ed2.data()[k] + (1.0 - self.rho) * dx * dx;
                p.data_mut()[k] += dx;
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many consecutive epochs without strict improvement.
    pub patience: usize,
    pub seed: u64,
    pub sparsity: SparsityConfig,
    pub rho: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            max_epochs: 100,
            patience: 5,
            seed: 1,
            sparsity: SparsityConfig::none(),
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig {
                what: "batch_size must be at least 1",
            });
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig {
                what: "patience must be at least 1",
            });
        }
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig {
                what: "max_epochs must be at least 1",
            });
        }
        Ok(())
    }
}

/// Scalar summary of one example's loss, reported by the loss builder so
/// the epoch record can split the objective from the penalties.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub task: f64,
    pub penalty: f64,
    pub gate_sum: f64,
    pub gate_count: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean per-example task loss over the epoch's training pass.
    pub task_loss: f64,
    /// Mean per-example penalty total.
    pub penalty: f64,
    pub val_metric: f64,
    /// Mean gate activation over every gate evaluated during training.
    pub mean_gate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub diverged: bool,
}

/// Minibatch training with per-example graphs.
///
/// Each example in a batch is evaluated against frozen parameters (in
/// parallel when enabled); gradients are summed in example order and
/// averaged, so the penalty weight is independent of batch size and the
/// result is bit-identical across thread counts. The model is left holding
/// the parameters of the best validation epoch.
///
/// `loss_fn` builds one example's scalar loss and reports its parts;
/// `eval_fn` scores the model on the validation split, higher better.
pub fn train_loop<B, D, L, E>(
    model: &mut B,
    train_data: &[D],
    val_data: &[D],
    cfg: &TrainConfig,
    loss_fn: &L,
    eval_fn: &E,
) -> Result<TrainOutcome, TrainError>
where
    B: ParamBlock + Sync,
    D: Sync,
    L: Fn(&mut Graph, &B::Nodes, &D, f64, &mut Mode) -> Result<(NodeId, LossParts), GraphError>
        + Sync,
    E: Fn(&B, &[D]) -> Result<f64, GraphError>,
{
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptySplit { which: "train" });
    }
    if val_data.is_empty() {
        return Err(TrainError::EmptySplit { which: "validation" });
    }

    let shapes: Vec<(usize, usize)> = params::tensors(model).iter().map(|t| t.shape()).collect();
    let mut opt = AdaDelta::new(&shapes, cfg.rho, cfg.eps);
    let root_rng = RngStream::new(cfg.seed);
    let shuffle_root = root_rng.fork("shuffle");
    let dropout_root = root_rng.fork("dropout");

    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    let mut diverged = false;

    'training: for epoch in 0..cfg.max_epochs {
        let lambda = lambda_at(&cfg.sparsity, epoch);
        let epoch_start = params::snapshot(model);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        shuffle_root
            .fork_indexed(epoch as u64, 0)
            .shuffle(&mut order);

        let mut task_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut gate_sum = 0.0;
        let mut gate_count = 0usize;
        let mut processed = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let frozen: &B = model;
            let results = batch_map(chunk, |k, &idx| {
                let mut g = Graph::new();
                let (nodes, ids) = params::bind_all(frozen, &mut g);
                let mut rng = dropout_root.fork_indexed(epoch as u64, (processed + k) as u64);
                let mut mode = Mode::Train { rng: &mut rng };
                let (root, parts) = loss_fn(&mut g, &nodes, &train_data[idx], lambda, &mut mode)?;
                let loss = g.value(root).item();
                g.backward(root)?;
                let grads: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).clone()).collect();
                Ok::<_, GraphError>((loss, grads, parts))
            });

            let mut acc: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
            let mut batch_finite = true;
            for r in results {
                let (loss, grads, parts) = r?;
                if !loss.is_finite() {
                    batch_finite = false;
                }
                for (a, gt) in acc.iter_mut().zip(grads.iter()) {
                    a.add_assign(gt);
                }
                task_sum += parts.task;
                penalty_sum += parts.penalty;
                gate_sum += parts.gate_sum;
                gate_count += parts.gate_count;
            }
            if !batch_finite {
                log::warn!("non-finite loss at epoch {epoch}; restoring last finite parameters");
                match &best {
                    Some((_, _, snap)) => params::restore(model, snap),
                    None => params::restore(model, &epoch_start),
                }
                diverged = true;
                break 'training;
            }

            let inv = 1.0 / chunk.len() as f64;
            for a in acc.iter_mut() {
                a.scale_inplace(inv);
            }
            clip_global_norm(&mut acc, cfg.clip_norm);
            let mut tensors = params::tensors_mut(model);
            opt.step(&mut tensors, &acc)?;
            processed += chunk.len();
        }

        let metric = eval_fn(model, val_data)?;
        let n = train_data.len() as f64;
        log::debug!(
            "epoch {epoch}: lambda {lambda:.6} task {:.6} penalty {:.6} val {metric:.6}",
            task_sum / n,
            penalty_sum / n,
        );
        epochs.push(EpochStats {
            epoch,
            lambda,
            task_loss: task_sum / n,
            penalty: penalty_sum / n,
            val_metric: metric,
            mean_gate: if gate_count == 0 {
                0.0
            } else {
                gate_sum / gate_count as f64
            },
        });

        let improved = best.as_ref().is_none_or(|&(_, m, _)| metric > m);
        if improved {
            best = Some((epoch, metric, params::snapshot(model)));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("stopping at epoch {epoch}: {since_best} epochs without improvement");
                break;
            }
        }
    }

    let (best_epoch, best_metric) = match &best {
        Some((e, m, snap)) => {
            params::restore(model, snap);
            (*e, *m)
        }
        None => (0, f64::NEG_INFINITY),
    };
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_metric,
        diverged,
    })
}

/// Fraction of examples whose argmax class matches the label.
pub fn classification_accuracy(
    model: &SequenceClassifier,
    data: &[EncodedLabeled],
) -> Result<f64, GraphError> {
    if data.is_empty() {
        return Err(GraphError::EmptyInput { op: "evaluate" });
    }
    let mut correct = 0usize;
    for ex in data {
        if model.predict(&ex.tokens)? == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of stories answered with the exact token sequence, untruncated.
pub fn exact_match_accuracy<F>(stories: &[EncodedStory], mut answer: F) -> Result<f64, GraphError>
where
    F: FnMut(&EncodedStory) -> Result<(Vec<usize>, bool), GraphError>,
{
    if stories.is_empty() {
        return Err(GraphError::EmptyInput { op: "evaluate" });
    }
    let mut correct = 0usize;
    for story in stories {
        let (tokens, truncated) = answer(story)?;
        if !truncated && tokens == story.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / stories.len() as f64)
}

pub fn story_accuracy(
    model: &HgParams,
    stories: &[EncodedStory],
    max_len: usize,
) -> Result<f64, GraphError> {
    exact_match_accuracy(stories, |s| crate::hierarchical::answer_story(model, s, max_len))
}

pub fn reader_accuracy(
    model: &PlainSeqReader,
    stories: &[EncodedStory],
    max_len: usize,
) -> Result<f64, GraphError> {
    exact_match_accuracy(stories, |s| model.answer(s, max_len))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEval {
    pub accuracy: f64,
    pub recall: f64,
}

/// Accuracy and recall of thresholded (cosine, target) pairs. A pair is
/// positive when its value reaches `threshold`; recall over an all-negative
/// split is 1.0 by convention.
pub fn pair_metrics(scored: &[(f64, f64)], threshold: f64) -> PairEval {
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut fn_ = 0usize;
    for &(predicted, target) in scored {
        let pred_pos = predicted >= threshold;
        let is_pos = target >= threshold;
        match (pred_pos, is_pos) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
            (true, false) => {}
        }
    }
    let n = scored.len().max(1);
    PairEval {
        accuracy: (tp + tn) as f64 / n as f64,
        recall: if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        },
    }
}

pub fn paraphrase_metrics(
    model: &ParaphraseScorer,
    data: &[EncodedPair],
    threshold: f64,
) -> Result<PairEval, GraphError> {
    if data.is_empty() {
        return Err(GraphError::EmptyInput { op: "evaluate" });
    }
    let mut scored = Vec::with_capacity(data.len());
    for pair in data {
        scored.push((model.cosine(&pair.left, &pair.right)?, pair.target));
    }
    Ok(pair_metrics(&scored, threshold))
}

/// Mean eval-mode word-gate activation over the given positions of each
/// sequence. `select` picks which positions count.
pub fn mean_gate_where<F>(
    model: &SequenceClassifier,
    data: &[EncodedLabeled],
    mut select: F,
) -> Result<f64, GraphError>
where
    F: FnMut(&EncodedLabeled, usize) -> bool,
{
    let mut sum = 0.0;
    let mut count = 0usize;
    for ex in data {
        let gates = model.gate_profile(&ex.tokens)?;
        for (pos, g) in gates.iter().enumerate() {
            if select(ex, pos) {
                sum += g;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(GraphError::EmptyInput { op: "mean_gate" });
    }
    Ok(sum / count as f64)
}

/// Write the resolved config as a one-line JSON header, then one JSON record
/// per epoch. Identical inputs produce identical bytes.
pub fn write_metrics<W: Write, C: Serialize>(
    out: &mut W,
    config: &C,
    stats: &[EpochStats],
) -> std::io::Result<()> {
    let header = serde_json::json!({ "config": config });
    writeln!(out, "{header}")?;
    for s in stats {
        let line = serde_json::to_string(s).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Teacher-forced answer loss for one story, with the annealed weight
/// applied to the word-gate penalty.
pub fn story_loss_parts(
    g: &mut Graph,
    nodes: &crate::hierarchical::HgNodes,
    cfg: &crate::hierarchical::HgConfig,
    loss_cfg: &crate::objectives::AnswerLossConfig,
    story: &EncodedStory,
    lambda_word: f64,
    mode: &mut Mode,
) -> Result<(NodeId, LossParts), GraphError> {
    use crate::hierarchical::{encode_story_graph, teacher_forced_scores};
    use crate::objectives::answer_loss;

    let sg = encode_story_graph(g, nodes, cfg, story, mode)?;
    let (scores, targets) =
        teacher_forced_scores(g, &nodes.decoder, nodes.embeddings, sg.hl_final, &story.answer)?;
    let word_gates: Vec<NodeId> = sg.word_gates.iter().flatten().copied().collect();
    let effective = crate::objectives::AnswerLossConfig {
        lambda_word,
        ..*loss_cfg
    };
    let supporting: &BTreeSet<usize> = &story.supporting;
    let root = answer_loss(
        g,
        &effective,
        &scores,
        &targets,
        &sg.fact_gates,
        &word_gates,
        supporting,
    )?;
    let pred =
        crate::objectives::margin_prediction_loss(g, &scores, &targets, effective.gamma)?;
    let task = g.value(pred).item();
    let total = g.value(root).item();
    let mut gate_sum = 0.0;
    let mut gate_count = 0usize;
    for &w in &word_gates {
        gate_sum += g.value(w).item();
        gate_count += 1;
    }
    for &fg in &sg.fact_gates {
        gate_sum += g.value(fg).item();
        gate_count += 1;
    }
    Ok((
        root,
        LossParts {
            task,
            penalty: total - task,
            gate_sum,
            gate_count,
        },
    ))
}

/// Class cross-entropy plus the annealed word-gate penalty for one labeled
/// sequence.
pub fn classifier_loss_parts(
    g: &mut Graph,
    nodes: &crate::models::ClassifierNodes,
    cfg: &crate::models::ClassifierConfig,
    ex: &EncodedLabeled,
    lambda: f64,
    mode: &mut Mode,
) -> Result<(NodeId, LossParts), GraphError> {
    use crate::models::classify_graph;
    use crate::objectives::{class_cross_entropy, sparsity_penalty};

    let run = classify_graph(g, nodes, cfg, &ex.tokens, mode)?;
    let task = class_cross_entropy(g, run.scores, ex.label)?;
    let pen = sparsity_penalty(g, &run.gates, lambda)?;
    let root = g.add(task, pen)?;
    let gate_sum: f64 = run.gates.iter().map(|&n| g.value(n).item()).sum();
    Ok((
        root,
        LossParts {
            task: g.value(task).item(),
            penalty: g.value(pen).item(),
            gate_sum,
            gate_count: run.gates.len(),
        },
    ))
}

/// Cosine-target loss plus the annealed penalty over both towers' gates for
/// one sentence pair.
pub fn pair_loss_parts(
    g: &mut Graph,
    nodes: &crate::models::ScorerNodes,
    cfg: &crate::models::ScorerConfig,
    pair: &EncodedPair,
    lambda: f64,
    mode: &mut Mode,
) -> Result<(NodeId, LossParts), GraphError> {
    use crate::models::encode_pair_graph;
    use crate::objectives::paraphrase_pair_loss;

    let run = encode_pair_graph(g, nodes, cfg, &pair.left, &pair.right, mode)?;
    let root = paraphrase_pair_loss(
        g,
        run.h_left,
        run.h_right,
        pair.target,
        &run.gates_left,
        &run.gates_right,
        lambda,
    )?;
    let mut gate_sum = 0.0;
    let mut gate_count = 0usize;
    for &n in run.gates_left.iter().chain(run.gates_right.iter()) {
        gate_sum += g.value(n).item();
        gate_count += 1;
    }
    let total = g.value(root).item();
    let penalty = lambda * gate_sum;
    Ok((
        root,
        LossParts {
            task: total - penalty,
            penalty,
            gate_sum,
            gate_count,
        },
    ))
}

/// Teacher-forced ranking loss for the ungated reader baseline. No gates, so
/// the sparsity weight is ignored.
pub fn reader_loss_parts(
    g: &mut Graph,
    nodes: &crate::models::ReaderNodes,
    cfg: &crate::models::ReaderConfig,
    story: &EncodedStory,
    gamma: f64,
    mode: &mut Mode,
) -> Result<(NodeId, LossParts), GraphError> {
    use crate::models::reader_teacher_scores;
    use crate::objectives::margin_prediction_loss;

    let (scores, targets) = reader_teacher_scores(g, nodes, cfg, story, mode)?;
    let root = margin_prediction_loss(g, &scores, &targets, gamma)?;
    Ok((
        root,
        LossParts {
            task: g.value(root).item(),
            penalty: 0.0,
            gate_sum: 0.0,
            gate_count: 0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::GateKind;
    use crate::data::{encode_labeled, gen_needle, NeedleSpec, Vocabulary};
    use crate::models::ClassifierConfig;
    use crate::objectives::Regimen;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_accumulators() {
        let mut opt = AdaDelta::new(&[(2, 1)], 0.95, 1e-6);
        let mut p = Tensor::column(&[1.0, -2.0]);
        // Run one real step so the accumulators are nonzero.
        opt.step(&mut [&mut p], &[Tensor::column(&[1.0, 1.0])]).unwrap();
        let (eg_before, ed_before) = {
            let (a, b) = opt.accumulators();
            (a[0].clone(), b[0].clone())
        };
        let snapshot = p.clone();

        opt.step(&mut [&mut p], &[Tensor::zeros(2, 1)]).unwrap();
        assert_eq!(p, snapshot);
        let (eg, ed) = opt.accumulators();
        for k in 0..2 {
            assert_close(eg[0].data()[k], 0.95 * eg_before.data()[k], 1e-15);
            assert_close(ed[0].data()[k], 0.95 * ed_before.data()[k], 1e-15);
        }
    }

    #[test]
    fn first_step_matches_hand_value() {
        let mut opt = AdaDelta::new(&[(1, 1)], 0.95, 1e-6);
        let mut p = Tensor::scalar(0.0);
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        let expected = -(1e-6f64.sqrt() / (0.05 + 1e-6f64).sqrt());
        assert_close(p.item(), expected, 1e-15);
        assert_close(p.item(), -4.4721e-3, 1e-6);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut opt = AdaDelta::new(&[(1, 1), (1, 1)], 0.95, 1e-6);
        let mut a = Tensor::scalar(3.0);
        let mut b = Tensor::scalar(3.0);
        for _ in 0..5 {
            opt.step(&mut [&mut a, &mut b], &[Tensor::scalar(0.7), Tensor::scalar(0.7)])
                .unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn accumulators_stay_nonnegative() {
        let mut opt = AdaDelta::new(&[(1, 1)], 0.95, 1e-6);
        let mut p = Tensor::scalar(0.0);
        let mut rng = RngStream::new(5);
        for _ in 0..50 {
            let g = Tensor::scalar(rng.uniform(-3.0, 3.0));
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        let (eg, ed) = opt.accumulators();
        assert!(eg[0].data()[0] >= 0.0 && ed[0].data()[0] >= 0.0);
    }

    #[test]
    fn step_rejects_mismatched_shapes() {
        let mut opt = AdaDelta::new(&[(2, 1)], 0.95, 1e-6);
        let mut p = Tensor::column(&[0.0, 0.0]);
        let err = opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch { .. }));
        let err = opt.step(&mut [], &[]).unwrap_err();
        assert!(matches!(err, TrainError::CountMismatch { .. }));
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = vec![Tensor::column(&[3.0, 0.0]), Tensor::column(&[0.0, 4.0])];
        let norm = clip_global_norm(&mut grads, 5.0);
        assert_close(norm, 5.0, 1e-15);
        assert_eq!(grads[0].data()[0], 3.0);

        let norm = clip_global_norm(&mut grads, 1.0);
        assert_close(norm, 5.0, 1e-12);
        let after = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
        assert_close(after, 1.0, 1e-12);
    }

    // One scalar parameter fit to a constant: enough structure to exercise
    // the full loop without model noise.
    struct Scalar {
        w: Tensor,
    }

    impl ParamBlock for Scalar {
        type Nodes = NodeId;

        fn push_names(&self, prefix: &str, out: &mut Vec<String>) {
            out.push(format!("{prefix}w"));
        }

        fn push_tensors<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
            out.push(&self.w);
        }

        fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
            out.push(&mut self.w);
        }

        fn bind(&self, g: &mut Graph, ids: &mut Vec<NodeId>) -> NodeId {
            let w = g.leaf(self.w.clone());
            ids.push(w);
            w
        }
    }

    fn squared_error(
        g: &mut Graph,
        w: &NodeId,
        target: &f64,
        _lambda: f64,
        _mode: &mut Mode,
    ) -> Result<(NodeId, LossParts), GraphError> {
        let t = g.leaf(Tensor::scalar(*target));
        let d = g.sub(*w, t)?;
        let loss = g.hadamard(d, d)?;
        let parts = LossParts {
            task: g.value(loss).item(),
            penalty: 0.0,
            gate_sum: 0.0,
            gate_count: 0,
        };
        Ok((loss, parts))
    }

    fn neg_mse(model: &Scalar, data: &[f64]) -> Result<f64, GraphError> {
        let w = model.w.item();
        let mse = data.iter().map(|t| (w - t) * (w - t)).sum::<f64>() / data.len() as f64;
        Ok(-mse)
    }

    #[test]
    fn loop_fits_scalar_and_is_deterministic() {
        let data: Vec<f64> = vec![3.0; 40];
        let cfg = TrainConfig {
            batch_size: 8,
            max_epochs: 120,
            patience: 120,
            seed: 9,
            ..TrainConfig::default()
        };

        let run = |seed| {
            let mut model = Scalar {
                w: Tensor::scalar(0.0),
            };
            let cfg = TrainConfig { seed, ..cfg };
            let out =
                train_loop(&mut model, &data, &data, &cfg, &squared_error, &neg_mse).unwrap();
            (model.w.item(), out)
        };

        let (w1, out1) = run(9);
        let (w2, out2) = run(9);
        assert_eq!(w1, w2);
        assert_eq!(out1.epochs.len(), out2.epochs.len());
        for (a, b) in out1.epochs.iter().zip(out2.epochs.iter()) {
            assert_eq!(a.task_loss, b.task_loss);
            assert_eq!(a.val_metric, b.val_metric);
        }
        // AdaDelta moves slowly from cold accumulators, so just require
        // clear progress toward 3.0 and a best epoch matching the trace.
        assert!((w1 - 3.0).abs() < 1.5, "w {w1}");
        assert!(out1.best_metric > -9.0);
        assert!(!out1.diverged);
        let best = &out1.epochs[out1.best_epoch];
        assert_eq!(best.val_metric, out1.best_metric);
    }

    #[test]
    fn recorded_lambda_follows_schedule() {
        let data: Vec<f64> = vec![1.0; 8];
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 6,
            patience: 6,
            seed: 2,
            sparsity: SparsityConfig {
                lambda_max: 2.0,
                t_max: 4,
                regimen: Regimen::Linear,
            },
            ..TrainConfig::default()
        };
        let mut model = Scalar {
            w: Tensor::scalar(0.0),
        };
        let out = train_loop(&mut model, &data, &data, &cfg, &squared_error, &neg_mse).unwrap();
        for s in &out.epochs {
            assert_eq!(s.lambda, lambda_at(&cfg.sparsity, s.epoch));
        }
        assert_eq!(out.epochs[0].lambda, 0.0);
        assert_eq!(out.epochs[4].lambda, 2.0);
    }

    #[test]
    fn strictly_worsening_metric_stops_after_patience() {
        let data: Vec<f64> = vec![1.0; 4];
        let calls = AtomicUsize::new(0);
        let eval = |_: &Scalar, _: &[f64]| {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            Ok(-(n as f64))
        };
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 50,
            patience: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut model = Scalar {
            w: Tensor::scalar(0.0),
        };
        let out = train_loop(&mut model, &data, &data, &cfg, &squared_error, &eval).unwrap();
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.best_metric, 0.0);
    }

    #[test]
    fn best_parameters_are_restored_at_exit() {
        let data: Vec<f64> = vec![5.0; 10];
        let calls = AtomicUsize::new(0);
        // Epoch 0 scores best; later epochs keep training but score worse.
        let eval = |m: &Scalar, _: &[f64]| {
            let n = calls.fetch_add(1, Ordering::SeqCst);
            let _ = m;
            Ok(if n == 0 { 10.0 } else { -(n as f64) })
        };
        let cfg = TrainConfig {
            batch_size: 5,
            max_epochs: 10,
            patience: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let mut model = Scalar {
            w: Tensor::scalar(0.0),
        };
        let mut probe = Scalar {
            w: Tensor::scalar(0.0),
        };
        // Reproduce epoch 0's parameter value with a one-epoch run.
        let one = TrainConfig {
            max_epochs: 1,
            ..cfg
        };
        train_loop(&mut probe, &data, &data, &one, &squared_error, &neg_mse).unwrap();

        let out = train_loop(&mut model, &data, &data, &cfg, &squared_error, &eval).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert_eq!(model.w.item(), probe.w.item());
    }

    #[test]
    fn non_finite_loss_aborts_with_last_finite_parameters() {
        let data: Vec<f64> = vec![2.0; 6];
        let bomb = AtomicUsize::new(0);
        let loss = |g: &mut Graph,
                    w: &NodeId,
                    target: &f64,
                    lambda: f64,
                    mode: &mut Mode|
         -> Result<(NodeId, LossParts), GraphError> {
            let n = bomb.fetch_add(1, Ordering::SeqCst);
            if n >= 9 {
                let nan = g.leaf(Tensor::scalar(f64::NAN));
                return Ok((nan, LossParts::default()));
            }
            squared_error(g, w, target, lambda, mode)
        };
        let cfg = TrainConfig {
            batch_size: 3,
            max_epochs: 10,
            patience: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut model = Scalar {
            w: Tensor::scalar(0.0),
        };
        let out = train_loop(&mut model, &data, &data, &cfg, &loss, &neg_mse).unwrap();
        assert!(out.diverged);
        // The bomb fires in epoch 1's second batch; the best snapshot is
        // epoch 0's, so the model must not hold any epoch-1 update.
        assert_eq!(out.epochs.len(), 1);

        let mut reference = Scalar {
            w: Tensor::scalar(0.0),
        };
        let one = TrainConfig {
            max_epochs: 1,
            ..cfg
        };
        train_loop(&mut reference, &data, &data, &one, &squared_error, &neg_mse).unwrap();
        assert_eq!(model.w.item(), reference.w.item());
    }

    #[test]
    fn empty_splits_are_rejected() {
        let mut model = Scalar {
            w: Tensor::scalar(0.0),
        };
        let cfg = TrainConfig::default();
        let err = train_loop(&mut model, &[], &[1.0], &cfg, &squared_error, &neg_mse)
            .unwrap_err();
        assert!(matches!(err, TrainError::EmptySplit { which: "train" }));
        let err = train_loop(&mut model, &[1.0], &[], &cfg, &squared_error, &neg_mse)
            .unwrap_err();
        assert!(matches!(
            err,
            TrainError::EmptySplit {
                which: "validation"
            }
        ));
    }

    #[test]
    fn pair_metrics_hand_fixture() {
        let scored = [(0.9, 1.0), (0.4, 1.0), (0.6, 0.0), (0.2, 0.0)];
        let m = pair_metrics(&scored, 0.5);
        assert_close(m.accuracy, 0.5, 1e-15);
        assert_close(m.recall, 0.5, 1e-15);

        let all_neg = [(0.1, 0.0), (0.7, 0.0)];
        let m = pair_metrics(&all_neg, 0.5);
        assert_close(m.recall, 1.0, 1e-15);
        assert_close(m.accuracy, 0.5, 1e-15);

        let perfect = [(0.9, 1.0), (0.1, 0.0)];
        let m = pair_metrics(&perfect, 0.5);
        assert_close(m.accuracy, 1.0, 1e-15);
        assert_close(m.recall, 1.0, 1e-15);
    }

    #[test]
    fn metrics_lines_are_deterministic_and_headed_by_config() {
        let cfg = TrainConfig::default();
        let stats = vec![
            EpochStats {
                epoch: 0,
                lambda: 0.0,
                task_loss: 1.5,
                penalty: 0.25,
                val_metric: 0.5,
                mean_gate: 0.75,
            },
            EpochStats {
                epoch: 1,
                lambda: 0.5,
                task_loss: 1.0,
                penalty: 0.5,
                val_metric: 0.625,
                mean_gate: 0.5,
            },
        ];
        let mut a = Vec::new();
        write_metrics(&mut a, &cfg, &stats).unwrap();
        let mut b = Vec::new();
        write_metrics(&mut b, &cfg, &stats).unwrap();
        assert_eq!(a, b);

        let text = String::from_utf8(a).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["config"]["batch_size"], 50);
        let epoch1: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(epoch1["epoch"], 1);
        assert_eq!(epoch1["lambda"], 0.5);
    }

    fn needle_vocab_and_data(
        spec: &NeedleSpec,
        seed: u64,
    ) -> (Vocabulary, Vec<EncodedLabeled>, Vec<EncodedLabeled>) {
        let train = gen_needle(spec, &mut RngStream::new(seed));
        let val = gen_needle(
            &NeedleSpec {
                n_examples: spec.n_examples / 4,
                ..*spec
            },
            &mut RngStream::new(seed ^ 0xffff),
        );
        let vocab = Vocabulary::build(
            train.iter().flat_map(|ex| ex.tokens.iter().map(String::as_str)),
            1,
        );
        let enc = |xs: &[crate::data::LabeledSeq]| {
            xs.iter().map(|x| encode_labeled(x, &vocab)).collect::<Vec<_>>()
        };
        (vocab.clone(), enc(&train), enc(&val))
    }

    #[test]
    fn smoke_train_learns_tiny_needle_task() {
        let spec = NeedleSpec {
            n_examples: 240,
            seq_len: 6,
            filler_vocab: 10,
            n_needles: 3,
        };
        let (vocab, train, val) = needle_vocab_and_data(&spec, 11);
        let ccfg = ClassifierConfig {
            vocab: vocab.len(),
            embed_dim: 8,
            hidden: 8,
            classes: 3,
            gate: GateKind::Linear,
            dropout: 0.0,
        };
        let mut model = SequenceClassifier::new(ccfg, &mut RngStream::new(77));
        let cfg = TrainConfig {
            batch_size: 20,
            max_epochs: 40,
            patience: 40,
            seed: 13,
            ..TrainConfig::default()
        };
        let loss = move |g: &mut Graph,
                         nodes: &crate::models::ClassifierNodes,
                         ex: &EncodedLabeled,
                         lambda: f64,
                         mode: &mut Mode|
         -> Result<(NodeId, LossParts), GraphError> {
            classifier_loss_parts(g, nodes, &ccfg, ex, lambda, mode)
        };
        let out = train_loop(
            &mut model,
            &train,
            &val,
            &cfg,
            &loss,
            &classification_accuracy,
        )
        .unwrap();
        assert!(
            out.best_metric > 0.9,
            "validation accuracy {}",
            out.best_metric
        );
    }
}
