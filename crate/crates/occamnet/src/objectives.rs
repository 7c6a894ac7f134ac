//! Training objectives: task losses, gate penalties, and the penalty
//! annealing schedule.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

/// Gate values are clamped into [ε, 1−ε] before any logarithm.
pub const GATE_LOG_EPS: f64 = 1e-7;

/// How the gate penalty weight grows over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regimen {
    Flat,
    Linear,
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub lambda_max: f64,
    pub t_max: usize,
    pub regimen: Regimen,
}

impl SparsityConfig {
    pub fn none() -> Self {
        SparsityConfig {
            lambda_max: 0.0,
            t_max: 0,
            regimen: Regimen::Flat,
        }
    }
}

/// Penalty weight at a zero-based epoch. Annealed regimens ramp over the
/// first `t_max` epochs and hold at `lambda_max` afterwards; `t_max = 0`
/// means fully annealed from the start.
pub fn lambda_at(cfg: &SparsityConfig, epoch: usize) -> f64 {
    match cfg.regimen {
        Regimen::Flat => cfg.lambda_max,
        Regimen::Linear | Regimen::Quadratic => {
            if cfg.t_max == 0 {
                return cfg.lambda_max;
            }
            let ratio = epoch as f64 / cfg.t_max as f64;
            let ramp = match cfg.regimen {
                Regimen::Linear => ratio,
                Regimen::Quadratic => ratio * ratio,
                Regimen::Flat => unreachable!(),
            };
            (ramp * cfg.lambda_max).min(cfg.lambda_max)
        }
    }
}

/// Sum of scalar gate nodes, as one 1×1 node.
pub fn gate_sum(g: &mut Graph, gates: &[NodeId]) -> Result<NodeId, GraphError> {
    let cat = g.concat_rows(gates)?;
    Ok(g.sum(cat))
}

/// L1 gate penalty `λ Σᵢ gᵢ`. Gates are already nonnegative, so the plain
/// sum is the L1 norm.
pub fn sparsity_penalty(
    g: &mut Graph,
    gates: &[NodeId],
    lambda: f64,
) -> Result<NodeId, GraphError> {
    let s = gate_sum(g, gates)?;
    Ok(g.scale(s, lambda))
}

/// Cross-entropy between a one-hot label and the softmax of raw scores:
/// `logΣexp(s) − s[label]`.
pub fn class_cross_entropy(
    g: &mut Graph,
    scores: NodeId,
    label: usize,
) -> Result<NodeId, GraphError> {
    let lse = g.log_sum_exp(scores)?;
    let s = g.select_row(scores, label)?;
    g.sub(lse, s)
}

/// Squared error between the cosine of two encodings and a target
/// similarity in [0, 1].
pub fn cosine_target_loss(
    g: &mut Graph,
    h1: NodeId,
    h2: NodeId,
    target: f64,
) -> Result<NodeId, GraphError> {
    let n1 = g.dot(h1, h1)?;
    let n2 = g.dot(h2, h2)?;
    if g.value(n1).item() == 0.0 || g.value(n2).item() == 0.0 {
        return Err(GraphError::Domain {
            op: "cosine",
            value: 0.0,
        });
    }
    let d = g.dot(h1, h2)?;
    let s1 = g.sqrt(n1)?;
    let s2 = g.sqrt(n2)?;
    let denom = g.hadamard(s1, s2)?;
    let inv = g.recip(denom)?;
    let cos = g.hadamard(d, inv)?;
    let diff = g.add_const(cos, -target);
    g.hadamard(diff, diff)
}

/// Ranking loss `Σ_{w∈targets} Σ_{w̄≠w} max(0, γ − s(w) + s(w̄))`.
///
/// Computed per target as `sum(relu(s − s(w) + γ))` minus the target's own
/// term `max(0, γ)`; the self-term's two score contributions cancel exactly
/// in the gradient, so the shortcut is differentiation-safe.
pub fn margin_ranking_loss(
    g: &mut Graph,
    scores: NodeId,
    targets: &[usize],
    gamma: f64,
) -> Result<NodeId, GraphError> {
    if targets.is_empty() {
        return Err(GraphError::EmptyInput {
            op: "margin_ranking_loss",
        });
    }
    let n = g.value(scores).rows();
    let mut total: Option<NodeId> = None;
    for &w in targets {
        let s_w = g.select_row(scores, w)?;
        let ones = g.leaf(Tensor::full(n, 1, 1.0));
        let s_w_col = g.mul_scalar(ones, s_w)?;
        let diff = g.sub(scores, s_w_col)?;
        let shifted = g.add_const(diff, gamma);
        let hinge = g.relu(shifted);
        let summed = g.sum(hinge);
        let term = g.add_const(summed, -gamma.max(0.0));
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("targets checked nonempty"))
}

/// Per-position ranking loss over a decoded sequence: position `i` pairs
/// `score_seq[i]` with `targets[i]`. Extra trailing score positions are
/// allowed and contribute nothing.
pub fn margin_prediction_loss(
    g: &mut Graph,
    score_seq: &[NodeId],
    targets: &[usize],
    gamma: f64,
) -> Result<NodeId, GraphError> {
    if targets.is_empty() {
        return Err(GraphError::EmptyInput {
            op: "margin_prediction_loss",
        });
    }
    if score_seq.len() < targets.len() {
        return Err(GraphError::IndexOutOfRange {
            op: "margin_prediction_loss",
            index: targets.len() - 1,
            len: score_seq.len(),
        });
    }
    let mut total: Option<NodeId> = None;
    for (&scores, &target) in score_seq.iter().zip(targets.iter()) {
        let term = margin_ranking_loss(g, scores, &[target], gamma)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("targets checked nonempty"))
}

/// Squared cosine-target error plus the gate penalty over both sentences:
/// `(cos(h1,h2) − t)² + λ(Σ g₁ + Σ g₂)`.
#[allow(clippy::too_many_arguments)]
pub fn paraphrase_pair_loss(
    g: &mut Graph,
    h1: NodeId,
    h2: NodeId,
    target: f64,
    gates1: &[NodeId],
    gates2: &[NodeId],
    lambda: f64,
) -> Result<NodeId, GraphError> {
    let base = cosine_target_loss(g, h1, h2, target)?;
    let all: Vec<NodeId> = gates1.iter().chain(gates2.iter()).copied().collect();
    if all.is_empty() {
        return Ok(base);
    }
    let penalty = sparsity_penalty(g, &all, lambda)?;
    g.add(base, penalty)
}

/// Supervision on fact gates: supporting facts are pushed open, the rest
/// are pushed closed with weight `mu`. This is
/// `−[Σ_{i∈S} log gᵢ + μ Σ_{i∉S} log(1 − gᵢ)]`, clamped away from 0 and 1.
pub fn fact_selection_loss(
    g: &mut Graph,
    fact_gates: &[NodeId],
    supporting: &BTreeSet<usize>,
    mu: f64,
) -> Result<NodeId, GraphError> {
    if fact_gates.is_empty() {
        return Err(GraphError::EmptyInput {
            op: "fact_selection_loss",
        });
    }
    if let Some(&bad) = supporting.iter().find(|&&i| i >= fact_gates.len()) {
        return Err(GraphError::IndexOutOfRange {
            op: "fact_selection_loss",
            index: bad,
            len: fact_gates.len(),
        });
    }
    let mut acc: Option<NodeId> = None;
    for (i, &gate) in fact_gates.iter().enumerate() {
        let c = g.clamp(gate, GATE_LOG_EPS, 1.0 - GATE_LOG_EPS)?;
        let term = if supporting.contains(&i) {
            g.log(c)?
        } else {
            let closed = g.one_minus(c);
            let l = g.log(closed)?;
            g.scale(l, mu)
        };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let inner = acc.expect("fact_gates checked nonempty");
    Ok(g.scale(inner, -1.0))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AnswerLossConfig {
    /// Ranking margin γ.
    pub gamma: f64,
    /// Weight μ on the closed-gate half of the fact supervision.
    pub mu_unsupporting: f64,
    /// Weight on the fact supervision term.
    pub lambda_fact: f64,
    /// Weight on the word-gate sum.
    pub lambda_word: f64,
}

impl Default for AnswerLossConfig {
    fn default() -> Self {
        AnswerLossConfig {
            gamma: 1.0,
            mu_unsupporting: 0.1,
            lambda_fact: 1.0,
            lambda_word: 0.1,
        }
    }
}

/// Full question-answering objective: per-step ranking loss on the decoded
/// answer, plus weighted fact supervision and word-gate sparsity.
#[allow(clippy::too_many_arguments)]
pub fn answer_loss(
    g: &mut Graph,
    cfg: &AnswerLossConfig,
    step_scores: &[NodeId],
    step_targets: &[usize],
    fact_gates: &[NodeId],
    word_gates: &[NodeId],
    supporting: &BTreeSet<usize>,
) -> Result<NodeId, GraphError> {
    let e_pred = margin_prediction_loss(g, step_scores, step_targets, cfg.gamma)?;

    let e_fact = fact_selection_loss(g, fact_gates, supporting, cfg.mu_unsupporting)?;
    let e_fact_w = g.scale(e_fact, cfg.lambda_fact);

    let e_word = gate_sum(g, word_gates)?;
    let e_word_w = g.scale(e_word, cfg.lambda_word);

    let partial = g.add(e_pred, e_fact_w)?;
    g.add(partial, e_word_w)
}
