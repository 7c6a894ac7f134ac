//! `grad-check`: compare reverse-mode gradients against central differences.

use std::collections::BTreeSet;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, ValueEnum};
use occamnet::cells::{
    lstm_step, run_gated_sequence, stacked_gated_step, zero_state, GateKind, GatedLstm,
    LstmParams, StackedGatedParams,
};
use occamnet::data::EncodedStory;
use occamnet::dropout::Mode;
use occamnet::gradcheck::{grad_check_block, GradCheckReport};
use occamnet::graph::{Graph, GraphError, NodeId};
use occamnet::hierarchical::{HgConfig, HgParams};
use occamnet::objectives::AnswerLossConfig;
use occamnet::train::story_loss_parts;
use occamnet::{RngStream, Tensor};

use crate::config::GateArg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckModel {
    Lstm,
    GatedLstm,
    Stacked,
    Hg,
    All,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    /// Block to check.
    #[arg(long, value_enum, default_value_t = CheckModel::All)]
    pub model: CheckModel,
    #[arg(long, default_value_t = 4)]
    pub hidden: usize,
    /// Input vector dimension.
    #[arg(long, default_value_t = 3)]
    pub input: usize,
    /// Stack depth for the stacked model.
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = GateArg::Quad)]
    pub gate: GateArg,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Maximum relative error accepted per parameter.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

const SEQ_LEN: usize = 3;

/// Fixed input column vectors, identical for every evaluation of a check.
fn probe_inputs(dim: usize, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = RngStream::new(seed).fork("check-input");
    (0..n)
        .map(|_| {
            let mut t = Tensor::zeros(dim, 1);
            rng.fill_uniform(&mut t, -0.5, 0.5);
            t
        })
        .collect()
}

fn add_all(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId, GraphError> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

pub fn check_lstm(args: &CheckArgs) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(args.seed).fork("check-init");
    let mut block = LstmParams::new(args.input, args.hidden, &mut rng);
    let xs = probe_inputs(args.input, SEQ_LEN, args.seed);
    let hidden = args.hidden;
    let report = grad_check_block(&mut block, args.step, args.tol, move |g, nodes| {
        let mut state = zero_state(g, hidden);
        let mut parts = Vec::new();
        for x in &xs {
            let xid = g.leaf(x.clone());
            state = lstm_step(g, nodes, xid, &state)?;
            parts.push(g.sum(state.y));
        }
        add_all(g, &parts)
    })?;
    Ok(report)
}

pub fn check_gated(args: &CheckArgs, kind: GateKind) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(args.seed).fork("check-init");
    let mut block = GatedLstm::new(kind, args.input, args.hidden, &mut rng);
    let xs = probe_inputs(args.input, SEQ_LEN, args.seed);
    let hidden = args.hidden;
    let report = grad_check_block(&mut block, args.step, args.tol, move |g, nodes| {
        let ids: Vec<NodeId> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let start = zero_state(g, hidden);
        let (states, gates) = run_gated_sequence(g, nodes, &ids, start)?;
        let mut parts: Vec<NodeId> = states.iter().map(|s| g.sum(s.y)).collect();
        parts.extend(gates);
        add_all(g, &parts)
    })?;
    Ok(report)
}

pub fn check_stacked(args: &CheckArgs) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(args.seed).fork("check-init");
    let mut block = StackedGatedParams::new(
        args.gate.into(),
        args.input,
        args.hidden,
        args.layers,
        &mut rng,
    );
    let xs = probe_inputs(args.input, SEQ_LEN, args.seed);
    let hidden = args.hidden;
    let layers = args.layers;
    let report = grad_check_block(&mut block, args.step, args.tol, move |g, nodes| {
        let mut states: Vec<_> = (0..layers).map(|_| zero_state(g, hidden)).collect();
        let mut parts = Vec::new();
        for x in &xs {
            let xid = g.leaf(x.clone());
            let (next, gate) = stacked_gated_step(g, nodes, xid, &states)?;
            states = next;
            let top = states.last().expect("stack is nonempty");
            parts.push(g.sum(top.y));
            parts.push(gate);
        }
        add_all(g, &parts)
    })?;
    Ok(report)
}

/// Full hierarchical model with the combined answer loss on a two-fact
/// story. Dimensions are fixed small so central differences stay cheap.
pub fn check_hg(args: &CheckArgs) -> Result<GradCheckReport> {
    let cfg = HgConfig {
        vocab: 12,
        d_emb: 4,
        h_fact: 3,
        h_question: 3,
        h_hl: 3,
        hl_layers: 2,
        h_dec: 3,
        gate: args.gate.into(),
        use_question_final: false,
        dropout_input: 0.0,
        dropout_hl: 0.0,
    };
    let story = EncodedStory {
        facts: vec![vec![3, 4, 5], vec![6, 7]],
        question: vec![8, 9],
        answer: vec![10],
        supporting: BTreeSet::from([0]),
    };
    let loss_cfg = AnswerLossConfig::default();
    let mut rng = RngStream::new(args.seed).fork("check-init");
    let mut block = HgParams::new(cfg.clone(), &mut rng);
    let report = grad_check_block(&mut block, args.step, args.tol, move |g, nodes| {
        let mut mode = Mode::Eval;
        let (root, _) = story_loss_parts(g, nodes, &cfg, &loss_cfg, &story, 0.1, &mut mode)?;
        Ok(root)
    })?;
    Ok(report)
}

fn print_report(name: &str, report: &GradCheckReport) {
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{name}: max rel err {:.3e} over {} tensors .. {verdict}",
        report.max_rel_err(),
        report.params.len()
    );
    for f in report.failures() {
        println!(
            "  {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
            f.name, f.worst_index, f.analytic_at_worst, f.numeric_at_worst, f.max_rel_err
        );
    }
}

pub fn run_gradcheck(args: &CheckArgs) -> Result<ExitCode> {
    let mut checks: Vec<(String, GradCheckReport)> = Vec::new();
    match args.model {
        CheckModel::Lstm => checks.push(("lstm".into(), check_lstm(args)?)),
        CheckModel::GatedLstm => {
            let name = format!("gated-lstm ({:?})", GateKind::from(args.gate));
            checks.push((name.to_lowercase(), check_gated(args, args.gate.into())?));
        }
        CheckModel::Stacked => {
            checks.push((format!("stacked ({} layers)", args.layers), check_stacked(args)?))
        }
        CheckModel::Hg => checks.push(("hg".into(), check_hg(args)?)),
        CheckModel::All => {
            checks.push(("lstm".into(), check_lstm(args)?));
            checks.push(("gated-lstm (linear)".into(), check_gated(args, GateKind::Linear)?));
            checks.push(("gated-lstm (quad)".into(), check_gated(args, GateKind::Quad)?));
            checks.push((format!("stacked ({} layers)", args.layers), check_stacked(args)?));
            checks.push(("hg".into(), check_hg(args)?));
        }
    }

    for (name, report) in &checks {
        print_report(name, report);
    }
    let failed = checks.iter().filter(|(_, r)| !r.passed()).count();
    if failed == 0 {
        println!("all {} checks passed (tol {:.1e})", checks.len(), args.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{failed} of {} checks failed (tol {:.1e})", checks.len(), args.tol);
        Ok(ExitCode::FAILURE)
    }
}
