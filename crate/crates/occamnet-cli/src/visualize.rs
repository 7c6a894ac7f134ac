//! `visualize`: render one example's gate activations as a heatmap report.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use occamnet::checkpoint;
use occamnet::data::{
    encode_labeled, encode_pair, encode_story, parse_labeled_sequences, parse_paraphrase_pairs,
    parse_stories, tokenize, Vocabulary,
};
use occamnet::dropout::Mode;
use occamnet::hierarchical;
use occamnet::models::{classify_graph, encode_pair_graph};
use occamnet::params;
use occamnet::trace::{render_ansi, render_html, FactGroup, GateTrace};
use occamnet::Graph;

use crate::config::{checkpoint_id, from_checkpoint_header, FormatArg, ModelSpec, TaskArg};
use crate::task::{
    build_classifier, build_hg, build_scorer, eval_path, needle_raw, read_text,
};

fn pick<'a, T>(items: &'a [T], index: usize, what: &str) -> Result<&'a T> {
    items.get(index).ok_or_else(|| {
        anyhow::anyhow!("example {index} is out of range: {} holds {} examples", what, items.len())
    })
}

/// Eval-mode word gates for one labeled sequence, paired with its tokens.
fn classifier_trace(
    model: &occamnet::models::SequenceClassifier,
    tokens: &[String],
    ids: &[usize],
) -> Result<Vec<(String, f64)>> {
    let mut g = Graph::new();
    let (nodes, _) = params::bind_all(model, &mut g);
    let run = classify_graph(&mut g, &nodes, &model.cfg, ids, &mut Mode::Eval)?;
    Ok(tokens
        .iter()
        .zip(&run.gates)
        .map(|(t, &n)| (t.clone(), g.value(n).item()))
        .collect())
}

fn build_trace(
    checkpoint_path: &Path,
    example: usize,
    data: Option<&Path>,
) -> Result<GateTrace> {
    let ck = checkpoint::load_file(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let (cfg, tokens) = from_checkpoint_header(&ck.header)?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let seed = cfg.train.seed;

    let mut trace = GateTrace {
        task: cfg.task.name().to_string(),
        checkpoint_id: checkpoint_id(checkpoint_path),
        example_id: example.to_string(),
        units: Vec::new(),
        groups: None,
    };

    match cfg.task {
        TaskArg::Needle | TaskArg::Sentiment => {
            let classes = match cfg.model {
                ModelSpec::Classifier { classes, .. } => classes,
                _ => bail!("checkpoint does not describe a classifier"),
            };
            let raw = match (cfg.task, data) {
                (_, Some(p)) => {
                    let p = p.to_string_lossy();
                    parse_labeled_sequences(&read_text(&p)?, classes)
                        .with_context(|| format!("parsing {p}"))?
                }
                (TaskArg::Needle, None) => needle_raw(&cfg)?.1,
                (_, None) => {
                    let p = eval_path(None, &cfg.data.data, "--data")?;
                    parse_labeled_sequences(&read_text(&p)?, classes)
                        .with_context(|| format!("parsing {p}"))?
                }
            };
            let ex = pick(&raw, example, "the data")?;
            let mut model = build_classifier(&cfg.model, vocab.len(), seed)?;
            checkpoint::load_into_block(&ck, &mut model)?;
            let enc = encode_labeled(ex, &vocab);
            trace.units = classifier_trace(&model, &ex.tokens, &enc.tokens)?;
        }
        TaskArg::Paraphrase => {
            let path = eval_path(data, &cfg.data.data, "--data")?;
            let raw = parse_paraphrase_pairs(&read_text(&path)?)
                .with_context(|| format!("parsing {path}"))?;
            let pair = pick(&raw, example, "the data")?;
            let mut model = build_scorer(&cfg.model, vocab.len(), seed)?;
            checkpoint::load_into_block(&ck, &mut model)?;
            let enc = encode_pair(pair, &vocab);
            let mut g = Graph::new();
            let (nodes, _) = params::bind_all(&model, &mut g);
            let run = encode_pair_graph(
                &mut g,
                &nodes,
                &model.cfg,
                &enc.left,
                &enc.right,
                &mut Mode::Eval,
            )?;
            for (toks, gates) in [
                (&pair.left, &run.gates_left),
                (&pair.right, &run.gates_right),
            ] {
                for (t, &n) in toks.iter().zip(gates.iter()) {
                    trace.units.push((t.clone(), g.value(n).item()));
                }
            }
            // Sentences are not facts, but the group mechanism is how the
            // renderer separates unit runs; full opacity keeps both plain.
            trace.groups = Some(vec![
                FactGroup { len: pair.left.len(), gate: 1.0 },
                FactGroup { len: pair.right.len(), gate: 1.0 },
            ]);
        }
        TaskArg::Babi => {
            let path = eval_path(data, &cfg.data.babi_file, "--babi-file")?;
            let raw = parse_stories(&read_text(&path)?)
                .with_context(|| format!("parsing {path}"))?;
            let story = pick(&raw, example, "the data")?;
            let mut model = match cfg.model {
                ModelSpec::Hg { .. } => build_hg(&cfg.model, vocab.len(), seed)?,
                _ => bail!("gate traces need a checkpoint of the gated hierarchy"),
            };
            checkpoint::load_into_block(&ck, &mut model)?;
            let enc = encode_story(story, &vocab);
            let se = hierarchical::encode_story(&model, &enc)?;
            let mut groups = Vec::with_capacity(story.facts.len());
            for (fi, fact) in story.facts.iter().enumerate() {
                let words = tokenize(fact);
                let gates = &se.word_gates[fi];
                if words.len() != gates.len() {
                    bail!("fact {fi} re-tokenizes to {} words but the trace has {} gates", words.len(), gates.len());
                }
                for (w, &gv) in words.iter().zip(gates.iter()) {
                    trace.units.push((w.clone(), gv));
                }
                groups.push(FactGroup { len: words.len(), gate: se.fact_gates[fi] });
            }
            trace.groups = Some(groups);
        }
    }
    Ok(trace)
}

pub fn run_visualize(
    checkpoint_path: &Path,
    example: usize,
    data: Option<&Path>,
    format: FormatArg,
    out: Option<&Path>,
) -> Result<()> {
    let trace = build_trace(checkpoint_path, example, data)?;
    let rendered = match format {
        FormatArg::Html => render_html(&trace)?,
        FormatArg::Ansi => render_ansi(&trace)?,
    };
    match out {
        Some(p) => {
            fs::write(p, &rendered).with_context(|| format!("writing {}", p.display()))?;
            println!("wrote {} trace to {}", trace.task, p.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
