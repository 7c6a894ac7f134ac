//! Data loading, model construction, and the train/eval pipelines behind the
//! `train` and `eval` subcommands. `sweep` reuses [`run_training`] per cell.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use occamnet::checkpoint;
use occamnet::data::{
    encode_labeled, encode_pair, encode_story, gen_needle, parse_labeled_sequences,
    parse_paraphrase_pairs, parse_stories, tokenize, EncodedLabeled, EncodedPair, EncodedStory,
    LabeledSeq, NeedleSpec, ParaphrasePair, Story, Vocabulary,
};
use occamnet::dropout::Mode;
use occamnet::hierarchical::{self, HgConfig, HgParams};
use occamnet::models::{
    encode_pair_graph, ClassifierConfig, ParaphraseScorer, PlainSeqReader, ReaderConfig,
    ScorerConfig, SequenceClassifier,
};
use occamnet::params;
use occamnet::train::{
    classification_accuracy, classifier_loss_parts, mean_gate_where, pair_loss_parts,
    paraphrase_metrics, reader_accuracy, reader_loss_parts, story_accuracy, story_loss_parts,
    train_loop, write_metrics, EpochStats, TrainOutcome,
};
use occamnet::{Graph, GraphError, RngStream};
use serde::Serialize;

use crate::config::{ModelSpec, ResolvedConfig, SplitArg, TaskArg};

/// Threshold on predicted cosine above which a pair counts as a paraphrase.
pub const PAIR_THRESHOLD: f64 = 0.5;

pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Option<Vec<T>>,
}

pub enum TaskData {
    Classify(Vocabulary, Splits<EncodedLabeled>),
    Pairs(Vocabulary, Splits<EncodedPair>),
    Stories(Vocabulary, Splits<EncodedStory>),
}

pub fn read_text(path: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {path}"))
}

/// Carve the trailing 20% (at least one element) off as validation.
fn carve_val<T>(mut items: Vec<T>) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        bail!("need at least 2 examples to carve a validation split");
    }
    let n_val = (items.len() / 5).max(1);
    let val = items.split_off(items.len() - n_val);
    Ok((items, val))
}

pub fn needle_raw(
    cfg: &ResolvedConfig,
) -> Result<(Vec<LabeledSeq>, Vec<LabeledSeq>, Vec<LabeledSeq>)> {
    let classes = match cfg.model {
        ModelSpec::Classifier { classes, .. } => classes,
        _ => bail!("needle config does not describe a classifier"),
    };
    let d = &cfg.data;
    let spec = NeedleSpec {
        n_examples: d.train_examples + d.val_examples + d.test_examples,
        seq_len: d.seq_len,
        filler_vocab: d.filler_vocab,
        n_needles: classes,
    };
    let mut rng = RngStream::new(cfg.train.seed).fork("data");
    let mut all = gen_needle(&spec, &mut rng);
    let test = all.split_off(d.train_examples + d.val_examples);
    let val = all.split_off(d.train_examples);
    Ok((all, val, test))
}

fn story_token_stream(stories: &[Story]) -> Vec<String> {
    let mut toks = Vec::new();
    for s in stories {
        for f in &s.facts {
            toks.extend(tokenize(f));
        }
        toks.extend(tokenize(&s.question));
        // Answers are matched as whole tokens, so they enter the table raw.
        toks.extend(s.answers.iter().cloned());
    }
    toks
}

pub fn load(cfg: &ResolvedConfig) -> Result<TaskData> {
    match cfg.task {
        TaskArg::Needle => {
            let (train, val, test) = needle_raw(cfg)?;
            let vocab =
                Vocabulary::build(train.iter().flat_map(|e| e.tokens.iter()), 1);
            let enc = |xs: &[LabeledSeq]| xs.iter().map(|e| encode_labeled(e, &vocab)).collect();
            let splits = Splits {
                train: enc(&train),
                val: enc(&val),
                test: if test.is_empty() { None } else { Some(enc(&test)) },
            };
            Ok(TaskData::Classify(vocab, splits))
        }
        TaskArg::Sentiment => {
            let classes = match cfg.model {
                ModelSpec::Classifier { classes, .. } => classes,
                _ => unreachable!("sentiment task always builds a classifier"),
            };
            let path = cfg.data.data.as_deref().expect("checked at resolve");
            let all = parse_labeled_sequences(&read_text(path)?, classes)
                .with_context(|| format!("parsing {path}"))?;
            let (train, val) = match &cfg.data.val_data {
                Some(vp) => (
                    all,
                    parse_labeled_sequences(&read_text(vp)?, classes)
                        .with_context(|| format!("parsing {vp}"))?,
                ),
                None => carve_val(all)?,
            };
            let vocab = Vocabulary::build(train.iter().flat_map(|e| e.tokens.iter()), 1);
            let enc = |xs: &[LabeledSeq]| xs.iter().map(|e| encode_labeled(e, &vocab)).collect();
            let test = match &cfg.data.test_data {
                Some(tp) => Some(
                    parse_labeled_sequences(&read_text(tp)?, classes)
                        .with_context(|| format!("parsing {tp}"))?,
                ),
                None => None,
            };
            let splits = Splits {
                train: enc(&train),
                val: enc(&val),
                test: test.as_deref().map(enc),
            };
            Ok(TaskData::Classify(vocab, splits))
        }
        TaskArg::Paraphrase => {
            let path = cfg.data.data.as_deref().expect("checked at resolve");
            let all = parse_paraphrase_pairs(&read_text(path)?)
                .with_context(|| format!("parsing {path}"))?;
            let (train, val) = match &cfg.data.val_data {
                Some(vp) => (
                    all,
                    parse_paraphrase_pairs(&read_text(vp)?)
                        .with_context(|| format!("parsing {vp}"))?,
                ),
                None => carve_val(all)?,
            };
            let vocab = Vocabulary::build(
                train
                    .iter()
                    .flat_map(|p| p.left.iter().chain(p.right.iter())),
                1,
            );
            let enc = |xs: &[ParaphrasePair]| xs.iter().map(|p| encode_pair(p, &vocab)).collect();
            let test = match &cfg.data.test_data {
                Some(tp) => Some(
                    parse_paraphrase_pairs(&read_text(tp)?)
                        .with_context(|| format!("parsing {tp}"))?,
                ),
                None => None,
            };
            let splits = Splits {
                train: enc(&train),
                val: enc(&val),
                test: test.as_deref().map(enc),
            };
            Ok(TaskData::Pairs(vocab, splits))
        }
        TaskArg::Babi => {
            let path = cfg.data.babi_file.as_deref().expect("checked at resolve");
            let all = parse_stories(&read_text(path)?)
                .with_context(|| format!("parsing {path}"))?;
            // The vocabulary covers the whole training file; the validation
            // carve is still training-corpus text.
            let vocab = Vocabulary::build(story_token_stream(&all).iter(), 1);
            let (train, val) = carve_val(all)?;
            let enc =
                |xs: &[Story]| -> Vec<EncodedStory> {
                    xs.iter().map(|s| encode_story(s, &vocab)).collect()
                };
            let test = match &cfg.data.test_file {
                Some(tp) => Some(
                    parse_stories(&read_text(tp)?).with_context(|| format!("parsing {tp}"))?,
                ),
                None => None,
            };
            let splits = Splits {
                train: enc(&train),
                val: enc(&val),
                test: test.as_deref().map(enc),
            };
            Ok(TaskData::Stories(vocab, splits))
        }
    }
}

fn init_rng(seed: u64) -> RngStream {
    RngStream::new(seed).fork("init")
}

pub fn build_classifier(spec: &ModelSpec, vocab: usize, seed: u64) -> Result<SequenceClassifier> {
    let (classes, embed_dim, hidden, gate, dropout) = match *spec {
        ModelSpec::Classifier {
            classes,
            embed_dim,
            hidden,
            gate,
            dropout,
        } => (classes, embed_dim, hidden, gate, dropout),
        _ => bail!("config does not describe a classifier"),
    };
    Ok(SequenceClassifier::new(
        ClassifierConfig {
            vocab,
            embed_dim,
            hidden,
            classes,
            gate,
            dropout,
        },
        &mut init_rng(seed),
    ))
}

pub fn build_scorer(spec: &ModelSpec, vocab: usize, seed: u64) -> Result<ParaphraseScorer> {
    let (embed_dim, hidden, gate, dropout) = match *spec {
        ModelSpec::Scorer {
            embed_dim,
            hidden,
            gate,
            dropout,
        } => (embed_dim, hidden, gate, dropout),
        _ => bail!("config does not describe a sentence-pair scorer"),
    };
    Ok(ParaphraseScorer::new(
        ScorerConfig {
            vocab,
            embed_dim,
            hidden,
            gate,
            dropout,
        },
        &mut init_rng(seed),
    ))
}

pub fn build_hg(spec: &ModelSpec, vocab: usize, seed: u64) -> Result<HgParams> {
    let cfg = match *spec {
        ModelSpec::Hg {
            embed_dim,
            hidden,
            hl_hidden,
            hl_layers,
            dec_hidden,
            gate,
            dropout,
            dropout_hl,
        } => HgConfig {
            vocab,
            d_emb: embed_dim,
            h_fact: hidden,
            h_question: hidden,
            h_hl: hl_hidden,
            hl_layers,
            h_dec: dec_hidden,
            gate,
            use_question_final: false,
            dropout_input: dropout,
            dropout_hl,
        },
        _ => bail!("config does not describe the gated hierarchy"),
    };
    Ok(HgParams::new(cfg, &mut init_rng(seed)))
}

pub fn build_reader(spec: &ModelSpec, vocab: usize, seed: u64) -> Result<PlainSeqReader> {
    let (embed_dim, hidden, dec_hidden, dropout) = match *spec {
        ModelSpec::Reader {
            embed_dim,
            hidden,
            dec_hidden,
            dropout,
        } => (embed_dim, hidden, dec_hidden, dropout),
        _ => bail!("config does not describe the plain reader"),
    };
    Ok(PlainSeqReader::new(
        ReaderConfig {
            vocab,
            embed_dim,
            hidden,
            h_dec: dec_hidden,
            dropout,
        },
        &mut init_rng(seed),
    ))
}

/// Decode budget: the longest gold answer plus room for the terminator.
pub fn answer_cap(stories: &[EncodedStory]) -> usize {
    stories.iter().map(|s| s.answer.len()).max().unwrap_or(1) + 2
}

/// Mean eval-mode gate activation over both towers on every pair.
pub fn scorer_mean_gate(model: &ParaphraseScorer, data: &[EncodedPair]) -> Result<f64, GraphError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in data {
        let mut g = Graph::new();
        let (nodes, _) = params::bind_all(model, &mut g);
        let run = encode_pair_graph(&mut g, &nodes, &model.cfg, &pair.left, &pair.right, &mut Mode::Eval)?;
        for &n in run.gates_left.iter().chain(run.gates_right.iter()) {
            sum += g.value(n).item();
            count += 1;
        }
    }
    if count == 0 {
        return Err(GraphError::EmptyInput { op: "mean_gate" });
    }
    Ok(sum / count as f64)
}

/// Mean eval-mode activation over word and fact gates on every story.
pub fn hg_mean_gate(model: &HgParams, data: &[EncodedStory]) -> Result<f64, GraphError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for story in data {
        let enc = hierarchical::encode_story(model, story)?;
        for ws in &enc.word_gates {
            sum += ws.iter().sum::<f64>();
            count += ws.len();
        }
        sum += enc.fact_gates.iter().sum::<f64>();
        count += enc.fact_gates.len();
    }
    if count == 0 {
        return Err(GraphError::EmptyInput { op: "mean_gate" });
    }
    Ok(sum / count as f64)
}

/// End-of-run record printed by `train` and tabulated by `sweep`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test_metric: Option<f64>,
    pub mean_gate: f64,
    pub diverged: bool,
}

fn write_artifacts<B: params::ParamBlock>(
    cfg: &ResolvedConfig,
    vocab: &Vocabulary,
    model: &B,
    epochs: &[EpochStats],
    checkpoint_path: Option<&Path>,
    metrics_path: Option<&Path>,
) -> Result<()> {
    if let Some(mp) = metrics_path {
        let mut out = fs::File::create(mp).with_context(|| format!("creating {}", mp.display()))?;
        write_metrics(&mut out, cfg, epochs)?;
        out.flush()?;
    }
    if let Some(cp) = checkpoint_path {
        let header = crate::config::artifact_header(cfg, vocab.tokens());
        checkpoint::save_block(cp, &header, model)
            .with_context(|| format!("writing {}", cp.display()))?;
    }
    Ok(())
}

fn summarize(out: &TrainOutcome, test_metric: Option<f64>, mean_gate: f64) -> RunSummary {
    RunSummary {
        best_epoch: out.best_epoch,
        best_val_metric: out.best_metric,
        test_metric,
        mean_gate,
        diverged: out.diverged,
    }
}

/// Train per the resolved config, optionally writing a checkpoint and a
/// metrics file, and report the restored best model's numbers.
pub fn run_training(
    cfg: &ResolvedConfig,
    checkpoint_path: Option<&Path>,
    metrics_path: Option<&Path>,
) -> Result<RunSummary> {
    let seed = cfg.train.seed;
    match load(cfg)? {
        TaskData::Classify(vocab, splits) => {
            let mut model = build_classifier(&cfg.model, vocab.len(), seed)?;
            let ccfg = model.cfg;
            let loss = move |g: &mut Graph,
                             nodes: &occamnet::models::ClassifierNodes,
                             ex: &EncodedLabeled,
                             lambda: f64,
                             mode: &mut Mode|
                  -> Result<_, GraphError> {
                classifier_loss_parts(g, nodes, &ccfg, ex, lambda, mode)
            };
            let out = train_loop(
                &mut model,
                &splits.train,
                &splits.val,
                &cfg.train,
                &loss,
                &classification_accuracy,
            )?;
            let test_metric = splits
                .test
                .as_deref()
                .map(|t| classification_accuracy(&model, t))
                .transpose()?;
            let mean_gate = mean_gate_where(&model, &splits.val, |_, _| true)?;
            write_artifacts(cfg, &vocab, &model, &out.epochs, checkpoint_path, metrics_path)?;
            Ok(summarize(&out, test_metric, mean_gate))
        }
        TaskData::Pairs(vocab, splits) => {
            let mut model = build_scorer(&cfg.model, vocab.len(), seed)?;
            let scfg = model.cfg;
            let loss = move |g: &mut Graph,
                             nodes: &occamnet::models::ScorerNodes,
                             pair: &EncodedPair,
                             lambda: f64,
                             mode: &mut Mode|
                  -> Result<_, GraphError> {
                pair_loss_parts(g, nodes, &scfg, pair, lambda, mode)
            };
            let eval = |m: &ParaphraseScorer, d: &[EncodedPair]| {
                paraphrase_metrics(m, d, PAIR_THRESHOLD).map(|p| p.accuracy)
            };
            let out = train_loop(&mut model, &splits.train, &splits.val, &cfg.train, &loss, &eval)?;
            let test_metric = splits
                .test
                .as_deref()
                .map(|t| paraphrase_metrics(&model, t, PAIR_THRESHOLD).map(|p| p.accuracy))
                .transpose()?;
            let mean_gate = scorer_mean_gate(&model, &splits.val)?;
            write_artifacts(cfg, &vocab, &model, &out.epochs, checkpoint_path, metrics_path)?;
            Ok(summarize(&out, test_metric, mean_gate))
        }
        TaskData::Stories(vocab, splits) => {
            let cap = answer_cap(&splits.train).max(answer_cap(&splits.val));
            match &cfg.model {
                ModelSpec::Hg { .. } => {
                    let mut model = build_hg(&cfg.model, vocab.len(), seed)?;
                    let hg_cfg = model.cfg.clone();
                    let ans_cfg = cfg.answer.expect("babi runs always resolve answer weights");
                    let loss = move |g: &mut Graph,
                                     nodes: &occamnet::hierarchical::HgNodes,
                                     story: &EncodedStory,
                                     lambda: f64,
                                     mode: &mut Mode|
                          -> Result<_, GraphError> {
                        story_loss_parts(g, nodes, &hg_cfg, &ans_cfg, story, lambda, mode)
                    };
                    let eval =
                        move |m: &HgParams, d: &[EncodedStory]| story_accuracy(m, d, cap);
                    let out =
                        train_loop(&mut model, &splits.train, &splits.val, &cfg.train, &loss, &eval)?;
                    let test_metric = splits
                        .test
                        .as_deref()
                        .map(|t| story_accuracy(&model, t, cap))
                        .transpose()?;
                    let mean_gate = hg_mean_gate(&model, &splits.val)?;
                    write_artifacts(cfg, &vocab, &model, &out.epochs, checkpoint_path, metrics_path)?;
                    Ok(summarize(&out, test_metric, mean_gate))
                }
                ModelSpec::Reader { .. } => {
                    let mut model = build_reader(&cfg.model, vocab.len(), seed)?;
                    let rcfg = model.cfg;
                    let gamma = cfg.answer.expect("babi runs always resolve answer weights").gamma;
                    let loss = move |g: &mut Graph,
                                     nodes: &occamnet::models::ReaderNodes,
                                     story: &EncodedStory,
                                     _lambda: f64,
                                     mode: &mut Mode|
                          -> Result<_, GraphError> {
                        reader_loss_parts(g, nodes, &rcfg, story, gamma, mode)
                    };
                    let eval =
                        move |m: &PlainSeqReader, d: &[EncodedStory]| reader_accuracy(m, d, cap);
                    let out =
                        train_loop(&mut model, &splits.train, &splits.val, &cfg.train, &loss, &eval)?;
                    let test_metric = splits
                        .test
                        .as_deref()
                        .map(|t| reader_accuracy(&model, t, cap))
                        .transpose()?;
                    write_artifacts(cfg, &vocab, &model, &out.epochs, checkpoint_path, metrics_path)?;
                    Ok(summarize(&out, test_metric, 0.0))
                }
                _ => bail!("story data needs an hg or reader model"),
            }
        }
    }
}

/// Metrics for `eval`, printed as one JSON line.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EvalReport {
    pub task: &'static str,
    pub examples: usize,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

/// Evaluate a checkpoint. File tasks read `data_path` (falling back to the
/// split recorded at train time for needle runs, selected by `split`).
pub fn run_eval(
    checkpoint_path: &Path,
    data_path: Option<&Path>,
    split: SplitArg,
) -> Result<EvalReport> {
    let ck = checkpoint::load_file(checkpoint_path)
        .with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let (cfg, tokens) = crate::config::from_checkpoint_header(&ck.header)?;
    let vocab = Vocabulary::from_tokens(tokens)?;

    match cfg.task {
        TaskArg::Needle => {
            let mut model = build_classifier(&cfg.model, vocab.len(), cfg.train.seed)?;
            checkpoint::load_into_block(&ck, &mut model)?;
            let (train, val, test) = needle_raw(&cfg)?;
            let raw = match split {
                SplitArg::Train => train,
                SplitArg::Val => val,
                SplitArg::Test => test,
            };
            if raw.is_empty() {
                bail!("the requested split holds no examples");
            }
            let data: Vec<EncodedLabeled> =
                raw.iter().map(|e| encode_labeled(e, &vocab)).collect();
            let accuracy = classification_accuracy(&model, &data)?;
            Ok(EvalReport {
                task: cfg.task.name(),
                examples: data.len(),
                accuracy,
                recall: None,
            })
        }
        TaskArg::Sentiment => {
            let classes = match cfg.model {
                ModelSpec::Classifier { classes, .. } => classes,
                _ => bail!("sentiment checkpoint does not describe a classifier"),
            };
            let path = eval_path(data_path, &cfg.data.data, "--data")?;
            let mut model = build_classifier(&cfg.model, vocab.len(), cfg.train.seed)?;
            checkpoint::load_into_block(&ck, &mut model)?;
            let raw = parse_labeled_sequences(&read_text(&path)?, classes)
                .with_context(|| format!("parsing {path}"))?;
            let data: Vec<EncodedLabeled> =
                raw.iter().map(|e| encode_labeled(e, &vocab)).collect();
            let accuracy = classification_accuracy(&model, &data)?;
            Ok(EvalReport {
                task: cfg.task.name(),
                examples: data.len(),
                accuracy,
                recall: None,
            })
        }
        TaskArg::Paraphrase => {
            let path = eval_path(data_path, &cfg.data.data, "--data")?;
            let mut model = build_scorer(&cfg.model, vocab.len(), cfg.train.seed)?;
            checkpoint::load_into_block(&ck, &mut model)?;
            let raw = parse_paraphrase_pairs(&read_text(&path)?)
                .with_context(|| format!("parsing {path}"))?;
            let data: Vec<EncodedPair> = raw.iter().map(|p| encode_pair(p, &vocab)).collect();
            if data.is_empty() {
                bail!("{path} holds no pairs");
            }
            let m = paraphrase_metrics(&model, &data, PAIR_THRESHOLD)?;
            Ok(EvalReport {
                task: cfg.task.name(),
                examples: data.len(),
                accuracy: m.accuracy,
                recall: Some(m.recall),
            })
        }
        TaskArg::Babi => {
            let path = eval_path(data_path, &cfg.data.babi_file, "--babi-file")?;
            let raw = parse_stories(&read_text(&path)?)
                .with_context(|| format!("parsing {path}"))?;
            let data: Vec<EncodedStory> =
                raw.iter().map(|s| encode_story(s, &vocab)).collect();
            if data.is_empty() {
                bail!("{path} holds no stories");
            }
            let cap = answer_cap(&data);
            let accuracy = match cfg.model {
                ModelSpec::Hg { .. } => {
                    let mut model = build_hg(&cfg.model, vocab.len(), cfg.train.seed)?;
                    checkpoint::load_into_block(&ck, &mut model)?;
                    story_accuracy(&model, &data, cap)?
                }
                ModelSpec::Reader { .. } => {
                    let mut model = build_reader(&cfg.model, vocab.len(), cfg.train.seed)?;
                    checkpoint::load_into_block(&ck, &mut model)?;
                    reader_accuracy(&model, &data, cap)?
                }
                _ => bail!("babi checkpoint does not describe a story model"),
            };
            Ok(EvalReport {
                task: cfg.task.name(),
                examples: data.len(),
                accuracy,
                recall: None,
            })
        }
    }
}

pub fn eval_path(
    explicit: Option<&Path>,
    recorded: &Option<String>,
    flag: &str,
) -> Result<String> {
    if let Some(p) = explicit {
        return Ok(p.to_string_lossy().into_owned());
    }
    recorded
        .clone()
        .ok_or_else(|| anyhow::anyhow!("no data file: pass {flag} or train with one recorded"))
}
