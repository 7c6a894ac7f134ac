//! Flag resolution. Unset model flags fall back to per-task defaults, and the
//! resolved values are echoed verbatim into metrics headers and checkpoints.

use std::path::Path;

use anyhow::{bail, Result};
use clap::ValueEnum;
use occamnet::cells::GateKind;
use occamnet::objectives::{AnswerLossConfig, Regimen, SparsityConfig};
use occamnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{DataArgs, ModelArgs, SparsityArgs, TrainArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Sentiment,
    Paraphrase,
    Babi,
    Needle,
}

impl TaskArg {
    pub fn name(self) -> &'static str {
        match self {
            TaskArg::Sentiment => "sentiment",
            TaskArg::Paraphrase => "paraphrase",
            TaskArg::Babi => "babi",
            TaskArg::Needle => "needle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GateArg {
    Linear,
    Quad,
}

impl From<GateArg> for GateKind {
    fn from(a: GateArg) -> GateKind {
        match a {
            GateArg::Linear => GateKind::Linear,
            GateArg::Quad => GateKind::Quad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimenArg {
    Flat,
    Linear,
    Quad,
}

impl From<RegimenArg> for Regimen {
    fn from(a: RegimenArg) -> Regimen {
        match a {
            RegimenArg::Flat => Regimen::Flat,
            RegimenArg::Linear => Regimen::Linear,
            RegimenArg::Quad => Regimen::Quadratic,
        }
    }
}

pub fn regimen_name(r: Regimen) -> &'static str {
    match r {
        Regimen::Flat => "flat",
        Regimen::Linear => "linear",
        Regimen::Quadratic => "quad",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReaderArg {
    /// Hierarchical word- and fact-gated model.
    Gated,
    /// Flat single-LSTM baseline over all tokens.
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Html,
    Ansi,
}

/// Fully resolved model shape. The variant decides which network is built;
/// every field is a concrete value, never a default marker.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Classifier {
        classes: usize,
        embed_dim: usize,
        hidden: usize,
        gate: GateKind,
        dropout: f64,
    },
    Scorer {
        embed_dim: usize,
        hidden: usize,
        gate: GateKind,
        dropout: f64,
    },
    Hg {
        embed_dim: usize,
        hidden: usize,
        hl_hidden: usize,
        hl_layers: usize,
        dec_hidden: usize,
        gate: GateKind,
        dropout: f64,
        dropout_hl: f64,
    },
    Reader {
        embed_dim: usize,
        hidden: usize,
        dec_hidden: usize,
        dropout: f64,
    },
}

/// Data sources: file paths for corpus tasks, generator geometry for the
/// synthetic needle task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    pub babi_file: Option<String>,
    pub data: Option<String>,
    pub val_data: Option<String>,
    pub test_data: Option<String>,
    pub test_file: Option<String>,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    pub seq_len: usize,
    pub filler_vocab: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub task: TaskArg,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Question-answering loss weights; present only for the babi task.
    pub answer: Option<AnswerLossConfig>,
    pub data: DataConfig,
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

pub fn resolve(
    model: &ModelArgs,
    sparsity: &SparsityArgs,
    train: &TrainArgs,
    data: &DataArgs,
) -> Result<ResolvedConfig> {
    let task = model.task;
    if sparsity.t_max < 1 {
        bail!("--t-max must be at least 1 (annealing needs a nonzero horizon)");
    }
    let dropout = model.dropout.unwrap_or(match task {
        TaskArg::Needle => 0.0,
        _ => 0.3,
    });
    let dropout_hl = model.dropout_hl.unwrap_or(0.5);
    for (flag, p) in [("--dropout", dropout), ("--dropout-hl", dropout_hl)] {
        if !(0.0..1.0).contains(&p) {
            bail!("{flag} must lie in [0, 1), got {p}");
        }
    }
    let hidden = model.hidden.unwrap_or(match task {
        TaskArg::Sentiment => 25,
        TaskArg::Paraphrase => 50,
        TaskArg::Babi => 30,
        TaskArg::Needle => 16,
    });
    let embed_dim = model.embed_dim.unwrap_or(match task {
        TaskArg::Needle => 16,
        _ => 50,
    });
    if hidden == 0 || embed_dim == 0 {
        bail!("--hidden and --embed-dim must be at least 1");
    }
    let classes = model.classes.unwrap_or(5);
    if classes < 2 {
        bail!("--classes must be at least 2");
    }
    let gate = GateKind::from(model.gate);

    let spec = match (task, model.reader) {
        (TaskArg::Sentiment | TaskArg::Needle, _) => ModelSpec::Classifier {
            classes,
            embed_dim,
            hidden,
            gate,
            dropout,
        },
        (TaskArg::Paraphrase, _) => ModelSpec::Scorer {
            embed_dim,
            hidden,
            gate,
            dropout,
        },
        (TaskArg::Babi, ReaderArg::Gated) => {
            let hl_hidden = model.hl_hidden.unwrap_or(20);
            ModelSpec::Hg {
                embed_dim,
                hidden,
                hl_hidden,
                hl_layers: model.layers.unwrap_or(6),
                dec_hidden: model.dec_hidden.unwrap_or(hl_hidden),
                gate,
                dropout,
                dropout_hl,
            }
        }
        (TaskArg::Babi, ReaderArg::Plain) => ModelSpec::Reader {
            embed_dim,
            hidden,
            dec_hidden: model.dec_hidden.unwrap_or(20),
            dropout,
        },
    };

    // The schedule anneals the word-gate weight on the babi task and the
    // single gate weight everywhere else; the fact weight never anneals.
    let lambda_max = match task {
        TaskArg::Babi => sparsity.lambda_word,
        _ => sparsity.lambda_max,
    };
    if lambda_max < 0.0 {
        bail!("sparsity weights must be nonnegative");
    }
    let train_cfg = TrainConfig {
        batch_size: train.batch_size,
        max_epochs: train.max_epochs,
        patience: train.patience,
        seed: train.seed,
        sparsity: SparsityConfig {
            lambda_max,
            t_max: sparsity.t_max,
            regimen: Regimen::from(sparsity.regimen),
        },
        ..TrainConfig::default()
    };
    train_cfg.validate()?;

    let answer = match task {
        TaskArg::Babi => Some(AnswerLossConfig {
            gamma: sparsity.margin,
            mu_unsupporting: sparsity.mu_unsupporting,
            lambda_fact: sparsity.lambda_fact,
            lambda_word: sparsity.lambda_word,
        }),
        _ => None,
    };

    match task {
        TaskArg::Babi if data.babi_file.is_none() => {
            bail!("--babi-file is required for the babi task")
        }
        TaskArg::Sentiment | TaskArg::Paraphrase if data.data.is_none() => {
            bail!("--data is required for the {} task", task.name())
        }
        TaskArg::Needle if data.train_examples == 0 || data.val_examples == 0 => {
            bail!("--train-examples and --val-examples must be at least 1")
        }
        _ => {}
    }

    Ok(ResolvedConfig {
        task,
        model: spec,
        train: train_cfg,
        answer,
        data: DataConfig {
            babi_file: data.babi_file.as_deref().map(path_string),
            data: data.data.as_deref().map(path_string),
            val_data: data.val_data.as_deref().map(path_string),
            test_data: data.test_data.as_deref().map(path_string),
            test_file: data.test_file.as_deref().map(path_string),
            train_examples: data.train_examples,
            val_examples: data.val_examples,
            test_examples: data.test_examples,
            seq_len: data.seq_len,
            filler_vocab: data.filler_vocab,
        },
    })
}

/// Read a checkpoint's config echo and vocabulary back out of its header.
pub fn from_checkpoint_header(
    header: &serde_json::Value,
) -> Result<(ResolvedConfig, Vec<String>)> {
    let cfg: ResolvedConfig = serde_json::from_value(
        header
            .get("config")
            .ok_or_else(|| anyhow::anyhow!("checkpoint header carries no config echo"))?
            .clone(),
    )?;
    let vocab: Vec<String> = serde_json::from_value(
        header
            .get("vocab")
            .ok_or_else(|| anyhow::anyhow!("checkpoint header carries no vocabulary"))?
            .clone(),
    )?;
    Ok((cfg, vocab))
}

/// Checkpoint/metrics header: the config echo plus the vocabulary, which
/// makes a checkpoint self-contained for eval and visualization.
pub fn artifact_header(cfg: &ResolvedConfig, vocab_tokens: &[String]) -> serde_json::Value {
    serde_json::json!({ "config": cfg, "vocab": vocab_tokens })
}

pub fn checkpoint_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}
