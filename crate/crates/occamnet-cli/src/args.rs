//! Shared flag groups. Model-shape flags default per task, so most are
//! optional here and resolved in [`crate::config`].

use std::path::PathBuf;

use clap::Args;

use crate::config::{GateArg, ReaderArg, RegimenArg, TaskArg};

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Task to train or evaluate.
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Encoder hidden size (default: 25 sentiment, 50 paraphrase, 30 babi,
    /// 16 needle).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// High-level stack depth for the babi task (default 6).
    #[arg(long)]
    pub layers: Option<usize>,
    /// Embedding width (default: 16 needle, 50 elsewhere).
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// High-level hidden size for the babi task (default 20).
    #[arg(long)]
    pub hl_hidden: Option<usize>,
    /// Decoder hidden size for the babi task (default: the high-level size).
    #[arg(long)]
    pub dec_hidden: Option<usize>,
    /// Input gate form.
    #[arg(long, value_enum, default_value_t = GateArg::Linear)]
    pub gate: GateArg,
    /// Number of classes for classification tasks (default 5).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Dropout on encoder inputs (default: 0 needle, 0.3 elsewhere).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Dropout on high-level inputs for the babi task (default 0.5).
    #[arg(long)]
    pub dropout_hl: Option<f64>,
    /// Story model for the babi task: the gated hierarchy or a plain LSTM
    /// baseline.
    #[arg(long, value_enum, default_value_t = ReaderArg::Gated)]
    pub reader: ReaderArg,
}

#[derive(Args, Clone, Debug)]
pub struct SparsityArgs {
    /// Gate penalty ceiling reached by the annealing schedule.
    #[arg(long, default_value_t = 0.0)]
    pub lambda_max: f64,
    /// Annealing schedule shape.
    #[arg(long, value_enum, default_value_t = RegimenArg::Flat)]
    pub regimen: RegimenArg,
    /// Epochs to reach the penalty ceiling; must be at least 1.
    #[arg(long, default_value_t = 1)]
    pub t_max: usize,
    /// Supporting-fact supervision weight (babi).
    #[arg(long, default_value_t = 1.0)]
    pub lambda_fact: f64,
    /// Word-gate penalty ceiling (babi); annealed by the schedule.
    #[arg(long, default_value_t = 0.1)]
    pub lambda_word: f64,
    /// Weight on non-supporting facts in the fact supervision (babi).
    #[arg(long, default_value_t = 0.1)]
    pub mu_unsupporting: f64,
    /// Ranking margin for answer scoring (babi).
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (0 = one per core). Results are identical for any
    /// value.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Story file for the babi task.
    #[arg(long)]
    pub babi_file: Option<PathBuf>,
    /// Training TSV for sentiment (label<TAB>text) and paraphrase
    /// (score<TAB>sentence<TAB>sentence) tasks.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation TSV; defaults to the last 20% of --data.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Test TSV for sentiment/paraphrase tasks.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Test story file for the babi task.
    #[arg(long)]
    pub test_file: Option<PathBuf>,
    /// Generated training examples for the needle task.
    #[arg(long, default_value_t = 2000)]
    pub train_examples: usize,
    /// Generated validation examples for the needle task.
    #[arg(long, default_value_t = 500)]
    pub val_examples: usize,
    /// Generated test examples for the needle task (0 = none).
    #[arg(long, default_value_t = 500)]
    pub test_examples: usize,
    /// Sequence length for the needle task.
    #[arg(long, default_value_t = 20)]
    pub seq_len: usize,
    /// Distinct filler tokens for the needle task.
    #[arg(long, default_value_t = 45)]
    pub filler_vocab: usize,
}
