//! `gen-synthetic`: write needle-task TSVs and synthetic story files.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use occamnet::data::{gen_needle, gen_stories, serialize_stories, NeedleSpec, StorySpec};
use occamnet::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthTask {
    Needle,
    Babi,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dataset family to generate.
    #[arg(long, value_enum)]
    pub task: SynthTask,
    /// Output path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Needle examples to generate.
    #[arg(long, default_value_t = 2500)]
    pub examples: usize,
    /// Needle sequence length.
    #[arg(long, default_value_t = 20)]
    pub seq_len: usize,
    /// Distinct needle filler tokens.
    #[arg(long, default_value_t = 45)]
    pub filler_vocab: usize,
    /// Needle classes (one marker token each).
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Stories to generate.
    #[arg(long, default_value_t = 1000)]
    pub stories: usize,
    /// Facts per story.
    #[arg(long, default_value_t = 6)]
    pub facts: usize,
    /// Distinct people in stories.
    #[arg(long, default_value_t = 4)]
    pub people: usize,
    /// Distinct places in stories.
    #[arg(long, default_value_t = 4)]
    pub places: usize,
}

pub fn run_gen(args: &SynthArgs) -> Result<()> {
    let mut rng = RngStream::new(args.seed).fork("synth");
    let (text, n) = match args.task {
        SynthTask::Needle => {
            let spec = NeedleSpec {
                n_examples: args.examples,
                seq_len: args.seq_len,
                filler_vocab: args.filler_vocab,
                n_needles: args.classes,
            };
            let examples = gen_needle(&spec, &mut rng);
            let mut text = String::new();
            for ex in &examples {
                text.push_str(&format!("{}\t{}\n", ex.label, ex.tokens.join(" ")));
            }
            (text, examples.len())
        }
        SynthTask::Babi => {
            let spec = StorySpec {
                n_stories: args.stories,
                facts_per_story: args.facts,
                n_people: args.people,
                n_places: args.places,
            };
            let stories = gen_stories(&spec, &mut rng);
            (serialize_stories(&stories), stories.len())
        }
    };
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {n} examples to {}", args.out.display());
    Ok(())
}
