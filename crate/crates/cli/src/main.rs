//! `cauesc` — train and evaluate a cause-aware emotional support dialogue
//! model from the command line.
//!
//! Exit codes: 0 success, 2 usage errors, 3 data/schema errors, 4 numeric
//! failures. Progress goes to stderr as one JSON object per line; primary
//! results are files under `--out` plus a JSON summary on stdout.

use std::path::PathBuf;

use cauesc_cli::config::{log, parse_ratios, RunConfig};
use cauesc_cli::ops;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cauesc",
    version,
    about = "Cause-aware emotional support conversation modeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Split a corpus into train/dev/test and build the vocabulary.
    Prepare(CommonArgs),
    /// Write a cause annotation for every conversation.
    Annotate(CommonArgs),
    /// Precompute and cache effect vectors for every conversation.
    CacheEffects(CommonArgs),
    /// Train a model on the prepared split.
    Train(CommonArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Generate the next supporter turn for one conversation.
    Generate(GenerateArgs),
    /// Corpus statistics: strategy distribution, progress matrix, A/B votes.
    Analyze(CommonArgs),
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON run config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus file: a JSON array of conversations.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Cause annotation file (JSON lines).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Effect cache file.
    #[arg(long)]
    effects: Option<PathBuf>,
    /// Extra cause cue words, one per line.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A/B vote file (CSV: item_id,rater_id,choice).
    #[arg(long)]
    votes: Option<PathBuf>,
    /// Master seed for the split, initialization, shuffling, and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// train,dev,test split ratios, e.g. 0.8,0.1,0.1.
    #[arg(long)]
    ratios: Option<String>,
    /// Strategy-conditioning variant.
    #[arg(long, value_parser = ["full", "label", "multi", "single"])]
    variant: Option<String>,
    /// Drop the cause masks from the encoder.
    #[arg(long)]
    no_cause: bool,
    /// Drop seeker-side effect rows.
    #[arg(long)]
    no_intra: bool,
    /// Drop supporter-side effect rows.
    #[arg(long)]
    no_inter: bool,
    /// Drop the strategy executors from the decoder.
    #[arg(long)]
    no_executors: bool,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Examples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Greedy decoding instead of sampling.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which split to evaluate.
    #[arg(long, default_value = "test", value_parser = ["train", "dev", "test"])]
    split: String,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Conversation id to continue (default: the first in the corpus).
    #[arg(long)]
    conversation: Option<String>,
}

/// Defaults, then the config file, then flags.
fn resolve(c: &CommonArgs) -> cauesc_core::Result<RunConfig> {
    let mut rc = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &c.out {
        rc.out = Some(v.clone());
    }
    if let Some(v) = &c.corpus {
        rc.corpus = Some(v.clone());
    }
    if let Some(v) = &c.annotations {
        rc.annotations = Some(v.clone());
    }
    if let Some(v) = &c.effects {
        rc.effects = Some(v.clone());
    }
    if let Some(v) = &c.lexicon {
        rc.lexicon = Some(v.clone());
    }
    if let Some(v) = &c.checkpoint {
        rc.checkpoint = Some(v.clone());
    }
    if let Some(v) = &c.votes {
        rc.votes = Some(v.clone());
    }
    if let Some(s) = c.seed {
        rc.seed = s;
    }
    if let Some(r) = &c.ratios {
        rc.split_ratios = parse_ratios(r)?;
    }
    if let Some(v) = &c.variant {
        rc.model.variant = v.parse()?;
    }
    if c.no_cause {
        rc.model.ablation.use_cause = false;
    }
    if c.no_intra {
        rc.model.ablation.use_intra = false;
    }
    if c.no_inter {
        rc.model.ablation.use_inter = false;
    }
    if c.no_executors {
        rc.model.ablation.use_executors = false;
    }
    if let Some(s) = c.steps {
        rc.train.steps = s;
    }
    if let Some(b) = c.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(lr) = c.learning_rate {
        rc.optimizer.learning_rate = lr;
    }
    if c.greedy {
        rc.decode.greedy = true;
    }
    rc.derive_seeds();
    Ok(rc)
}

fn run(cli: Cli) -> cauesc_core::Result<()> {
    match cli.command {
        Cmd::Prepare(a) => ops::cmd_prepare(&resolve(&a)?),
        Cmd::Annotate(a) => ops::cmd_annotate(&resolve(&a)?),
        Cmd::CacheEffects(a) => ops::cmd_cache_effects(&resolve(&a)?),
        Cmd::Train(a) => ops::cmd_train(&resolve(&a)?),
        Cmd::Eval(a) => ops::cmd_eval(&resolve(&a.common)?, &a.split),
        Cmd::Generate(a) => ops::cmd_generate(&resolve(&a.common)?, a.conversation.as_deref()),
        Cmd::Analyze(a) => ops::cmd_analyze(&resolve(&a)?),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        log(serde_json::json!({"event": "error", "message": e.to_string()}));
        std::process::exit(e.exit_code());
    }
}
