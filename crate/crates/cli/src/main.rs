//! `dcgm`: ingest, train, retrieve, rescore and evaluate from one binary.
//!
//! Exit status is 0 on success, 1 when a command fails and 2 on usage or
//! configuration errors.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcgm::{Family, FeatureSet};

#[derive(Debug, Parser)]
#[command(name = "dcgm", version, about = "Context-sensitive response generation and ranking")]
pub struct Cli {
    /// Flat `key = value` file overriding defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single source of randomness for every command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the command's TSV table (default: standard output).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Manifest location (default: next to the first artifact).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize, drop malformed lines, keep triples with a frequent bigram, build the vocabulary.
    Ingest {
        corpus: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Train one model family.
    Train {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Held-out triples; otherwise the last `heldout_fraction` of the corpus.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch trajectory TSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build the two-field BM25 index over a triple corpus.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
    },
    /// Mine candidate references; with ratings, emit reference sets.
    MineRefs {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        items: PathBuf,
        /// `item<TAB>candidate<TAB>rating` judgements.
        #[arg(long, requires = "refs")]
        ratings: Option<PathBuf>,
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Produce feature-annotated n-best lists.
    Nbest {
        #[arg(long)]
        items: PathBuf,
        #[arg(long, default_value = "ir+cmm")]
        features: FeatureSet,
        /// Retrieval index supplying candidates.
        #[arg(long)]
        index: Option<PathBuf>,
        /// External n-best file supplying candidates and imported features.
        #[arg(long)]
        import: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        nbest: PathBuf,
    },
    /// One MERT iteration on a tuning set.
    Tune {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Starting weights (default: all zero).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Rescore and reorder n-best lists under given weights.
    Rescore {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        rescored: PathBuf,
    },
    /// Score the first hypothesis of every list against reference sets.
    Eval {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// One row per item instead of the corpus summary.
        #[arg(long)]
        per_item: bool,
    },
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck {
        /// All families when absent.
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, default_value_t = 25)]
        instances: usize,
        #[arg(long, default_value_t = 20)]
        vocab_size: usize,
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value = "10,6,8", value_delimiter = ',')]
        encoder: Vec<usize>,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Augment, tune on one set, rescore and evaluate another.
    Pipeline(PipelineArgs),
    /// Leave-one-out BLEU bounds over multi-reference sets.
    Loo {
        #[arg(long)]
        refs: PathBuf,
        /// Rescored n-best lists whose first hypotheses form the system output.
        #[arg(long)]
        system: Option<PathBuf>,
        /// Corpus whose responses are drawn at random as a floor.
        #[arg(long)]
        random_from: Option<PathBuf>,
    },
    /// Interactive retrieval and rescoring.
    Repl {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "ir+cmm")]
        features: FeatureSet,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, requires = "vocab")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub tune_nbest: PathBuf,
    #[arg(long)]
    pub tune_refs: PathBuf,
    #[arg(long)]
    pub test_nbest: PathBuf,
    #[arg(long)]
    pub test_refs: PathBuf,
    /// Triples for the tuning items; needed when augmenting with a model.
    #[arg(long)]
    pub tune_items: Option<PathBuf>,
    #[arg(long)]
    pub test_items: Option<PathBuf>,
    /// Adds model log-probability to both sets before tuning.
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Evaluate the starting weights without tuning.
    #[arg(long)]
    pub skip_tune: bool,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub rescored: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Operational(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
