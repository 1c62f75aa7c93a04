//! `rrn` — train, evaluate and run the relational landmark predictor.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
//! `RRN_THREADS` caps how many cross-validation folds train concurrently.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::ChaCha8Rng;
use rrn_core::nn::adam::AdamConfig;
use rrn_core::{
    model, Checkpoint, Dataset, ExperimentConfig, LandmarkSet, RrnError, RuVariant, SynthTemplate,
};

mod commands;

#[derive(Parser)]
#[command(name = "rrn", version, about = "Relational landmark prediction pipeline")]
struct Cli {
    /// Print errors as single-line JSON on stderr.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuArg {
    Mlp,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum DropoutArg {
    None,
    Regular,
    Variational,
    Targeted,
}

/// Flags shared by the training-style commands.
#[derive(Args, Clone)]
struct TrainArgs {
    /// Dataset JSON file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Experiment preset name.
    #[arg(long)]
    preset: String,
    /// Relation-unit architecture.
    #[arg(long, value_enum, default_value = "dense")]
    ru: RuArg,
    /// Dropout regime inside every relation unit.
    #[arg(long, value_enum, default_value = "none")]
    dropout: DropoutArg,
    /// Training epochs (defaults to the architecture's schedule).
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Cross-validation fold count.
    #[arg(long, default_value_t = 4)]
    folds: usize,
    /// Base RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on raw pixel features and coordinates instead of per-fold
    /// standardized ones.
    #[arg(long)]
    no_normalize: bool,
    /// Output width of the pairwise relation units.
    #[arg(long, default_value_t = model::DEFAULT_RELATION_DIM)]
    relation_dim: usize,
    /// Hidden width of the MLP relation unit.
    #[arg(long, default_value_t = model::DEFAULT_MLP_HIDDEN)]
    hidden: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Fraction of training subjects held out for convergence reporting.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

impl TrainArgs {
    fn experiment(&self) -> Result<ExperimentConfig, RrnError> {
        let ru = match self.ru {
            RuArg::Mlp => RuVariant::Mlp { hidden: self.hidden },
            RuArg::Dense => RuVariant::Dense,
        };
        let dropout = match self.dropout {
            DropoutArg::None => model::DropoutMode::None,
            DropoutArg::Regular => model::DropoutMode::Regular { p: model::DEFAULT_DROPOUT_P },
            DropoutArg::Variational => model::DropoutMode::Variational {
                init_log_alpha: model::DEFAULT_INIT_LOG_ALPHA,
            },
            DropoutArg::Targeted => model::DropoutMode::Targeted {
                gamma: model::DEFAULT_TARGETED_GAMMA,
                alpha: model::DEFAULT_TARGETED_ALPHA,
            },
        };
        let mut config = ExperimentConfig::preset(&self.preset, ru, dropout, self.seed)?;
        config.rrn.relation_dim = self.relation_dim;
        config.batch_size = self.batch;
        config.folds = self.folds;
        config.val_fraction = self.val_frac;
        config.normalize = !self.no_normalize;
        config.adam = AdamConfig { lr: self.lr, ..AdamConfig::default() };
        if let Some(epochs) = self.epochs {
            config.epochs = epochs;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic landmark cohort from the built-in template.
    GenSynth {
        /// Number of subjects.
        #[arg(long)]
        count: usize,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-landmark Gaussian jitter in pixels.
        #[arg(long, default_value_t = 2.0)]
        jitter: f64,
    },
    /// Grow a dataset with interpolated subjects.
    Augment {
        #[arg(long)]
        data: PathBuf,
        /// Number of augmented subjects to add.
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-component uniform noise bound in pixels.
        #[arg(long, default_value_t = 5.0)]
        noise: f64,
    },
    /// Dump the pairwise feature vectors of one subject as CSV.
    Features {
        #[arg(long)]
        data: PathBuf,
        /// Subject id to extract features for.
        #[arg(long)]
        subject: String,
        /// Preset whose input configuration defines the pairs.
        #[arg(long)]
        preset: String,
        /// Output CSV file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured experiment with cross-validation.
    Train(TrainArgs),
    /// Predict target landmarks for every subject of a dataset.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output JSON file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write metrics CSVs.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the same setup under all three dropout regimes and report
    /// epochs-to-threshold.
    CompareDropout(TrainArgs),
    /// Run a full preset: train all folds, evaluate, write artifacts.
    RunPreset(TrainArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = if err.is_usage() { 2u8 } else { 3u8 };
            if json {
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": err.to_string(), "code": code })
                );
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), RrnError> {
    match command {
        Command::GenSynth { count, out, seed, jitter } => {
            commands::gen_synth(count, &out, seed, jitter)
        }
        Command::Augment { data, count, out, seed, noise } => {
            commands::augment_dataset(&data, count, &out, seed, noise)
        }
        Command::Features { data, subject, preset, out } => {
            commands::features(&data, &subject, &preset, out.as_deref())
        }
        Command::Train(args) => {
            let config = args.experiment()?;
            commands::train(&config, &args.data, &args.out)
        }
        Command::Predict { checkpoint, data, out } => {
            commands::predict(&checkpoint, &data, out.as_deref())
        }
        Command::Evaluate { checkpoint, data, out } => {
            commands::evaluate_cmd(&checkpoint, &data, &out)
        }
        Command::CompareDropout(args) => {
            let config = args.experiment()?;
            commands::compare_dropout_cmd(&config, &args.data, &args.out)
        }
        Command::RunPreset(args) => {
            let config = args.experiment()?;
            commands::run_preset_cmd(&config, &args.data, &args.out)
        }
    }
}

// Re-exported for the command implementations.
pub(crate) fn load_dataset(path: &std::path::Path) -> Result<Dataset, RrnError> {
    Dataset::load(path)
}

pub(crate) fn default_rng(seed: u64) -> ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn checkpoint_sets<'a>(
    ckpt: &Checkpoint,
    dataset: &'a Dataset,
) -> Result<Vec<&'a LandmarkSet>, RrnError> {
    let needed = &ckpt.model.config.input_names;
    for s in &dataset.subjects {
        let missing: Vec<String> = needed
            .iter()
            .filter(|n| !s.set.coords.contains_key(n))
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(RrnError::Config(format!(
                "subject '{}' is missing checkpoint input landmarks: {}",
                s.set.subject_id,
                missing.join(", ")
            )));
        }
    }
    Ok(dataset.subjects.iter().map(|s| &s.set).collect())
}

/// Default anatomy template used by `gen-synth`.
pub(crate) fn synth_template(jitter: f64) -> SynthTemplate {
    let mut t = SynthTemplate::default_anatomy();
    t.jitter_sigma = jitter;
    t
}
