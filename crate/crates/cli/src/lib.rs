//! Command-line front end: synthetic data, training, evaluation and the
//! gradient-check table, all driven by one JSON [`RunConfig`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use pdm_core::evalkit::{evaluate, Direction};
use pdm_core::gradsuite::{registry, render_table, run_suite, sign_flip_fixture};
use pdm_core::losses::ChVariant;
use pdm_core::rng::GENERATOR_NAME;
use pdm_core::synthdata::{generate, generate_heldout, Dataset, SyntheticSpec};
use pdm_core::trainer::{
    embed, load_checkpoint, loss_log_csv, save_checkpoint, train, TrainConfig,
};
use pdm_core::PdmError;

pub const DATASET_FILE: &str = "dataset.pdmd";
pub const HELDOUT_FILE: &str = "heldout.pdmd";
pub const CHECKPOINT_FILE: &str = "checkpoint.pdmc";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CMC_FILE: &str = "cmc.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] PdmError),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl CliError {
    /// 1 for usage, config and file problems; 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(PdmError::Numeric { .. }) | CliError::GradCheck(_) => 2,
            _ => 1,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub direction: Direction,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            direction: Direction::Ir2Vis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory every command reads from and writes to.
    pub out: PathBuf,
    /// Dataset for `train` (default `<out>/dataset.pdmd`) or `eval`
    /// (default `<out>/heldout.pdmd`).
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out: PathBuf::from("pdm-out"),
            dataset: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the random generator behind every seed; only the built-in one
    /// is accepted.
    pub generator: String,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub protocol: Protocol,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GENERATOR_NAME.to_string(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            protocol: Protocol::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.generator != GENERATOR_NAME {
            return Err(CliError::Config(format!(
                "generator {:?} is not supported, only {GENERATOR_NAME}",
                self.generator
            )));
        }
        self.data.validate()?;
        self.train.validate()?;
        Ok(())
    }

    fn train_dataset(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.paths.out.join(DATASET_FILE))
    }

    fn eval_dataset(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.paths.out.join(HELDOUT_FILE))
    }

    fn checkpoint(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join(CHECKPOINT_FILE))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pdm",
    version,
    about = "Two-modality retrieval with prototypes and generated features"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for both data generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Retrieval direction: ir2vis or vis2ir.
    #[arg(long, global = true, value_parser = parse_direction)]
    pub direction: Option<Direction>,
    /// Cosine heterogeneity loss form: prose or as-written.
    #[arg(long, global = true, value_parser = parse_variant)]
    pub loss_ch_variant: Option<ChVariant>,
    /// Number of generated branches (0 disables the module).
    #[arg(long, global = true)]
    pub branches: Option<usize>,
    /// Number of prototypes (0 falls back to plain pooling).
    #[arg(long, global = true)]
    pub prototypes: Option<usize>,
    /// Dataset file to train or evaluate on.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint file to write (train) or read (eval).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    s.parse().map_err(|e: PdmError| e.to_string())
}

fn parse_variant(s: &str) -> Result<ChVariant, String> {
    match s {
        "prose" => Ok(ChVariant::Prose),
        "as-written" => Ok(ChVariant::AsWritten),
        other => Err(format!(
            "unknown variant {other:?}, expected prose or as-written"
        )),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the resolved configuration as JSON.
    PrintConfig,
    /// Write the training and held-out datasets.
    Synth,
    /// Train on the dataset, write the checkpoint and the loss log.
    Train,
    /// Evaluate a checkpoint on the held-out set.
    Eval,
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Append a check whose analytic gradient has the wrong sign.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.data.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.paths.out = out.clone();
        }
        if let Some(d) = self.direction {
            cfg.protocol.direction = d;
        }
        if let Some(v) = self.loss_ch_variant {
            cfg.train.loss_ch_variant = v;
        }
        if let Some(b) = self.branches {
            cfg.train.branches = b;
        }
        if let Some(m) = self.prototypes {
            cfg.train.prototypes = m;
            cfg.train.use_plm = m > 0;
        }
        if let Some(p) = &self.dataset {
            cfg.paths.dataset = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            cfg.paths.checkpoint = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli, out: &mut impl Write) -> Result<(), CliError> {
    let cfg = cli.overrides.resolve()?;
    let w = |out: &mut dyn Write, s: String| -> Result<(), CliError> {
        out.write_all(s.as_bytes())
            .map_err(|e| CliError::Core(PdmError::Io(e)))
    };
    match &cli.command {
        Command::PrintConfig => w(out, format!("{}\n", cfg.to_json())),
        Command::Synth => {
            let data = generate(&cfg.data)?;
            let heldout = generate_heldout(&cfg.data)?;
            let dir = &cfg.paths.out;
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            data.save(&dir.join(DATASET_FILE))?;
            heldout.save(&dir.join(HELDOUT_FILE))?;
            w(
                out,
                format!(
                    "wrote {} and {}: {} identities x {} samples x 2 modalities, maps {:?}, {} seed {}\n",
                    dir.join(DATASET_FILE).display(),
                    dir.join(HELDOUT_FILE).display(),
                    data.num_identities,
                    data.per_identity_per_modality,
                    data.map_shape(),
                    GENERATOR_NAME,
                    cfg.data.seed
                ),
            )
        }
        Command::Train => {
            let path = cfg.train_dataset();
            let data = Dataset::load(&path)?;
            let outcome = train(&cfg.train, &data)?;
            let dir = &cfg.paths.out;
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            let ckpt = cfg.checkpoint();
            save_checkpoint(&outcome.state, &ckpt)?;
            let csv = dir.join(LOSS_FILE);
            fs::write(&csv, loss_log_csv(&outcome.log)).map_err(|e| io_error(&csv, e))?;
            for e in &outcome.log {
                w(
                    out,
                    format!(
                        "epoch {:>3}  lr {:.0e}  total {:.6}\n",
                        e.epoch, e.lr, e.report.total
                    ),
                )?;
            }
            w(
                out,
                format!("wrote {} and {}\n", ckpt.display(), csv.display()),
            )
        }
        Command::Eval => {
            let state = load_checkpoint(&cfg.checkpoint())?;
            let data = Dataset::load(&cfg.eval_dataset())?;
            let descriptors = embed(&state, &data)?;
            let labels: Vec<usize> = data.samples.iter().map(|s| s.identity).collect();
            let mods: Vec<_> = data.samples.iter().map(|s| s.modality).collect();
            let report = evaluate(&descriptors, &labels, &mods, cfg.protocol.direction)?;
            let dir = &cfg.paths.out;
            fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            let json = dir.join(REPORT_FILE);
            fs::write(&json, report.to_json()?).map_err(|e| io_error(&json, e))?;
            let cmc = dir.join(CMC_FILE);
            fs::write(&cmc, report.cmc_csv()).map_err(|e| io_error(&cmc, e))?;
            w(
                out,
                format!(
                    "{}: rank-1 {:.4}  mAP {:.4}  delta {:.4} (intra {:.4}, inter {:.4})\n",
                    report.direction.as_str(),
                    report.rank1(),
                    report.map,
                    report.delta,
                    report.intra_mean,
                    report.inter_mean
                ),
            )
        }
        Command::Gradcheck { inject_fault } => {
            let mut checks = registry();
            if *inject_fault {
                checks.push(sign_flip_fixture());
            }
            let rows = run_suite(&checks, cfg.train.seed)?;
            w(out, render_table(&rows))?;
            let failed: Vec<String> = rows
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.name.clone())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::GradCheck(failed))
            }
        }
    }
}
