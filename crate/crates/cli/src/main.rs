mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use absolutenet::data::{Modality, Preset};
use absolutenet::model::Variant;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "absolutenet",
    version,
    about = "Train and evaluate AbsoluteNet on fNIRS oddball data"
)]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// TOML file applied after --config; repeatable, later files win.
    #[arg(long = "config-override", global = true)]
    pub config_override: Vec<PathBuf>,
    /// Base seed. Falls back to FNIRS_SEED, then to `seed` in the config.
    #[arg(long, global = true, env = "FNIRS_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic oddball dataset.
    Gen(GenArgs),
    /// Print the layer table and compare it with the reference one.
    VerifyArch(VerifyArchArgs),
    /// Train one fold and save the selected checkpoint.
    Train(TrainArgs),
    /// Stratified k-fold cross-validation.
    Cv(CvArgs),
    /// Cross-validate the full model and the four ablations.
    Ablate(AblateArgs),
    /// Genetic hyperparameter search.
    Ga(GaArgs),
    /// Finite-difference checks of every primitive and layer.
    Gradcheck(GradcheckArgs),
    /// Re-run a previous invocation from its manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::VerifyArch(_) => "verify-arch",
            Command::Train(_) => "train",
            Command::Cv(_) => "cv",
            Command::Ablate(_) => "ablate",
            Command::Ga(_) => "ga",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset file to write; metadata goes to `<file>.meta.json`.
    #[arg(short = 'o', long = "output")]
    pub output: PathBuf,
    #[arg(long)]
    pub trials_per_class: Option<usize>,
    /// Signal preset: default, easy or null.
    #[arg(long)]
    pub preset: Option<Preset>,
}

#[derive(Debug, Args)]
pub struct VerifyArchArgs {
    /// full, no_temporal_spatial, no_spatial_temporal, no_fusion1,
    /// no_fusion2 or single.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub pool_stride: Option<usize>,
    #[arg(long, default_value = "runs/verify-arch")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset file written by `gen`.
    pub dataset: PathBuf,
    /// Chromophores fed to the model: hbo2, hbr or both.
    #[arg(long, default_value = "both")]
    pub input: Modality,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    /// Checkpoint-selection epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs of continued training on train + validation.
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Fold whose train/validation parts are used.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Run only the first n folds.
    #[arg(long)]
    pub max_folds: Option<usize>,
    #[arg(long, default_value = "runs/cv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset file written by `gen` (both chromophores).
    pub dataset: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub max_folds: Option<usize>,
    #[arg(long, default_value = "runs/ablate")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GaArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub pop: Option<usize>,
    #[arg(long)]
    pub gens: Option<usize>,
    /// Training epochs per fitness evaluation.
    #[arg(long)]
    pub fitness_epochs: Option<usize>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    #[arg(long)]
    pub elite_count: Option<usize>,
    #[arg(long, default_value = "runs/ga")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Check only this case; with --at, a scalar activation
    /// (square, abs, log_abs, exp, log).
    #[arg(long)]
    pub op: Option<String>,
    /// Report the analytic derivative of --op at this point.
    #[arg(long, requires = "op", allow_negative_numbers = true)]
    pub at: Option<f64>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value = "runs/gradcheck")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// A command-line mistake that clap cannot catch; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Whether a completed command's checks held.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

pub struct Run {
    pub config: RunConfig,
    pub outputs: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

impl Run {
    /// Creates the parent directory of `path` and remembers it as an output.
    pub fn output(&mut self, path: PathBuf) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.output(path)?;
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }
}

fn resolve(cli: &Cli, replayed: Option<RunConfig>) -> Result<RunConfig> {
    let mut config = match replayed {
        Some(c) => c,
        None => {
            let files: Vec<&std::path::Path> = cli
                .config
                .iter()
                .chain(&cli.config_override)
                .map(PathBuf::as_path)
                .collect();
            let mut c = RunConfig::load(&files)?;
            // A replayed config already holds the seed it ran with, so
            // FNIRS_SEED at replay time must not change it.
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            c
        }
    };
    config.train.seed = config.seed;
    config.ga.seed = config.seed;
    Ok(config)
}

fn manifest_path(command: &Command) -> PathBuf {
    let dir = match command {
        Command::Gen(a) => {
            let mut name = a.output.clone().into_os_string();
            name.push(".manifest.json");
            return PathBuf::from(name);
        }
        Command::VerifyArch(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Cv(a) => &a.out,
        Command::Ablate(a) => &a.out,
        Command::Ga(a) => &a.out,
        Command::Gradcheck(a) => &a.out,
        Command::Replay(_) => unreachable!("replay is resolved before running"),
    };
    dir.join("manifest.json")
}

fn execute(args: Vec<String>, replayed: Option<RunConfig>) -> Result<Outcome> {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(Outcome::Pass),
                _ => Err(UsageError(String::new()).into()),
            };
        }
    };
    if let Command::Replay(r) = &cli.command {
        if replayed.is_some() {
            return Err(UsageError("a manifest cannot replay another replay".into()).into());
        }
        let m = RunManifest::read(&r.manifest)?;
        return execute(m.args, Some(m.config));
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        // Fails only if a pool already exists, e.g. on replay.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = resolve(&cli, replayed)?;
    let started = manifest::now();
    let mut run = Run {
        config,
        outputs: Vec::new(),
        manifest_path: manifest_path(&cli.command),
    };
    let outcome = commands::run(&cli.command, &mut run)?;
    let manifest = RunManifest {
        command: cli.command.name().into(),
        args,
        seed: run.config.seed,
        config: run.config.clone(),
        version: manifest::version(),
        threads: rayon::current_num_threads(),
        started_unix_s: started,
        finished_unix_s: manifest::now(),
        outputs: run.outputs.clone(),
    };
    let path = run.output(run.manifest_path.clone())?;
    run.outputs.pop();
    manifest.write(&path)?;
    Ok(outcome)
}

/// 1 for failed checks or training faults, 2 for usage and config
/// errors, 3 for unreadable or unwritable files.
fn exit_code(err: &anyhow::Error) -> u8 {
    use absolutenet::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config { .. } | E::Infeasible(_) => 2,
                E::Io { .. } | E::Corrupt { .. } | E::Dataset(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

/// Keeps freed tensor buffers in the heap. Training allocates and frees
/// megabyte-sized buffers at a high rate, and glibc's defaults return each
/// one to the kernel.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator parameters and is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    tune_allocator();
    let args: Vec<String> = std::env::args().collect();
    match execute(args, None) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            // An empty usage error means clap already printed the details.
            if e.downcast_ref::<UsageError>().is_none_or(|u| !u.0.is_empty()) {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
