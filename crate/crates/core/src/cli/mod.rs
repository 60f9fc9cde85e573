//! Command-line runner. Each subcommand reads an INI config, runs one
//! pipeline stage and writes its artifacts into a fresh run directory.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{CommandFactory, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::error::Error;
pub use config::ExperimentConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SHM_FOMO_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_MISSING_CHECKPOINT: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::Run(Error::Config(_)) => EXIT_CONFIG,
            CliError::MissingCheckpoint(_) => EXIT_MISSING_CHECKPOINT,
            CliError::Run(_) => EXIT_FAILURE,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "shm-fomo",
    version,
    about = "Masked-autoencoder foundation model for vibration-based structural monitoring"
)]
pub struct Cli {
    /// Experiment config (INI).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed; overrides `[run] seed`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Output root for run directories (default: $SHM_FOMO_OUT or ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate synthetic ambient and traffic recordings plus a manifest.
    SynthGen,
    /// Turn manifest recordings into spectrogram datasets, one per role.
    Preprocess,
    /// Masked-autoencoder pretraining.
    Pretrain,
    /// Continue the masked objective on normal windows.
    FinetuneAd,
    /// Supervised traffic-load fine-tuning.
    FinetuneTle,
    /// Distil a fine-tuned teacher into a smaller student.
    Distill,
    /// Calibrate thresholds and score anomaly detection.
    EvalAd,
    /// Score a regression checkpoint on test windows.
    EvalTle,
    /// Pretraining-regime ablation over several seeds.
    Ablation,
    /// PCA, kNN and linear-regression baselines on raw windows.
    Baseline,
    /// Print a checkpoint's configuration, size and provenance.
    Describe { checkpoint: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::Preprocess => "preprocess",
            Command::Pretrain => "pretrain",
            Command::FinetuneAd => "finetune-ad",
            Command::FinetuneTle => "finetune-tle",
            Command::Distill => "distill",
            Command::EvalAd => "eval-ad",
            Command::EvalTle => "eval-tle",
            Command::Ablation => "ablation",
            Command::Baseline => "baseline",
            Command::Describe { .. } => "describe",
        }
    }
}

/// Derives a module seed as the first eight bytes of
/// `sha256("<global>:<module>")`, little endian.
pub fn module_seed(global: u64, module: &str) -> u64 {
    let d = Sha256::digest(format!("{global}:{module}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// State shared by one subcommand invocation.
pub struct RunCtx {
    pub dir: PathBuf,
    pub seed: u64,
    pub threads: Option<u16>,
    pub config: ExperimentConfig,
    pub config_hash: String,
    log: Mutex<File>,
}

impl RunCtx {
    pub fn module_seed(&self, module: &str) -> u64 {
        module_seed(self.seed, module)
    }

    /// Recorded in checkpoints: config hash plus global seed.
    pub fn provenance(&self) -> String {
        format!("{}:seed={}", self.config_hash, self.seed)
    }

    pub fn log(&self, msg: impl AsRef<str>) {
        let msg = msg.as_ref();
        eprintln!("{msg}");
        if let Ok(mut f) = self.log.lock() {
            let _ = writeln!(f, "{msg}");
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents)?;
        Ok(p)
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<command>-<unix-millis>-<hash8>`, adding a numeric
/// suffix rather than reusing an existing directory.
fn create_run_dir(root: &Path, command: &str, hash: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(root)?;
    let millis = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let base = format!("{command}-{millis}-{}", &hash[..8]);
    for n in 0.. {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn usage() -> String {
    Cli::command().render_usage().to_string()
}

fn open_run(cli: &Cli, command: &Command) -> Result<RunCtx, CliError> {
    let Some(cfg_path) = &cli.config else {
        return Err(CliError::Usage(format!(
            "{} requires --config PATH\n\n{}",
            command.name(),
            usage()
        )));
    };
    let config = ExperimentConfig::load(cfg_path)?;
    let seed = match cli.seed {
        Some(s) => s,
        None => config.seed()?.unwrap_or(0),
    };
    let config_hash = config.hash();
    let dir = create_run_dir(&out_root(cli), command.name(), &config_hash)?;
    fs::write(dir.join("config.ini"), fs::read(cfg_path)?)?;
    let threads = cli
        .threads
        .map(|t| t.to_string())
        .unwrap_or_else(|| "auto".into());
    let run_txt = format!(
        "command={}\nconfig_source={}\nconfig_hash={config_hash}\nseed={seed}\nthreads={threads}\nversion={}\n",
        command.name(),
        cfg_path.display(),
        env!("CARGO_PKG_VERSION"),
    );
    fs::write(dir.join("run.txt"), run_txt)?;
    let log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("log.txt"))?;
    Ok(RunCtx {
        dir,
        seed,
        threads: cli.threads,
        config,
        config_hash,
        log: Mutex::new(log),
    })
}

fn execute(cli: &Cli) -> Result<Option<PathBuf>, CliError> {
    if let Command::Describe { checkpoint } = &cli.command {
        print!("{}", commands::describe(checkpoint)?);
        return Ok(None);
    }
    let ctx = open_run(cli, &cli.command)?;
    ctx.log(format!(
        "{} seed={} config_hash={}",
        cli.command.name(),
        ctx.seed,
        ctx.config_hash
    ));
    match &cli.command {
        Command::SynthGen => commands::synth_gen(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Pretrain => commands::pretrain(&ctx),
        Command::FinetuneAd => commands::finetune_ad(&ctx),
        Command::FinetuneTle => commands::finetune_tle(&ctx),
        Command::Distill => commands::distill(&ctx),
        Command::EvalAd => commands::eval_ad(&ctx),
        Command::EvalTle => commands::eval_tle(&ctx),
        Command::Ablation => commands::ablation(&ctx),
        Command::Baseline => commands::baseline(&ctx),
        Command::Describe { .. } => unreachable!(),
    }
    .inspect_err(|e| ctx.log(format!("error: {e}")))?;
    fs::write(ctx.dir.join("DONE"), "")?;
    Ok(Some(ctx.dir))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status. On success the run directory is the last
/// line on stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let go = || execute(&cli);
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
        {
            Ok(pool) => pool.install(go),
            Err(e) => Err(CliError::Run(Error::config(e.to_string()))),
        },
        None => go(),
    };
    match result {
        Ok(dir) => {
            if let Some(dir) = dir {
                println!("{}", dir.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_seeds_differ_by_name_and_seed() {
        assert_eq!(module_seed(7, "pretrain"), module_seed(7, "pretrain"));
        assert_ne!(module_seed(7, "pretrain"), module_seed(7, "finetune"));
        assert_ne!(module_seed(7, "pretrain"), module_seed(8, "pretrain"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage(String::new()).exit_code(), 2);
        assert_eq!(CliError::Config(String::new()).exit_code(), 3);
        assert_eq!(CliError::Run(Error::Config(String::new())).exit_code(), 3);
        assert_eq!(CliError::MissingCheckpoint(PathBuf::new()).exit_code(), 4);
        assert_eq!(CliError::Run(Error::Data(String::new())).exit_code(), 1);
    }

    #[test]
    fn run_dirs_are_never_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let h = "0123456789abcdef";
        let a = create_run_dir(tmp.path(), "x", h).unwrap();
        let b = create_run_dir(tmp.path(), "x", h).unwrap();
        assert_ne!(a, b);
    }
}
