use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use graf::config::Config;
use graf::error::GrafError;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "graf", version, about = "Generative radiance fields on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set train.iters=100. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Precision {
    F32,
    F64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SuiteArg {
    Grad,
    Oracle,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray-trace a synthetic image collection.
    MakeDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Number of images; defaults to data.count.
        #[arg(long)]
        count: Option<usize>,
        /// Write poses.txt and render one fixed scene from every pose.
        #[arg(long)]
        posed: bool,
    },
    /// Adversarial training on an unposed image collection.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Fit one scene from posed views and report held-out PSNR.
    Overfit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        posed_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Render images from a checkpoint.
    Render {
        /// Config used to train the checkpoint; defaults to config.cfg next to it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera as azimuth,polar,radius (angles in degrees).
        #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
        pose: Option<String>,
        /// Azimuth sweep "a0,p0,r0:a1,p1,r1:frames", written as one strip.
        #[arg(long)]
        sweep: Option<String>,
        /// Shape code seed, or "zero".
        #[arg(long, default_value = "0")]
        zs: String,
        /// Appearance code seed, or "zero".
        #[arg(long, default_value = "0")]
        za: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Run the gradient-check and oracle suites.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
    },
}

pub(crate) const EXIT_USAGE: u8 = 1;
pub(crate) const EXIT_IO: u8 = 2;
pub(crate) const EXIT_VERIFY: u8 = 3;
pub(crate) const EXIT_NUMERIC: u8 = 4;

/// Raised by `verify` when a check fails.
#[derive(Debug)]
pub(crate) struct VerifyFailed(pub usize);

impl std::fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} check(s) failed", self.0)
    }
}

impl std::error::Error for VerifyFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerifyFailed>().is_some() {
        return EXIT_VERIFY;
    }
    match err.chain().find_map(|e| e.downcast_ref::<GrafError>()) {
        Some(GrafError::Io { .. } | GrafError::Png { .. } | GrafError::Checkpoint(_) | GrafError::Dataset(_)) => {
            EXIT_IO
        }
        Some(GrafError::NonFinite { .. }) => EXIT_NUMERIC,
        _ if err.chain().any(|e| e.downcast_ref::<std::io::Error>().is_some()) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    apply_overrides(&mut cfg, &args.overrides)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut Config, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())
            .map_err(|reason| GrafError::Config { line: 0, reason })
            .with_context(|| format!("--set {kv}"))?;
    }
    cfg.validate()?;
    Ok(())
}

fn render_config_path(config: Option<&Path>, checkpoint: &Path) -> PathBuf {
    match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(graf::trainer::CONFIG_FILE),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset { cfg, out, count, posed } => {
            commands::make_dataset(&load_config(&cfg)?, &out, count, posed)
        }
        Command::Train {
            cfg,
            data,
            out,
            resume,
            precision,
        } => {
            let config = load_config(&cfg)?;
            match precision {
                Precision::F32 => commands::train::<f32>(config, data, out, resume),
                Precision::F64 => commands::train::<f64>(config, data, out, resume),
            }
        }
        Command::Overfit {
            cfg,
            posed_data,
            out,
            precision,
        } => {
            let config = load_config(&cfg)?;
            match precision {
                Precision::F32 => commands::overfit::<f32>(&config, &posed_data, &out),
                Precision::F64 => commands::overfit::<f64>(&config, &posed_data, &out),
            }
        }
        Command::Render {
            config,
            checkpoint,
            pose,
            sweep,
            zs,
            za,
            out,
            precision,
        } => {
            let cfg_path = render_config_path(config.as_deref(), &checkpoint);
            let cfg = Config::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?;
            let poses = match (pose, sweep) {
                (Some(p), None) => vec![commands::parse_pose(&p)?],
                (None, Some(s)) => commands::parse_sweep(&s)?,
                _ => bail!("exactly one of --pose and --sweep is required"),
            };
            let z = (commands::parse_seed(&zs)?, commands::parse_seed(&za)?);
            match precision {
                Precision::F32 => commands::render::<f32>(&cfg, &checkpoint, &poses, z, &out),
                Precision::F64 => commands::render::<f64>(&cfg, &checkpoint, &poses, z, &out),
            }
        }
        Command::Verify { suite } => commands::verify(match suite {
            SuiteArg::Grad => graf::verify::Suite::Grad,
            SuiteArg::Oracle => graf::verify::Suite::Oracle,
            SuiteArg::All => graf::verify::Suite::All,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
