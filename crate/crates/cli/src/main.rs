//! `ovf`: train, evaluate and sweep noise-aware models under NVM device variation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovf_core::training::Regime;

use crate::config::{ExperimentConfig, Loaded};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "ovf", version, about, long_about = None)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "OVF_LOG", default_value = "info")]
    log: String,

    /// Worker threads for Monte Carlo evaluation; results do not depend on it.
    #[arg(long, global = true, env = "OVF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one regime; writes model.ckpt, metrics.csv and manifest.toml.
    Train(Common),
    /// Monte Carlo evaluation of a checkpoint over the sigma_d grid; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; taken from the manifest when rerunning one.
        #[arg(long, env = "OVF_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
    },
    /// Train vanilla, noise-injection and OVF models across the sigma_d grid; writes sweep.csv.
    Sweep(Common),
    /// Pick the OVF beta from the candidate grid at the training sigma_d; writes beta_search.csv.
    BetaSearch(Common),
    /// Print report CSVs as plain-text tables.
    Report {
        /// Report CSV files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Options shared by the configuration-driven subcommands. Flags override the file.
#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML) or a manifest.toml written by an earlier run.
    #[arg(short, long, env = "OVF_CONFIG")]
    config: PathBuf,
    /// Directory for outputs.
    #[arg(short, long, env = "OVF_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "OVF_SEED")]
    seed: Option<u64>,
    /// Training regime (train only).
    #[arg(long, env = "OVF_REGIME")]
    regime: Option<Regime>,
    /// Training epochs.
    #[arg(long, env = "OVF_EPOCHS")]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long, env = "OVF_LR")]
    learning_rate: Option<f64>,
    /// OVF negative-constraint coefficient.
    #[arg(long, env = "OVF_BETA")]
    beta: Option<f64>,
    /// Device variation. For train and beta-search this is the training sigma_d;
    /// for eval and sweep a comma-separated grid.
    #[arg(long = "sigma-d", env = "OVF_SIGMA_D", value_delimiter = ',')]
    sigma_d: Vec<f64>,
    /// Monte Carlo runs per evaluation.
    #[arg(long, env = "OVF_RUNS")]
    runs: Option<usize>,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Common {
    fn resolve(&self, command: &str, grid_sigma: bool) -> Result<(ExperimentConfig, Option<PathBuf>), Failure> {
        let loaded = config::load(&self.config).map_err(Failure::Usage)?;
        let checkpoint = match &loaded {
            Loaded::Manifest(m) => {
                if m.command != command {
                    log::warn!("manifest was written by `{}`, running `{command}`", m.command);
                }
                m.checkpoint.clone()
            }
            Loaded::Config(_) => None,
        };
        let mut c = loaded.into_config();
        if let Some(d) = &self.output_dir {
            c.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            c.train.learning_rate = lr;
        }
        if let Some(r) = self.runs {
            c.eval.runs = r;
        }
        if let Some(r) = self.regime {
            c.train.regime = r;
            if r == Regime::Ovf && c.train.ovf.is_none() {
                c.train.ovf = Some(ovf_core::training::OvfConfig::with_beta(ovf_core::training::BETA_GRID[1]));
            }
            if r != Regime::Ovf {
                c.train.ovf = None;
            }
        }
        if let Some(b) = self.beta {
            match c.train.ovf.as_mut() {
                Some(o) => o.beta = b,
                None => c.train.ovf = Some(ovf_core::training::OvfConfig::with_beta(b)),
            }
        }
        if !self.sigma_d.is_empty() {
            if grid_sigma {
                c.eval.sigma_grid = self.sigma_d.clone();
            } else if let [s] = self.sigma_d[..] {
                c.train.device.sigma_d = s;
            } else {
                return Err(Failure::Usage(anyhow::anyhow!("{command} takes a single --sigma-d")));
            }
        }
        c.validate().map_err(Failure::Usage)?;
        Ok((c, checkpoint))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    let written = match cli.command {
        Command::Train(common) => {
            let (c, _) = common.resolve("train", false)?;
            commands::train(&c).map_err(Failure::Runtime)?
        }
        Command::Eval { common, checkpoint } => {
            let (c, from_manifest) = common.resolve("eval", true)?;
            let ckpt = checkpoint
                .or(from_manifest)
                .ok_or_else(|| Failure::Usage(anyhow::anyhow!("eval needs --checkpoint")))?;
            if !ckpt.is_file() {
                return Err(Failure::Usage(anyhow::anyhow!("checkpoint {} not found", ckpt.display())));
            }
            commands::eval(&c, &ckpt).map_err(Failure::Runtime)?
        }
        Command::Sweep(common) => {
            let (c, _) = common.resolve("sweep", true)?;
            commands::sweep(&c).map_err(Failure::Runtime)?
        }
        Command::BetaSearch(common) => {
            let (c, _) = common.resolve("beta-search", false)?;
            commands::beta_search_cmd(&c).map_err(Failure::Runtime)?
        }
        Command::Report { files } => {
            if let Some(missing) = files.iter().find(|f| !f.is_file()) {
                return Err(Failure::Usage(anyhow::anyhow!("{} not found", missing.display())));
            }
            commands::report(&files).map_err(Failure::Runtime)?;
            Vec::new()
        }
    };
    for path in written {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
