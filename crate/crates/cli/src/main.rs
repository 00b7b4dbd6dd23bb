use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glance_cli::config::read_config_file;
use glance_cli::runs::DATA_ENV;
use glance_cli::{build_config, run_repeat, CliError, ConfigSources, Kind};

#[derive(Parser)]
#[command(name = "glance", version, about = "Concept-model lab: training, open-set rejection and alignment metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, latents and report.
    Train(Common),
    /// Alignment, completeness and explicitness of latents against factors.
    Dci(Common),
    /// Run a canned experiment: leakage-mnist, leakage-sprites or alignment-sprites.
    Experiment {
        /// Experiment kind; defaults to the config's `experiment` key.
        kind: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a sweep along one latent from a checkpoint.
    Traverse(Common),
    /// Fit open-set thresholds for a checkpoint.
    CalibrateOsr(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Override a config key, e.g. `--set beta=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (kind, common, experiment) = match cli.command {
        Command::Train(c) => (Some(Kind::Train), c, false),
        Command::Dci(c) => (Some(Kind::Dci), c, false),
        Command::Traverse(c) => (Some(Kind::Traverse), c, false),
        Command::CalibrateOsr(c) => (Some(Kind::CalibrateOsr), c, false),
        Command::Experiment { kind, common } => {
            let kind = kind.map(|k| k.parse::<Kind>().map_err(|e| CliError::config("experiment", e))).transpose()?;
            (kind, common, true)
        }
    };
    let overrides = common
        .overrides
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::config(s, "expected KEY=VALUE"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sources = ConfigSources {
        kind,
        file_text: common.config.as_deref().map(read_config_file).transpose()?,
        overrides,
        seed: common.seed,
        out_dir: common.out,
        data_dir_env: std::env::var_os(DATA_ENV).map(PathBuf::from),
    };
    let cfg = build_config(&sources)?;
    if experiment && !cfg.experiment.is_experiment() {
        return Err(CliError::config(
            "experiment",
            format!("{} is not an experiment; use leakage-mnist, leakage-sprites or alignment-sprites", cfg.experiment),
        ));
    }
    if common.repeat == 0 {
        return Err(CliError::config("repeat", "must be positive"));
    }
    for r in run_repeat(&cfg, common.repeat)? {
        eprintln!(
            "{} seed {} finished in {:.1} s -> {}",
            r.config.experiment,
            r.config.seed,
            r.elapsed.as_secs_f64(),
            r.config.out_dir.display()
        );
        for l in &r.leakage {
            eprintln!("  {:<10} leakage {:.4} rejection {:.4}", l.variant, l.leakage, l.rejection_rate);
        }
        if let Some(d) = &r.dci {
            eprintln!(
                "  alignment {:.4} completeness {:.4} explicitness {:.4}",
                d.alignment, d.completeness, d.explicitness
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
