use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfew::cli::{parse_config, run_ablation, run_experiment, Axis, RunConfig};
use fedfew::Error;

#[derive(Parser)]
#[command(name = "fedfew", version, about = "Few-for-many federated learning simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Compute per-client optima and the coverage gap.
    #[arg(long, global = true)]
    oracle: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (or a mu sweep when the config lists sweep.mu).
    Run { config: PathBuf },
    /// Run one experiment per value of an ablation axis.
    Ablate {
        config: PathBuf,
        /// K, mu or local_epochs.
        #[arg(long)]
        axis: String,
    },
}

fn load(path: &PathBuf, args: &Args) -> Result<RunConfig, Error> {
    let mut cfg = parse_config(path)?;
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    cfg.oracle |= args.oracle;
    Ok(cfg)
}

fn dispatch(args: &Args) -> Result<(), Error> {
    match &args.command {
        Command::Run { config } => {
            let cfg = load(config, args)?;
            let evals = run_experiment(&cfg, &args.out)?;
            for e in &evals {
                let acc = e.headline_accuracies();
                eprintln!("mean accuracy {:.4} over {} clients", acc.iter().sum::<f64>() / acc.len() as f64, acc.len());
            }
        }
        Command::Ablate { config, axis } => {
            let axis = Axis::parse(axis)
                .ok_or_else(|| Error::Config(format!("unknown axis '{axis}' (expected K, mu or local_epochs)")))?;
            let cfg = load(config, args)?;
            for row in run_ablation(&cfg, axis, &args.out)? {
                eprintln!("{}={} mean accuracy {:.4}", axis.name(), row.value, row.mean_accuracy);
            }
        }
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedfew: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
