//! `segrank`: evaluate multi-annotator segmentation submissions, rank
//! teams, and run the leaderboard meta-analyses.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segrank_core::engine::{run, RunConfig};
use segrank_core::Error;

#[derive(Parser)]
#[command(name = "segrank", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (falls back to the config, then SEGRANK_WORKERS).
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Override the output directory from the config.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: evaluate predictions and emit every report.
    Evaluate(Common),
    /// Recompute leaderboard.csv from saved metrics.csv.
    Rank(Common),
    /// Recompute bootstrap.json from saved metrics.csv.
    Bootstrap(Common),
    /// Recompute significance.csv from saved metrics.csv.
    Significance(Common),
    /// Recompute strata.csv from saved metrics.csv and case covariates.
    Strata {
        #[command(flatten)]
        common: Common,
        /// Teams to average (comma-separated); defaults to the
        /// leaderboard's top teams.
        #[arg(long, value_name = "IDS", value_delimiter = ',')]
        teams: Vec<String>,
    },
    /// Recompute the case dendrogram from saved metrics.csv.
    Cluster(Common),
    /// Apply the configured postprocessing rules to one volume.
    Postprocess {
        #[command(flatten)]
        common: Common,
        /// Input volume header (JSON).
        input: PathBuf,
        /// Destination volume header (JSON).
        dest: PathBuf,
    },
    /// Print the composite selectors sampled for one case.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "ID")]
        case: String,
    },
    /// Print the inter-annotator agreement for one case and class.
    Agreement {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "ID")]
        case: String,
        /// Class name: kidney, tumor, or cyst.
        #[arg(long, value_name = "NAME")]
        class: String,
    },
    /// Write a prediction-sum heatmap volume for one case and class.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "ID")]
        case: String,
        #[arg(long, value_name = "NAME")]
        class: String,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Evaluate(c)
            | Command::Rank(c)
            | Command::Bootstrap(c)
            | Command::Significance(c)
            | Command::Cluster(c) => c,
            Command::Strata { common, .. }
            | Command::Postprocess { common, .. }
            | Command::Sample { common, .. }
            | Command::Agreement { common, .. }
            | Command::Heatmap { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.sampling.master_seed = seed;
    }
    if let Some(output) = &common.output {
        config.output_dir = output.clone();
    }
    Ok(config)
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let common = cli.command.common();
    let config = load_config(common)?;
    match &cli.command {
        Command::Evaluate(_) => {
            let workers = config.effective_workers(common.workers);
            let warnings = run::run_evaluation(&config, workers)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("results written to {}", config.output_dir.display());
        }
        Command::Rank(_) => {
            let leaderboard = run::stage_rank(&config)?;
            for row in &leaderboard {
                println!("{:>3}  {}", row.final_rank, row.team_id);
            }
        }
        Command::Bootstrap(_) => run::stage_bootstrap(&config)?,
        Command::Significance(_) => run::stage_significance(&config)?,
        Command::Strata { teams, .. } => {
            let subset = if teams.is_empty() { None } else { Some(teams.as_slice()) };
            let fit = run::stage_strata(&config, subset)?;
            for ((name, coef), p) in fit
                .names
                .iter()
                .zip(&fit.coefficients)
                .zip(&fit.p_values)
            {
                println!("{name}: coefficient {coef:.6}, p {p:.6}");
            }
        }
        Command::Cluster(_) => {
            let newick = run::stage_cluster(&config)?;
            println!("{newick}");
        }
        Command::Postprocess { input, dest, .. } => {
            run::stage_postprocess(&config, input, dest)?;
        }
        Command::Sample { case, .. } => {
            print!("{}", run::stage_sample(&config, case)?);
        }
        Command::Agreement { case, class, .. } => {
            let value = run::stage_agreement(&config, case, class)?;
            println!("{value:.2}");
        }
        Command::Heatmap { case, class, .. } => {
            let path = run::stage_heatmap(&config, case, class)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
