use std::path::PathBuf;
use std::process::ExitCode;

use bspline_deform::cli::{
    cmd_compare, cmd_estimate, cmd_predict, cmd_simulate, Config, EstimateArgs, PredictArgs,
};
use bspline_deform::error::Result;
use clap::{Parser, Subcommand};

/// Nonstationary spatial covariance via non-folding B-spline deformations.
#[derive(Parser)]
#[command(name = "bdef", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the swirl field and write data plus truth sidecars.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model to long-format CSV data.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Krige one period of the training data onto new sites.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        time: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare B-spline and thin-plate estimators on simulated data.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: Option<&PathBuf>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), |p| Config::load(p))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg = load(config.as_ref())?;
            let files = cmd_simulate(&cfg, &out, seed.unwrap_or(cfg.seed))?;
            println!("wrote {}", files.data.display());
            println!("wrote {}", files.truth_map.display());
            println!("wrote {}", files.truth_cov.display());
        }
        Command::Estimate {
            data,
            k,
            epsilon,
            tol,
            out,
            config,
        } => {
            let cfg = load(config.as_ref())?;
            let args = EstimateArgs {
                data,
                k,
                epsilon,
                tol,
                out: out.clone(),
            };
            let res = cmd_estimate(&args, &cfg)?;
            for id in &res.dropped {
                eprintln!("dropped incomplete station {id}");
            }
            let m = &res.model;
            println!(
                "n={} T={} K={}x{} sigma2={} phi={} nugget={} loglik={} iterations={}",
                m.training.sites.len(),
                m.training.times.len(),
                m.k1,
                m.k2,
                m.sigma2,
                m.phi,
                m.nugget,
                m.diagnostics
                    .loglik
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
                m.diagnostics.iterations
            );
            println!("wrote {}", out.display());
            println!("wrote {}", res.grid_csv.display());
        }
        Command::Predict {
            model,
            grid,
            time,
            out,
            draws,
            seed,
        } => {
            let n = cmd_predict(&PredictArgs {
                model,
                grid,
                time,
                out: out.clone(),
                draws,
                seed,
            })?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Compare { config, out } => {
            let cfg = load(config.as_ref())?;
            let rows = cmd_compare(&cfg, &out)?;
            println!("method  size  slope  corr   mse      min|J|     folds");
            for r in rows {
                println!(
                    "{:7} {:4}  {:.3}  {:.3}  {:.2e}  {:.3e}  {}",
                    r.method,
                    r.size,
                    r.fit.slope,
                    r.fit.correlation,
                    r.mse,
                    r.min_jacobian,
                    r.folds
                );
            }
            println!("wrote {}", out.join("report.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
