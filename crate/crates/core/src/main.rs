use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldpkit::experiments::{self, ExperimentConfig, Overrides};
use ldpkit::Error;

#[derive(Parser)]
#[command(name = "ldpkit", version, about = "LDP knowledge-transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the smallest epsilon whose SIDP accuracy falls in the target band.
    Calibrate(Common),
    /// Compare mechanisms against SIDP over repeated runs.
    Compare(Common),
    /// Sweep private-set and query-set sizes.
    Sweep(Common),
    /// Private-vs-validation accuracy gap across epsilons.
    Trend(Common),
    /// Latent-space divergence studies over class triplets.
    Latent(Common),
    /// Write clean and noised image grids as PGM files.
    RenderSamples(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Multiplier applied to every query-set size.
    #[arg(long)]
    scale: Option<f64>,
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| e.at_stage("config"))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        scale: common.scale,
    });
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Calibrate(c) => {
            let cal = experiments::cmd_calibrate(&load(&c)?)?;
            println!("epsilon {} sidp {:.4}", cal.epsilon, cal.sidp_acc);
        }
        Command::Compare(c) => {
            let r = experiments::cmd_compare(&load(&c)?)?;
            for s in &r.cells {
                println!(
                    "{} eps {}: sidp {:.4} local {:.4} +- {:.4}",
                    s.mechanism, s.epsilon, s.sidp_mean, s.acc_priv_mean, s.acc_priv_std
                );
            }
        }
        Command::Sweep(c) => {
            let r = experiments::cmd_sweep(&load(&c)?)?;
            println!("{} cells, {} skipped", r.cells.len(), r.skipped.len());
        }
        Command::Trend(c) => {
            let r = experiments::cmd_trend(&load(&c)?)?;
            for row in &r.rows {
                println!("eps {}: gap {:.4}", row.epsilon, row.gap);
            }
        }
        Command::Latent(c) => {
            let r = experiments::cmd_latent(&load(&c)?)?;
            println!(
                "DR > 1 in {} of {} triplets ({:.4})",
                r.triplets_with_dr_gt_1, r.total_triplets, r.frequency
            );
        }
        Command::RenderSamples(c) => {
            let r = experiments::cmd_render_samples(&load(&c)?)?;
            for f in &r.files {
                println!("{f}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
