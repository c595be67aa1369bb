use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use samlab::harness::{self, ExperimentConfig, SweepAxis};
use samlab::objective::OnBatch;
use samlab::sharpness::{
    hessian_top_eigenvalue, loss_surface_slice, random_direction, sharpness_probe,
};
use samlab::{Error, ParamVector, Result};

#[derive(Parser)]
#[command(name = "samlab", version, about = "Sharpness-aware minimization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Disable SAM and train with the base optimizer only.
        #[arg(long)]
        no_sam: bool,
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Grid over one SAM or data axis, with baselines.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Worst-case loss increase in a ρ-ball and the top Hessian eigenvalue.
    Sharpness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        rho: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        restarts: usize,
        #[arg(long, default_value_t = 50)]
        hessian_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Training loss on a 2-D slice through random directions.
    Slice {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        half_width: f64,
        #[arg(long)]
        grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-step wall-time ratio of SAM over plain training.
    Overhead {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_axis(s: &str) -> std::result::Result<SweepAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write_output(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a checkpoint and checks it against the config's model layout.
fn load_for(config: &ExperimentConfig, path: &Path) -> Result<ParamVector> {
    let params = harness::load_checkpoint(path)?;
    let template = config.model.init()?;
    if !params.is_congruent(&template) {
        return Err(Error::config(format!(
            "checkpoint {} does not match the configured model",
            path.display()
        )));
    }
    Ok(params)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            no_sam,
            rho,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.run_seed = s;
            }
            if no_sam {
                cfg.sam.enabled = false;
            }
            if let Some(r) = rho {
                cfg.sam.rho = r;
            }
            cfg.validate()?;
            let out = harness::run_experiment(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let values = if values.is_empty() {
                axis.default_values()
            } else {
                values
            };
            let seeds = if seeds.is_empty() {
                (0..5).collect()
            } else {
                seeds
            };
            let result = harness::sweep(&cfg, axis, &values, &seeds, true, cfg.exec)?;
            let failed = result.rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} rows written to {}",
                result.rows.len(),
                cfg.output_dir.join(harness::SWEEP_FILE).display()
            );
            if failed > 0 {
                log::warn!("{failed} sweep cells failed");
            }
        }
        Command::Sharpness {
            checkpoint,
            config,
            rho,
            steps,
            restarts,
            hessian_iters,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let params = load_for(&cfg, &checkpoint)?;
            let (train, _) = cfg.datasets()?;
            let batch = train.as_batch();
            let loss = OnBatch::new(&cfg.model, &batch);
            let mut report = sharpness_probe(&loss, &params, rho, steps, restarts, seed, cfg.exec)?;
            report.top_eigenvalue_estimate = Some(hessian_top_eigenvalue(
                &loss,
                &params,
                hessian_iters,
                1e-4,
                seed,
            )?);
            let text = serde_json::to_string_pretty(&report)?;
            write_output(&cfg.output_dir, "sharpness.json", &(text.clone() + "\n"))?;
            println!("{text}");
        }
        Command::Slice {
            checkpoint,
            config,
            half_width,
            grid,
            seed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let params = load_for(&cfg, &checkpoint)?;
            let (train, _) = cfg.datasets()?;
            let batch = train.as_batch();
            let loss = OnBatch::new(&cfg.model, &batch);
            let u = random_direction(&params, seed, 0);
            let v = random_direction(&params, seed, 1);
            let slice = loss_surface_slice(&loss, &params, &u, &v, half_width, grid, cfg.exec)?;
            let mut csv = String::from("alpha,beta,loss\n");
            for (i, row) in slice.values.iter().enumerate() {
                for (j, l) in row.iter().enumerate() {
                    csv.push_str(&format!(
                        "{},{},{}\n",
                        harness::metrics::fmt_f64(slice.coords[i]),
                        harness::metrics::fmt_f64(slice.coords[j]),
                        harness::metrics::fmt_f64(*l)
                    ));
                }
            }
            let path = write_output(&cfg.output_dir, "slice.csv", &csv)?;
            println!("{}×{} slice written to {}", grid, grid, path.display());
        }
        Command::Overhead { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = harness::measure_overhead(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
