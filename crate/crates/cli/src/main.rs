//! Command-line front end: train, eval, sample and check.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stglow::pipeline::{
    evaluate, find_scene, load_data_arg, load_datasets, plot_scene, render_svg, run_checks, samples_to_csv, train,
    training_split, Checkpoint, Config, TrainOptions,
};

#[derive(Parser)]
#[command(name = "stglow", version, about = "Flow-based pedestrian trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory for `last.ckpt`, `best.ckpt` and `metrics.csv`.
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
    },
    /// Best-of-K ADE/FDE of a checkpoint, as CSV on stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// ETH/UCY file, directory of them, or a synthetic spec such as
        /// `synth:straight=32,turn=32;seed=9`.
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        sigma: Option<f64>,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample futures for every pedestrian of one scene; writes
    /// `samples.csv` and `samples.svg`.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// `dataset:index` or a bare index.
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Data to draw the scene from; defaults to the checkpoint's config.
        #[arg(long)]
        data: Option<String>,
    },
    /// Run the self-check suite and print a JSON report.
    Check {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_checkpoint(path: &PathBuf) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, resume, out } => {
            let mut config = Config::load(&config)?;
            config.apply_env()?;
            let datasets = load_datasets(&config)?;
            let (windows, tests) = training_split(&datasets, config.data.holdout.as_deref())?;
            eprintln!("training on {} windows", windows.len());
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                resume: resume.as_ref().map(load_checkpoint).transpose()?,
                log: true,
            };
            let outcome = train(&config, &windows, &opts)?;
            if !tests.is_empty() {
                let ck = outcome.best.as_ref().unwrap_or(&outcome.last);
                let report = evaluate(&ck.model()?, &tests, config.eval.k, config.eval.sigma, config.seed)?;
                let csv = report.to_csv();
                std::fs::write(out.join("metrics.csv"), &csv)?;
                print!("{csv}");
            }
        }
        Command::Eval {
            ckpt,
            data,
            k,
            sigma,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let mut config = ck.config.clone();
            config.apply_env()?;
            let datasets = load_data_arg(&data, config.model.t_o, config.model.t_p, config.data.stride)?;
            let report = evaluate(&ck.model()?, &datasets, k, sigma.unwrap_or(config.eval.sigma), config.seed)?;
            let csv = report.to_csv();
            if let Some(out) = out {
                std::fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
            }
            print!("{csv}");
        }
        Command::Sample {
            ckpt,
            scene,
            k,
            sigma,
            out,
            data,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let mut config = ck.config.clone();
            config.apply_env()?;
            let datasets = match data {
                Some(arg) => load_data_arg(&arg, config.model.t_o, config.model.t_p, config.data.stride)?,
                None => load_datasets(&config)?,
            };
            let window = find_scene(&datasets, &scene)?;
            let rows = plot_scene(&ck.model()?, window, k, sigma, config.seed)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("samples.csv"), samples_to_csv(&rows))?;
            std::fs::write(out.join("samples.svg"), render_svg(window, &rows))?;
            eprintln!("wrote {} samples to {}", rows.len(), out.display());
        }
        Command::Check { ckpt } => {
            let bytes = ckpt
                .as_ref()
                .map(|p| std::fs::read(p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let mut seed = 0;
            if let Ok(v) = std::env::var(stglow::pipeline::SEED_ENV) {
                seed = v.trim().parse().context("parsing the seed override")?;
            }
            let report = run_checks(bytes.as_deref(), seed);
            println!("{}", report.to_json());
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
