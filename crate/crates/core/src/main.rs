use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saf_core::data::Dataset;
use saf_core::harness::{
    self, load_weights, measure_throughput, parse_pairs, probe_set, run_experiment,
    ExperimentConfig, MemoryModel, OptimizerKind,
};
use saf_core::landscape::{evaluate_model_grid, write_grid_file};
use saf_core::sam::probe_sharpness;
use saf_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "saf",
    version,
    about = "Sharpness-aware training: SGD, SAM, SAF and MESA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Any other config key, as `key=value`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push(
            "out_dir",
            self.out_dir.as_ref().map(|p| p.display().to_string()),
        );
        push("optimizer", self.optimizer.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("rho", self.rho.map(|v| v.to_string()));
        push("lambda", self.lambda.map(|v| v.to_string()));
        for kv in &self.set {
            let text = kv.replacen('=', " = ", 1);
            out.extend(parse_pairs(&text)?);
        }
        Ok(out)
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let overrides = self.overrides()?;
        match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_pairs(&[], &overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write per-epoch metrics
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write per-iteration trace.csv
        #[arg(long)]
        trace: bool,
    },
    /// Export the loss surface around a set of weights
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Weights file; defaults to the seeded initialization
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        range: f64,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        /// Output file; defaults to landscape.csv in the output directory
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sharpness of a set of weights on the probe batches
    Sharpness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Time training epochs per optimizer, or print the record-buffer size
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        timed: usize,
        #[arg(long, value_delimiter = ',', default_value = "sgd,sam,saf,mesa")]
        optimizers: Vec<String>,
        /// Print the buffer size for N examples, C classes and LAG epochs
        #[arg(long, num_args = 3, value_names = ["N", "C", "LAG"])]
        memory_model: Option<Vec<u64>>,
    },
}

fn weights_or_init(
    cfg: &ExperimentConfig,
    train: &Dataset,
    path: Option<&Path>,
) -> Result<(harness::Trainer, Vec<f64>)> {
    let trainer = harness::Trainer::new(cfg, train)?;
    let theta = match path {
        Some(p) => load_weights(p)?.into_inner(),
        None => trainer.weights().to_vec(),
    };
    if theta.len() != trainer.model().num_params() {
        return Err(Error::Shape(format!(
            "weights file has {} values, model needs {}",
            theta.len(),
            trainer.model().num_params()
        )));
    }
    Ok((trainer, theta))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, trace } => {
            let mut cfg = common.load()?;
            cfg.trace |= trace;
            if cfg.out_dir.is_none() {
                cfg.out_dir = Some(PathBuf::from("runs").join(cfg.optimizer.name()));
            }
            let res = run_experiment(&cfg)?;
            let last = res.rows.last().expect("at least one epoch");
            println!(
                "{}: {} epochs, train_loss {:.4}, test_acc {:.4}, sharpness {:.6}",
                cfg.optimizer,
                res.rows.len(),
                last.train_loss,
                last.test_acc,
                last.sharpness_exact
            );
            if res.skipped_batches > 0 {
                eprintln!(
                    "warning: {} batches had no lagged outputs",
                    res.skipped_batches
                );
            }
            println!("wrote {}", cfg.out_dir.as_ref().unwrap().display());
        }
        Command::Landscape {
            common,
            weights,
            range,
            resolution,
            output,
        } => {
            let cfg = common.load()?;
            let (train, test) = cfg.dataset.load()?;
            let (trainer, theta) = weights_or_init(&cfg, &train, weights.as_deref())?;
            let grid = evaluate_model_grid(
                trainer.model(),
                &theta,
                test.features(),
                test.labels(),
                cfg.seed,
                range,
                resolution,
            )?;
            let path = output.unwrap_or_else(|| {
                cfg.out_dir
                    .clone()
                    .unwrap_or_else(|| PathBuf::from("."))
                    .join("landscape.csv")
            });
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_grid_file(&grid, &path)?;
            println!(
                "wrote {} ({}x{} cells)",
                path.display(),
                resolution,
                resolution
            );
        }
        Command::Sharpness { common, weights } => {
            let cfg = common.load()?;
            let (train, _) = cfg.dataset.load()?;
            let (trainer, theta) = weights_or_init(&cfg, &train, weights.as_deref())?;
            let probe = probe_set(&train, cfg.batch_size, cfg.probe_batches)?;
            let r = probe_sharpness(trainer.model(), &theta, &probe, cfg.rho)?;
            println!("rho,batches,sharpness_exact,sharpness_proxy");
            println!("{},{},{},{}", r.rho, r.batches, r.exact, r.proxy);
        }
        Command::Benchmark {
            common,
            warmup,
            timed,
            optimizers,
            memory_model,
        } => {
            if let Some(v) = memory_model {
                print!("{}", MemoryModel::new(v[0], v[1], v[2]).render());
                return Ok(());
            }
            let base = common.load()?;
            let configs = optimizers
                .iter()
                .map(|name| {
                    let cfg = ExperimentConfig {
                        optimizer: name.parse::<OptimizerKind>()?,
                        ..base.clone()
                    };
                    cfg.validate()?;
                    Ok(cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = measure_throughput(&configs, warmup, timed)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
