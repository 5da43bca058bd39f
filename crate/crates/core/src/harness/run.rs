//! The training loop shared by `train`, the benchmark and the tests.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{make_epoch_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, OptimizerKind};
use crate::harness::metrics::{MetricsRow, MetricsWriter};
use crate::mesa::{mesa_step, EmaState, MesaConfig};
use crate::nn::{self, Mlp, WeightVector};
use crate::numfmt::sig;
use crate::optim::{sgd_batch_step, CosineSchedule, SgdState, StepOutcome};
use crate::saf::{saf_combined_step, RecordBuffer, SafConfig};
use crate::sam::{probe_sharpness, sam_batch_step};

/// Seed of the batch order the sharpness probe is cut from.
pub const PROBE_SEED: u64 = 0;

enum Method {
    Sgd,
    Sam {
        rho: f64,
    },
    Saf {
        buffer: RecordBuffer,
        cfg: SafConfig,
    },
    Mesa {
        ema: EmaState,
        cfg: MesaConfig,
    },
}

/// One iteration as seen by `--trace`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub outcome: StepOutcome,
}

/// Per-iteration callback for [`Trainer::train_epoch`].
pub type TraceSink<'a> = &'a mut dyn FnMut(&IterationRecord) -> Result<()>;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub train_loss: f64,
    pub train_acc: f64,
    pub trajectory_loss: f64,
    pub lr: f64,
    /// Batches whose trajectory targets were due but missing.
    pub skipped: usize,
}

/// Model, weights and optimizer state of one run.
pub struct Trainer {
    model: Mlp,
    theta: WeightVector,
    optimizer: SgdState,
    method: Method,
    schedule: CosineSchedule,
    batch_size: usize,
    seed: u64,
    step: usize,
}

impl Trainer {
    /// Sets up a run of `cfg.epochs` epochs over `train`.
    pub fn new(cfg: &ExperimentConfig, train: &Dataset) -> Result<Self> {
        Self::with_epochs(cfg, train, cfg.epochs)
    }

    /// As [`new`](Self::new) with the schedule stretched over `epochs`.
    pub fn with_epochs(cfg: &ExperimentConfig, train: &Dataset, epochs: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Mlp::new(cfg.model_spec(train.dim(), train.classes())?);
        let theta = model.init_weights(cfg.seed);
        let method = match cfg.optimizer {
            OptimizerKind::Sgd => Method::Sgd,
            OptimizerKind::Sam => Method::Sam { rho: cfg.rho },
            OptimizerKind::Saf => Method::Saf {
                buffer: RecordBuffer::new(train.len(), train.classes(), cfg.lag)?,
                cfg: cfg.saf(),
            },
            OptimizerKind::Mesa => Method::Mesa {
                ema: EmaState::new(&theta),
                cfg: cfg.mesa(),
            },
        };
        let per_epoch = train.len().div_ceil(cfg.batch_size);
        Ok(Self {
            optimizer: SgdState::new(theta.len(), cfg.momentum, cfg.weight_decay),
            model,
            theta,
            method,
            schedule: CosineSchedule::new(cfg.lr, epochs * per_epoch),
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            step: 0,
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn weights(&self) -> &WeightVector {
        &self.theta
    }

    pub fn into_weights(self) -> WeightVector {
        self.theta
    }

    fn step_batch(&mut self, batch: &Batch, lr: f64, epoch: usize) -> Result<StepOutcome> {
        let (model, theta, opt) = (&self.model, &mut self.theta, &mut self.optimizer);
        match &mut self.method {
            Method::Sgd => sgd_batch_step(model, theta, batch, opt, lr),
            Method::Sam { rho } => sam_batch_step(model, theta, batch, *rho, opt, lr),
            Method::Saf { buffer, cfg } => {
                saf_combined_step(model, theta, batch, buffer, cfg, opt, lr, epoch)
            }
            Method::Mesa { ema, cfg } => mesa_step(model, theta, batch, ema, cfg, opt, lr, epoch),
        }
    }

    /// Runs every batch of `epoch` (numbered from 1).
    pub fn train_epoch(
        &mut self,
        train: &Dataset,
        epoch: usize,
        mut trace: Option<TraceSink<'_>>,
    ) -> Result<EpochSummary> {
        let batches = make_epoch_batches(train, self.batch_size, epoch, self.seed)?;
        let (mut loss, mut correct, mut traj, mut skipped) = (0.0, 0usize, 0.0, 0usize);
        let mut lr = self.schedule.peak;
        for batch in &batches {
            lr = self.schedule.lr(self.step.min(self.schedule.total_steps))?;
            let outcome = self.step_batch(batch, lr, epoch)?;
            self.step += 1;
            let n = batch.len() as f64;
            loss += outcome.loss * n;
            traj += outcome.trajectory_loss * n;
            correct += outcome.correct;
            skipped += outcome.trajectory_skipped as usize;
            if let Some(f) = trace.as_mut() {
                f(&IterationRecord {
                    epoch,
                    iteration: batch.iteration,
                    lr,
                    outcome,
                })?;
            }
        }
        let n = train.len() as f64;
        Ok(EpochSummary {
            train_loss: loss / n,
            train_acc: correct as f64 / n,
            trajectory_loss: traj / n,
            lr,
            skipped,
        })
    }
}

/// Fixed probe set: the first `k` batches of epoch 1 under [`PROBE_SEED`].
pub fn probe_set(train: &Dataset, batch_size: usize, k: usize) -> Result<Vec<Batch>> {
    let mut batches = make_epoch_batches(train, batch_size, 1, PROBE_SEED)?;
    batches.truncate(k);
    Ok(batches)
}

/// Mean cross-entropy and accuracy on a whole split.
pub fn evaluate(model: &Mlp, theta: &[f64], data: &Dataset) -> Result<(f64, f64)> {
    let logits = model.forward(theta, data.features())?;
    Ok((
        nn::cross_entropy(&logits, data.labels())?,
        nn::accuracy(&logits, data.labels()),
    ))
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub weights: WeightVector,
    pub skipped_batches: usize,
    /// Where metrics, weights and trace were written, if anywhere.
    pub out_dir: Option<PathBuf>,
}

pub const TRACE_HEADER: &str = "epoch,iteration,loss,trajectory_loss,lr,grad_norm";

fn io_line(out: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Full training run. With `out_dir` set, `metrics.csv` grows one row per
/// completed epoch, `weights.bin` holds the final weights and, with
/// `trace`, `trace.csv` has one row per iteration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    run_on(cfg, &train, &test)
}

/// [`run_experiment`] on already loaded data.
pub fn run_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunResult> {
    let mut trainer = Trainer::new(cfg, train)?;
    let probe = probe_set(train, cfg.batch_size, cfg.probe_batches)?;

    let mut metrics = None;
    let mut trace_out = None;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        metrics = Some(MetricsWriter::create(&dir.join("metrics.csv"))?);
        if cfg.trace {
            let path = dir.join("trace.csv");
            let mut out = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            io_line(&mut out, &path, TRACE_HEADER)?;
            trace_out = Some((path, out));
        }
    }

    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let tracing = trace_out.is_some();
        let summary = {
            let mut write_trace = |r: &IterationRecord| -> Result<()> {
                let (path, out) = trace_out.as_mut().expect("trace sink");
                let line = format!(
                    "{},{},{},{},{},{}",
                    r.epoch,
                    r.iteration,
                    sig(r.outcome.loss, 9),
                    sig(r.outcome.trajectory_loss, 9),
                    sig(r.lr, 9),
                    sig(r.outcome.grad_norm, 9)
                );
                io_line(out, path, &line)
            };
            let trace: Option<TraceSink<'_>> = if tracing {
                Some(&mut write_trace)
            } else {
                None
            };
            trainer.train_epoch(train, epoch, trace)
        };
        let summary = match summary {
            Ok(s) => s,
            Err(e) => {
                if let Some((path, out)) = trace_out.as_mut() {
                    out.flush().map_err(|io| Error::io(&*path, io))?;
                }
                return Err(e);
            }
        };
        let wall = started.elapsed();
        skipped += summary.skipped;
        let (test_loss, test_acc) = evaluate(trainer.model(), trainer.weights(), test)?;
        let sharp = probe_sharpness(trainer.model(), trainer.weights(), &probe, cfg.rho)?;
        let row = MetricsRow {
            epoch,
            train_loss: summary.train_loss,
            train_acc: summary.train_acc,
            test_loss,
            test_acc,
            trajectory_loss: summary.trajectory_loss,
            sharpness_exact: sharp.exact,
            sharpness_proxy: sharp.proxy,
            lr: summary.lr,
            epoch_wall_ms: wall.as_millis() as u64,
        };
        if let Some(m) = metrics.as_mut() {
            m.append(&row)?;
        }
        rows.push(row);
    }
    if let Some((path, mut out)) = trace_out {
        out.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = &cfg.out_dir {
        save_weights(trainer.weights(), &dir.join("weights.bin"))?;
    }
    Ok(RunResult {
        rows,
        weights: trainer.into_weights(),
        skipped_batches: skipped,
        out_dir: cfg.out_dir.clone(),
    })
}

const WEIGHTS_MAGIC: &[u8; 8] = b"SAFWGT01";

/// `SAFWGT01`, little-endian `u64` count, then `f64` values.
pub fn save_weights(theta: &[f64], path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 8 * theta.len());
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for w in theta {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<WeightVector> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a weights file".into(),
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * count {
        return Err(Error::Format {
            offset: bytes.len().min(16 + 8 * count),
            message: format!("expected {count} weights"),
        });
    }
    Ok(WeightVector(
        bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DatasetSpec;

    pub(crate) fn tiny(optimizer: OptimizerKind) -> ExperimentConfig {
        ExperimentConfig {
            optimizer,
            dataset: DatasetSpec::Blobs {
                train_per_class: 30,
                test_per_class: 10,
                classes: 3,
                dim: 4,
                spread: 0.5,
                seed: 1,
            },
            hidden: vec![8],
            epochs: 3,
            batch_size: 16,
            lr: 0.1,
            lag: 1,
            e_start: 1,
            ..ExperimentConfig::new(optimizer)
        }
    }

    #[test]
    fn one_row_per_epoch_with_gated_trajectory_column() {
        for kind in OptimizerKind::ALL {
            let res = run_experiment(&tiny(kind)).unwrap();
            assert_eq!(res.rows.len(), 3);
            assert_eq!(
                res.rows.iter().map(|r| r.epoch).collect::<Vec<_>>(),
                vec![1, 2, 3]
            );
            assert_eq!(res.rows[0].trajectory_loss, 0.0, "{kind}");
            assert_eq!(res.skipped_batches, 0);
        }
    }

    #[test]
    fn saf_without_weight_matches_sgd() {
        let sgd = run_experiment(&tiny(OptimizerKind::Sgd)).unwrap();
        let mut cfg = tiny(OptimizerKind::Saf);
        cfg.lambda = Some(0.0);
        let saf = run_experiment(&cfg).unwrap();
        assert_eq!(sgd.weights, saf.weights);
        assert!(saf.rows[2].trajectory_loss > 0.0);
    }

    #[test]
    fn schedule_decays_towards_zero() {
        let res = run_experiment(&tiny(OptimizerKind::Sgd)).unwrap();
        assert!(res.rows[2].lr > 0.0 && res.rows[2].lr < 1e-3);
        assert!(res.rows[0].lr > res.rows[1].lr);
    }

    #[test]
    fn outputs_written_to_out_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(OptimizerKind::Mesa);
        cfg.out_dir = Some(dir.path().join("run"));
        cfg.trace = true;
        let res = run_experiment(&cfg).unwrap();
        let run = dir.path().join("run");
        let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 4);
        assert_eq!(load_weights(&run.join("weights.bin")).unwrap(), res.weights);
        let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
        assert_eq!(trace.lines().next(), Some(TRACE_HEADER));
        // 90 examples in batches of 16
        assert_eq!(trace.lines().count(), 1 + 3 * 6);
    }

    #[test]
    fn corrupt_weights_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        save_weights(&[1.0, 2.0], &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_weights(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"nope").unwrap();
        assert!(matches!(
            load_weights(&p),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
