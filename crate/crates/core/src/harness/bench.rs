//! Per-epoch training throughput and the record-buffer memory model.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, OptimizerKind};
use crate::harness::run::Trainer;
use crate::saf::buffer_bytes;

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputEntry {
    pub optimizer: OptimizerKind,
    /// Median over the timed epochs.
    pub median_epoch_ms: f64,
    pub examples_per_sec: f64,
    /// `median_epoch_ms / sgd median_epoch_ms`; 2.0 means half SGD's speed.
    pub cost_ratio: f64,
    pub epoch_ms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub examples: usize,
    pub warmup: usize,
    pub timed: usize,
    pub entries: Vec<ThroughputEntry>,
}

impl ThroughputReport {
    pub fn entry(&self, kind: OptimizerKind) -> Option<&ThroughputEntry> {
        self.entries.iter().find(|e| e.optimizer == kind)
    }

    pub fn render(&self) -> String {
        let mut out = String::from(
            "optimizer,median_epoch_ms,examples_per_sec,cost_ratio_vs_sgd,speed_vs_sgd_pct\n",
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{},{:.3},{:.1},{:.3},{:.1}\n",
                e.optimizer,
                e.median_epoch_ms,
                e.examples_per_sec,
                e.cost_ratio,
                100.0 / e.cost_ratio
            ));
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Trains every config for `warmup + timed` epochs on the data of the first
/// config, interleaving the optimizers epoch by epoch, and times the
/// training phase of the last `timed` epochs. One config must be SGD.
pub fn measure_throughput(
    configs: &[ExperimentConfig],
    warmup: usize,
    timed: usize,
) -> Result<ThroughputReport> {
    if timed == 0 {
        return Err(Error::Contract("need at least one timed epoch".into()));
    }
    let first = configs
        .first()
        .ok_or_else(|| Error::Contract("no configurations to benchmark".into()))?;
    if let Some(c) = configs
        .iter()
        .find(|c| c.dataset != first.dataset || c.hidden != first.hidden)
    {
        return Err(Error::Contract(format!(
            "{} config differs from {} in data or model",
            c.optimizer, first.optimizer
        )));
    }
    if !configs.iter().any(|c| c.optimizer == OptimizerKind::Sgd) {
        return Err(Error::Contract("benchmark needs an sgd baseline".into()));
    }
    let (train, _) = first.dataset.load()?;
    let epochs = warmup + timed;
    let mut trainers = configs
        .iter()
        .map(|c| Trainer::with_epochs(c, &train, epochs))
        .collect::<Result<Vec<_>>>()?;
    let mut times = vec![Vec::with_capacity(timed); configs.len()];
    for epoch in 1..=epochs {
        for (trainer, t) in trainers.iter_mut().zip(&mut times) {
            let started = Instant::now();
            trainer.train_epoch(&train, epoch, None)?;
            let ms = started.elapsed().as_secs_f64() * 1e3;
            if epoch > warmup {
                t.push(ms);
            }
        }
    }
    let medians: Vec<f64> = times.iter().map(|t| median(t)).collect();
    let sgd = configs
        .iter()
        .zip(&medians)
        .find(|(c, _)| c.optimizer == OptimizerKind::Sgd)
        .map(|(_, &m)| m)
        .expect("sgd present");
    let entries = configs
        .iter()
        .zip(medians)
        .zip(times)
        .map(|((c, m), epoch_ms)| ThroughputEntry {
            optimizer: c.optimizer,
            median_epoch_ms: m,
            examples_per_sec: train.len() as f64 / (m / 1e3),
            cost_ratio: m / sgd,
            epoch_ms,
        })
        .collect();
    Ok(ThroughputReport {
        examples: train.len(),
        warmup,
        timed,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryModel {
    pub examples: u64,
    pub classes: u64,
    pub lag: u64,
    pub bytes: u64,
}

impl MemoryModel {
    pub fn new(examples: u64, classes: u64, lag: u64) -> Self {
        Self {
            examples,
            classes,
            lag,
            bytes: buffer_bytes(examples, classes, lag),
        }
    }

    /// Binary megabytes (2^20 bytes).
    pub fn mebibytes(&self) -> f64 {
        self.bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn render(&self) -> String {
        format!(
            "record buffer for n={} C={} lag={}: {} bytes = {:.1} MiB\n",
            self.examples,
            self.classes,
            self.lag,
            self.bytes,
            self.mebibytes()
        )
    }
}
