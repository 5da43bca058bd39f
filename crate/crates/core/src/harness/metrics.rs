//! Per-epoch metrics table.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numfmt::sig;

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc,trajectory_loss,\
sharpness_exact,sharpness_proxy,lr,epoch_wall_ms";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Mean unweighted trajectory KL; exactly 0 when the term was inactive.
    pub trajectory_loss: f64,
    pub sharpness_exact: f64,
    pub sharpness_proxy: f64,
    /// Learning rate of the epoch's last iteration.
    pub lr: f64,
    pub epoch_wall_ms: u64,
}

impl MetricsRow {
    pub fn render(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            sig(self.train_loss, 9),
            sig(self.train_acc, 9),
            sig(self.test_loss, 9),
            sig(self.test_acc, 9),
            sig(self.trajectory_loss, 9),
            sig(self.sharpness_exact, 9),
            sig(self.sharpness_proxy, 9),
            sig(self.lr, 9),
            self.epoch_wall_ms
        )
    }
}

pub fn render_metrics(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.render());
        out.push('\n');
    }
    out
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    std::fs::write(path, render_metrics(rows)).map_err(|e| Error::io(path, e))
}

/// Appends rows as epochs complete so an aborted run keeps what it had.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_epoch: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_epoch: 0,
        };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if row.epoch <= self.last_epoch {
            return Err(Error::Contract(format!(
                "metrics epoch {} after epoch {}",
                row.epoch, self.last_epoch
            )));
        }
        self.last_epoch = row.epoch;
        self.line(&row.render())
    }
}
