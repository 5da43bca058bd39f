//! Sharpness-aware training for free: record every example's logits as the
//! epoch runs, then pull the current logits towards the ones recorded `lag`
//! epochs earlier with a temperature-softened KL term.
//!
//! The trajectory term reuses the training forward pass, so an iteration
//! costs exactly what an SGD iteration costs plus one KL evaluation.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Array, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, Mlp, WeightVector};
use crate::optim::{count_correct, SgdState, StepOutcome};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SafConfig {
    pub lambda: f64,
    pub tau: f64,
    /// Ẽ: how many epochs back the targets come from.
    pub lag: usize,
    /// The trajectory term is active for epochs strictly after this one.
    pub e_start: usize,
}

impl Default for SafConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            tau: 5.0,
            lag: 3,
            e_start: 5,
        }
    }
}

impl SafConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(
                "tau",
                format!("must be > 0, got {}", self.tau),
            ));
        }
        if self.lag < 1 {
            return Err(Error::config("lag", "must be >= 1"));
        }
        if self.e_start < self.lag {
            return Err(Error::config(
                "e_start",
                format!("must be >= lag ({}), got {}", self.lag, self.e_start),
            ));
        }
        Ok(())
    }
}

/// Bytes the logits tables of a record buffer occupy: `n · C · 4 · lag`.
pub fn buffer_bytes(examples: u64, classes: u64, lag: u64) -> u64 {
    examples * classes * 4 * lag
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    /// Epoch currently being written into this slot (0 = never).
    writing: u32,
    written: usize,
    /// Most recent epoch for which every row of this slot was written.
    complete: u32,
    /// Epoch that wrote each row.
    row_epoch: Vec<u32>,
    table: Vec<f32>,
}

/// Ring of `lag` per-epoch logits tables indexed by global example id.
///
/// Epoch `e` writes into slot `e mod lag`, which is also where epoch
/// `e − lag` lives. Rows are tagged with the epoch that wrote them, so a
/// lagged row stays readable until the current epoch overwrites that id.
/// Callers therefore fetch a batch's lagged rows before recording it.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordBuffer {
    examples: usize,
    classes: usize,
    lag: usize,
    slots: Vec<Slot>,
}

const SPILL_MAGIC: &[u8; 8] = b"SAFRBUF1";

impl RecordBuffer {
    pub fn new(examples: usize, classes: usize, lag: usize) -> Result<Self> {
        if lag == 0 || examples == 0 || classes == 0 {
            return Err(Error::Contract(format!(
                "record buffer needs positive sizes, got n={examples} C={classes} lag={lag}"
            )));
        }
        let slot = Slot {
            writing: 0,
            written: 0,
            complete: 0,
            row_epoch: vec![0; examples],
            table: vec![0.0; examples * classes],
        };
        Ok(Self {
            examples,
            classes,
            lag,
            slots: vec![slot; lag],
        })
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    /// Size of the logits tables in bytes.
    pub fn table_bytes(&self) -> u64 {
        buffer_bytes(self.examples as u64, self.classes as u64, self.lag as u64)
    }

    pub fn is_complete(&self, epoch: usize) -> bool {
        epoch >= 1 && self.slots[epoch % self.lag].complete as usize == epoch
    }

    /// Stores `logits` (downcast to `f32`) for `ids` as epoch `epoch`.
    pub fn record_outputs(&mut self, epoch: usize, ids: &[usize], logits: &Array) -> Result<()> {
        if epoch == 0 {
            return Err(Error::Contract("epochs are numbered from 1".into()));
        }
        if logits.shape() != [ids.len(), self.classes] {
            return Err(Error::Contract(format!(
                "logits {:?} for {} ids and {} classes",
                logits.shape(),
                ids.len(),
                self.classes
            )));
        }
        let tag = epoch as u32;
        let c = self.classes;
        let n = self.examples;
        let slot = &mut self.slots[epoch % self.lag];
        if slot.writing != tag {
            slot.writing = tag;
            slot.written = 0;
        }
        for &id in ids {
            if id >= n {
                return Err(Error::Contract(format!("id {id} outside [0, {n})")));
            }
            if slot.row_epoch[id] == tag {
                return Err(Error::Contract(format!(
                    "id {id} recorded twice in epoch {epoch}"
                )));
            }
        }
        for (k, &id) in ids.iter().enumerate() {
            let dst = &mut slot.table[id * c..(id + 1) * c];
            for (d, &v) in dst.iter_mut().zip(logits.row(k)) {
                *d = v as f32;
            }
            slot.row_epoch[id] = tag;
        }
        slot.written += ids.len();
        if slot.written == n {
            slot.complete = tag;
        }
        Ok(())
    }

    /// Rows for `ids` from epoch `epoch − lag`, upcast to `f64`.
    pub fn fetch_lagged_outputs(&self, epoch: usize, ids: &[usize]) -> Result<Array> {
        if epoch <= self.lag {
            return Err(Error::Availability(format!(
                "epoch {epoch} has no outputs from {} epochs earlier",
                self.lag
            )));
        }
        let source = epoch - self.lag;
        let slot = &self.slots[source % self.lag];
        if slot.complete as usize != source {
            return Err(Error::Availability(format!(
                "epoch {source} was not fully recorded"
            )));
        }
        let c = self.classes;
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= self.examples {
                return Err(Error::Contract(format!(
                    "id {id} outside [0, {})",
                    self.examples
                )));
            }
            if slot.row_epoch[id] as usize != source {
                return Err(Error::Availability(format!(
                    "row {id} of epoch {source} already overwritten"
                )));
            }
            data.extend(slot.table[id * c..(id + 1) * c].iter().map(|&v| v as f64));
        }
        Array::new(vec![ids.len(), c], data)
    }

    /// Spill format, all little-endian:
    /// magic `SAFRBUF1`; `n`, `C`, `lag` as u64; per slot its writing,
    /// written and complete epoch tags (u64) and `n` row tags (u32); then
    /// each slot's `n × C` f32 table.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(SPILL_MAGIC)?;
        for v in [self.examples, self.classes, self.lag] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &self.slots {
            for v in [s.writing as u64, s.written as u64, s.complete as u64] {
                out.write_all(&v.to_le_bytes())?;
            }
            for t in &s.row_epoch {
                out.write_all(&t.to_le_bytes())?;
            }
        }
        for s in &self.slots {
            for v in &s.table {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io("<record buffer>", e))?;
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cursor.take(8)? != SPILL_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a record buffer spill file".into(),
            });
        }
        let n = cursor.u64()? as usize;
        let c = cursor.u64()? as usize;
        let lag = cursor.u64()? as usize;
        let mut buf = Self::new(n, c, lag).map_err(|e| Error::Format {
            offset: 8,
            message: e.to_string(),
        })?;
        for s in &mut buf.slots {
            s.writing = cursor.u64()? as u32;
            s.written = cursor.u64()? as usize;
            s.complete = cursor.u64()? as u32;
            for t in &mut s.row_epoch {
                *t = cursor.u32()?;
            }
        }
        for s in &mut buf.slots {
            for v in &mut s.table {
                *v = f32::from_bits(cursor.u32()?);
            }
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Format {
                offset: cursor.pos,
                message: "trailing bytes after record buffer".into(),
            });
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(Error::Format {
                offset: self.pos,
                message: "truncated record buffer".into(),
            })?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Unweighted `mean_i KL(softmax(lagged_i/τ) ‖ softmax(current_i/τ))`.
pub fn trajectory_loss_saf(current: &Array, lagged: &Array, tau: f64) -> Result<f64> {
    nn::soft_target_kl(lagged, current, tau)
}

/// One SAF iteration (SAF branch of the training loop).
///
/// A single traced forward pass feeds the cross-entropy, the recording and,
/// once `epoch > e_start`, the trajectory term `λ · KL`. One backward pass
/// and one optimizer step follow.
#[allow(clippy::too_many_arguments)]
pub fn saf_combined_step(
    model: &Mlp,
    theta: &mut WeightVector,
    batch: &Batch,
    buffer: &mut RecordBuffer,
    cfg: &SafConfig,
    optimizer: &mut SgdState,
    lr: f64,
    epoch: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let traced = model.trace(&mut tape, theta, &batch.features)?;
    let ce = nn::cross_entropy_traced(&mut tape, traced.logits, &batch.labels)?;
    let loss = tape.value(ce).item();
    let correct = count_correct(tape.value(traced.logits), &batch.labels);

    let mut outcome = StepOutcome::vanilla(loss, correct, 0.0);
    let mut root = ce;
    if epoch > cfg.e_start {
        match buffer.fetch_lagged_outputs(epoch, &batch.ids) {
            Ok(lagged) => {
                let kl = nn::soft_target_kl_traced(&mut tape, &lagged, traced.logits, cfg.tau)?;
                model.count_kl();
                outcome.trajectory_loss = tape.value(kl).item();
                outcome.trajectory_active = true;
                if cfg.lambda != 0.0 {
                    let weighted = tape.scale(kl, cfg.lambda)?;
                    root = tape.add(ce, weighted)?;
                }
            }
            Err(Error::Availability(_)) => outcome.trajectory_skipped = true,
            Err(e) => return Err(e),
        }
    }
    buffer.record_outputs(epoch, &batch.ids, tape.value(traced.logits))?;

    let grad = model.gradient(&tape, &traced, root)?;
    outcome.grad_norm = grad.norm();
    optimizer.step(theta, &grad, lr)?;
    Ok(outcome)
}
