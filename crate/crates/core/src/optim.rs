//! SGD with momentum and coupled weight decay, and the cosine schedule.

use crate::autodiff::{GradientVector, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, Mlp, WeightVector};

/// `η_t = peak · ½(1 + cos(π t / T))`, stepped per iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total_steps: usize) -> Self {
        Self { peak, total_steps }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Ok(self.peak);
        }
        let frac = step as f64 / self.total_steps as f64;
        Ok((self.peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())).max(0.0))
    }
}

#[derive(Clone, Debug)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    buffer: Vec<f64>,
}

impl SgdState {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffer: vec![0.0; len],
        }
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    /// `g' = g + wd·θ; m ← μm + g'; θ ← θ − η·m`.
    pub fn step(&mut self, theta: &mut WeightVector, grad: &GradientVector, lr: f64) -> Result<()> {
        if theta.len() != grad.len() || theta.len() != self.buffer.len() {
            return Err(Error::Shape(format!(
                "sgd step: weights {}, gradient {}, momentum {}",
                theta.len(),
                grad.len(),
                self.buffer.len()
            )));
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {k}"
            )));
        }
        for ((w, &g), m) in theta.iter_mut().zip(grad.iter()).zip(&mut self.buffer) {
            let g = g + self.weight_decay * *w;
            *m = self.momentum * *m + g;
            *w -= lr * *m;
        }
        Ok(())
    }
}

/// What one training iteration observed, before its update was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Vanilla cross-entropy on the batch.
    pub loss: f64,
    /// Unweighted trajectory KL; 0 when the term was inactive.
    pub trajectory_loss: f64,
    pub trajectory_active: bool,
    /// Set when the trajectory term was due but its targets were missing.
    pub trajectory_skipped: bool,
    pub correct: usize,
    /// Norm of the gradient handed to the optimizer.
    pub grad_norm: f64,
}

impl StepOutcome {
    pub(crate) fn vanilla(loss: f64, correct: usize, grad_norm: f64) -> Self {
        Self {
            loss,
            trajectory_loss: 0.0,
            trajectory_active: false,
            trajectory_skipped: false,
            correct,
            grad_norm,
        }
    }
}

pub(crate) fn count_correct(logits: &crate::autodiff::Array, labels: &[usize]) -> usize {
    nn::predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count()
}

/// Plain SGD iteration on one batch: one forward, one backward.
pub fn sgd_batch_step(
    model: &Mlp,
    theta: &mut WeightVector,
    batch: &Batch,
    optimizer: &mut SgdState,
    lr: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let traced = model.trace(&mut tape, theta, &batch.features)?;
    let ce = nn::cross_entropy_traced(&mut tape, traced.logits, &batch.labels)?;
    let loss = tape.value(ce).item();
    let correct = count_correct(tape.value(traced.logits), &batch.labels);
    let grad = model.gradient(&tape, &traced, ce)?;
    optimizer.step(theta, &grad, lr)?;
    Ok(StepOutcome::vanilla(loss, correct, grad.norm()))
}
