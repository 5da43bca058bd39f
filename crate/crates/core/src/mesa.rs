//! Memory-efficient variant of SAF: the trajectory targets come from a
//! forward pass through exponential-moving-average shadow weights instead
//! of a per-example record buffer.

use crate::autodiff::{Array, Tape};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{self, Mlp, WeightVector};
use crate::optim::{count_correct, SgdState, StepOutcome};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MesaConfig {
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub e_start: usize,
}

impl Default for MesaConfig {
    fn default() -> Self {
        Self {
            beta: 0.9995,
            lambda: 0.8,
            tau: 5.0,
            e_start: 5,
        }
    }
}

impl MesaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.9 && self.beta < 1.0) {
            return Err(Error::config(
                "beta",
                format!("must lie in (0.9, 1), got {}", self.beta),
            ));
        }
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
        Ok(())
    }
}

/// Shadow weights `v` and the number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    v: Vec<f64>,
    t: usize,
}

impl EmaState {
    /// Starts from `v = θ₁`.
    pub fn new(theta: &[f64]) -> Self {
        Self {
            v: theta.to_vec(),
            t: 0,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.v
    }

    pub fn iterations(&self) -> usize {
        self.t
    }

    /// `v ← βv + (1 − β)θ`.
    pub fn update(&mut self, theta: &[f64], beta: f64) -> Result<()> {
        if theta.len() != self.v.len() {
            return Err(Error::Shape(format!(
                "ema of length {} updated with {} weights",
                self.v.len(),
                theta.len()
            )));
        }
        for (v, &w) in self.v.iter_mut().zip(theta) {
            *v = beta * *v + (1.0 - beta) * w;
        }
        self.t += 1;
        Ok(())
    }
}

/// Weights `β^{t−i}` for `i = 1..t−1` attached to the past gradients in the
/// closed form of `v_t`.
pub fn ema_coefficients(t: usize, beta: f64) -> Vec<f64> {
    (1..t).map(|i| beta.powi((t - i) as i32)).collect()
}

/// Closed form of the EMA under plain SGD `θ_{i+1} = θ_i − η g_i`:
/// `v_t = θ_t + Σ_{i<t} β^{t−i} η g_i`, with `t = grads.len() + 1`.
pub fn ema_closed_form(theta1: &[f64], grads: &[Vec<f64>], lr: f64, beta: f64) -> Result<Vec<f64>> {
    if let Some(g) = grads.iter().find(|g| g.len() != theta1.len()) {
        return Err(Error::Shape(format!(
            "gradient of length {} for {} weights",
            g.len(),
            theta1.len()
        )));
    }
    let t = grads.len() + 1;
    let mut theta_t = theta1.to_vec();
    for g in grads {
        for (w, gi) in theta_t.iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    let mut v = theta_t;
    for (g, coef) in grads.iter().zip(ema_coefficients(t, beta)) {
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi += coef * lr * gi;
        }
    }
    Ok(v)
}

/// Unweighted `mean_i KL(softmax(ema_i/τ) ‖ softmax(current_i/τ))`.
pub fn trajectory_loss_mesa(current: &Array, ema: &Array, tau: f64) -> Result<f64> {
    nn::soft_target_kl(ema, current, tau)
}

/// One MESA iteration.
///
/// The EMA is updated first, every iteration. Once `epoch > e_start` an
/// extra untraced forward through the shadow weights provides the KL
/// targets; before that no extra pass is made.
#[allow(clippy::too_many_arguments)]
pub fn mesa_step(
    model: &Mlp,
    theta: &mut WeightVector,
    batch: &Batch,
    ema: &mut EmaState,
    cfg: &MesaConfig,
    optimizer: &mut SgdState,
    lr: f64,
    epoch: usize,
) -> Result<StepOutcome> {
    ema.update(theta, cfg.beta)?;

    let mut tape = Tape::new();
    let traced = model.trace(&mut tape, theta, &batch.features)?;
    let ce = nn::cross_entropy_traced(&mut tape, traced.logits, &batch.labels)?;
    let loss = tape.value(ce).item();
    let correct = count_correct(tape.value(traced.logits), &batch.labels);

    let mut outcome = StepOutcome::vanilla(loss, correct, 0.0);
    let mut root = ce;
    if epoch > cfg.e_start {
        let targets = model.forward(ema.weights(), &batch.features)?;
        let kl = nn::soft_target_kl_traced(&mut tape, &targets, traced.logits, cfg.tau)?;
        model.count_kl();
        outcome.trajectory_loss = tape.value(kl).item();
        outcome.trajectory_active = true;
        if cfg.lambda != 0.0 {
            let weighted = tape.scale(kl, cfg.lambda)?;
            root = tape.add(ce, weighted)?;
        }
    }

    let grad = model.gradient(&tape, &traced, root)?;
    outcome.grad_norm = grad.norm();
    optimizer.step(theta, &grad, lr)?;
    Ok(outcome)
}
