//! SAM's ascent perturbation and two-pass update, the ρ-ball sharpness
//! measure, and gradient-angle diagnostics.

use crate::autodiff::{dot, norm, GradientVector};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nn::{Mlp, WeightVector};
use crate::objective::{BatchObjective, Objective};
use crate::optim::{count_correct, SgdState, StepOutcome};
use crate::{autodiff::Tape, nn};

/// Gradients with norm below this are treated as a flat point.
pub const FLAT_GRADIENT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationVector {
    pub epsilon: Vec<f64>,
    pub rho: f64,
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("rho must be positive, got {rho}")))
    }
}

/// `ε̂ = ρ g / ‖g‖`, or zero at a flat point.
pub fn compute_epsilon_hat(grad: &[f64], rho: f64) -> Result<PerturbationVector> {
    check_rho(rho)?;
    let n = norm(grad);
    let epsilon = if n < FLAT_GRADIENT {
        vec![0.0; grad.len()]
    } else {
        grad.iter().map(|g| rho * g / n).collect()
    };
    Ok(PerturbationVector { epsilon, rho })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpnessReport {
    /// `L(θ + ε̂) − L(θ)`.
    pub exact: f64,
    /// `ρ ‖∇L(θ)‖`.
    pub proxy: f64,
    pub rho: f64,
    /// Number of batches averaged into this report.
    pub batches: usize,
}

/// Sharpness of `objective` at `theta` within a ρ-ball. Read-only on θ.
pub fn sharpness_measure<O: Objective + ?Sized>(
    objective: &O,
    theta: &[f64],
    rho: f64,
) -> Result<SharpnessReport> {
    let (base, grad) = objective.loss_and_grad(theta)?;
    let eps = compute_epsilon_hat(&grad, rho)?;
    let perturbed: Vec<f64> = theta.iter().zip(&eps.epsilon).map(|(t, e)| t + e).collect();
    let exact = objective.loss(&perturbed)? - base;
    Ok(SharpnessReport {
        exact,
        proxy: rho * grad.norm(),
        rho,
        batches: 1,
    })
}

/// Mean sharpness over a fixed set of probe batches.
pub fn probe_sharpness(
    model: &Mlp,
    theta: &[f64],
    probe: &[Batch],
    rho: f64,
) -> Result<SharpnessReport> {
    if probe.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    let mut exact = 0.0;
    let mut proxy = 0.0;
    for b in probe {
        let r = sharpness_measure(
            &BatchObjective::new(model, &b.features, &b.labels),
            theta,
            rho,
        )?;
        exact += r.exact;
        proxy += r.proxy;
    }
    let k = probe.len() as f64;
    Ok(SharpnessReport {
        exact: exact / k,
        proxy: proxy / k,
        rho,
        batches: probe.len(),
    })
}

/// One SAM update: ascend to `θ + ε̂(∇L(θ))`, take the gradient there, and
/// hand it to the base optimizer. Two forward and two backward passes.
/// Returns the loss at the unperturbed weights.
pub fn sam_step<O: Objective + ?Sized>(
    objective: &O,
    theta: &mut WeightVector,
    rho: f64,
    optimizer: &mut SgdState,
    lr: f64,
) -> Result<f64> {
    let (loss, g1) = objective.loss_and_grad(theta)?;
    let eps = compute_epsilon_hat(&g1, rho)?;
    let adversarial: Vec<f64> = theta.iter().zip(&eps.epsilon).map(|(t, e)| t + e).collect();
    let (_, g2) = objective.loss_and_grad(&adversarial)?;
    optimizer.step(theta, &g2, lr)?;
    Ok(loss)
}

/// [`sam_step`] on one batch, also reporting the first pass's loss and
/// accuracy.
pub fn sam_batch_step(
    model: &Mlp,
    theta: &mut WeightVector,
    batch: &Batch,
    rho: f64,
    optimizer: &mut SgdState,
    lr: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let traced = model.trace(&mut tape, theta, &batch.features)?;
    let ce = nn::cross_entropy_traced(&mut tape, traced.logits, &batch.labels)?;
    let loss = tape.value(ce).item();
    let correct = count_correct(tape.value(traced.logits), &batch.labels);
    let g1 = model.gradient(&tape, &traced, ce)?;
    drop(tape);

    let eps = compute_epsilon_hat(&g1, rho)?;
    let adversarial: Vec<f64> = theta.iter().zip(&eps.epsilon).map(|(t, e)| t + e).collect();
    let (_, g2) = model.loss_and_grad(&adversarial, &batch.features, &batch.labels)?;
    optimizer.step(theta, &g2, lr)?;
    Ok(StepOutcome::vanilla(loss, correct, g2.norm()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryDiagnostics {
    pub cos_phi: f64,
    /// `(η / ρ²) cos Φ`.
    pub gamma: f64,
}

pub fn gradient_diagnostics(
    g_a: &GradientVector,
    g_b: &GradientVector,
    lr: f64,
    rho: f64,
) -> Result<TrajectoryDiagnostics> {
    check_rho(rho)?;
    if g_a.len() != g_b.len() {
        return Err(Error::Shape(format!(
            "gradients of length {} and {}",
            g_a.len(),
            g_b.len()
        )));
    }
    let (na, nb) = (g_a.norm(), g_b.norm());
    let cos_phi = if na < FLAT_GRADIENT || nb < FLAT_GRADIENT {
        0.0
    } else {
        (dot(g_a, g_b) / (na * nb)).clamp(-1.0, 1.0)
    };
    Ok(TrajectoryDiagnostics {
        cos_phi,
        gamma: lr / (rho * rho) * cos_phi,
    })
}
