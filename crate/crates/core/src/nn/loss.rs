use crate::autodiff::{self, Array, Tape, Var};
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking their log.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_labels(logits: &Array, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    let c = logits.cols();
    if let Some(bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// Mean over the batch of `−log softmax(logits)[i, y_i]`.
pub fn cross_entropy(logits: &Array, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let ls = autodiff::log_softmax(logits)?;
    let picked = autodiff::gather_rows(&ls, labels)?;
    Ok(-autodiff::mean(&picked).item())
}

pub fn cross_entropy_traced(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(tape.value(logits), labels)?;
    let ls = tape.log_softmax(logits)?;
    let picked = tape.gather_rows(ls, labels)?;
    let m = tape.mean(picked);
    tape.scale(m, -1.0)
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Rowwise `softmax(logits / τ)`.
pub fn softmax_with_temperature(logits: &Array, tau: f64) -> Result<Array> {
    check_temperature(tau)?;
    let scaled = Array::new(
        logits.shape().to_vec(),
        logits.data().iter().map(|v| v / tau).collect(),
    )?;
    let mut p = autodiff::log_softmax(&scaled)?;
    for v in p.data_mut() {
        *v = v.exp();
    }
    Ok(p)
}

/// Mean over rows of `Σ_c p ln(p / q)`. Both sides of the log ratio are
/// clamped at [`PROB_FLOOR`], so `KL(p ‖ p)` is exactly zero.
pub fn kl_divergence(p: &Array, q: &Array) -> Result<f64> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "kl_divergence needs equal matrix shapes, got {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    for (name, m) in [("p", p), ("q", q)] {
        if m.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract(format!(
                "{name} has negative or NaN entries"
            )));
        }
        for i in 0..m.rows() {
            let s: f64 = m.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("row {i} of {name} sums to {s}")));
            }
        }
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln()))
        .sum();
    Ok(total / p.rows() as f64)
}

/// Softened-target KL recorded on the tape:
/// `mean_i KL(softmax(target_i/τ) ‖ softmax(current_i/τ))`.
///
/// The target is a detached constant, so only `current` receives gradient.
/// Entries where `q < PROB_FLOOR` use the clamped constant and contribute
/// no gradient.
pub fn soft_target_kl_traced(
    tape: &mut Tape,
    target_logits: &Array,
    current: Var,
    tau: f64,
) -> Result<Var> {
    let current_shape = tape.value(current).shape().to_vec();
    if target_logits.shape() != current_shape.as_slice() {
        return Err(Error::Contract(format!(
            "target logits {:?} do not match current logits {:?}",
            target_logits.shape(),
            current_shape
        )));
    }
    let p = softmax_with_temperature(target_logits, tau)?;
    let z = tape.scale(current, 1.0 / tau)?;
    let log_q = tape.log_softmax(z)?;

    let n = p.rows() as f64;
    let log_floor = PROB_FLOOR.ln();
    let mut constant = 0.0;
    let mut weights = vec![0.0; p.len()];
    for ((w, &pi), &lq) in weights
        .iter_mut()
        .zip(p.data())
        .zip(tape.value(log_q).data())
    {
        if pi > 0.0 {
            constant += pi * pi.ln();
        }
        if lq < log_floor {
            constant -= pi * log_floor;
        } else {
            *w = -pi / n;
        }
    }
    let weights = tape.constant(Array::new(current_shape, weights)?);
    let cross = tape.mul(log_q, weights)?;
    let cross = tape.sum(cross);
    let constant = tape.constant(Array::scalar(constant / n));
    tape.add(cross, constant)
}

/// Value-only counterpart of [`soft_target_kl_traced`].
pub fn soft_target_kl(target_logits: &Array, current_logits: &Array, tau: f64) -> Result<f64> {
    if target_logits.shape() != current_logits.shape() {
        return Err(Error::Contract(format!(
            "target logits {:?} do not match current logits {:?}",
            target_logits.shape(),
            current_logits.shape()
        )));
    }
    let p = softmax_with_temperature(target_logits, tau)?;
    let q = softmax_with_temperature(current_logits, tau)?;
    kl_divergence(&p, &q)
}
