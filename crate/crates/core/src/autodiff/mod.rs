//! Minimal reverse-mode differentiation over dense `f64` arrays.

mod array;
mod tape;

pub use array::{add, gather_rows, log_softmax, matmul, mean, mul, relu, sum, Array};
pub use tape::{Gradients, Tape, Var};

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Flat gradient aligned with a weight-vector layout.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GradientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Central differences `(f(θ + h e_k) − f(θ − h e_k)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(loss: F, theta: &[f64], h: f64) -> Result<GradientVector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let up = loss(&probe);
        probe[k] = orig - h;
        let down = loss(&probe);
        probe[k] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(GradientVector(grad))
}
