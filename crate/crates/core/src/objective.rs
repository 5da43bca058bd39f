//! Scalar training objectives over a flat weight vector.

use crate::autodiff::{Array, GradientVector};
use crate::error::{Error, Result};
use crate::nn::Mlp;

pub trait Objective {
    fn loss(&self, theta: &[f64]) -> Result<f64>;
    fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, GradientVector)>;
}

/// Mean cross-entropy of an MLP on one fixed batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchObjective<'a> {
    pub model: &'a Mlp,
    pub features: &'a Array,
    pub labels: &'a [usize],
}

impl<'a> BatchObjective<'a> {
    pub fn new(model: &'a Mlp, features: &'a Array, labels: &'a [usize]) -> Self {
        Self {
            model,
            features,
            labels,
        }
    }
}

impl Objective for BatchObjective<'_> {
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        self.model.loss(theta, self.features, self.labels)
    }

    fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, GradientVector)> {
        self.model.loss_and_grad(theta, self.features, self.labels)
    }
}

/// `½ (θ − c)ᵀ H (θ − c)` with symmetric `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    dim: usize,
    hessian: Vec<f64>,
    center: Vec<f64>,
}

impl Quadratic {
    pub fn new(hessian: Vec<Vec<f64>>, center: Vec<f64>) -> Result<Self> {
        let dim = center.len();
        if hessian.len() != dim || hessian.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape(format!("hessian must be {dim}x{dim}")));
        }
        for i in 0..dim {
            for j in 0..i {
                if hessian[i][j] != hessian[j][i] {
                    return Err(Error::Contract("hessian must be symmetric".into()));
                }
            }
        }
        Ok(Self {
            dim,
            hessian: hessian.concat(),
            center,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `aᵀ H b`.
    pub fn bilinear(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
            s += a[i] * row.iter().zip(b).map(|(h, x)| h * x).sum::<f64>();
        }
        s
    }

    fn offset(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim {
            return Err(Error::Shape(format!(
                "quadratic of dimension {} evaluated at length {}",
                self.dim,
                theta.len()
            )));
        }
        Ok(theta.iter().zip(&self.center).map(|(t, c)| t - c).collect())
    }
}

impl Objective for Quadratic {
    fn loss(&self, theta: &[f64]) -> Result<f64> {
        let d = self.offset(theta)?;
        Ok(0.5 * self.bilinear(&d, &d))
    }

    fn loss_and_grad(&self, theta: &[f64]) -> Result<(f64, GradientVector)> {
        let d = self.offset(theta)?;
        let g = (0..self.dim)
            .map(|i| {
                let row = &self.hessian[i * self.dim..(i + 1) * self.dim];
                row.iter().zip(&d).map(|(h, x)| h * x).sum()
            })
            .collect();
        Ok((0.5 * self.bilinear(&d, &d), GradientVector(g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_gradient;

    #[test]
    fn quadratic_gradient_matches_central_differences() {
        let q = Quadratic::new(
            vec![
                vec![2.0, 0.5, 0.0],
                vec![0.5, 1.0, -0.3],
                vec![0.0, -0.3, 4.0],
            ],
            vec![0.1, -1.0, 2.0],
        )
        .unwrap();
        let theta = [0.7, 0.2, -0.4];
        let (_, g) = q.loss_and_grad(&theta).unwrap();
        let fd = finite_difference_gradient(|t| q.loss(t).unwrap(), &theta, 1e-4).unwrap();
        for (a, b) in g.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        assert!(Quadratic::new(vec![vec![1.0, 2.0], vec![0.0, 1.0]], vec![0.0, 0.0]).is_err());
    }
}
