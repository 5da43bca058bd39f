//! Loss surface on the plane spanned by two random orthonormal directions
//! through the current weights.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::autodiff::{dot, norm};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::numfmt::sig;

pub const GRID_HEADER: &str = "alpha,beta,loss";

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub range: f64,
    pub resolution: usize,
    /// Row-major: index `j * G + i` holds `(alpha_i, beta_j)`.
    pub losses: Vec<f64>,
    /// Loss at the unperturbed weights.
    pub base_loss: f64,
    /// Hex SHA-256 of the little-endian weight bytes.
    pub theta_digest: String,
}

impl LandscapeGrid {
    pub fn coordinates(&self) -> Vec<f64> {
        grid_axis(self.range, self.resolution)
    }

    pub fn loss_at(&self, alpha_index: usize, beta_index: usize) -> f64 {
        self.losses[beta_index * self.resolution + alpha_index]
    }
}

pub fn weight_digest(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in theta {
        h.update(w.to_le_bytes());
    }
    h.finalize()
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Uniform axis over `[-r, r]`; for odd `G` the middle entry is exactly 0.
pub fn grid_axis(range: f64, resolution: usize) -> Vec<f64> {
    let last = (resolution - 1) as f64;
    (0..resolution)
        .map(|i| range * ((2.0 * i as f64 - last) / last))
        .collect()
}

fn gaussian(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = norm(v);
    if !(n > 1e-8) {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn remove_component(v: &mut [f64], unit: &[f64]) {
    let c = dot(v, unit);
    v.iter_mut().zip(unit).for_each(|(x, u)| *x -= c * u);
}

/// Two orthonormal Gaussian directions of length `len`.
pub fn sample_directions(len: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if len < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 weights, got {len}"
        )));
    }
    let mut attempt = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(attempt);
        let mut d1 = gaussian(len, &mut rng);
        let mut d2 = gaussian(len, &mut rng);
        if normalize(&mut d1) {
            remove_component(&mut d2, &d1);
            if normalize(&mut d2) {
                // second pass cleans up rounding left by the first
                remove_component(&mut d2, &d1);
                normalize(&mut d2);
                return Ok((d1, d2));
            }
        }
        attempt = attempt.wrapping_add(1);
    }
}

/// Evaluates `loss(θ + α d₁ + β d₂)` on the `G × G` grid over `[-r, r]²`.
/// Cells are computed in parallel; each writes only its own slot.
pub fn evaluate_grid<F>(
    loss: F,
    theta: &[f64],
    d1: &[f64],
    d2: &[f64],
    range: f64,
    resolution: usize,
) -> Result<LandscapeGrid>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if resolution < 2 {
        return Err(Error::Contract(format!(
            "grid resolution must be >= 2, got {resolution}"
        )));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Contract(format!(
            "grid range must be positive, got {range}"
        )));
    }
    if d1.len() != theta.len() || d2.len() != theta.len() {
        return Err(Error::Shape(format!(
            "directions of length {} and {} for {} weights",
            d1.len(),
            d2.len(),
            theta.len()
        )));
    }
    let axis = grid_axis(range, resolution);
    let losses = (0..resolution * resolution)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (axis[cell % resolution], axis[cell / resolution]);
            let point: Vec<f64> = theta
                .iter()
                .zip(d1.iter().zip(d2))
                .map(|(t, (x, y))| t + a * x + b * y)
                .collect();
            loss(&point)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        d1: d1.to_vec(),
        d2: d2.to_vec(),
        range,
        resolution,
        losses,
        base_loss: loss(theta)?,
        theta_digest: weight_digest(theta),
    })
}

/// Grid of mean cross-entropy of `model` over the given probe data.
pub fn evaluate_model_grid(
    model: &Mlp,
    theta: &[f64],
    features: &crate::autodiff::Array,
    labels: &[usize],
    seed: u64,
    range: f64,
    resolution: usize,
) -> Result<LandscapeGrid> {
    let (d1, d2) = sample_directions(theta.len(), seed)?;
    evaluate_grid(
        |w| model.loss(w, features, labels),
        theta,
        &d1,
        &d2,
        range,
        resolution,
    )
}

pub fn render_grid(grid: &LandscapeGrid) -> String {
    let axis = grid.coordinates();
    let mut out = String::new();
    out.push_str("# directions: unit-norm orthogonal gaussian, no filter normalization\n");
    let _ = writeln!(out, "# weights sha256: {}", grid.theta_digest);
    let _ = writeln!(out, "# base loss: {}", sig(grid.base_loss, 9));
    out.push_str(GRID_HEADER);
    out.push('\n');
    for (j, b) in axis.iter().enumerate() {
        for (i, a) in axis.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{}",
                sig(*a, 9),
                sig(*b, 9),
                sig(grid.loss_at(i, j), 9)
            );
        }
    }
    out
}

pub fn write_grid_file(grid: &LandscapeGrid, path: &Path) -> Result<()> {
    std::fs::write(path, render_grid(grid)).map_err(|e| Error::io(path, e))
}
