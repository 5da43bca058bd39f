use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{self, Array, GradientVector, Tape, Var};
use crate::error::{Error, Result};

/// Layer widths `[input, hidden.., classes]`; hidden activations are ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Contract(format!(
                "an MLP needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Contract(format!("zero-width layer in {widths:?}")));
        }
        if *widths.last().unwrap() < 2 {
            return Err(Error::Contract("need at least two classes".into()));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Where one dense layer lives inside the flat weight vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.fan_out
    }
}

/// Flat parameter vector θ. Layer `l` stores its `fan_in × fan_out` weight
/// matrix row-major, followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for WeightVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Snapshot of pass counters, used to audit per-step cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PassCount {
    pub forward: u64,
    pub backward: u64,
    pub kl: u64,
}

impl std::ops::Sub for PassCount {
    type Output = PassCount;
    fn sub(self, rhs: PassCount) -> PassCount {
        PassCount {
            forward: self.forward - rhs.forward,
            backward: self.backward - rhs.backward,
            kl: self.kl - rhs.kl,
        }
    }
}

#[derive(Debug, Default)]
struct PassCounters {
    forward: AtomicU64,
    backward: AtomicU64,
    kl: AtomicU64,
}

/// Result of tracing a forward pass: logits plus the parameter leaves.
#[derive(Debug)]
pub struct Traced {
    pub logits: Var,
    params: Vec<(Var, Var)>,
}

#[derive(Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layout: Vec<LayerSlot>,
    counters: PassCounters,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        for w in spec.widths.windows(2) {
            let slot = LayerSlot {
                fan_in: w[0],
                fan_out: w[1],
                weight_offset: offset,
                bias_offset: offset + w[0] * w[1],
            };
            offset = slot.bias_offset + w[1];
            layout.push(slot);
        }
        Self {
            spec,
            layout,
            counters: PassCounters::default(),
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[LayerSlot] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn passes(&self) -> PassCount {
        PassCount {
            forward: self.counters.forward.load(Ordering::Relaxed),
            backward: self.counters.backward.load(Ordering::Relaxed),
            kl: self.counters.kl.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn count_kl(&self) {
        self.counters.kl.fetch_add(1, Ordering::Relaxed);
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init_weights(&self, seed: u64) -> WeightVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.num_params()];
        for slot in &self.layout {
            let dist = Normal::new(0.0, (2.0 / slot.fan_in as f64).sqrt()).unwrap();
            for w in &mut theta[slot.weight_range()] {
                *w = dist.sample(&mut rng);
            }
        }
        WeightVector(theta)
    }

    fn check(&self, theta: &[f64], x: &Array) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "weight vector has {} entries, model needs {}",
                theta.len(),
                self.num_params()
            )));
        }
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match input width {}",
                x.shape(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn layer_arrays(&self, theta: &[f64], slot: &LayerSlot) -> (Array, Array) {
        let w = Array::new(
            vec![slot.fan_in, slot.fan_out],
            theta[slot.weight_range()].to_vec(),
        );
        let b = Array::new(vec![slot.fan_out], theta[slot.bias_range()].to_vec());
        (w.unwrap(), b.unwrap())
    }

    /// Untraced forward pass returning logits.
    pub fn forward(&self, theta: &[f64], x: &Array) -> Result<Array> {
        self.check(theta, x)?;
        self.counters.forward.fetch_add(1, Ordering::Relaxed);
        let last = self.layout.len() - 1;
        let mut h = x.clone();
        for (l, slot) in self.layout.iter().enumerate() {
            let (w, b) = self.layer_arrays(theta, slot);
            h = autodiff::add(&autodiff::matmul(&h, &w)?, &b)?;
            if l != last {
                h = autodiff::relu(&h);
            }
        }
        Ok(h)
    }

    /// Forward pass recorded on `tape`, with every layer's weights and bias
    /// registered as trainable leaves.
    pub fn trace(&self, tape: &mut Tape, theta: &[f64], x: &Array) -> Result<Traced> {
        self.check(theta, x)?;
        self.counters.forward.fetch_add(1, Ordering::Relaxed);
        let last = self.layout.len() - 1;
        let mut h = tape.constant(x.clone());
        let mut params = Vec::with_capacity(self.layout.len());
        for (l, slot) in self.layout.iter().enumerate() {
            let (w, b) = self.layer_arrays(theta, slot);
            let w = tape.param(w);
            let b = tape.param(b);
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if l != last {
                h = tape.relu(h);
            }
            params.push((w, b));
        }
        Ok(Traced { logits: h, params })
    }

    /// Backward from `root` and gather the parameter adjoints into one flat
    /// gradient.
    pub fn gradient(&self, tape: &Tape, traced: &Traced, root: Var) -> Result<GradientVector> {
        let grads = tape.backward(root)?;
        self.counters.backward.fetch_add(1, Ordering::Relaxed);
        let mut flat = vec![0.0; self.num_params()];
        for (slot, (w, b)) in self.layout.iter().zip(&traced.params) {
            if let Some(g) = grads.wrt(*w) {
                flat[slot.weight_range()].copy_from_slice(g.data());
            }
            if let Some(g) = grads.wrt(*b) {
                flat[slot.bias_range()].copy_from_slice(g.data());
            }
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(GradientVector(flat))
    }

    /// Mean cross-entropy on `(x, labels)` and its gradient.
    pub fn loss_and_grad(
        &self,
        theta: &[f64],
        x: &Array,
        labels: &[usize],
    ) -> Result<(f64, GradientVector)> {
        let mut tape = Tape::new();
        let traced = self.trace(&mut tape, theta, x)?;
        let loss = super::cross_entropy_traced(&mut tape, traced.logits, labels)?;
        let value = tape.value(loss).item();
        Ok((value, self.gradient(&tape, &traced, loss)?))
    }

    pub fn loss(&self, theta: &[f64], x: &Array, labels: &[usize]) -> Result<f64> {
        super::cross_entropy(&self.forward(theta, x)?, labels)
    }

    /// Sign pattern (`> 0`) of every hidden pre-activation, row-major per
    /// layer. Two weight vectors with equal patterns lie in the same linear
    /// piece of the network.
    pub fn activation_pattern(&self, theta: &[f64], x: &Array) -> Result<Vec<bool>> {
        self.check(theta, x)?;
        let mut pattern = Vec::new();
        let mut h = x.clone();
        for slot in &self.layout[..self.layout.len() - 1] {
            let (w, b) = self.layer_arrays(theta, slot);
            let z = autodiff::add(&autodiff::matmul(&h, &w)?, &b)?;
            pattern.extend(z.data().iter().map(|&v| v > 0.0));
            h = autodiff::relu(&z);
        }
        Ok(pattern)
    }
}

/// Row-wise argmax.
pub fn predictions(logits: &Array) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Array, labels: &[usize]) -> f64 {
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len().max(1) as f64
}
