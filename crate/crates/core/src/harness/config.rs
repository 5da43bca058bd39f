//! `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::mesa::MesaConfig;
use crate::nn::MlpSpec;
use crate::saf::SafConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Saf,
    Mesa,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [Self::Sgd, Self::Sam, Self::Saf, Self::Mesa];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Sam => "sam",
            Self::Saf => "saf",
            Self::Mesa => "mesa",
        }
    }

    /// Trajectory-loss weight used when none is configured.
    pub fn default_lambda(self) -> f64 {
        match self {
            Self::Mesa => MesaConfig::default().lambda,
            _ => SafConfig::default().lambda,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::config(
                    "optimizer",
                    format!("expected sgd, sam, saf or mesa, got `{s}`"),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Blobs {
        train_per_class: usize,
        test_per_class: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Blobs {
                train_per_class,
                test_per_class,
                classes,
                dim,
                spread,
                seed,
            } => data::generate_blob_splits(
                *train_per_class,
                *test_per_class,
                *classes,
                *dim,
                *spread,
                *seed,
            ),
            Self::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = data::load_idx(train_images, train_labels, Split::Train)?;
                let test = data::load_idx(test_images, test_labels, Split::Test)?;
                if train.dim() != test.dim() {
                    return Err(Error::Shape(format!(
                        "train features have {} columns, test {}",
                        train.dim(),
                        test.dim()
                    )));
                }
                Ok((train, test))
            }
        }
    }
}

/// Every knob of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub optimizer: OptimizerKind,
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rho: f64,
    /// `None` means the optimizer's default.
    pub lambda: Option<f64>,
    pub tau: f64,
    pub lag: usize,
    pub e_start: usize,
    pub beta: f64,
    pub seed: u64,
    pub probe_batches: usize,
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let saf = SafConfig::default();
        Self {
            optimizer: OptimizerKind::Sgd,
            dataset: DatasetSpec::Blobs {
                train_per_class: 2500,
                test_per_class: 500,
                classes: 2,
                dim: 2,
                spread: 0.6,
                seed: 0,
            },
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            rho: 0.05,
            lambda: None,
            tau: saf.tau,
            lag: saf.lag,
            e_start: saf.e_start,
            beta: MesaConfig::default().beta,
            seed: 0,
            probe_batches: 4,
            out_dir: None,
            trace: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "optimizer",
    "dataset",
    "train_per_class",
    "test_per_class",
    "classes",
    "dim",
    "spread",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "hidden",
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "rho",
    "lambda",
    "tau",
    "lag",
    "e_start",
    "beta",
    "seed",
    "probe_batches",
    "out_dir",
    "trace",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected a boolean, got `{value}`"),
        )),
    }
}

impl ExperimentConfig {
    pub fn new(optimizer: OptimizerKind) -> Self {
        Self {
            optimizer,
            ..Default::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| self.optimizer.default_lambda())
    }

    pub fn saf(&self) -> SafConfig {
        SafConfig {
            lambda: self.lambda(),
            tau: self.tau,
            lag: self.lag,
            e_start: self.e_start,
        }
    }

    pub fn mesa(&self) -> MesaConfig {
        MesaConfig {
            beta: self.beta,
            lambda: self.lambda(),
            tau: self.tau,
            e_start: self.e_start,
        }
    }

    /// Input and output widths come from the data.
    pub fn model_spec(&self, input_dim: usize, classes: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(classes);
        MlpSpec::new(widths)
    }

    fn blobs_mut(&mut self, key: &str) -> Result<&mut DatasetSpec> {
        if !matches!(self.dataset, DatasetSpec::Blobs { .. }) {
            return Err(Error::config(key, "only valid with dataset = blobs"));
        }
        Ok(&mut self.dataset)
    }

    fn idx_mut(&mut self, key: &str) -> Result<&mut DatasetSpec> {
        if !matches!(self.dataset, DatasetSpec::Idx { .. }) {
            return Err(Error::config(key, "only valid with dataset = idx"));
        }
        Ok(&mut self.dataset)
    }

    /// Applies one `key = value` setting. Invariants are checked by
    /// [`validate`](Self::validate).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "optimizer" => self.optimizer = value.parse()?,
            "dataset" => match value {
                "blobs" => {
                    if !matches!(self.dataset, DatasetSpec::Blobs { .. }) {
                        self.dataset = Self::default().dataset;
                    }
                }
                "idx" => {
                    if !matches!(self.dataset, DatasetSpec::Idx { .. }) {
                        self.dataset = DatasetSpec::Idx {
                            train_images: PathBuf::new(),
                            train_labels: PathBuf::new(),
                            test_images: PathBuf::new(),
                            test_labels: PathBuf::new(),
                        };
                    }
                }
                _ => {
                    return Err(Error::config(
                        key,
                        format!("expected blobs or idx, got `{value}`"),
                    ))
                }
            },
            "train_per_class" | "test_per_class" | "classes" | "dim" | "spread" | "data_seed" => {
                let DatasetSpec::Blobs {
                    train_per_class,
                    test_per_class,
                    classes,
                    dim,
                    spread,
                    seed,
                } = self.blobs_mut(key)?
                else {
                    unreachable!()
                };
                match key {
                    "train_per_class" => *train_per_class = parse(key, value)?,
                    "test_per_class" => *test_per_class = parse(key, value)?,
                    "classes" => *classes = parse(key, value)?,
                    "dim" => *dim = parse(key, value)?,
                    "spread" => *spread = parse(key, value)?,
                    _ => *seed = parse(key, value)?,
                }
            }
            "train_images" | "train_labels" | "test_images" | "test_labels" => {
                let DatasetSpec::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                } = self.idx_mut(key)?
                else {
                    unreachable!()
                };
                let slot = match key {
                    "train_images" => train_images,
                    "train_labels" => train_labels,
                    "test_images" => test_images,
                    _ => test_labels,
                };
                *slot = PathBuf::from(value);
            }
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?;
            }
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "lambda" => self.lambda = Some(parse(key, value)?),
            "tau" => self.tau = parse(key, value)?,
            "lag" => self.lag = parse(key, value)?,
            "e_start" => self.e_start = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "probe_batches" => self.probe_batches = parse(key, value)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            "trace" => self.trace = parse_bool(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be > 0, got {v}")))
            }
        };
        let at_least_one = |key: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::config(key, "must be at least 1"))
            }
        };
        at_least_one("epochs", self.epochs)?;
        at_least_one("batch_size", self.batch_size)?;
        at_least_one("probe_batches", self.probe_batches)?;
        positive("lr", self.lr)?;
        positive("rho", self.rho)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(
                "hidden",
                "need at least one hidden layer of positive width",
            ));
        }
        match &self.dataset {
            DatasetSpec::Blobs {
                train_per_class,
                test_per_class,
                classes,
                dim,
                spread,
                ..
            } => {
                at_least_one("train_per_class", *train_per_class)?;
                at_least_one("test_per_class", *test_per_class)?;
                at_least_one("dim", *dim)?;
                if *classes < 2 {
                    return Err(Error::config("classes", "need at least 2 classes"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(Error::config(
                        "spread",
                        format!("must be >= 0, got {spread}"),
                    ));
                }
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for (key, p) in [
                    ("train_images", train_images),
                    ("train_labels", train_labels),
                    ("test_images", test_images),
                    ("test_labels", test_labels),
                ] {
                    if p.as_os_str().is_empty() {
                        return Err(Error::config(key, "path required with dataset = idx"));
                    }
                }
            }
        }
        match self.optimizer {
            OptimizerKind::Mesa => self.mesa().validate(),
            OptimizerKind::Saf => self.saf().validate(),
            _ => {
                if !(self.lambda() >= 0.0 && self.lambda().is_finite()) {
                    return Err(Error::config(
                        "lambda",
                        format!("must be >= 0, got {}", self.lambda()),
                    ));
                }
                positive("tau", self.tau)
            }
        }
    }

    /// Parses config text. `optimizer` is applied before the other keys;
    /// then `dataset`; then the rest in file order.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(&pairs, &[])
    }

    /// File settings followed by overrides; later settings win.
    pub fn from_pairs(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        let all: Vec<&(String, String)> = file.iter().chain(overrides).collect();
        for first in ["optimizer", "dataset"] {
            for (k, v) in all.iter().filter(|(k, _)| k == first) {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in all
            .iter()
            .filter(|(k, _)| k != "optimizer" && k != "dataset")
        {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pairs(&parse_pairs(&text)?, overrides)
    }

    /// Canonical `key = value` rendering; round-trips through
    /// [`from_text`](Self::from_text).
    pub fn render(&self) -> String {
        let mut lines = vec![format!("optimizer = {}", self.optimizer)];
        match &self.dataset {
            DatasetSpec::Blobs {
                train_per_class,
                test_per_class,
                classes,
                dim,
                spread,
                seed,
            } => {
                lines.push("dataset = blobs".into());
                lines.push(format!("train_per_class = {train_per_class}"));
                lines.push(format!("test_per_class = {test_per_class}"));
                lines.push(format!("classes = {classes}"));
                lines.push(format!("dim = {dim}"));
                lines.push(format!("spread = {spread:?}"));
                lines.push(format!("data_seed = {seed}"));
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                lines.push("dataset = idx".into());
                lines.push(format!("train_images = {}", train_images.display()));
                lines.push(format!("train_labels = {}", train_labels.display()));
                lines.push(format!("test_images = {}", test_images.display()));
                lines.push(format!("test_labels = {}", test_labels.display()));
            }
        }
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        lines.push(format!("hidden = {}", hidden.join(",")));
        lines.push(format!("epochs = {}", self.epochs));
        lines.push(format!("batch_size = {}", self.batch_size));
        lines.push(format!("lr = {:?}", self.lr));
        lines.push(format!("momentum = {:?}", self.momentum));
        lines.push(format!("weight_decay = {:?}", self.weight_decay));
        lines.push(format!("rho = {:?}", self.rho));
        lines.push(format!("lambda = {:?}", self.lambda()));
        lines.push(format!("tau = {:?}", self.tau));
        lines.push(format!("lag = {}", self.lag));
        lines.push(format!("e_start = {}", self.e_start));
        lines.push(format!("beta = {:?}", self.beta));
        lines.push(format!("seed = {}", self.seed));
        lines.push(format!("probe_batches = {}", self.probe_batches));
        if let Some(dir) = &self.out_dir {
            lines.push(format!("out_dir = {}", dir.display()));
        }
        lines.push(format!("trace = {}", self.trace));
        lines.join("\n") + "\n"
    }
}

/// Splits config text into `(key, value)` pairs. Blank lines and `#`
/// comments are skipped; unknown keys are rejected.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(
                line,
                format!("line {}: expected `key = value`", n + 1),
            ));
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::config(k, format!("line {}: unknown key", n + 1)));
        }
        pairs.push((k.to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}
