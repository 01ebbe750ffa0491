//! Run configuration: `key=value` files, defaults and command-line overrides.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys are errors.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{Activation, ModelKind, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedAvg,
    ClientCv,
    FedNcv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    Fixed,
    Descent,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    Dirichlet,
    IidEqual,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $word:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.to_ascii_lowercase().as_str() {
                    $($word => Ok($variant),)+
                    _ => Err(format!("expected one of: {}", [$($word),+].join(", "))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(Algorithm {
    Algorithm::FedAvg => "fedavg",
    Algorithm::ClientCv => "clientcv",
    Algorithm::FedNcv => "fedncv",
});
keyword_enum!(AlphaMode {
    AlphaMode::Fixed => "fixed",
    AlphaMode::Descent => "descent",
    AlphaMode::ClosedForm => "closedform",
});
keyword_enum!(PartitionMode {
    PartitionMode::Dirichlet => "dirichlet",
    PartitionMode::IidEqual => "iid_equal",
});
keyword_enum!(ModelKind {
    ModelKind::Logistic => "logistic",
    ModelKind::Mlp1 => "mlp1",
});
keyword_enum!(Activation {
    Activation::Tanh => "tanh",
    Activation::Relu => "relu",
});

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub rounds: usize,
    pub gamma: f64,
    pub alpha_mode: AlphaMode,
    /// The α of `fixed` mode, and the starting α of the other modes.
    pub alpha: f64,
    pub beta: f64,
    pub dirichlet: f64,
    pub partition: PartitionMode,
    pub min_per_client: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub n_samples: usize,
    pub spread: f64,
    pub model: ModelKind,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub local_steps: usize,
    pub resample: bool,
    pub seed: u64,
    /// Worker threads for client evaluation; 0 uses every core.
    pub threads: usize,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedNcv,
            clients: 20,
            rounds: 100,
            gamma: DEFAULT_GAMMA,
            alpha_mode: AlphaMode::ClosedForm,
            alpha: 0.0,
            beta: 0.5,
            dirichlet: 0.1,
            partition: PartitionMode::Dirichlet,
            min_per_client: 2,
            num_classes: 10,
            input_dim: 32,
            n_samples: 10_000,
            spread: DEFAULT_SPREAD,
            model: ModelKind::Logistic,
            hidden_dim: 16,
            activation: Activation::Tanh,
            local_steps: 1,
            resample: false,
            seed: 0,
            threads: 0,
            out: PathBuf::from("run.csv"),
            dataset: None,
        }
    }
}

pub const DEFAULT_GAMMA: f64 = 32.0;
pub const DEFAULT_SPREAD: f64 = 0.25;

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "algorithm",
    "clients",
    "rounds",
    "gamma",
    "alpha_mode",
    "alpha",
    "beta",
    "dirichlet",
    "partition",
    "min_per_client",
    "num_classes",
    "input_dim",
    "n_samples",
    "spread",
    "model",
    "hidden_dim",
    "activation",
    "local_steps",
    "resample",
    "seed",
    "threads",
    "out",
    "dataset",
];

/// Keys that cannot change a run's numbers and are left out of CSV headers.
const PRESENTATION_KEYS: &[&str] = &["threads", "out"];

fn parse_value<T: FromStr>(key: &str, line: Option<usize>, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.into(),
        line,
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

fn parse_bool(key: &str, line: Option<usize>, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            line,
            msg: format!("cannot parse `{value}` as a boolean"),
        }),
    }
}

impl RunConfig {
    /// Sets one key from its textual value. `line` is only used in errors.
    pub fn set(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<()> {
        let v = value.trim();
        match key {
            "algorithm" => self.algorithm = parse_value(key, line, v)?,
            "clients" => self.clients = parse_value(key, line, v)?,
            "rounds" => self.rounds = parse_value(key, line, v)?,
            "gamma" => self.gamma = parse_value(key, line, v)?,
            "alpha_mode" => self.alpha_mode = parse_value(key, line, v)?,
            "alpha" => self.alpha = parse_value(key, line, v)?,
            "beta" => self.beta = parse_value(key, line, v)?,
            "dirichlet" => self.dirichlet = parse_value(key, line, v)?,
            "partition" => self.partition = parse_value(key, line, v)?,
            "min_per_client" => self.min_per_client = parse_value(key, line, v)?,
            "num_classes" => self.num_classes = parse_value(key, line, v)?,
            "input_dim" => self.input_dim = parse_value(key, line, v)?,
            "n_samples" => self.n_samples = parse_value(key, line, v)?,
            "spread" => self.spread = parse_value(key, line, v)?,
            "model" => self.model = parse_value(key, line, v)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, line, v)?,
            "activation" => self.activation = parse_value(key, line, v)?,
            "local_steps" => self.local_steps = parse_value(key, line, v)?,
            "resample" => self.resample = parse_bool(key, line, v)?,
            "seed" => self.seed = parse_value(key, line, v)?,
            "threads" => self.threads = parse_value(key, line, v)?,
            "out" => self.out = PathBuf::from(v),
            "dataset" => {
                self.dataset = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            _ => {
                return Err(Error::Config {
                    key: key.into(),
                    line,
                    msg: "unknown key".into(),
                })
            }
        }
        self.check_key(key, line)
    }

    fn check_key(&self, key: &str, line: Option<usize>) -> Result<()> {
        let bad = |msg: &str| {
            Err(Error::Config {
                key: key.into(),
                line,
                msg: msg.into(),
            })
        };
        match key {
            "clients" if self.clients == 0 => bad("must be at least 1"),
            "gamma" if !(self.gamma.is_finite() && self.gamma >= 0.0) => {
                bad("must be finite and non-negative")
            }
            "alpha" if !self.alpha.is_finite() => bad("must be finite"),
            "beta" if !self.beta.is_finite() => bad("must be finite"),
            "dirichlet" if !(self.dirichlet.is_finite() && self.dirichlet > 0.0) => {
                bad("must be finite and positive")
            }
            "num_classes" if self.num_classes < 2 => bad("must be at least 2"),
            "input_dim" if self.input_dim == 0 => bad("must be at least 1"),
            "n_samples" if self.n_samples == 0 => bad("must be at least 1"),
            "spread" if !(self.spread.is_finite() && self.spread >= 0.0) => {
                bad("must be finite and non-negative")
            }
            "hidden_dim" if self.hidden_dim == 0 => bad("must be at least 1"),
            "local_steps" if self.local_steps == 0 => bad("must be at least 1"),
            _ => Ok(()),
        }
    }

    /// Cross-field checks that no single key can catch.
    pub fn validate(&self) -> Result<()> {
        for key in KEYS {
            self.check_key(key, None)?;
        }
        if self.dataset.is_none() && self.n_samples < self.num_classes {
            return Err(Error::Config {
                key: "n_samples".into(),
                line: None,
                msg: format!("must be at least num_classes = {}", self.num_classes),
            });
        }
        if self.alpha_mode == AlphaMode::Descent && !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config {
                key: "alpha".into(),
                line: None,
                msg: "descent mode keeps alpha in [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Applies a `key=value` file on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                key: content.into(),
                line: Some(line),
                msg: "expected key=value".into(),
            })?;
            self.set(key.trim(), value, Some(line))?;
        }
        Ok(())
    }

    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "algorithm" => self.algorithm.to_string(),
            "clients" => self.clients.to_string(),
            "rounds" => self.rounds.to_string(),
            "gamma" => self.gamma.to_string(),
            "alpha_mode" => self.alpha_mode.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "dirichlet" => self.dirichlet.to_string(),
            "partition" => self.partition.to_string(),
            "min_per_client" => self.min_per_client.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "n_samples" => self.n_samples.to_string(),
            "spread" => self.spread.to_string(),
            "model" => self.model.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "activation" => self.activation.to_string(),
            "local_steps" => self.local_steps.to_string(),
            "resample" => self.resample.to_string(),
            "seed" => self.seed.to_string(),
            "threads" => self.threads.to_string(),
            "out" => self.out.display().to_string(),
            "dataset" => self
                .dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
            _ => return None,
        })
    }

    /// `key=value` lines for every setting, in [`KEYS`] order.
    pub fn effective_lines(&self) -> Vec<String> {
        KEYS.iter()
            .map(|k| format!("{k}={}", self.value_of(k).expect("known key")))
            .collect()
    }

    /// The settings that determine a run's numbers, for CSV provenance.
    pub fn provenance_lines(&self) -> Vec<String> {
        KEYS.iter()
            .filter(|k| !PRESENTATION_KEYS.contains(k))
            .map(|k| format!("{k}={}", self.value_of(k).expect("known key")))
            .collect()
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        match self.model {
            ModelKind::Logistic => ModelSpec::logistic(input_dim, num_classes),
            ModelKind::Mlp1 => ModelSpec::mlp1(input_dim, self.hidden_dim, num_classes, self.activation),
        }
    }
}

/// Defaults, then the file (if any), then `overrides` as `(key, value)` pairs.
pub fn parse_config(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(text) = file_text {
        cfg.apply_text(text)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v, None)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
