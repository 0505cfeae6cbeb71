//! Plain-text `key = value` run configuration.
//!
//! One setting per line; `#` starts a comment. Every key is optional and
//! falls back to the library default:
//!
//! | key | default |
//! |-----|---------|
//! | `train.learning_rate` | 0.002 |
//! | `train.weight_decay` | 0.0005 |
//! | `train.batch_size` | 128 |
//! | `train.max_epochs` | 100 |
//! | `train.patience` | 25 |
//! | `train.seed` | 0 |
//! | `train.beta1`, `train.beta2`, `train.eps` | 0.9, 0.999, 1e-8 |
//! | `train.validation_fraction` | 0.1 |
//! | `loss.xi1`, `loss.xi2` | 100, 0.05 |
//! | `loss.gamma`, `loss.alpha`, `loss.kl_cap` | 2, 1, 10 |
//! | `model.mode` | `multimodal` (or `eeg_only`) |
//! | `model.router_hidden` | 32 |
//! | `model.detach_router_input` | false |
//! | `model.adjacency_scope` | `sample` (or `batch_mean`) |
//! | `gldnet.gcn_out_dim`, `gldnet.gcn_layers` | 32, 1 |
//! | `gldnet.residual_hidden`, `gldnet.residual_mlp_dim` | 64, 32 |
//! | `gldnet.attention_heads` | 4 |
//! | `gldnet.local_conv_channels`, `gldnet.local_conv_kernel` | 16, 7 |
//! | `mslkc.branch_kernels` | `15,11` |
//! | `mslkc.branch_channels`, `mslkc.mlp_out_dim` | 16, 32 |
//! | `preprocess.band_low`, `preprocess.band_high` | 4, 45 |
//! | `preprocess.filter_order` | 3 |
//! | `preprocess.window_seconds` | 1 |
//! | `preprocess.skip_seconds` | `none` (dataset baseline) |
//! | `preprocess.filter_peripheral` | false |

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::losses::LossConfig;
use crate::moe::{AdjacencyScope, ModalityMode, ModelConfig};
use crate::pipeline::PreprocessConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot use `{value}`: {msg}")]
    BadValue { key: String, value: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
}

trait Value: Sized {
    fn render(&self) -> String;
    fn read(s: &str) -> Result<Self, String>;
}

macro_rules! value_via_fromstr {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn read(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}
value_via_fromstr!(f64, usize, u64, bool);

impl Value for Option<f64> {
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
    fn read(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            f64::read(s).map(Some)
        }
    }
}

impl Value for Vec<usize> {
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
    fn read(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| usize::read(p.trim())).collect()
    }
}

impl Value for ModalityMode {
    fn render(&self) -> String {
        match self {
            ModalityMode::EegOnly => "eeg_only",
            ModalityMode::Multimodal => "multimodal",
        }
        .into()
    }
    fn read(s: &str) -> Result<Self, String> {
        ModalityMode::from_str(s)
    }
}

impl Value for AdjacencyScope {
    fn render(&self) -> String {
        match self {
            AdjacencyScope::Sample => "sample",
            AdjacencyScope::BatchMean => "batch_mean",
        }
        .into()
    }
    fn read(s: &str) -> Result<Self, String> {
        AdjacencyScope::from_str(s)
    }
}

struct Key {
    name: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

macro_rules! keys {
    ($($name:literal => $($field:ident).+),* $(,)?) => {
        const KEYS: &[Key] = &[$(Key {
            name: $name,
            get: |c| c.$($field).+.render(),
            set: |c, v| {
                c.$($field).+ = Value::read(v)?;
                Ok(())
            },
        }),*];
    };
}

keys! {
    "train.learning_rate" => train.learning_rate,
    "train.weight_decay" => train.weight_decay,
    "train.batch_size" => train.batch_size,
    "train.max_epochs" => train.max_epochs,
    "train.patience" => train.patience,
    "train.seed" => train.seed,
    "train.beta1" => train.beta1,
    "train.beta2" => train.beta2,
    "train.eps" => train.eps,
    "train.validation_fraction" => train.validation_fraction,
    "loss.xi1" => loss.xi1,
    "loss.xi2" => loss.xi2,
    "loss.gamma" => loss.gamma,
    "loss.alpha" => loss.alpha,
    "loss.kl_cap" => loss.kl_cap,
    "model.mode" => model.mode,
    "model.router_hidden" => model.router_hidden,
    "model.detach_router_input" => model.detach_router_input,
    "model.adjacency_scope" => model.adjacency_scope,
    "gldnet.gcn_out_dim" => model.gldnet.gcn_out_dim,
    "gldnet.gcn_layers" => model.gldnet.gcn_layers,
    "gldnet.residual_hidden" => model.gldnet.residual_hidden,
    "gldnet.residual_mlp_dim" => model.gldnet.residual_mlp_dim,
    "gldnet.attention_heads" => model.gldnet.attention_heads,
    "gldnet.local_conv_channels" => model.gldnet.local_conv_channels,
    "gldnet.local_conv_kernel" => model.gldnet.local_conv_kernel,
    "mslkc.branch_kernels" => model.mslkc.branch_kernels,
    "mslkc.branch_channels" => model.mslkc.branch_channels,
    "mslkc.mlp_out_dim" => model.mslkc.mlp_out_dim,
    "preprocess.band_low" => preprocess.band_low,
    "preprocess.band_high" => preprocess.band_high,
    "preprocess.filter_order" => preprocess.filter_order,
    "preprocess.window_seconds" => preprocess.window_seconds,
    "preprocess.skip_seconds" => preprocess.skip_seconds,
    "preprocess.filter_peripheral" => preprocess.filter_peripheral,
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.name)
    }

    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let k = find(key)?;
        Ok((k.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = find(key)?;
        (k.set)(self, value.trim()).map_err(|msg| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            msg,
        })
    }

    /// Applies a config file on top of `self`. A key may appear only once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("`{key}` set twice"),
                });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its current value, one per line, in table order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, (k.get)(self)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.train.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        let l = &self.loss;
        if [l.xi1, l.xi2, l.gamma].iter().any(|v| !(*v >= 0.0)) || !(l.alpha > 0.0) || !(l.kl_cap > 0.0) {
            return Err(ConfigError::Invalid(
                "loss weights and gamma must be ≥ 0, alpha and kl_cap > 0".into(),
            ));
        }
        let p = &self.preprocess;
        if !(p.band_low > 0.0 && p.band_low < p.band_high) || p.filter_order == 0 || !(p.window_seconds > 0.0) {
            return Err(ConfigError::Invalid(
                "need 0 < band_low < band_high, filter_order ≥ 1 and a positive window".into(),
            ));
        }
        Ok(())
    }
}

fn find(key: &str) -> Result<&'static Key, ConfigError> {
    KEYS.iter()
        .find(|k| k.name == key)
        .ok_or_else(|| ConfigError::UnknownKey(key.into()))
}
