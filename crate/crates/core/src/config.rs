//! Registration hyperparameters and their plain-text `key = value` form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::types::{RotationRepr, WarpFieldType};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for '{key}': {message}")]
    BadValue {
        key: String,
        value: String,
        message: String,
    },
}

/// Distance function used inside the alignment costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Sum of absolute coordinate differences.
    L1,
    /// Euclidean length.
    L2,
}

impl FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(NormKind::L1),
            "l2" => Ok(NormKind::L2),
            other => Err(format!("unknown norm '{other}' (l1|l2)")),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L1 => "l1",
            NormKind::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    XavierUniform,
    KaimingUniform,
    Zeros,
}

impl FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "xavier_uniform" | "xavier" => Ok(InitScheme::XavierUniform),
            "kaiming_uniform" | "kaiming" => Ok(InitScheme::KaimingUniform),
            "zeros" => Ok(InitScheme::Zeros),
            other => Err(format!(
                "unknown init scheme '{other}' (xavier_uniform|kaiming_uniform|zeros)"
            )),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::XavierUniform => "xavier_uniform",
            InitScheme::KaimingUniform => "kaiming_uniform",
            InitScheme::Zeros => "zeros",
        })
    }
}

/// Hidden-layer nonlinearity of the level networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation '{other}' (relu|tanh)")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive first/second moment descent.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "gd" => Ok(OptimizerKind::Sgd),
            other => Err(format!("unknown optimizer '{other}' (adam|sgd)")),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Every knob of a pyramid registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Number of pyramid levels.
    pub levels: usize,
    /// Frequency exponent offset: level `k` encodes with `2^(k + k0)`.
    pub k0: i32,
    pub mlp_width: usize,
    pub mlp_depth: usize,
    pub activation: Activation,
    pub init: InitScheme,
    pub warp_type: WarpFieldType,
    pub rot_repr: RotationRepr,
    pub norm: NormKind,
    pub lambda_cd: f64,
    pub lambda_cor: f64,
    /// Weight of the blend regularizer. Off by default: with a positive weight
    /// the blend gate closes while the warp output is still near zero.
    pub lambda_reg: f64,
    pub max_iter: usize,
    /// Absolute cost below which a level stops.
    pub cost_threshold: f64,
    /// Number of iterations without relative improvement before a level stops.
    pub stall_window: usize,
    /// Relative improvement over the best cost that resets the stall window.
    pub stall_tolerance: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    /// Multiplier on the motion head output.
    pub output_scale: f64,
    /// Correspondences below this confidence are discarded at load time.
    pub corr_conf_threshold: f64,
    /// Map both clouds into a centered unit-diagonal frame before optimizing.
    pub normalize: bool,
    /// Optimize on at most this many points per cloud.
    pub subsample: Option<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 9,
            k0: -8,
            mlp_width: 128,
            mlp_depth: 3,
            activation: Activation::Relu,
            init: InitScheme::XavierUniform,
            warp_type: WarpFieldType::Se3,
            rot_repr: RotationRepr::AxisAngle,
            norm: NormKind::L1,
            lambda_cd: 1.0,
            lambda_cor: 1.0,
            lambda_reg: 0.0,
            max_iter: 500,
            cost_threshold: 1e-4,
            stall_window: 15,
            stall_tolerance: 1e-4,
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.01,
            seed: 0,
            output_scale: 1e-4,
            corr_conf_threshold: 0.3,
            normalize: true,
            subsample: None,
        }
    }
}

/// Every key accepted by [`PyramidConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "levels",
    "k0",
    "mlp_width",
    "mlp_depth",
    "activation",
    "init",
    "warp_type",
    "rot_repr",
    "norm",
    "lambda_cd",
    "lambda_cor",
    "lambda_reg",
    "max_iter",
    "cost_threshold",
    "stall_window",
    "stall_tolerance",
    "optimizer",
    "learning_rate",
    "seed",
    "output_scale",
    "corr_conf_threshold",
    "normalize",
    "subsample",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

impl PyramidConfig {
    /// Returns the config unchanged when every invariant holds, otherwise an
    /// error naming the first violated constraint.
    pub fn validate(self) -> Result<Self, ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.levels < 1 {
            return fail("m must be ≥ 1 (levels)");
        }
        if self.k0.unsigned_abs() > 60 || (self.levels as i64 + self.k0 as i64) > 60 {
            return fail("k0 must keep 2^(k + k0) within ±2^60");
        }
        if self.mlp_width < 1 {
            return fail("mlp_width must be ≥ 1");
        }
        if self.mlp_depth < 1 {
            return fail("mlp_depth must be ≥ 1");
        }
        for (name, v) in [
            ("lambda_cd", self.lambda_cd),
            ("lambda_cor", self.lambda_cor),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must be finite and ≥ 0"
                )));
            }
        }
        if self.max_iter < 1 {
            return fail("max_iter must be ≥ 1");
        }
        if !(self.cost_threshold.is_finite() && self.cost_threshold >= 0.0) {
            return fail("cost_threshold must be finite and ≥ 0");
        }
        if self.stall_window < 1 {
            return fail("stall_window (σ) must be ≥ 1");
        }
        if !(self.stall_tolerance.is_finite() && self.stall_tolerance >= 0.0) {
            return fail("stall_tolerance must be finite and ≥ 0");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be finite and > 0");
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return fail("output_scale must be finite and > 0");
        }
        if !(0.0..=1.0).contains(&self.corr_conf_threshold) {
            return fail("corr_conf_threshold (θ) must lie in [0, 1]");
        }
        if self.subsample == Some(0) {
            return fail("subsample must be ≥ 1 when set");
        }
        Ok(self)
    }

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "levels" | "m" => self.levels = parse_value(key, value)?,
            "k0" => self.k0 = parse_value(key, value)?,
            "mlp_width" => self.mlp_width = parse_value(key, value)?,
            "mlp_depth" => self.mlp_depth = parse_value(key, value)?,
            "activation" => self.activation = parse_value(key, value)?,
            "init" => self.init = parse_value(key, value)?,
            "warp_type" => self.warp_type = parse_value(key, value)?,
            "rot_repr" => self.rot_repr = parse_value(key, value)?,
            "norm" => self.norm = parse_value(key, value)?,
            "lambda_cd" => self.lambda_cd = parse_value(key, value)?,
            "lambda_cor" => self.lambda_cor = parse_value(key, value)?,
            "lambda_reg" => self.lambda_reg = parse_value(key, value)?,
            "max_iter" => self.max_iter = parse_value(key, value)?,
            "cost_threshold" => self.cost_threshold = parse_value(key, value)?,
            "stall_window" => self.stall_window = parse_value(key, value)?,
            "stall_tolerance" => self.stall_tolerance = parse_value(key, value)?,
            "optimizer" => self.optimizer = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "output_scale" => self.output_scale = parse_value(key, value)?,
            "corr_conf_threshold" => self.corr_conf_threshold = parse_value(key, value)?,
            "normalize" => self.normalize = parse_value(key, value)?,
            "subsample" => {
                self.subsample = match value {
                    "off" | "none" | "0" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(key.trim(), value)
                .map_err(|e| ConfigError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let subsample = self
            .subsample
            .map_or_else(|| "off".to_string(), |n| n.to_string());
        let values: Vec<String> = vec![
            self.levels.to_string(),
            self.k0.to_string(),
            self.mlp_width.to_string(),
            self.mlp_depth.to_string(),
            self.activation.to_string(),
            self.init.to_string(),
            self.warp_type.to_string(),
            self.rot_repr.to_string(),
            self.norm.to_string(),
            self.lambda_cd.to_string(),
            self.lambda_cor.to_string(),
            self.lambda_reg.to_string(),
            self.max_iter.to_string(),
            self.cost_threshold.to_string(),
            self.stall_window.to_string(),
            self.stall_tolerance.to_string(),
            self.optimizer.to_string(),
            self.learning_rate.to_string(),
            self.seed.to_string(),
            self.output_scale.to_string(),
            self.corr_conf_threshold.to_string(),
            self.normalize.to_string(),
            subsample,
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate() {
        let cfg = PyramidConfig::default().validate().unwrap();
        assert_eq!(cfg.levels, 9);
        assert_eq!(cfg.k0, -8);
        assert_eq!(cfg.max_iter, 500);
        assert_eq!(cfg.cost_threshold, 1e-4);
        assert_eq!(cfg.stall_window, 15);
        assert_eq!(cfg.output_scale, 1e-4);
        assert_eq!(cfg.corr_conf_threshold, 0.3);
        assert_eq!((cfg.mlp_width, cfg.mlp_depth), (128, 3));
    }

    #[test]
    fn zero_levels_rejected() {
        let cfg = PyramidConfig {
            levels: 0,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("m must be ≥ 1"), "{err}");
    }

    #[test]
    fn confidence_threshold_range() {
        let cfg = PyramidConfig {
            corr_conf_threshold: 1.5,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("corr_conf_threshold"), "{err}");
    }

    #[test]
    fn other_invariants() {
        for bad in [
            PyramidConfig {
                max_iter: 0,
                ..Default::default()
            },
            PyramidConfig {
                stall_window: 0,
                ..Default::default()
            },
            PyramidConfig {
                lambda_reg: -0.1,
                ..Default::default()
            },
            PyramidConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            PyramidConfig {
                learning_rate: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn kv_round_trip_and_comments() {
        let text = "# pyramid\nlevels = 4  # fewer levels\nnorm = l2\nrot_repr = quaternion\nsubsample = 2048\n\n";
        let cfg = PyramidConfig::from_kv(text).unwrap();
        assert_eq!(cfg.levels, 4);
        assert_eq!(cfg.norm, NormKind::L2);
        assert_eq!(cfg.rot_repr, RotationRepr::Quaternion);
        assert_eq!(cfg.subsample, Some(2048));
        assert_eq!(PyramidConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn kv_errors_carry_line_numbers() {
        let err = PyramidConfig::from_kv("levels = 3\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err}");
        let err = PyramidConfig::from_kv("levels three\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
        let err = PyramidConfig::from_kv("levels = -3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    proptest! {
        /// Validation never panics and always either accepts or names a field.
        #[test]
        fn validation_is_total(
            levels in 0usize..20,
            k0 in -80i32..80,
            max_iter in 0usize..1000,
            stall in 0usize..30,
            lr in prop::num::f64::ANY,
            lam in prop::num::f64::ANY,
            theta in prop::num::f64::ANY,
            width in 0usize..4,
        ) {
            let cfg = PyramidConfig {
                levels, k0, max_iter, stall_window: stall, learning_rate: lr,
                lambda_reg: lam, corr_conf_threshold: theta, mlp_width: width,
                ..Default::default()
            };
            match cfg.validate() {
                Ok(c) => {
                    prop_assert!(c.levels >= 1 && c.max_iter >= 1 && c.stall_window >= 1);
                    prop_assert!(c.learning_rate > 0.0 && c.lambda_reg >= 0.0);
                    prop_assert!((0.0..=1.0).contains(&c.corr_conf_threshold));
                }
                Err(e) => prop_assert!(!e.to_string().is_empty()),
            }
        }
    }
}
