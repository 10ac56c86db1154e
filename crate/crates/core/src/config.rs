//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key can also be
//! given on the command line, which overrides the file. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `engine` | `C` | `C` (circulation, undirected) or `PS` (push-sum, directed) |
//! | `problem` | `OLR` | `OLR` (least squares, box) or `OBC` (logistic, ball) |
//! | `dataset` | `synthetic` | `synthetic` or a path (LIBSVM text, or IDX images when `labels` is set) |
//! | `labels` | | IDX label file for an IDX image `dataset` |
//! | `digits` | `6,8` | IDX digits mapped to -1 and +1 |
//! | `schedule` | `default` | `default` (7 nodes, period 4, window 4), `complete`, or a schedule file |
//! | `n` | `7` | node count for `schedule = complete` |
//! | `weights` | `uniform` | circulation weights: `uniform` or `metropolis` |
//! | `d` | 21 (OLR), 784 (synthetic OBC) | decision dimension; file datasets use `libsvm_dim` or the IDX size |
//! | `T` | `500` | horizon |
//! | `epsilon` | `inf,1,0.5,0.2` | privacy levels, `inf` for non-private |
//! | `sensitivity` | `1` | a positive number, or `theoretical` for `2 n lhat` |
//! | `lhat` | `1` | gradient bound used by theoretical sensitivity |
//! | `grad_noise_var` | `0.1` | variance of the Gaussian gradient error |
//! | `obs_noise_var` | `0.2` | OLR observation noise variance |
//! | `replicates` | `10` | Monte-Carlo replicates |
//! | `seed` | `1` | master seed |
//! | `out` | `out` | output directory |
//! | `batch_size` | `100` | OBC rows per round |
//! | `train_size` | 6000 (LIBSVM), 8000 otherwise | OBC training rows |
//! | `test_size` | rest | OBC test rows |
//! | `libsvm_dim` | `112` | LIBSVM feature dimension |
//! | `synthetic_samples` | `11769` | rows of the synthetic OBC dataset |
//! | `label_flip` | `0.05` | label noise of the synthetic OBC dataset |
//! | `constraint` | `box` (OLR), `ball` (OBC) | feasible set kind |
//! | `box_lo`, `box_hi` | `-5`, `5` | box bounds |
//! | `radius` | `5` | ball radius |
//! | `hindsight_stride` | 1 (OLR), `T` (OBC) | rounds between hindsight solves |
//! | `audit_t0` | `400` | perturbed round of the privacy audit |
//! | `audit_coord` | `1` | reported coordinate (1-based) |
//! | `gamma_horizon` | `10 B P` | rounds used to estimate the push-sum weight infimum |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::engine::{EngineKind, Weighting};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: invalid value {value:?} ({msg})")]
    Invalid {
        key: String,
        value: String,
        msg: String,
    },
    #[error("config line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("config key {key:?}: {msg}")]
    Constraint { key: &'static str, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Problem {
    Olr,
    Obc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleSource {
    Default,
    Complete,
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensitivitySetting {
    Fixed(f64),
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Box,
    Ball,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub engine: EngineKind,
    pub problem: Problem,
    /// `None` is the synthetic generator.
    pub dataset: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub digits: (u8, u8),
    pub schedule: ScheduleSource,
    pub n: usize,
    pub weights: Weighting,
    pub d: Option<usize>,
    pub horizon: usize,
    pub epsilons: Vec<Option<f64>>,
    pub sensitivity: SensitivitySetting,
    pub lhat: f64,
    pub grad_noise_var: f64,
    pub obs_noise_var: f64,
    pub replicates: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub batch_size: usize,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    pub libsvm_dim: usize,
    pub synthetic_samples: usize,
    pub label_flip: f64,
    pub constraint: Option<ConstraintKind>,
    pub box_lo: f64,
    pub box_hi: f64,
    pub radius: f64,
    pub hindsight_stride: Option<usize>,
    pub audit_t0: usize,
    pub audit_coord: usize,
    pub gamma_horizon: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: EngineKind::Circulation,
            problem: Problem::Olr,
            dataset: None,
            labels: None,
            digits: (6, 8),
            schedule: ScheduleSource::Default,
            n: 7,
            weights: Weighting::Uniform,
            d: None,
            horizon: 500,
            epsilons: vec![None, Some(1.0), Some(0.5), Some(0.2)],
            sensitivity: SensitivitySetting::Fixed(1.0),
            lhat: 1.0,
            grad_noise_var: 0.1,
            obs_noise_var: 0.2,
            replicates: 10,
            seed: 1,
            out: PathBuf::from("out"),
            batch_size: 100,
            train_size: None,
            test_size: None,
            libsvm_dim: 112,
            synthetic_samples: 11769,
            label_flip: 0.05,
            constraint: None,
            box_lo: -5.0,
            box_hi: 5.0,
            radius: 5.0,
            hindsight_stride: None,
            audit_t0: 400,
            audit_coord: 1,
            gamma_horizon: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.into(),
        value: value.into(),
        msg: "not a number".into(),
    })
}

fn parse_opt_usize(key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    match value {
        "" | "auto" | "rest" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

/// Parses `inf` / `none` as the non-private level.
pub fn parse_epsilons(value: &str) -> Result<Vec<Option<f64>>, ConfigError> {
    let bad = |msg: &str| ConfigError::Invalid {
        key: "epsilon".into(),
        value: value.into(),
        msg: msg.into(),
    };
    let out = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|tok| match tok.to_ascii_lowercase().as_str() {
            "inf" | "none" | "infinity" => Ok(None),
            t => match t.parse::<f64>() {
                Ok(e) if e > 0.0 && e.is_finite() => Ok(Some(e)),
                Ok(e) if e == f64::INFINITY => Ok(None),
                _ => Err(bad("each level must be positive or inf")),
            },
        })
        .collect::<Result<Vec<_>, _>>()?;
    if out.is_empty() {
        return Err(bad("empty list"));
    }
    Ok(out)
}

pub fn epsilon_label(e: Option<f64>) -> String {
    e.map_or_else(|| "inf".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Reads a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let invalid = |msg: &str| ConfigError::Invalid {
            key: key.into(),
            value: value.into(),
            msg: msg.into(),
        };
        match key {
            "engine" => {
                self.engine = match value.to_ascii_uppercase().as_str() {
                    "C" => EngineKind::Circulation,
                    "PS" => EngineKind::PushSum,
                    _ => return Err(invalid("expected C or PS")),
                }
            }
            "problem" => {
                self.problem = match value.to_ascii_uppercase().as_str() {
                    "OLR" => Problem::Olr,
                    "OBC" => Problem::Obc,
                    _ => return Err(invalid("expected OLR or OBC")),
                }
            }
            "dataset" => {
                self.dataset = match value {
                    "synthetic" | "" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "labels" => self.labels = (!value.is_empty()).then(|| PathBuf::from(value)),
            "digits" => {
                let (a, b) = value.split_once(',').ok_or_else(|| invalid("expected a,b"))?;
                self.digits = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
            }
            "schedule" => {
                self.schedule = match value {
                    "default" => ScheduleSource::Default,
                    "complete" => ScheduleSource::Complete,
                    p => ScheduleSource::File(PathBuf::from(p)),
                }
            }
            "n" => self.n = parse_num(key, value)?,
            "weights" => {
                self.weights = match value {
                    "uniform" => Weighting::Uniform,
                    "metropolis" => Weighting::Metropolis,
                    _ => return Err(invalid("expected uniform or metropolis")),
                }
            }
            "d" => self.d = parse_opt_usize(key, value)?,
            "T" => self.horizon = parse_num(key, value)?,
            "epsilon" => self.epsilons = parse_epsilons(value)?,
            "sensitivity" => {
                self.sensitivity = match value {
                    "theoretical" => SensitivitySetting::Theoretical,
                    v => SensitivitySetting::Fixed(parse_num(key, v)?),
                }
            }
            "lhat" => self.lhat = parse_num(key, value)?,
            "grad_noise_var" => self.grad_noise_var = parse_num(key, value)?,
            "obs_noise_var" => self.obs_noise_var = parse_num(key, value)?,
            "replicates" => self.replicates = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "train_size" => self.train_size = parse_opt_usize(key, value)?,
            "test_size" => self.test_size = parse_opt_usize(key, value)?,
            "libsvm_dim" => self.libsvm_dim = parse_num(key, value)?,
            "synthetic_samples" => self.synthetic_samples = parse_num(key, value)?,
            "label_flip" => self.label_flip = parse_num(key, value)?,
            "constraint" => {
                self.constraint = match value {
                    "box" => Some(ConstraintKind::Box),
                    "ball" => Some(ConstraintKind::Ball),
                    "auto" | "" => None,
                    _ => return Err(invalid("expected box or ball")),
                }
            }
            "box_lo" => self.box_lo = parse_num(key, value)?,
            "box_hi" => self.box_hi = parse_num(key, value)?,
            "radius" => self.radius = parse_num(key, value)?,
            "hindsight_stride" => self.hindsight_stride = parse_opt_usize(key, value)?,
            "audit_t0" => self.audit_t0 = parse_num(key, value)?,
            "audit_coord" => self.audit_coord = parse_num(key, value)?,
            "gamma_horizon" => self.gamma_horizon = parse_opt_usize(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn constraint_kind(&self) -> ConstraintKind {
        self.constraint.unwrap_or(match self.problem {
            Problem::Olr => ConstraintKind::Box,
            Problem::Obc => ConstraintKind::Ball,
        })
    }

    pub fn hindsight_stride(&self) -> usize {
        self.hindsight_stride
            .unwrap_or(match self.problem {
                Problem::Olr => 1,
                Problem::Obc => self.horizon,
            })
            .max(1)
    }

    /// Dimension for generated data; file datasets fix their own.
    pub fn synthetic_dim(&self) -> usize {
        self.d.unwrap_or(match self.problem {
            Problem::Olr => 21,
            Problem::Obc => 784,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &'static str, msg: &str| {
            Err(ConfigError::Constraint {
                key,
                msg: msg.into(),
            })
        };
        if self.replicates == 0 {
            return fail("replicates", "must be at least 1");
        }
        if self.horizon == 0 {
            return fail("T", "must be at least 1");
        }
        if self.n == 0 {
            return fail("n", "must be at least 1");
        }
        if !(self.lhat > 0.0) {
            return fail("lhat", "must be positive");
        }
        if let SensitivitySetting::Fixed(s) = self.sensitivity {
            if !(s > 0.0 && s.is_finite()) {
                return fail("sensitivity", "must be positive or theoretical");
            }
        }
        if !(self.grad_noise_var >= 0.0) {
            return fail("grad_noise_var", "must be nonnegative");
        }
        if !(self.obs_noise_var >= 0.0) {
            return fail("obs_noise_var", "must be nonnegative");
        }
        if !(self.box_lo < self.box_hi) {
            return fail("box_lo", "must be below box_hi");
        }
        if !(self.radius > 0.0) {
            return fail("radius", "must be positive");
        }
        if !(0.0..=0.5).contains(&self.label_flip) {
            return fail("label_flip", "must lie in [0, 0.5]");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if self.audit_coord == 0 {
            return fail("audit_coord", "is 1-based");
        }
        if self.problem == Problem::Olr && self.dataset.is_some() {
            return fail("dataset", "OLR only supports the synthetic stream");
        }
        if self.labels.is_some() && self.dataset.is_none() {
            return fail("labels", "needs an IDX image dataset");
        }
        Ok(())
    }

    /// [`RunConfig::validate`] plus the audit-only keys.
    pub fn validate_audit(&self) -> Result<(), ConfigError> {
        self.validate()?;
        if self.audit_t0 == 0 || self.audit_t0 > self.horizon {
            return Err(ConfigError::Constraint {
                key: "audit_t0",
                msg: "must lie in [1, T]".into(),
            });
        }
        Ok(())
    }

    /// Text form listing every key, readable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |v| v.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let _ = writeln!(
            s,
            "engine = {}",
            match self.engine {
                EngineKind::Circulation => "C",
                EngineKind::PushSum => "PS",
            }
        );
        let _ = writeln!(
            s,
            "problem = {}",
            match self.problem {
                Problem::Olr => "OLR",
                Problem::Obc => "OBC",
            }
        );
        let _ = writeln!(
            s,
            "dataset = {}",
            self.dataset
                .as_ref()
                .map_or("synthetic".to_string(), |p| p.display().to_string())
        );
        let _ = writeln!(s, "labels = {}", path(&self.labels));
        let _ = writeln!(s, "digits = {},{}", self.digits.0, self.digits.1);
        let _ = writeln!(
            s,
            "schedule = {}",
            match &self.schedule {
                ScheduleSource::Default => "default".to_string(),
                ScheduleSource::Complete => "complete".to_string(),
                ScheduleSource::File(p) => p.display().to_string(),
            }
        );
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(
            s,
            "weights = {}",
            match self.weights {
                Weighting::Uniform => "uniform",
                Weighting::Metropolis => "metropolis",
            }
        );
        let _ = writeln!(s, "d = {}", opt(self.d));
        let _ = writeln!(s, "T = {}", self.horizon);
        let eps: Vec<String> = self.epsilons.iter().map(|&e| epsilon_label(e)).collect();
        let _ = writeln!(s, "epsilon = {}", eps.join(","));
        let _ = writeln!(
            s,
            "sensitivity = {}",
            match self.sensitivity {
                SensitivitySetting::Fixed(v) => v.to_string(),
                SensitivitySetting::Theoretical => "theoretical".to_string(),
            }
        );
        let _ = writeln!(s, "lhat = {}", self.lhat);
        let _ = writeln!(s, "grad_noise_var = {}", self.grad_noise_var);
        let _ = writeln!(s, "obs_noise_var = {}", self.obs_noise_var);
        let _ = writeln!(s, "replicates = {}", self.replicates);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "train_size = {}", opt(self.train_size));
        let _ = writeln!(s, "test_size = {}", opt(self.test_size));
        let _ = writeln!(s, "libsvm_dim = {}", self.libsvm_dim);
        let _ = writeln!(s, "synthetic_samples = {}", self.synthetic_samples);
        let _ = writeln!(s, "label_flip = {}", self.label_flip);
        let _ = writeln!(
            s,
            "constraint = {}",
            match self.constraint {
                None => "auto",
                Some(ConstraintKind::Box) => "box",
                Some(ConstraintKind::Ball) => "ball",
            }
        );
        let _ = writeln!(s, "box_lo = {}", self.box_lo);
        let _ = writeln!(s, "box_hi = {}", self.box_hi);
        let _ = writeln!(s, "radius = {}", self.radius);
        let _ = writeln!(s, "hindsight_stride = {}", opt(self.hindsight_stride));
        let _ = writeln!(s, "audit_t0 = {}", self.audit_t0);
        let _ = writeln!(s, "audit_coord = {}", self.audit_coord);
        let _ = writeln!(s, "gamma_horizon = {}", opt(self.gamma_horizon));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_olr_setup() {
        let c = RunConfig::default();
        assert_eq!(c.horizon, 500);
        assert_eq!(c.replicates, 10);
        assert_eq!(c.synthetic_dim(), 21);
        assert_eq!(c.constraint_kind(), ConstraintKind::Box);
        assert_eq!(c.epsilons, vec![None, Some(1.0), Some(0.5), Some(0.2)]);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_override() {
        let mut c = RunConfig::parse("# comment\nengine = PS\n\nT = 50\nepsilon = inf, 2\n").unwrap();
        assert_eq!(c.engine, EngineKind::PushSum);
        assert_eq!(c.horizon, 50);
        assert_eq!(c.epsilons, vec![None, Some(2.0)]);
        c.set("T", "7").unwrap();
        assert_eq!(c.horizon, 7);
        c.set("problem", "obc").unwrap();
        assert_eq!(c.constraint_kind(), ConstraintKind::Ball);
        assert_eq!(c.hindsight_stride(), 7);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(
            RunConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
        assert!(matches!(
            RunConfig::parse("T = many"),
            Err(ConfigError::Invalid { key, .. }) if key == "T"
        ));
        assert_eq!(RunConfig::parse("T"), Err(ConfigError::Syntax { line: 1 }));
        assert!(parse_epsilons("0").is_err());
        let mut c = RunConfig::default();
        c.replicates = 0;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::Constraint { key: "replicates", .. })
        ));
        c.replicates = 1;
        c.audit_t0 = 501;
        assert!(c.validate().is_ok());
        assert!(c.validate_audit().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("engine", "PS").unwrap();
        c.set("epsilon", "inf,0.25").unwrap();
        c.set("sensitivity", "theoretical").unwrap();
        c.set("dataset", "data/mushrooms").unwrap();
        c.set("problem", "OBC").unwrap();
        c.set("train_size", "100").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
