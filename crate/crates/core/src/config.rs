//! Versioned JSON experiment configuration.
//!
//! Single-field ranges are checked while deserializing, so errors carry the line and
//! column of the offending value. Constraints spanning several fields are checked
//! afterwards and reported against the line of the first field involved.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, RewardParams};
use crate::kernel::GeneratorSpec;
use crate::solvers::actor_critic::AcHyper;
use crate::solvers::candidates::CandidateMode;
use crate::solvers::exact::{ExactOptions, DEFAULT_ACTION_BUDGET, DEFAULT_BUDGET, DEFAULT_TOL};
use crate::solvers::qlearning::Schedule;

pub const CONFIG_VERSION: u32 = 1;

macro_rules! checked {
    ($(#[$m:meta])* $name:ident($inner:ty, $tys:literal), |$v:ident| $ok:expr, $msg:literal) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
        #[serde(try_from = $tys, into = $tys)]
        pub struct $name(pub $inner);

        impl TryFrom<$inner> for $name {
            type Error = String;
            fn try_from($v: $inner) -> std::result::Result<Self, String> {
                if $ok {
                    Ok($name($v))
                } else {
                    Err(format!($msg, $v))
                }
            }
        }

        impl From<$name> for $inner {
            fn from(v: $name) -> $inner {
                v.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

checked!(
    /// Schema version; only [`CONFIG_VERSION`] is accepted.
    Version(u32, "u32"), |v| v == CONFIG_VERSION, "unsupported config version {}, expected 1"
);
checked!(
    /// Grid side length.
    GridSide(usize, "usize"), |v| (1..=11).contains(&v), "n must lie in [1, 11], got {}"
);
checked!(
    /// Number of destinations per cell.
    Neighbours(usize, "usize"), |v| (1..=9).contains(&v), "z must lie in [1, 9] (the 3x3 neighborhood), got {}"
);
checked!(Probability(f64, "f64"), |v| (0.0..=1.0).contains(&v), "probability must lie in [0, 1], got {}");
checked!(Positive(f64, "f64"), |v| v.is_finite() && v > 0.0, "value must be positive and finite, got {}");
checked!(Discount(f64, "f64"), |v| v > 0.0 && v <= 1.0, "gamma must lie in (0, 1], got {}");
checked!(Count(usize, "usize"), |v| v >= 1, "count must be at least 1, got {}");

fn one() -> Positive {
    Positive(1.0)
}
fn unit_discount() -> Discount {
    Discount(1.0)
}
fn default_seed() -> u64 {
    7
}
fn default_episodes() -> Count {
    Count(crate::eval::DEFAULT_EPISODES_PER_START)
}
fn default_step_cap() -> Count {
    Count(crate::eval::DEFAULT_STEP_CAP)
}
fn default_base_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "one")]
    pub r: Positive,
    pub c: Positive,
    /// Safe-action cost; `n²·c` when absent.
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Positive>,
    pub t_max: usize,
    #[serde(default = "unit_discount")]
    pub gamma: Discount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Exact,
    QLearning,
    ActorCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_action_budget")]
    pub action_budget: usize,
    #[serde(default = "default_mode")]
    pub candidates: CandidateMode,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_budget() -> usize {
    DEFAULT_BUDGET
}
fn default_action_budget() -> usize {
    DEFAULT_ACTION_BUDGET
}
fn default_mode() -> CandidateMode {
    CandidateMode::Exact
}

impl Default for ExactConfig {
    fn default() -> Self {
        ExactConfig {
            tol: DEFAULT_TOL,
            budget: DEFAULT_BUDGET,
            action_budget: DEFAULT_ACTION_BUDGET,
            candidates: CandidateMode::Exact,
        }
    }
}

impl ExactConfig {
    pub fn options(&self) -> ExactOptions {
        ExactOptions {
            tol: self.tol,
            budget: self.budget,
            action_budget: self.action_budget,
            mode: self.candidates,
            ..ExactOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub kind: SolverKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub exact: ExactConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub hyper: AcHyper,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kind: SolverKind::default(),
            seed: default_seed(),
            exact: ExactConfig::default(),
            schedule: Schedule::default(),
            hyper: AcHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_episodes")]
    pub episodes_per_start: Count,
    #[serde(default = "default_step_cap")]
    pub step_cap: Count,
    #[serde(default = "default_base_seed")]
    pub base_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes_per_start: default_episodes(),
            step_cap: default_step_cap(),
            base_seed: default_base_seed(),
        }
    }
}

/// File names written under the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_kernel_file")]
    pub kernel: String,
    #[serde(default = "default_metrics_file")]
    pub metrics: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_kernel_file() -> String {
    "kernel.json".into()
}
fn default_metrics_file() -> String {
    "metrics.csv".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            kernel: default_kernel_file(),
            metrics: default_metrics_file(),
        }
    }
}

/// One experiment: kernel generator, reward, solver and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: Version,
    pub n: GridSide,
    pub z: Neighbours,
    pub p_exit: Probability,
    pub p_hot: Probability,
    #[serde(default)]
    pub kernel_seed: u64,
    pub reward: RewardConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn at_line(text: &str, key: &str, err: Error) -> Error {
    let msg = match err {
        Error::InvalidParams(m) | Error::InvalidGenerator(m) | Error::Config(m) => m,
        other => other.to_string(),
    };
    match line_of(text, key) {
        Some(l) => Error::Config(format!("line {l}: {msg}")),
        None => Error::Config(msg),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    /// Parses and validates `text`.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = parse(text)?;
        cfg.generator()
            .validate()
            .map_err(|e| at_line(text, "p_hot", e))?;
        cfg.reward_params().map_err(|e| at_line(text, "reward", e))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn generator(&self) -> GeneratorSpec {
        GeneratorSpec {
            n: self.n.0,
            z: self.z.0,
            p_exit: self.p_exit.0,
            p_hot: self.p_hot.0,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.n.0)
    }

    pub fn reward_params(&self) -> Result<RewardParams> {
        let r = &self.reward;
        let cells = (self.n.0 * self.n.0) as f64;
        let d = r.d.map_or(cells * r.c.0, |d| d.0);
        RewardParams::new(r.r.0, r.c.0, d, r.t_max, r.gamma.0)
    }

    /// Hex SHA-256 of the canonical serialization, defaults filled in.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn default_z_values() -> Vec<Neighbours> {
    vec![Neighbours(3), Neighbours(4), Neighbours(5)]
}
fn default_c_values() -> Vec<Positive> {
    vec![Positive(0.16), Positive(0.18), Positive(0.20), Positive(0.22)]
}
fn default_sweep_n() -> GridSide {
    GridSide(10)
}
fn default_sweep_p_exit() -> Probability {
    Probability(0.005)
}
fn default_sweep_p_hot() -> Probability {
    Probability(0.15)
}
fn default_kernel_seed() -> u64 {
    1
}
fn default_sweep_t_max() -> usize {
    3
}

/// Settings of the learner used in the (z, c) sweep.
pub fn sweep_hyper() -> AcHyper {
    AcHyper {
        features: crate::solvers::actor_critic::FeatureKind::Posterior,
        actor_lr: 0.001,
        critic_lr: 0.05,
        episodes: 5000,
        ..AcHyper::default()
    }
}

/// The (z, c) sweep behind the comparison CSVs. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub version: Version,
    #[serde(default = "default_sweep_n")]
    pub n: GridSide,
    #[serde(default = "default_z_values")]
    pub z_values: Vec<Neighbours>,
    #[serde(default = "default_c_values")]
    pub c_values: Vec<Positive>,
    #[serde(default = "default_sweep_p_exit")]
    pub p_exit: Probability,
    #[serde(default = "default_sweep_p_hot")]
    pub p_hot: Probability,
    #[serde(default = "default_kernel_seed")]
    pub kernel_seed: u64,
    #[serde(default = "one")]
    pub r: Positive,
    /// `D / c`; `n²` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_over_c: Option<Positive>,
    #[serde(default = "default_sweep_t_max")]
    pub t_max: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "sweep_hyper")]
    pub hyper: AcHyper,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        parse(r#"{"version": 1}"#).expect("defaults are valid")
    }
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<SweepConfig> {
        let cfg: SweepConfig = parse(text)?;
        if cfg.z_values.is_empty() {
            return Err(at_line(text, "z_values", Error::Config("z_values is empty".into())));
        }
        if cfg.c_values.is_empty() {
            return Err(at_line(text, "c_values", Error::Config("c_values is empty".into())));
        }
        for z in &cfg.z_values {
            cfg.generator(z.0)
                .validate()
                .map_err(|e| at_line(text, "p_hot", e))?;
        }
        for c in &cfg.c_values {
            cfg.reward_params(c.0)
                .map_err(|e| at_line(text, "c_values", e))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<SweepConfig> {
        let text = std::fs::read_to_string(path)?;
        SweepConfig::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    pub fn generator(&self, z: usize) -> GeneratorSpec {
        GeneratorSpec {
            n: self.n.0,
            z,
            p_exit: self.p_exit.0,
            p_hot: self.p_hot.0,
        }
    }

    pub fn reward_params(&self, c: f64) -> Result<RewardParams> {
        let ratio = self
            .d_over_c
            .map_or((self.n.0 * self.n.0) as f64, |d| d.0);
        RewardParams::new(self.r.0, c, ratio * c, self.t_max, 1.0)
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
  "version": 1,
  "n": 3,
  "z": 3,
  "p_exit": 0.05,
  "p_hot": 0.15,
  "kernel_seed": 4,
  "reward": {"c": 0.2, "t_max": 2}
}"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(BASE).unwrap();
        let p = cfg.reward_params().unwrap();
        assert_eq!((p.r, p.c, p.t_max, p.gamma), (1.0, 0.2, 2, 1.0));
        assert!((p.d - 1.8).abs() < 1e-15);
        assert_eq!(cfg.solver.seed, 7);
        assert_eq!(cfg.eval.episodes_per_start.0, 1000);
    }

    #[test]
    fn out_of_range_field_reports_its_line() {
        let text = BASE.replace("\"z\": 3", "\"z\": 10");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("z must lie in [1, 9]"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn cross_field_error_reports_a_line() {
        let text = BASE.replace("0.15", "0.96");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("line 6") && err.contains("p_hot + p_exit"), "{err}");
        let text = BASE.replace("\"c\": 0.2", "\"c\": 1.5");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("line 8") && err.contains("c/r"), "{err}");
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        let text = BASE.replace("\"kernel_seed\"", "\"kernel_sed\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
        let text = BASE.replace("\"version\": 1", "\"version\": 2");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = ExperimentConfig::from_json(BASE).unwrap();
        let compact: String = BASE.split_whitespace().collect();
        let b = ExperimentConfig::from_json(&compact).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_json(&BASE.replace("\"kernel_seed\": 4", "\"kernel_seed\": 5")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn sweep_defaults() {
        let s = SweepConfig::default();
        assert_eq!(s.z_values.len() * s.c_values.len(), 12);
        let p = s.reward_params(0.2).unwrap();
        assert!((p.d - 20.0).abs() < 1e-12);
        assert_eq!(p.t_max, 3);
        assert_eq!(s.hyper, sweep_hyper());
    }
}
