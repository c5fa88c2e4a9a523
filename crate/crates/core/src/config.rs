// SPDX-License-Identifier: Apache-2.0

//! Experiment configuration files (TOML).
//!
//! ```toml
//! [plant]
//! num = [2.0]
//! den = [1.0, -0.995]
//! delay = 0.02
//! dt = 0.02
//!
//! [limits]
//! low = -3.3
//! high = 3.3
//!
//! [reference]
//! kind = "step"
//! limit = 4.0
//!
//! [gains]
//! kp = 4.0
//! ki = 10.0
//! b = 0.5
//! ```
//!
//! Omitting `gains.kd` selects a PI controller. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::controller::{GainLayout, PidGains, SaturationLimits};
use crate::lti::{DiscreteModel, TransferFunction};
use crate::simloop::{CostWeights, ReferenceKind};
use crate::tuner::AdamConfig;

/// Configs compiled into the library, addressable by name.
pub const SHIPPED: &[(&str, &str)] = &[
    ("system1", include_str!("../configs/system1.toml")),
    ("system2", include_str!("../configs/system2.toml")),
    ("system3", include_str!("../configs/system3.toml")),
    ("system4", include_str!("../configs/system4.toml")),
    ("system4-ramp", include_str!("../configs/system4-ramp.toml")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("cannot read {}: {source}", .path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid config {origin}:\n  {}", .violations.join("\n  "))]
    Invalid { origin: String, violations: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    #[serde(default)]
    pub delay: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    pub low: f64,
    pub high: f64,
}

fn default_count() -> usize {
    30
}
fn default_train() -> usize {
    20
}
fn default_horizon() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub kind: String,
    pub limit: f64,
    #[serde(default = "default_count")]
    pub count: usize,
    /// The first `train` references train, the rest test.
    #[serde(default = "default_train")]
    pub train: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSection {
    pub kp: f64,
    pub ki: f64,
    pub kd: Option<f64>,
    pub b: f64,
    #[serde(default)]
    pub alpha: f64,
    /// Controller time base; defaults to the plant sample time.
    pub time_base: Option<f64>,
}

fn default_lr() -> f64 {
    0.02
}
fn default_epochs() -> usize {
    200
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for TuningSection {
    fn default() -> Self {
        TuningSection {
            lr: default_lr(),
            epochs: default_epochs(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default)]
    pub r: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection { q: 1.0, r: 0.0 }
    }
}

fn default_hidden() -> usize {
    8
}
fn default_dynamic_lr() -> f64 {
    0.005
}
fn default_init_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicSection {
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dynamic_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Half-width of the uniform draw for input-layer weights.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

impl Default for DynamicSection {
    fn default() -> Self {
        DynamicSection {
            hidden: default_hidden(),
            lr: default_dynamic_lr(),
            epochs: default_epochs(),
            init_scale: default_init_scale(),
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub plant: PlantSection,
    pub limits: LimitsSection,
    pub reference: ReferenceSection,
    pub gains: GainsSection,
    #[serde(default)]
    pub tuning: TuningSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub dynamic: DynamicSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (num {:?}, den {:?}, delay {}, dt {})",
            self.name, self.plant.num, self.plant.den, self.plant.delay, self.plant.dt
        )
    }
}

impl ExperimentConfig {
    pub fn layout(&self) -> GainLayout {
        if self.gains.kd.is_some() {
            GainLayout::Pid
        } else {
            GainLayout::Pi
        }
    }

    pub fn time_base(&self) -> f64 {
        self.gains.time_base.unwrap_or(self.plant.dt)
    }

    pub fn initial_gains(&self) -> PidGains<f64> {
        let g = &self.gains;
        PidGains::new(g.kp, g.ki, g.kd.unwrap_or(0.0), g.b)
            .with_alpha(g.alpha)
            .with_time_base(self.time_base())
    }

    pub fn transfer_function(&self) -> Result<TransferFunction, String> {
        let p = &self.plant;
        TransferFunction::with_delay(p.num.clone(), p.den.clone(), p.delay).map_err(|e| e.to_string())
    }

    pub fn plant_model(&self) -> Result<DiscreteModel, String> {
        DiscreteModel::from_tf(&self.transfer_function()?, self.plant.dt).map_err(|e| e.to_string())
    }

    pub fn limits(&self) -> Result<SaturationLimits, String> {
        SaturationLimits::new(self.limits.low, self.limits.high).map_err(|e| e.to_string())
    }

    pub fn reference_kind(&self) -> Result<ReferenceKind, String> {
        self.reference.kind.parse()
    }

    pub fn weights(&self) -> Result<CostWeights, String> {
        CostWeights::new(self.cost.q, self.cost.r).map_err(|e| e.to_string())
    }

    pub fn adam(&self) -> AdamConfig {
        let t = &self.tuning;
        AdamConfig {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }

    pub fn dynamic_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.dynamic.lr,
            ..self.adam()
        }
    }

    /// Every violated invariant, in section order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };

        if let Err(e) = self.plant_model() {
            check(false, format!("plant: {e}"));
        }
        check(
            self.limits.low < self.limits.high,
            format!(
                "limits.low must be below limits.high (got {} >= {})",
                self.limits.low, self.limits.high
            ),
        );
        check(
            !self.limits.low.is_nan() && !self.limits.high.is_nan(),
            "limits must not be NaN".into(),
        );
        if let Err(e) = self.reference_kind() {
            check(false, format!("reference.kind: {e}"));
        }
        let r = &self.reference;
        check(
            r.limit > 0.0 && r.limit.is_finite(),
            format!("reference.limit must be positive and finite (got {})", r.limit),
        );
        check(r.horizon >= 1, "reference.horizon must be at least 1".into());
        check(
            r.train >= 1 && r.train < r.count,
            format!(
                "reference.train must be in 1..count (got train {} of count {})",
                r.train, r.count
            ),
        );
        let g = &self.gains;
        for (name, v) in [("kp", g.kp), ("ki", g.ki), ("kd", g.kd.unwrap_or(0.0)), ("b", g.b)] {
            check(v.is_finite(), format!("gains.{name} must be finite (got {v})"));
        }
        check(
            (0.0..1.0).contains(&g.alpha),
            format!("gains.alpha must lie in [0, 1) (got {})", g.alpha),
        );
        let h = self.time_base();
        check(
            h > 0.0 && h.is_finite(),
            format!("gains.time_base must be positive (got {h})"),
        );
        if let Err(e) = self.adam().validate() {
            check(false, format!("tuning: {e}"));
        }
        if let Err(e) = self.dynamic_adam().validate() {
            check(false, format!("dynamic: {e}"));
        }
        check(self.dynamic.hidden >= 1, "dynamic.hidden must be at least 1".into());
        check(
            self.dynamic.init_scale >= 0.0 && self.dynamic.init_scale.is_finite(),
            format!("dynamic.init_scale must be non-negative (got {})", self.dynamic.init_scale),
        );
        if let Err(e) = self.weights() {
            check(false, format!("cost: {e}"));
        }
        out
    }
}

/// Parses and validates config text. `origin` names the source in errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.to_string(),
        message: e.message().to_string(),
    })?;
    if cfg.name.is_empty() {
        cfg.name = origin.to_string();
    }
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(ConfigError::Invalid {
            origin: origin.to_string(),
            violations,
        });
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ConfigError::Missing(path.to_path_buf())
        } else {
            ConfigError::Read {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    parse_config(&text, &path.display().to_string())
}

pub fn shipped_config(name: &str) -> Option<Result<ExperimentConfig, ConfigError>> {
    SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_config(text, n))
}

/// A path on disk wins over a shipped name.
pub fn resolve_config(spec: &str) -> Result<ExperimentConfig, ConfigError> {
    let path = Path::new(spec);
    if path.exists() {
        return load_config(path);
    }
    match shipped_config(spec) {
        Some(cfg) => cfg,
        None => Err(ConfigError::Missing(path.to_path_buf())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shipped_config_validates() {
        for (name, _) in SHIPPED {
            let cfg = shipped_config(name).unwrap().unwrap();
            assert_eq!(cfg.name, *name);
        }
    }

    #[test]
    fn system1_matches_table() {
        let cfg = shipped_config("system1").unwrap().unwrap();
        assert_eq!(cfg.plant.num, vec![2.0]);
        assert_eq!(cfg.plant.den, vec![1.0, -0.995]);
        assert_eq!(cfg.plant.delay, 0.02);
        assert_eq!((cfg.limits.low, cfg.limits.high), (-3.3, 3.3));
        assert_eq!(cfg.reference.limit, 4.0);
        assert_eq!((cfg.gains.kp, cfg.gains.ki, cfg.gains.kd, cfg.gains.b), (4.0, 10.0, None, 0.5));
        assert_eq!(cfg.layout(), GainLayout::Pi);
    }

    #[test]
    fn inverted_limits_named() {
        let text = SHIPPED[0].1.replace("low = -3.3", "low = 5.0");
        match parse_config(&text, "t") {
            Err(ConfigError::Invalid { violations, .. }) => {
                assert_eq!(violations.len(), 1);
                assert!(violations[0].contains("limits.low"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_violations_listed() {
        let text = SHIPPED[0]
            .1
            .replace("low = -3.3", "low = 5.0")
            .replace("limit = 4.0", "limit = -1.0");
        match parse_config(&text, "t") {
            Err(ConfigError::Invalid { violations, .. }) => assert_eq!(violations.len(), 2, "{violations:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_and_unknown_are_parse_errors() {
        assert!(matches!(parse_config("", "e"), Err(ConfigError::Parse { .. })));
        let text = format!("{}\n[extra]\nx = 1\n", SHIPPED[0].1);
        assert!(matches!(parse_config(&text, "u"), Err(ConfigError::Parse { .. })));
        let text = SHIPPED[0].1.replace("kp = 4.0", "kp = 4.0\nkq = 1.0");
        assert!(matches!(parse_config(&text, "u"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_config(Path::new("/definitely/not/here.toml")),
            Err(ConfigError::Missing(_))
        ));
        assert!(matches!(resolve_config("no-such-system"), Err(ConfigError::Missing(_))));
    }
}
