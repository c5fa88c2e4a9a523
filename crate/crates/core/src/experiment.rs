// SPDX-License-Identifier: Apache-2.0

//! The four-controller protocol and its file artifacts.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::autodiff::Plain;
use crate::config::ExperimentConfig;
use crate::controller::{Controller, ControllerError, GainLayout, GainNetwork, PidGains};
use crate::simloop::{generate_references, rollout, ReferenceSignal, RolloutConfig, RolloutResult, SimError};
use crate::tuner::{evaluate, tune, CostStats, TuneConfig, TuneError, TuneReport, TuningProblem};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Setup(String),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}:{line}: {message}", .path.display())]
    Format { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    /// Initial gains, back-calculation off.
    Initial,
    /// Initial gains with the configured back-calculation gain.
    Backcalc,
    Optimized,
    Dynamic,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [
        ControllerKind::Initial,
        ControllerKind::Backcalc,
        ControllerKind::Optimized,
        ControllerKind::Dynamic,
    ];

    /// Row label in the comparison table.
    pub fn label(self, layout: GainLayout) -> String {
        let base = match layout {
            GainLayout::Pi => "PI",
            GainLayout::Pid => "PID",
        };
        match self {
            ControllerKind::Initial => format!("Initial {base}"),
            ControllerKind::Backcalc => format!("Initial {base} with backcalculation"),
            ControllerKind::Optimized => format!("{base}+backcalculation optimized"),
            ControllerKind::Dynamic => format!("Dynamic {base}+backcalculation optimized"),
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControllerKind::Initial => "initial",
            ControllerKind::Backcalc => "backcalc",
            ControllerKind::Optimized => "optimized",
            ControllerKind::Dynamic => "dynamic",
        })
    }
}

impl FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown controller `{s}` (expected initial, backcalc, optimized or dynamic)"))
    }
}

/// A config turned into a plant, a problem and a train/test split.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub problem: TuningProblem,
    pub layout: GainLayout,
    pub initial: PidGains<f64>,
    pub seed: u64,
    pub train: Vec<ReferenceSignal>,
    pub test: Vec<ReferenceSignal>,
}

impl Experiment {
    /// `seed` overrides the config's reference seed.
    pub fn new(config: ExperimentConfig, seed: Option<u64>) -> Result<Self, ExperimentError> {
        let plant = config.plant_model().map_err(ExperimentError::Setup)?;
        let limits = config.limits().map_err(ExperimentError::Setup)?;
        let weights = config.weights().map_err(ExperimentError::Setup)?;
        let kind = config.reference_kind().map_err(ExperimentError::Setup)?;
        let r = &config.reference;
        let seed = seed.unwrap_or(r.seed);
        let mut refs = generate_references(kind, r.limit, r.count, r.horizon, seed);
        let test = refs.split_off(r.train);
        let initial = config.initial_gains();
        initial.validate()?;
        Ok(Experiment {
            problem: TuningProblem {
                plant,
                limits,
                horizon: r.horizon,
                weights,
            },
            layout: config.layout(),
            initial,
            seed,
            train: refs,
            test,
            config,
        })
    }

    pub fn initial_controller(&self) -> Controller<f64> {
        Controller::fixed(self.initial.with_b(0.0), self.layout)
    }

    pub fn backcalc_controller(&self) -> Controller<f64> {
        Controller::fixed(self.initial, self.layout)
    }

    pub fn static_tune_config(&self, epochs: Option<usize>) -> TuneConfig {
        TuneConfig {
            adam: self.config.adam(),
            epochs: epochs.unwrap_or(self.config.tuning.epochs),
        }
    }

    pub fn dynamic_tune_config(&self, epochs: Option<usize>) -> TuneConfig {
        TuneConfig {
            adam: self.config.dynamic_adam(),
            epochs: epochs.unwrap_or(self.config.dynamic.epochs),
        }
    }

    /// Tunes the static gains starting from the back-calculation controller.
    pub fn tune_static(&self, epochs: Option<usize>) -> Result<TuneReport, ExperimentError> {
        Ok(tune(
            &self.problem,
            &self.backcalc_controller(),
            &self.train,
            &self.static_tune_config(epochs),
        )?)
    }

    /// Gain network around `base`: random input layer, zero output layer, so
    /// it starts out exactly equal to the static controller.
    pub fn dynamic_template(&self, base: PidGains<f64>) -> Result<Controller<f64>, ExperimentError> {
        let scale = self.config.dynamic.init_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6e65_7477_6f72_6b00);
        let net = GainNetwork::with_hidden_init(base, self.layout, self.config.dynamic.hidden, || {
            if scale > 0.0 {
                rng.gen_range(-scale..=scale)
            } else {
                0.0
            }
        })?;
        Ok(Controller::Dynamic(net))
    }

    /// Tunes the gain network initialized from a tuned static controller.
    pub fn tune_dynamic(
        &self,
        tuned_static: &Controller<f64>,
        epochs: Option<usize>,
    ) -> Result<TuneReport, ExperimentError> {
        let base = static_gains(tuned_static)?;
        let template = self.dynamic_template(base)?;
        Ok(tune(
            &self.problem,
            &template,
            &self.train,
            &self.dynamic_tune_config(epochs),
        )?)
    }

    /// Runs the whole protocol: both tunings and all four evaluations.
    pub fn compare(&self, epochs: Option<usize>) -> Result<Comparison, ExperimentError> {
        let static_report = self.tune_static(epochs)?;
        let dynamic_report = self.tune_dynamic(&static_report.tuned, epochs)?;
        let controllers = [
            self.initial_controller(),
            self.backcalc_controller(),
            static_report.tuned.clone(),
            dynamic_report.tuned.clone(),
        ];
        let rows = ControllerKind::ALL
            .into_iter()
            .zip(&controllers)
            .map(|(kind, c)| {
                Ok(ComparisonRow {
                    kind,
                    label: kind.label(self.layout),
                    train: evaluate(&self.problem, c, &self.train)?,
                    test: evaluate(&self.problem, c, &self.test)?,
                })
            })
            .collect::<Result<Vec<_>, TuneError>>()?;
        Ok(Comparison {
            rows,
            static_report,
            dynamic_report,
        })
    }

    /// One plain rollout over the full horizon.
    pub fn simulate(
        &self,
        controller: &Controller<f64>,
        reference: &ReferenceSignal,
    ) -> Result<RolloutResult<f64>, ExperimentError> {
        Ok(rollout(
            &Plain,
            &self.problem.plant,
            controller,
            reference,
            &RolloutConfig::new(self.problem.horizon),
            &self.problem.limits,
        )?)
    }
}

pub fn static_gains(c: &Controller<f64>) -> Result<PidGains<f64>, ExperimentError> {
    match c {
        Controller::Static { gains, .. } => Ok(*gains),
        Controller::Dynamic(_) => Err(ExperimentError::Setup("expected a static controller".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub kind: ControllerKind,
    pub label: String,
    pub train: CostStats,
    pub test: CostStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub static_report: TuneReport,
    pub dynamic_report: TuneReport,
}

impl Comparison {
    pub fn row(&self, kind: ControllerKind) -> &ComparisonRow {
        self.rows
            .iter()
            .find(|r| r.kind == kind)
            .expect("all four rows are present")
    }

    /// Method / training cost / test cost, mean±std.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$}  {:>20}  {:>20}\n", "Method", "Training cost", "Test cost");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>20}  {:>20}\n",
                r.label,
                r.train.to_string(),
                r.test.to_string()
            ));
        }
        out
    }
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| ExperimentError::Setup(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(contents).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub const TRAJECTORY_HEADER: &str = "t,r,y,v,u_sat,saturated";

/// Trajectory as CSV: 13 significant digits, `saturated` as 0/1, LF endings.
pub fn trajectory_csv(reference: &ReferenceSignal, res: &RolloutResult<f64>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::with_capacity(64 * (res.len() + 1)));
    let io = "writing to memory cannot fail";
    w.write_record(TRAJECTORY_HEADER.split(',')).expect(io);
    for t in 0..res.len() {
        w.write_record([
            t.to_string(),
            format!("{:.12e}", reference.samples[t]),
            format!("{:.12e}", res.y[t]),
            format!("{:.12e}", res.v[t]),
            format!("{:.12e}", res.u_sat[t]),
            u8::from(res.saturated[t]).to_string(),
        ])
        .expect(io);
    }
    String::from_utf8(w.into_inner().expect(io)).expect("ascii output")
}

pub fn write_trajectory_csv(
    path: &Path,
    reference: &ReferenceSignal,
    res: &RolloutResult<f64>,
) -> Result<(), ExperimentError> {
    write_atomic(path, trajectory_csv(reference, res).as_bytes())
}

/// One parsed trajectory row.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub r: f64,
    pub y: f64,
    pub v: f64,
    pub u_sat: f64,
    #[serde(deserialize_with = "flag")]
    pub saturated: bool,
}

fn flag<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    match u8::deserialize(d)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(serde::de::Error::custom(format!("saturated flag must be 0 or 1, got {other}"))),
    }
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, message: String| ExperimentError::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    if text.lines().next() != Some(TRAJECTORY_HEADER) {
        return Err(bad(1, format!("expected header `{TRAJECTORY_HEADER}`")));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| bad(i + 2, e.to_string())))
        .collect()
}

pub fn learning_curve_csv(report: &TuneReport) -> String {
    let mut out = String::from("epoch,mean_train_cost,diverged\n");
    for (i, (c, d)) in report.epoch_costs.iter().zip(&report.epoch_diverged).enumerate() {
        out.push_str(&format!("{i},{c:.12e},{d}\n"));
    }
    out
}

/// `key = value` lines. Static controllers list `kp`, `ki`, [`kd`,] `b`; a
/// dynamic controller adds its network weights as `net.*` keys after the
/// base gains.
pub fn params_text(controller: &Controller<f64>, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    let mut put = |k: &str, v: f64| out.push_str(&format!("{k} = {v:?}\n"));
    match controller {
        Controller::Static { .. } => {
            for (k, v) in controller.param_names().iter().zip(controller.params()) {
                put(k, v);
            }
        }
        Controller::Dynamic(net) => {
            let base = Controller::fixed(*net.base(), net.layout());
            for (k, v) in base.param_names().iter().zip(base.params()) {
                put(k, v);
            }
            put("net.hidden", net.hidden() as f64);
            for (k, v) in controller.param_names().iter().zip(controller.params()) {
                put(k, v);
            }
        }
    }
    out
}

pub fn write_params(path: &Path, controller: &Controller<f64>, comments: &[String]) -> Result<(), ExperimentError> {
    write_atomic(path, params_text(controller, comments).as_bytes())
}

/// Ordered `(key, value)` pairs; `#` starts a comment.
pub fn parse_params(text: &str, origin: &Path) -> Result<Vec<(String, f64)>, ExperimentError> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| ExperimentError::Format {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
        let key = k.trim().to_string();
        let value: f64 = v.trim().parse().map_err(|e| bad(format!("`{}`: {e}", v.trim())))?;
        if out.iter().any(|(k, _)| *k == key) {
            return Err(bad(format!("duplicate key `{key}`")));
        }
        out.push((key, value));
    }
    Ok(out)
}

pub fn read_params(path: &Path) -> Result<Vec<(String, f64)>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_params(&text, path)
}

/// Applies parameters over `template` (alpha and time base are kept). Keys
/// that are absent keep the template value; unknown keys are errors.
pub fn controller_from_params(
    template: PidGains<f64>,
    layout: GainLayout,
    params: &[(String, f64)],
) -> Result<Controller<f64>, ExperimentError> {
    let mut gains = template;
    let mut net_values = Vec::new();
    let mut hidden = None;
    for (k, v) in params {
        match k.as_str() {
            "kp" => gains.kp = *v,
            "ki" => gains.ki = *v,
            "kd" if layout == GainLayout::Pid => gains.kd = *v,
            "b" => gains.b = *v,
            "net.hidden" => hidden = Some(*v),
            k if k.starts_with("net.") => net_values.push((k.to_string(), *v)),
            other => return Err(ExperimentError::Setup(format!("unknown parameter `{other}`"))),
        }
    }
    gains.validate()?;
    let Some(h) = hidden else {
        if !net_values.is_empty() {
            return Err(ExperimentError::Setup("network weights without `net.hidden`".into()));
        }
        return Ok(Controller::fixed(gains, layout));
    };
    if h < 1.0 || h.fract() != 0.0 {
        return Err(ExperimentError::Setup(format!("net.hidden must be a positive integer, got {h}")));
    }
    let net = GainNetwork::zeros(gains, layout, h as usize)?;
    let names = net.param_names();
    if names.len() != net_values.len() || names.iter().zip(&net_values).any(|(n, (k, _))| n != k) {
        return Err(ExperimentError::Setup(format!(
            "network weights do not match a {h}-unit {layout:?} network"
        )));
    }
    let values: Vec<f64> = net_values.into_iter().map(|(_, v)| v).collect();
    Ok(Controller::Dynamic(net.with_params(&values)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::shipped_config;

    fn small() -> Experiment {
        let mut cfg = shipped_config("system1").unwrap().unwrap();
        cfg.reference.horizon = 60;
        cfg.reference.count = 6;
        cfg.reference.train = 4;
        Experiment::new(cfg, Some(3)).unwrap()
    }

    #[test]
    fn split_sizes_and_seed_override() {
        let e = small();
        assert_eq!((e.train.len(), e.test.len()), (4, 2));
        assert_eq!(e.seed, 3);
        let other = Experiment::new(e.config.clone(), Some(4)).unwrap();
        assert_ne!(other.train[0].samples, e.train[0].samples);
    }

    #[test]
    fn kinds_round_trip() {
        for k in ControllerKind::ALL {
            assert_eq!(k.to_string().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("best".parse::<ControllerKind>().is_err());
        assert_eq!(ControllerKind::Backcalc.label(GainLayout::Pi), "Initial PI with backcalculation");
    }

    #[test]
    fn dynamic_template_starts_at_base() {
        let e = small();
        let dynamic = e.dynamic_template(e.initial).unwrap();
        let a = e.simulate(&e.backcalc_controller(), &e.train[0]).unwrap();
        let b = e.simulate(&dynamic, &e.train[0]).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.u_sat, b.u_sat);
    }

    #[test]
    fn params_round_trip() {
        let e = small();
        let dir = std::env::temp_dir().join(format!("pidgrad-params-{}", std::process::id()));
        let c = Controller::fixed(PidGains::new(1.5, -0.25, 0.0, 1.0 / 3.0), GainLayout::Pi);
        let path = dir.join("p.txt");
        write_params(&path, &c, &["note".into()]).unwrap();
        let back = controller_from_params(e.initial, GainLayout::Pi, &read_params(&path).unwrap()).unwrap();
        assert_eq!(back.params(), c.params());

        let d = e.dynamic_template(e.initial).unwrap();
        write_params(&path, &d, &[]).unwrap();
        let back = controller_from_params(e.initial, GainLayout::Pi, &read_params(&path).unwrap()).unwrap();
        assert_eq!(back, d);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn params_errors() {
        let p = Path::new("x");
        assert!(parse_params("kp 3", p).is_err());
        assert!(parse_params("kp = x", p).is_err());
        assert!(parse_params("kp = 1\nkp = 2", p).is_err());
        let ok = parse_params("# c\n\nkp = 2 # trailing\n", p).unwrap();
        assert_eq!(ok, vec![("kp".to_string(), 2.0)]);
        let e = small();
        assert!(controller_from_params(e.initial, GainLayout::Pi, &[("kd".into(), 1.0)]).is_err());
    }

    #[test]
    fn csv_shapes() {
        let e = small();
        let r = ReferenceSignal::constant(1.0, 3);
        let mut cfg = e.problem.clone();
        cfg.horizon = 3;
        let res = rollout(
            &Plain,
            &cfg.plant,
            &e.backcalc_controller(),
            &r,
            &RolloutConfig::new(3),
            &cfg.limits,
        )
        .unwrap();
        let text = trajectory_csv(&r, &res);
        assert_eq!(text.lines().count(), 4);
        assert!(!text.contains('\r'));
        let empty = RolloutResult::<f64> {
            y: vec![],
            u_sat: vec![],
            v: vec![],
            saturated: vec![],
        };
        assert_eq!(trajectory_csv(&r, &empty), format!("{TRAJECTORY_HEADER}\n"));
    }
}
