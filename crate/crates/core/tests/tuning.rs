// SPDX-License-Identifier: Apache-2.0

use std::io::Write;

use pidgrad::config::{load_config, resolve_config, shipped_config, ConfigError};
use pidgrad::controller::{Controller, GainLayout, PidGains, SaturationLimits};
use pidgrad::experiment::Experiment;
use pidgrad::lti::{DiscreteModel, TransferFunction};
use pidgrad::simloop::{CostWeights, ReferenceSignal};
use pidgrad::tuner::{tune, AdamConfig, AdamState, TuneConfig, TuningProblem};
use proptest::prelude::*;

fn integrator_problem() -> TuningProblem {
    let tf = TransferFunction::new(vec![1.0], vec![1.0, 0.0]).unwrap();
    TuningProblem {
        plant: DiscreteModel::from_tf(&tf, 0.1).unwrap(),
        limits: SaturationLimits::symmetric(10.0).unwrap(),
        horizon: 50,
        weights: CostWeights::tracking(),
    }
}

#[test]
fn integrator_cost_falls_steadily() {
    let p = integrator_problem();
    let init = Controller::fixed(PidGains::new(0.5, 0.1, 0.0, 0.0).with_time_base(0.1), GainLayout::Pi);
    let refs = vec![ReferenceSignal::constant(1.0, 50), ReferenceSignal::constant(-0.5, 50)];
    let cfg = TuneConfig {
        adam: AdamConfig::with_lr(0.02),
        epochs: 100,
    };
    let report = tune(&p, &init, &refs, &cfg).unwrap();
    let c = &report.epoch_costs;
    assert!(c.last().unwrap() < &c[0]);
    for w in c[20..].windows(2) {
        assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
    }
    assert!(report.epoch_diverged.iter().all(|&d| d == 0));
}

#[test]
fn tuning_is_deterministic() {
    let exp = Experiment::new(shipped_config("system2").unwrap().unwrap(), Some(3)).unwrap();
    let a = exp.tune_static(Some(5)).unwrap();
    let b = exp.tune_static(Some(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn short_tuning_improves_system1() {
    let exp = Experiment::new(shipped_config("system1").unwrap().unwrap(), Some(7)).unwrap();
    let report = exp.tune_static(Some(20)).unwrap();
    assert_eq!(report.epoch_costs.len(), 20);
    assert!(report.train.mean < report.epoch_costs[0]);
}

proptest! {
    #[test]
    fn adam_step_direction_is_scale_free(
        g in prop::collection::vec(prop_oneof![-10.0f64..-0.01, 0.01f64..10.0], 1..6),
        scale in 0.01f64..100.0,
    ) {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p1 = vec![0.0; g.len()];
        let mut p2 = p1.clone();
        let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
        AdamState::new(cfg, g.len()).step(&mut p1, &g).unwrap();
        AdamState::new(cfg, g.len()).step(&mut p2, &scaled).unwrap();
        for i in 0..g.len() {
            // the first bias-corrected step is -lr·sign(g) up to eps
            prop_assert_eq!(p1[i].signum(), -g[i].signum());
            prop_assert!((p1[i] - p2[i]).abs() < 1e-6);
            prop_assert!((p1[i].abs() - 0.1).abs() < 1e-5);
        }
    }
}

#[test]
fn adam_rejects_bad_gradients_without_moving() {
    let mut s = AdamState::new(AdamConfig::default(), 2);
    let mut p = vec![1.0, 2.0];
    assert!(s.step(&mut p, &[f64::NAN, 0.0]).is_err());
    assert!(s.step(&mut p, &[1.0]).is_err());
    assert_eq!(p, vec![1.0, 2.0]);
    assert_eq!(s.t, 0);
}

fn write_temp(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn config_files_load_and_override_shipped_names() {
    let f = write_temp(
        r#"
name = "custom"
[plant]
num = [1.0]
den = [1.0, 1.0]
dt = 0.05
[limits]
low = -2.0
high = 2.0
[reference]
kind = "ramp"
limit = 1.5
[gains]
kp = 1.0
ki = 0.5
b = 0.1
"#,
    );
    let cfg = load_config(f.path()).unwrap();
    assert_eq!(cfg.name, "custom");
    assert_eq!(cfg.layout(), GainLayout::Pi);
    assert_eq!(cfg.time_base(), 0.05);
    assert_eq!(cfg.reference.count, 30);
    assert_eq!(cfg.reference.train, 20);
    let resolved = resolve_config(f.path().to_str().unwrap()).unwrap();
    assert_eq!(resolved, cfg);
    assert!(resolve_config("system3").is_ok());
    assert!(matches!(resolve_config("no-such-config"), Err(ConfigError::Missing(_))));
}

#[test]
fn invalid_config_files_list_every_violation() {
    let f = write_temp(
        r#"
[plant]
num = [1.0]
den = [1.0, 1.0]
dt = -0.1
[limits]
low = 1.0
high = -1.0
[reference]
kind = "sawtooth"
limit = 1.0
[gains]
kp = 1.0
ki = 0.5
b = 0.1
"#,
    );
    match load_config(f.path()) {
        Err(ConfigError::Invalid { violations, .. }) => {
            assert!(violations.len() >= 3, "{violations:?}");
            let all = violations.join("\n");
            assert!(all.contains("sample time") && all.contains("limits.low") && all.contains("sawtooth"), "{all}");
        }
        other => panic!("expected validation failure, got {other:?}"),
    }
    let empty = write_temp("");
    assert!(matches!(load_config(empty.path()), Err(ConfigError::Parse { .. })));
}
