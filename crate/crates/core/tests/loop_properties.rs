// SPDX-License-Identifier: Apache-2.0

use pidgrad::autodiff::{Plain, Tape};
use pidgrad::config::{shipped_config, ExperimentConfig};
use pidgrad::controller::{Controller, GainLayout, GainNetwork, SaturationLimits};
use pidgrad::simloop::{cost, rollout, CostWeights, ReferenceSignal, RolloutConfig};
use pidgrad::tuner::TuningProblem;

const SYSTEMS: [&str; 4] = ["system1", "system2", "system3", "system4"];

fn cfg(name: &str) -> ExperimentConfig {
    shipped_config(name).unwrap().unwrap()
}

fn problem(c: &ExperimentConfig, horizon: usize, limits: SaturationLimits) -> TuningProblem {
    TuningProblem {
        plant: c.plant_model().unwrap(),
        limits,
        horizon,
        weights: CostWeights::tracking(),
    }
}

fn switching(level: f64, horizon: usize) -> ReferenceSignal {
    let mut r = ReferenceSignal::constant(level, horizon);
    for (t, s) in r.samples.iter_mut().enumerate() {
        if t >= horizon / 2 {
            *s = -0.5 * level;
        }
    }
    r
}

#[test]
fn gradient_matches_central_differences_on_all_systems() {
    for name in SYSTEMS {
        let c = cfg(name);
        let p = problem(&c, 100, c.limits().unwrap());
        let r = switching(c.reference.limit, 100);
        let controller = Controller::fixed(c.initial_gains(), c.layout());
        let ep = p.episode_gradient(&controller, &r).unwrap();
        assert!(!ep.diverged);
        let params = controller.params();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut q = params.clone();
            q[i] += h;
            let plus = p.episode_cost(&controller.replace_params(&q).unwrap(), &r).unwrap();
            q[i] -= 2.0 * h;
            let minus = p.episode_cost(&controller.replace_params(&q).unwrap(), &r).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            let rel = (ep.grad[i] - fd).abs() / ep.grad[i].abs().max(1.0);
            assert!(rel < 1e-5, "{name} param {i}: analytic {} fd {fd} rel {rel}", ep.grad[i]);
        }
    }
}

#[test]
fn back_calculation_gain_is_irrelevant_without_saturation() {
    for name in SYSTEMS {
        let c = cfg(name);
        let plant = c.plant_model().unwrap();
        let r = ReferenceSignal::constant(c.reference.limit, 500);
        let lim = SaturationLimits::unbounded();
        let runs: Vec<_> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&b| {
                let ctl = Controller::fixed(c.initial_gains().with_b(b), c.layout());
                rollout(&Plain, &plant, &ctl, &r, &RolloutConfig::new(500), &lim).unwrap()
            })
            .collect();
        for run in &runs[1..] {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&run.y), bits(&runs[0].y), "{name}");
            assert_eq!(bits(&run.u_sat), bits(&runs[0].u_sat), "{name}");
            assert!(run.saturated.iter().all(|s| !s));
        }
        let p = problem(&c, 500, lim);
        let ctl = Controller::fixed(c.initial_gains(), c.layout());
        let ep = p.episode_gradient(&ctl, &r).unwrap();
        assert_eq!(*ep.grad.last().unwrap(), 0.0, "{name}: d cost / d b");
    }
}

#[test]
fn closed_loop_is_linear_without_saturation() {
    for name in SYSTEMS {
        let c = cfg(name);
        let plant = c.plant_model().unwrap();
        let lim = SaturationLimits::unbounded();
        let ctl = Controller::fixed(c.initial_gains(), c.layout());
        let r = switching(1.0, 300);
        let base = rollout(&Plain, &plant, &ctl, &r, &RolloutConfig::new(300), &lim).unwrap();
        let scaled = rollout(&Plain, &plant, &ctl, &r.scaled(3.0), &RolloutConfig::new(300), &lim).unwrap();
        let peak = base.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in base.y.iter().zip(&scaled.y) {
            assert!((3.0 * a - b).abs() <= 1e-10 * (3.0 * peak), "{name}");
        }
    }
}

#[test]
fn taped_and_plain_rollouts_agree_bitwise() {
    for name in SYSTEMS {
        let c = cfg(name);
        let plant = c.plant_model().unwrap();
        let lim = c.limits().unwrap();
        let r = switching(c.reference.limit, 200);
        let ctl = Controller::fixed(c.initial_gains(), c.layout());
        let plain = rollout(&Plain, &plant, &ctl, &r, &RolloutConfig::new(200), &lim).unwrap();
        let tape = Tape::new();
        let leaves: Vec<_> = ctl.params().iter().map(|&v| tape.var(v).unwrap()).collect();
        let taped_ctl = ctl.with_params(&tape, &leaves).unwrap();
        let taped = rollout(&tape, &plant, &taped_ctl, &r, &RolloutConfig::new(200), &lim)
            .unwrap()
            .values();
        assert_eq!(plain, taped, "{name}");
        let w = CostWeights::tracking();
        assert_eq!(
            cost(&Plain, &plain, &r, &w).unwrap().to_bits(),
            cost(&tape, &taped_ctl_result(&tape, &plant, &taped_ctl, &r, &lim), &r, &w)
                .unwrap()
                .value()
                .to_bits()
        );
    }
}

fn taped_ctl_result(
    tape: &Tape,
    plant: &pidgrad::DiscreteModel,
    ctl: &Controller<pidgrad::DiffScalar>,
    r: &ReferenceSignal,
    lim: &SaturationLimits,
) -> pidgrad::RolloutResult<pidgrad::DiffScalar> {
    rollout(tape, plant, ctl, r, &RolloutConfig::new(r.len()), lim).unwrap()
}

#[test]
fn actuator_never_leaves_limits() {
    for name in SYSTEMS {
        let c = cfg(name);
        let plant = c.plant_model().unwrap();
        let lim = c.limits().unwrap();
        let ctl = Controller::fixed(c.initial_gains().with_b(0.0), c.layout());
        let res = rollout(&Plain, &plant, &ctl, &switching(c.reference.limit, 400), &RolloutConfig::new(400), &lim)
            .unwrap();
        assert!(res.saturated.iter().any(|&s| s), "{name} should saturate");
        for (u, (v, s)) in res.u_sat.iter().zip(res.v.iter().zip(&res.saturated)) {
            assert!(lim.low() <= *u && *u <= lim.high());
            assert_eq!(*s, !(lim.low() < *v && *v < lim.high()));
        }
    }
}

#[test]
fn zero_weight_network_reproduces_static_controller() {
    for name in SYSTEMS {
        let c = cfg(name);
        let plant = c.plant_model().unwrap();
        let lim = c.limits().unwrap();
        let r = switching(c.reference.limit, 300);
        let gains = c.initial_gains();
        let fixed = Controller::fixed(gains, c.layout());
        let net = Controller::Dynamic(GainNetwork::zeros(gains, c.layout(), 8).unwrap());
        let a = rollout(&Plain, &plant, &fixed, &r, &RolloutConfig::new(300), &lim).unwrap();
        let b = rollout(&Plain, &plant, &net, &r, &RolloutConfig::new(300), &lim).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn windup_raises_the_peak_on_system1() {
    let c = cfg("system1");
    let plant = c.plant_model().unwrap();
    let lim = c.limits().unwrap();
    let r = ReferenceSignal::constant(c.reference.limit, 500);
    let peak = |b: f64| {
        let ctl = Controller::fixed(c.initial_gains().with_b(b), GainLayout::Pi);
        let res = rollout(&Plain, &plant, &ctl, &r, &RolloutConfig::new(500), &lim).unwrap();
        res.y.iter().fold(f64::MIN, |m, &v| m.max(v))
    };
    let without = peak(0.0);
    let with = peak(0.5);
    assert!(without > with, "peak without back-calculation {without}, with {with}");
}

#[test]
fn cost_is_non_negative_and_zero_only_for_perfect_tracking() {
    let c = cfg("system2");
    let plant = c.plant_model().unwrap();
    let ctl = Controller::fixed(c.initial_gains(), c.layout());
    let zero = ReferenceSignal::constant(0.0, 50);
    let lim = c.limits().unwrap();
    let res = rollout(&Plain, &plant, &ctl, &zero, &RolloutConfig::new(50), &lim).unwrap();
    assert_eq!(cost(&Plain, &res, &zero, &CostWeights::tracking()).unwrap(), 0.0);
    let step = ReferenceSignal::constant(1.0, 50);
    let res = rollout(&Plain, &plant, &ctl, &step, &RolloutConfig::new(50), &lim).unwrap();
    assert!(cost(&Plain, &res, &step, &CostWeights::new(1.0, 0.1).unwrap()).unwrap() > 0.0);
}
