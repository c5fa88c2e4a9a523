// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmarks.

use pidgrad::config::shipped_config;
use pidgrad::{Controller, Experiment};

/// Shipped experiment with its references generated from the default seed.
pub fn experiment(name: &str) -> Experiment {
    let cfg = shipped_config(name)
        .unwrap_or_else(|| panic!("no shipped config named {name}"))
        .expect("shipped configs are valid");
    Experiment::new(cfg, None).expect("shipped configs build")
}

/// The back-calculation controller at the configured gains.
pub fn controller(exp: &Experiment) -> Controller<f64> {
    exp.backcalc_controller()
}
