// SPDX-License-Identifier: Apache-2.0

//! Gradient-based tuning of back-calculation PID controllers for saturated
//! linear plants, by reverse-mode differentiation through the closed loop.

pub mod autodiff;
pub mod config;
pub mod controller;
pub mod dfc;
pub mod experiment;
pub mod lti;
pub mod simloop;
pub mod tuner;
pub mod verify;

pub use autodiff::{check_gradient, value_and_grad, AutodiffError, DiffScalar, Eval, Gradients, Plain, ScalarFn, Tape};
pub use config::{load_config, resolve_config, ConfigError, ExperimentConfig};
pub use controller::{
    dynamic_gains, pid_step, Controller, ControllerError, ControllerState, GainLayout, GainNetwork, PidGains,
    SaturationLimits,
};
pub use dfc::{build_augmented, AugmentedModel, DisturbancePolicy, TheoryError};
pub use experiment::{Comparison, ControllerKind, Experiment, ExperimentError};
pub use lti::{tf_to_ss, zoh_discretize, DiscreteModel, LtiError, StateSpaceModel, TransferFunction};
pub use simloop::{
    cost, generate_references, rollout, CostWeights, ReferenceKind, ReferenceSignal, RolloutConfig, RolloutResult,
    SimError,
};
pub use tuner::{evaluate, tune, AdamConfig, AdamState, CostStats, TuneConfig, TuneError, TuneReport, TuningProblem};
