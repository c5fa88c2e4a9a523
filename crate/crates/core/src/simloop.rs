// SPDX-License-Identifier: Apache-2.0

//! Closed-loop episodes: plant + controller + actuator saturation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Eval, Primal};
use crate::controller::{Controller, ControllerError, LoopState, SaturationLimits};
use crate::lti::{DelayLine, DiscreteModel, LtiError};

/// Output magnitude beyond which an episode is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("rollout diverged at step {step}")]
    Diverged { step: usize },
    #[error("controller failed at step {step}: {source}")]
    Controller { step: usize, source: ControllerError },
    #[error("plant failed at step {step}: {source}")]
    Plant { step: usize, source: LtiError },
    #[error("reference has {len} samples but the horizon is {horizon}")]
    ShortReference { len: usize, horizon: usize },
    #[error("horizon must be at least one step")]
    ZeroHorizon,
    #[error("trajectory and reference lengths differ ({trajectory} vs {reference})")]
    LengthMismatch { trajectory: usize, reference: usize },
    #[error("invalid cost weights: q and r must be >= 0 with q + r > 0 (q = {q}, r = {r})")]
    InvalidWeights { q: f64, r: f64 },
    #[error("initial state has dimension {got}, plant order is {expected}")]
    InitialState { expected: usize, got: usize },
    #[error(transparent)]
    Numeric(#[from] AutodiffError),
}

impl SimError {
    /// Divergence or a non-finite intermediate, both of which the tuner
    /// scores as a failed episode rather than a hard error.
    pub fn is_divergence(&self) -> bool {
        match self {
            SimError::Diverged { .. } | SimError::Numeric(_) => true,
            SimError::Controller { source, .. } => matches!(source, ControllerError::NonFinite { .. }),
            SimError::Plant { source, .. } => matches!(source, LtiError::Numeric(_)),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReferenceKind {
    /// Constant amplitude from t = 0.
    Step,
    /// Piecewise constant, re-drawn every `horizon / 5` steps.
    Switching,
    /// Linear from 0 to the drawn amplitude at the last step.
    Ramp,
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceKind::Step => "step",
            ReferenceKind::Switching => "switching",
            ReferenceKind::Ramp => "ramp",
        })
    }
}

impl FromStr for ReferenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step" => Ok(ReferenceKind::Step),
            "switching" => Ok(ReferenceKind::Switching),
            "ramp" => Ok(ReferenceKind::Ramp),
            other => Err(format!("unknown reference kind `{other}` (expected step, switching or ramp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSignal {
    pub samples: Vec<f64>,
    pub kind: ReferenceKind,
}

impl ReferenceSignal {
    pub fn constant(value: f64, len: usize) -> Self {
        ReferenceSignal {
            samples: vec![value; len],
            kind: ReferenceKind::Step,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        ReferenceSignal {
            samples: self.samples.iter().map(|r| r * c).collect(),
            kind: self.kind,
        }
    }
}

/// Deterministic reference set for a given seed.
pub fn generate_references(
    kind: ReferenceKind,
    limit: f64,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Vec<ReferenceSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| rng.gen_range(-limit..=limit);
    (0..count)
        .map(|_| {
            let samples = match kind {
                ReferenceKind::Step => vec![draw(&mut rng); horizon],
                ReferenceKind::Switching => {
                    let period = (horizon / 5).max(1);
                    let mut out = Vec::with_capacity(horizon);
                    while out.len() < horizon {
                        let level = draw(&mut rng);
                        let n = period.min(horizon - out.len());
                        out.extend(std::iter::repeat(level).take(n));
                    }
                    out
                }
                ReferenceKind::Ramp => {
                    let target = draw(&mut rng);
                    (0..horizon)
                        .map(|t| target * (t + 1) as f64 / horizon as f64)
                        .collect()
                }
            };
            ReferenceSignal { samples, kind }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub horizon: usize,
    /// Plant state at t = 0; zero when absent.
    pub initial_state: Option<Vec<f64>>,
}

impl RolloutConfig {
    pub fn new(horizon: usize) -> Self {
        RolloutConfig {
            horizon,
            initial_state: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    q: f64,
    r: f64,
}

impl CostWeights {
    pub fn new(q: f64, r: f64) -> Result<Self, SimError> {
        if !(q >= 0.0 && r >= 0.0 && q + r > 0.0 && (q + r).is_finite()) {
            return Err(SimError::InvalidWeights { q, r });
        }
        Ok(CostWeights { q, r })
    }

    /// Pure squared tracking error.
    pub fn tracking() -> Self {
        CostWeights { q: 1.0, r: 0.0 }
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn r(&self) -> f64 {
        self.r
    }
}

impl Default for CostWeights {
    fn default() -> Self {
        Self::tracking()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult<S> {
    pub y: Vec<S>,
    pub u_sat: Vec<S>,
    pub v: Vec<S>,
    pub saturated: Vec<bool>,
}

impl<S: Primal> RolloutResult<S> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Primal trajectories.
    pub fn values(&self) -> RolloutResult<f64> {
        let v = |xs: &[S]| xs.iter().map(|x| x.value()).collect();
        RolloutResult {
            y: v(&self.y),
            u_sat: v(&self.u_sat),
            v: v(&self.v),
            saturated: self.saturated.clone(),
        }
    }
}

/// Simulates one episode.
///
/// At every step the output is read from the current state, the controller
/// produces the saturated command, the command enters the input delay line,
/// and the plant advances with the delayed input.
pub fn rollout<E: Eval>(
    ev: &E,
    plant: &DiscreteModel,
    controller: &Controller<E::Scalar>,
    reference: &ReferenceSignal,
    cfg: &RolloutConfig,
    lim: &SaturationLimits,
) -> Result<RolloutResult<E::Scalar>, SimError> {
    let horizon = cfg.horizon;
    if horizon == 0 {
        return Err(SimError::ZeroHorizon);
    }
    if reference.len() < horizon {
        return Err(SimError::ShortReference {
            len: reference.len(),
            horizon,
        });
    }
    let n = plant.order();
    let mut x: Vec<E::Scalar> = match &cfg.initial_state {
        Some(x0) if x0.len() != n => {
            return Err(SimError::InitialState {
                expected: n,
                got: x0.len(),
            })
        }
        Some(x0) => x0.iter().map(|&v| ev.constant(v)).collect(),
        None => vec![ev.constant(0.0); n],
    };
    let mut delay = DelayLine::new(plant.delay_steps(), ev.constant(0.0));
    let mut state = LoopState::zero(ev);
    let mut res = RolloutResult {
        y: Vec::with_capacity(horizon),
        u_sat: Vec::with_capacity(horizon),
        v: Vec::with_capacity(horizon),
        saturated: Vec::with_capacity(horizon),
    };

    for (step, &r) in reference.samples[..horizon].iter().enumerate() {
        let y = plant
            .output(ev, &x)
            .map_err(|source| SimError::Plant { step, source })?;
        if !(y.value().abs() <= DIVERGENCE_THRESHOLD) {
            return Err(SimError::Diverged { step });
        }
        let (u, v) = controller
            .step(ev, &mut state, r, y, lim)
            .map_err(|source| SimError::Controller { step, source })?;
        let u_in = delay.push(u);
        x = plant
            .advance(ev, &x, u_in)
            .map_err(|source| SimError::Plant { step, source })?;

        res.y.push(y);
        res.u_sat.push(u);
        res.v.push(v);
        res.saturated.push(lim.is_saturated(v.value()));
    }
    Ok(res)
}

/// `Σ_t q·(y_t - r_t)² + r·u_t²`.
pub fn cost<E: Eval>(
    ev: &E,
    res: &RolloutResult<E::Scalar>,
    reference: &ReferenceSignal,
    w: &CostWeights,
) -> Result<E::Scalar, SimError> {
    if reference.len() < res.len() {
        return Err(SimError::LengthMismatch {
            trajectory: res.len(),
            reference: reference.len(),
        });
    }
    let mut total = ev.constant(0.0);
    for t in 0..res.len() {
        if w.q != 0.0 {
            let e = ev.sub(res.y[t], ev.constant(reference.samples[t]))?;
            let mut e2 = ev.square(e)?;
            if w.q != 1.0 {
                e2 = ev.scale(w.q, e2)?;
            }
            total = ev.add(total, e2)?;
        }
        if w.r != 0.0 {
            let u2 = ev.scale(w.r, ev.square(res.u_sat[t])?)?;
            total = ev.add(total, u2)?;
        }
    }
    Ok(total)
}
