// SPDX-License-Identifier: Apache-2.0

//! Episodic gradient descent on controller parameters.

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{Plain, Tape};
use crate::controller::{Controller, ControllerError, SaturationLimits};
use crate::lti::DiscreteModel;
use crate::simloop::{cost, rollout, CostWeights, ReferenceSignal, RolloutConfig, SimError};

/// Cost assigned to an episode that diverged. Its gradient contribution is
/// zero.
pub const DIVERGED_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TuneError {
    #[error("at least one reference is required")]
    NoReferences,
    #[error("parameter and gradient lengths differ ({params} vs {grads})")]
    LengthMismatch { params: usize, grads: usize },
    #[error("gradient component {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("invalid Adam hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("every training episode diverged in epoch {epoch}")]
    AllDiverged {
        epoch: usize,
        last_good: Box<Controller<f64>>,
    },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: &str| Err(TuneError::InvalidHyper(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        AdamState {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected Adam update, in place. On error neither the
    /// parameters nor the moments change.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), TuneError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TuneError::LengthMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TuneError::NonFiniteGradient { index });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Everything about an episode except the controller and the reference.
#[derive(Debug, Clone)]
pub struct TuningProblem {
    pub plant: DiscreteModel,
    pub limits: SaturationLimits,
    pub horizon: usize,
    pub weights: CostWeights,
}

impl TuningProblem {
    fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig::new(self.horizon)
    }

    /// Plain episode cost; diverged episodes score [`DIVERGED_PENALTY`].
    pub fn episode_cost(&self, controller: &Controller<f64>, reference: &ReferenceSignal) -> Result<f64, SimError> {
        let res = rollout(&Plain, &self.plant, controller, reference, &self.rollout_config(), &self.limits)
            .and_then(|res| cost(&Plain, &res, reference, &self.weights));
        match res {
            Ok(c) => Ok(c),
            Err(e) if e.is_divergence() => Ok(DIVERGED_PENALTY),
            Err(e) => Err(e),
        }
    }

    /// Episode cost and its gradient with respect to `controller.params()`.
    pub fn episode_gradient(
        &self,
        controller: &Controller<f64>,
        reference: &ReferenceSignal,
    ) -> Result<Episode, TuneError> {
        let params = controller.params();
        let tape = Tape::with_capacity(self.horizon * 32);
        let leaves = params
            .iter()
            .map(|&p| tape.var(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(SimError::from)?;
        let taped = controller.with_params(&tape, &leaves)?;
        let outcome = rollout(&tape, &self.plant, &taped, reference, &self.rollout_config(), &self.limits)
            .and_then(|res| cost(&tape, &res, reference, &self.weights));
        let total = match outcome {
            Ok(c) => c,
            Err(e) if e.is_divergence() => return Ok(Episode::diverged(params.len())),
            Err(e) => return Err(e.into()),
        };
        if !total.is_recorded() {
            return Ok(Episode {
                cost: total.value(),
                grad: vec![0.0; params.len()],
                diverged: false,
            });
        }
        let grads = tape.backward(total).map_err(SimError::from)?;
        let grad = grads.wrt_all(&leaves).map_err(SimError::from)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Ok(Episode::diverged(params.len()));
        }
        Ok(Episode {
            cost: total.value(),
            grad,
            diverged: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub cost: f64,
    pub grad: Vec<f64>,
    pub diverged: bool,
}

impl Episode {
    fn diverged(n: usize) -> Self {
        Episode {
            cost: DIVERGED_PENALTY,
            grad: vec![0.0; n],
            diverged: true,
        }
    }
}

/// Mean and population standard deviation of per-reference costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostStats {
    pub mean: f64,
    pub std: f64,
    pub costs: Vec<f64>,
}

impl CostStats {
    pub fn from_costs(costs: Vec<f64>) -> Self {
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
        CostStats {
            mean,
            std: var.sqrt(),
            costs,
        }
    }
}

impl std::fmt::Display for CostStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}±{:.1}", self.mean, self.std)
    }
}

/// Per-reference costs of a fixed controller.
pub fn evaluate(
    problem: &TuningProblem,
    controller: &Controller<f64>,
    refs: &[ReferenceSignal],
) -> Result<CostStats, TuneError> {
    if refs.is_empty() {
        return Err(TuneError::NoReferences);
    }
    let costs = refs
        .par_iter()
        .map(|r| problem.episode_cost(controller, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CostStats::from_costs(costs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuneConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            adam: AdamConfig::default(),
            epochs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    /// Mean training cost before each Adam step.
    pub epoch_costs: Vec<f64>,
    /// Number of diverged training episodes per epoch.
    pub epoch_diverged: Vec<usize>,
    pub tuned: Controller<f64>,
    /// Training-set statistics of the tuned controller.
    pub train: CostStats,
}

/// Full-batch Adam over the training references: every epoch averages the
/// episode gradients of all references and takes one step.
pub fn tune(
    problem: &TuningProblem,
    initial: &Controller<f64>,
    train: &[ReferenceSignal],
    cfg: &TuneConfig,
) -> Result<TuneReport, TuneError> {
    if train.is_empty() {
        return Err(TuneError::NoReferences);
    }
    cfg.adam.validate()?;
    let mut params = initial.params();
    let mut adam = AdamState::new(cfg.adam, params.len());
    let mut controller = initial.clone();
    let mut last_good = initial.clone();
    let mut epoch_costs = Vec::with_capacity(cfg.epochs);
    let mut epoch_diverged = Vec::with_capacity(cfg.epochs);
    let n = train.len() as f64;

    for epoch in 0..cfg.epochs {
        let episodes = train
            .par_iter()
            .map(|r| problem.episode_gradient(&controller, r))
            .collect::<Result<Vec<_>, _>>()?;
        let diverged = episodes.iter().filter(|e| e.diverged).count();
        if diverged == episodes.len() {
            return Err(TuneError::AllDiverged {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        last_good = controller.clone();

        let mut mean_cost = 0.0;
        let mut grad = vec![0.0; params.len()];
        for e in &episodes {
            mean_cost += e.cost;
            for (g, eg) in grad.iter_mut().zip(&e.grad) {
                *g += eg;
            }
        }
        mean_cost /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        epoch_costs.push(mean_cost);
        epoch_diverged.push(diverged);

        adam.step(&mut params, &grad)?;
        controller = controller.replace_params(&params)?;
    }

    let train_stats = evaluate(problem, &controller, train)?;
    Ok(TuneReport {
        epoch_costs,
        epoch_diverged,
        tuned: controller,
        train: train_stats,
    })
}
