// SPDX-License-Identifier: Apache-2.0

//! PID control as output feedback on an augmented state, and back-calculation
//! as a disturbance feedback policy on the saturation error.
//!
//! The augmented state is `X_t = [x_t; x_{t-1}; i_t]` with `i_{t+1} = i_t + x_t`
//! and outputs `Y_t = [C x_t; C i_t; C (x_t - x_{t-1})]`. For a controller
//! with time base `h`, regulation (`r = 0`) gives `u_t = -K Y_t` with
//! `K = [kp, h·ki, kd/h]`: the integral of `-y` becomes `-h·ki·C i_t` and the
//! measured derivative `-(kd/h)·Δy` is the third row.
//!
//! The saturation error `w_t = sat(v_t) - v_t` enters the augmented dynamics
//! as `B'·w_t`; back-calculation adds `h·b·Σ_{τ<t} w_τ` to the command, which
//! is the disturbance feedback policy with `K_d^[l] = -h·b` for every lag.

use nalgebra::{Complex, DMatrix, DVector, RowDVector, Schur};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Plain;
use crate::controller::{pid_step, Controller, ControllerError, ControllerState, GainLayout, PidGains, SaturationLimits};
use crate::lti::{DelayLine, DiscreteModel, LtiError};
use crate::simloop::{rollout, ReferenceSignal, RolloutConfig, SimError};

/// Slack on the unit circle for marginal-stability checks.
pub const MARGINAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("saturation engaged at step {step}; the output-feedback equivalence is only linear")]
    SaturationEngaged { step: usize },
    #[error("alpha must be 0 for pure output feedback, got {0}")]
    NonZeroAlpha(f64),
    #[error("predictor dynamics are unstable (spectral radius {0})")]
    UnstablePredictor(f64),
    #[error("history length h must be >= 1 and match the predictor count")]
    HistoryLength,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Plant(#[from] LtiError),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), TheoryError> {
    if expected != got {
        return Err(TheoryError::Dimension { what, expected, got });
    }
    Ok(())
}

/// `X_{t+1} = A' X_t + B' u_t`, `Y_t = C' X_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Order of the underlying plant.
    pub n: usize,
    /// Outputs of the underlying plant.
    pub p: usize,
}

pub fn build_augmented(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<AugmentedModel, TheoryError> {
    let n = a.nrows();
    check_dim("A columns", n, a.ncols())?;
    check_dim("B rows", n, b.nrows())?;
    check_dim("C columns", n, c.ncols())?;
    let m = b.ncols();
    let p = c.nrows();
    let eye = DMatrix::<f64>::identity(n, n);

    let mut aa = DMatrix::zeros(3 * n, 3 * n);
    aa.view_mut((0, 0), (n, n)).copy_from(a);
    aa.view_mut((n, 0), (n, n)).copy_from(&eye);
    aa.view_mut((2 * n, 0), (n, n)).copy_from(&eye);
    aa.view_mut((2 * n, 2 * n), (n, n)).copy_from(&eye);

    let mut ba = DMatrix::zeros(3 * n, m);
    ba.view_mut((0, 0), (n, m)).copy_from(b);

    let mut ca = DMatrix::zeros(3 * p, 3 * n);
    ca.view_mut((0, 0), (p, n)).copy_from(c);
    ca.view_mut((p, 2 * n), (p, n)).copy_from(c);
    ca.view_mut((2 * p, 0), (p, n)).copy_from(c);
    ca.view_mut((2 * p, n), (p, n)).copy_from(&(-c));

    Ok(AugmentedModel {
        a: aa,
        b: ba,
        c: ca,
        n,
        p,
    })
}

impl AugmentedModel {
    pub fn from_discrete(plant: &DiscreteModel) -> Result<Self, TheoryError> {
        let n = plant.order();
        let b = DMatrix::from_column_slice(n, 1, plant.b().as_slice());
        let c = DMatrix::from_row_slice(1, n, plant.c().as_slice());
        build_augmented(plant.a(), &b, &c)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `[x0; 0; 0]`: zero history and zero integral.
    pub fn initial_state(&self, x0: &[f64]) -> Result<DVector<f64>, TheoryError> {
        check_dim("initial state", self.n, x0.len())?;
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.n).copy_from_slice(x0);
        Ok(z)
    }
}

/// Output-feedback gain over `[C x; C i; C Δx]` that reproduces a PID acting
/// on `-y`.
pub fn pid_output_gain(gains: &PidGains<f64>) -> RowDVector<f64> {
    let h = gains.time_base;
    RowDVector::from_row_slice(&[gains.kp, h * gains.ki, gains.kd / h])
}

/// Regulates `plant` from `x0` twice: with [`pid_step`] through the ordinary
/// rollout, and with `u = -K Y` on the augmented model. Returns the largest
/// output difference.
pub fn verify_pid_equivalence(
    gains: &PidGains<f64>,
    plant: &DiscreteModel,
    x0: &[f64],
    horizon: usize,
    lim: &SaturationLimits,
) -> Result<f64, TheoryError> {
    if gains.alpha != 0.0 {
        return Err(TheoryError::NonZeroAlpha(gains.alpha));
    }
    let direct = regulate_direct(gains, plant, x0, horizon, lim)?;
    let aug = AugmentedModel::from_discrete(plant)?;
    let k = pid_output_gain(gains);
    let mut state = aug.initial_state(x0)?;
    let mut delay = DelayLine::new(plant.delay_steps(), 0.0);
    let mut worst = 0.0f64;
    for &y_direct in &direct {
        let y = &aug.c * &state;
        worst = worst.max((y[0] - y_direct).abs());
        let u = -(&k * &y)[0];
        let u_in = delay.push(u);
        state = &aug.a * &state + &aug.b * u_in;
    }
    Ok(worst)
}

/// The filtered-derivative controller in controller-state form,
/// `X^c_{t+1} = α X^c_t + K_b Y_t`, `u_t = -K_x X^c_t - K Y_t`, against the
/// direct loop. `X^c` holds the previous derivative term.
pub fn verify_filtered_pid_equivalence(
    gains: &PidGains<f64>,
    plant: &DiscreteModel,
    x0: &[f64],
    horizon: usize,
) -> Result<f64, TheoryError> {
    let lim = SaturationLimits::unbounded();
    let direct = regulate_direct(gains, plant, x0, horizon, &lim)?;
    let aug = AugmentedModel::from_discrete(plant)?;
    let k = pid_output_gain(gains);
    let h = gains.time_base;
    let k_b = RowDVector::from_row_slice(&[0.0, 0.0, -gains.kd / h]);
    let k_x = -gains.alpha;
    let mut state = aug.initial_state(x0)?;
    let mut xc = 0.0;
    let mut delay = DelayLine::new(plant.delay_steps(), 0.0);
    let mut worst = 0.0f64;
    for &y_direct in &direct {
        let y = &aug.c * &state;
        worst = worst.max((y[0] - y_direct).abs());
        let u = -k_x * xc - (&k * &y)[0];
        xc = gains.alpha * xc + (&k_b * &y)[0];
        let u_in = delay.push(u);
        state = &aug.a * &state + &aug.b * u_in;
    }
    Ok(worst)
}

fn regulate_direct(
    gains: &PidGains<f64>,
    plant: &DiscreteModel,
    x0: &[f64],
    horizon: usize,
    lim: &SaturationLimits,
) -> Result<Vec<f64>, TheoryError> {
    check_dim("initial state", plant.order(), x0.len())?;
    let controller = Controller::fixed(*gains, GainLayout::Pid);
    let cfg = RolloutConfig {
        horizon,
        initial_state: Some(x0.to_vec()),
    };
    let res = rollout(
        &Plain,
        plant,
        &controller,
        &ReferenceSignal::constant(0.0, horizon),
        &cfg,
        lim,
    )?;
    if let Some(step) = res.saturated.iter().position(|&s| s) {
        return Err(TheoryError::SaturationEngaged { step });
    }
    Ok(res.y)
}

/// `u_t = -K_c Y_t - Σ_{l=1}^{h} K_d^[l] w_{t-l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbancePolicy {
    pub k_c: RowDVector<f64>,
    /// `K_d^[1..h]`, each acting on one disturbance vector.
    pub k_d: Vec<RowDVector<f64>>,
}

impl DisturbancePolicy {
    pub fn history_len(&self) -> usize {
        self.k_d.len()
    }

    /// Policy output. `history[l - 1]` is `w_{t-l}`; entries beyond the
    /// recorded history count as zero, and entries beyond `h` are ignored.
    pub fn control(&self, y: &DVector<f64>, history: &[DVector<f64>]) -> Result<f64, TheoryError> {
        check_dim("output vector", self.k_c.len(), y.len())?;
        let mut u = -(&self.k_c * y)[0];
        for (k, w) in self.k_d.iter().zip(history) {
            check_dim("disturbance vector", k.len(), w.len())?;
            u -= (k * w)[0];
        }
        Ok(u)
    }
}

/// Free-function form of [`DisturbancePolicy::control`].
pub fn disturbance_feedback_control(
    policy: &DisturbancePolicy,
    y: &DVector<f64>,
    history: &[DVector<f64>],
) -> Result<f64, TheoryError> {
    policy.control(y, history)
}

/// Compares back-calculation against a plain PID (`b = 0`) plus constant-gain
/// feedback of the full saturation-error history, recovered from the actuator
/// model. Returns the largest difference of the saturated inputs.
pub fn verify_backcalc_equivalence(
    gains: &PidGains<f64>,
    plant: &DiscreteModel,
    reference: &ReferenceSignal,
    lim: &SaturationLimits,
    horizon: usize,
) -> Result<f64, TheoryError> {
    if gains.alpha != 0.0 {
        return Err(TheoryError::NonZeroAlpha(gains.alpha));
    }
    let back_calc = rollout(
        &Plain,
        plant,
        &Controller::fixed(*gains, GainLayout::Pid),
        reference,
        &RolloutConfig::new(horizon),
        lim,
    )?;

    let plain_gains = gains.with_b(0.0);
    let policy = DisturbancePolicy {
        k_c: RowDVector::zeros(0),
        k_d: vec![RowDVector::from_element(1, -gains.time_base * gains.b); horizon],
    };
    let no_outputs = DVector::zeros(0);
    let mut history: Vec<DVector<f64>> = Vec::with_capacity(horizon);
    let mut pid = ControllerState::zero(&Plain);
    let mut x = vec![0.0; plant.order()];
    let mut delay = DelayLine::new(plant.delay_steps(), 0.0);
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let y = plant.output(&Plain, &x)?;
        let out = pid_step(&Plain, &plain_gains, &pid, reference.samples[t], y, lim)?;
        pid = out.state;
        let v = out.v + policy.control(&no_outputs, &history)?;
        let u = v.clamp(lim.low(), lim.high());
        history.insert(0, DVector::from_element(1, u - v));
        worst = worst.max((u - back_calc.u_sat[t]).abs());
        x = plant.advance(&Plain, &x, delay.push(u))?;
    }
    Ok(worst)
}

/// State, input and output matrices of the disturbance-augmented system
/// `Z_t = [X_t; w_t; w_{t-1}; …; w_{t-h}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Size of the `X` block.
    pub state_dim: usize,
    /// Size of one disturbance vector.
    pub disturbance_dim: usize,
    pub h: usize,
}

impl ZDynamics {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// The block governing the disturbance history alone.
    pub fn disturbance_block(&self) -> DMatrix<f64> {
        let s = self.state_dim;
        let d = self.dim() - s;
        self.a.view((s, s), (d, d)).into_owned()
    }
}

/// Builds the `Z` dynamics with predictor `w_{t+1} = Σ_i M^[i] w_{t+1-i}`.
/// Each disturbance vector lives in the augmented state space.
pub fn build_z_dynamics(aug: &AugmentedModel, predictor: &[DMatrix<f64>], h: usize) -> Result<ZDynamics, TheoryError> {
    if h == 0 || predictor.len() != h {
        return Err(TheoryError::HistoryLength);
    }
    let s = aug.dim();
    let q = s;
    for m in predictor {
        check_dim("predictor rows", q, m.nrows())?;
        check_dim("predictor columns", q, m.ncols())?;
    }
    let blocks = h + 1;
    let dim = s + blocks * q;
    let eye = DMatrix::<f64>::identity(q, q);

    let mut a = DMatrix::zeros(dim, dim);
    a.view_mut((0, 0), (s, s)).copy_from(&aug.a);
    a.view_mut((0, s), (s, q)).copy_from(&eye);
    for (i, m) in predictor.iter().enumerate() {
        a.view_mut((s, s + i * q), (q, q)).copy_from(m);
    }
    for k in 1..blocks {
        a.view_mut((s + k * q, s + (k - 1) * q), (q, q)).copy_from(&eye);
    }

    let mut b = DMatrix::zeros(dim, aug.b.ncols());
    b.view_mut((0, 0), (s, aug.b.ncols())).copy_from(&aug.b);

    let outs = aug.c.nrows();
    let mut c = DMatrix::zeros(outs + blocks * q, dim);
    c.view_mut((0, 0), (outs, s)).copy_from(&aug.c);
    c.view_mut((outs, s), (blocks * q, blocks * q))
        .copy_from(&DMatrix::identity(blocks * q, blocks * q));

    let z = ZDynamics {
        a,
        b,
        c,
        state_dim: s,
        disturbance_dim: q,
        h,
    };
    let radius = spectral_radius(&z.disturbance_block());
    if radius > 1.0 + MARGINAL_TOL {
        return Err(TheoryError::UnstablePredictor(radius));
    }
    Ok(z)
}

/// Regulates the `Z` system under `u = -K Y^z` and returns the plant output
/// (first row of `Y^z`) at every step. `delay_steps` delays the input as in
/// the plant it was built from.
pub fn simulate_z(
    z: &ZDynamics,
    k: &RowDVector<f64>,
    z0: &DVector<f64>,
    delay_steps: usize,
    horizon: usize,
) -> Result<Vec<f64>, TheoryError> {
    check_dim("Z gain", z.c.nrows(), k.len())?;
    check_dim("Z initial state", z.dim(), z0.len())?;
    let mut state = z0.clone();
    let mut delay = DelayLine::new(delay_steps, 0.0);
    let mut ys = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let y = &z.c * &state;
        ys.push(y[0]);
        let u = -(k * &y)[0];
        state = &z.a * &state + &z.b * delay.push(u);
    }
    Ok(ys)
}

const SCHUR_MAX_ITER: usize = 20_000;

/// Eigenvalues through a real Schur decomposition. The QR iteration deflates
/// relative to the diagonal, which stalls on clusters at zero (nilpotent shift
/// blocks), so the matrix is shifted away from the origin first; a failed
/// attempt is retried on a fixed orthogonal similarity of the shifted matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Vec::new();
    }
    let shift = m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max) + 1.0;
    let shifted = m + DMatrix::<f64>::identity(n, n) * shift;
    let unshift = |s: Schur<f64, nalgebra::Dyn>| -> Vec<Complex<f64>> {
        s.complex_eigenvalues().iter().map(|l| l - shift).collect()
    };
    if let Some(s) = Schur::try_new(shifted.clone(), f64::EPSILON, SCHUR_MAX_ITER) {
        return unshift(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..4 {
        let q = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0)).qr().q();
        let similar = q.transpose() * &shifted * &q;
        if let Some(s) = Schur::try_new(similar, f64::EPSILON, SCHUR_MAX_ITER) {
            return unshift(s);
        }
    }
    panic!("Schur decomposition did not converge for a {n}x{n} matrix");
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|l| l.norm()).fold(0.0, f64::max)
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let tol = 1e-9 * max.max(1.0) * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Eigenvalues `λ` of `a` with `|λ| >= threshold` at which the PBH matrix
/// `[A - λI, B]` loses rank.
pub fn pbh_uncontrollable_modes(a: &DMatrix<f64>, b: &DMatrix<f64>, threshold: f64) -> Vec<Complex<f64>> {
    let n = a.nrows();
    let ac = a.map(|v| Complex::new(v, 0.0));
    let bc = b.map(|v| Complex::new(v, 0.0));
    let mut found: Vec<Complex<f64>> = Vec::new();
    for lambda in eigenvalues(a) {
        if lambda.norm() < threshold || found.iter().any(|f| (f - lambda).norm() < 1e-6) {
            continue;
        }
        let mut pbh = DMatrix::zeros(n, n + b.ncols());
        pbh.view_mut((0, 0), (n, n))
            .copy_from(&(&ac - DMatrix::identity(n, n) * lambda));
        pbh.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&pbh) < n {
            found.push(lambda);
        }
    }
    found
}

/// Every mode on or outside the unit circle is controllable.
pub fn is_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    pbh_uncontrollable_modes(a, b, 1.0 - MARGINAL_TOL).is_empty()
}

/// Every mode strictly outside the unit circle is controllable; modes on the
/// circle may be uncontrollable.
pub fn is_marginally_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    pbh_uncontrollable_modes(a, b, 1.0 + MARGINAL_TOL).is_empty()
}

pub fn is_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_stabilizable(&a.transpose(), &c.transpose())
}

pub fn is_marginally_detectable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    is_marginally_stabilizable(&a.transpose(), &c.transpose())
}
