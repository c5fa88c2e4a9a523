// SPDX-License-Identifier: Apache-2.0

//! Back-calculation PID controller with static or network-scheduled gains.
//!
//! One step of the controller, with sample time `h`:
//!
//! ```text
//! e     = r - y
//! P     = kp·e
//! D     = α·D_prev - (kd/h)·(y - y_prev)
//! v     = P + I + D
//! u     = clamp(v, u_low, u_high)
//! I'    = I + h·(ki·e + b·(u - v))
//! ```
//!
//! With `h = 1` the gains are per-sample quantities; with `h = dt` they are
//! the usual continuous-time gains. The derivative acts on the measurement
//! so that reference steps do not produce a derivative kick.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Eval, Primal};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("non-finite value in the {term} term: {source}")]
    NonFinite {
        term: &'static str,
        source: AutodiffError,
    },
    #[error("invalid saturation limits: u_low ({low}) must be below u_high ({high})")]
    InvalidLimits { low: f64, high: f64 },
    #[error("filter parameter alpha must lie in [0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("time base must be finite and > 0, got {0}")]
    InvalidTimeBase(f64),
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("gain network needs at least one hidden unit")]
    NoHiddenUnits,
}

fn term<T>(name: &'static str, r: Result<T, AutodiffError>) -> Result<T, ControllerError> {
    r.map_err(|source| ControllerError::NonFinite { term: name, source })
}

/// Actuator range `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationLimits {
    low: f64,
    high: f64,
}

impl SaturationLimits {
    pub fn new(low: f64, high: f64) -> Result<Self, ControllerError> {
        if !(low < high) {
            return Err(ControllerError::InvalidLimits { low, high });
        }
        Ok(SaturationLimits { low, high })
    }

    /// Symmetric range `[-limit, limit]`.
    pub fn symmetric(limit: f64) -> Result<Self, ControllerError> {
        Self::new(-limit, limit)
    }

    /// A range that never saturates.
    pub fn unbounded() -> Self {
        SaturationLimits {
            low: f64::NEG_INFINITY,
            high: f64::INFINITY,
        }
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    /// True when `v` is on or beyond either bound.
    pub fn is_saturated(&self, v: f64) -> bool {
        v <= self.low || v >= self.high
    }
}

/// Which gains are free parameters. The back-calculation gain is always
/// active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainLayout {
    /// kp, ki, b
    Pi,
    /// kp, ki, kd, b
    Pid,
}

impl GainLayout {
    pub fn len(&self) -> usize {
        match self {
            GainLayout::Pi => 3,
            GainLayout::Pid => 4,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self {
            GainLayout::Pi => &["kp", "ki", "b"],
            GainLayout::Pid => &["kp", "ki", "kd", "b"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidGains<S> {
    pub kp: S,
    pub ki: S,
    pub kd: S,
    pub b: S,
    /// Derivative filter pole, in `[0, 1)`.
    pub alpha: f64,
    /// Sample time the gains are expressed against.
    pub time_base: f64,
}

impl PidGains<f64> {
    pub fn new(kp: f64, ki: f64, kd: f64, b: f64) -> Self {
        PidGains {
            kp,
            ki,
            kd,
            b,
            alpha: 0.0,
            time_base: 1.0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_time_base(mut self, h: f64) -> Self {
        self.time_base = h;
        self
    }

    pub fn with_b(mut self, b: f64) -> Self {
        self.b = b;
        self
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(ControllerError::InvalidAlpha(self.alpha));
        }
        if !(self.time_base > 0.0 && self.time_base.is_finite()) {
            return Err(ControllerError::InvalidTimeBase(self.time_base));
        }
        Ok(())
    }

    pub fn lift<E: Eval>(&self, ev: &E) -> PidGains<E::Scalar> {
        PidGains {
            kp: ev.constant(self.kp),
            ki: ev.constant(self.ki),
            kd: ev.constant(self.kd),
            b: ev.constant(self.b),
            alpha: self.alpha,
            time_base: self.time_base,
        }
    }

    /// Active gains in layout order.
    pub fn active(&self, layout: GainLayout) -> Vec<f64> {
        match layout {
            GainLayout::Pi => vec![self.kp, self.ki, self.b],
            GainLayout::Pid => vec![self.kp, self.ki, self.kd, self.b],
        }
    }
}

impl<S: Primal> PidGains<S> {
    pub fn values(&self) -> PidGains<f64> {
        PidGains {
            kp: self.kp.value(),
            ki: self.ki.value(),
            kd: self.kd.value(),
            b: self.b.value(),
            alpha: self.alpha,
            time_base: self.time_base,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState<S> {
    pub integral: S,
    pub prev_derivative: S,
    pub prev_measurement: S,
}

impl<S: Primal> ControllerState<S> {
    pub fn zero<E: Eval<Scalar = S>>(ev: &E) -> Self {
        ControllerState {
            integral: ev.constant(0.0),
            prev_derivative: ev.constant(0.0),
            prev_measurement: ev.constant(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput<S> {
    pub state: ControllerState<S>,
    pub u_sat: S,
    pub v: S,
}

/// One back-calculation PID update.
pub fn pid_step<E: Eval>(
    ev: &E,
    gains: &PidGains<E::Scalar>,
    state: &ControllerState<E::Scalar>,
    r: f64,
    y: E::Scalar,
    lim: &SaturationLimits,
) -> Result<PidOutput<E::Scalar>, ControllerError> {
    let h = gains.time_base;
    let e = term("error", ev.sub(ev.constant(r), y))?;
    let p = term("proportional", ev.mul(gains.kp, e))?;

    let dy = term("derivative", ev.sub(y, state.prev_measurement))?;
    let mut kd_dy = term("derivative", ev.mul(gains.kd, dy))?;
    if h != 1.0 {
        kd_dy = term("derivative", ev.scale(1.0 / h, kd_dy))?;
    }
    let d = if gains.alpha == 0.0 {
        term("derivative", ev.neg(kd_dy))?
    } else {
        let filtered = term("derivative", ev.scale(gains.alpha, state.prev_derivative))?;
        term("derivative", ev.sub(filtered, kd_dy))?
    };

    let pi = term("command", ev.add(p, state.integral))?;
    let v = term("command", ev.add(pi, d))?;
    let u_sat = term("saturation", ev.clamp(v, lim.low, lim.high))?;

    let sat_err = term("back-calculation", ev.sub(u_sat, v))?;
    let back = term("back-calculation", ev.mul(gains.b, sat_err))?;
    let ki_e = term("integral", ev.mul(gains.ki, e))?;
    let mut inc = term("integral", ev.add(ki_e, back))?;
    if h != 1.0 {
        inc = term("integral", ev.scale(h, inc))?;
    }
    let integral = term("integral", ev.add(state.integral, inc))?;

    Ok(PidOutput {
        state: ControllerState {
            integral,
            prev_derivative: d,
            prev_measurement: y,
        },
        u_sat,
        v,
    })
}

/// Small tanh network that rescales the base gains at every step.
///
/// Inputs are the tracking error and the previous step's saturation error;
/// the `G` linear outputs `o` give `gain_k = base_k · (1 + o_k)`, so a zero
/// output layer reproduces the base controller exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct GainNetwork<S> {
    hidden: usize,
    layout: GainLayout,
    /// 2×H, row-major (input-major).
    w1: Vec<S>,
    b1: Vec<S>,
    /// H×G, row-major (hidden-major).
    w2: Vec<S>,
    b2: Vec<S>,
    base: PidGains<f64>,
}

impl GainNetwork<f64> {
    /// All-zero weights.
    pub fn zeros(base: PidGains<f64>, layout: GainLayout, hidden: usize) -> Result<Self, ControllerError> {
        if hidden == 0 {
            return Err(ControllerError::NoHiddenUnits);
        }
        base.validate()?;
        let g = layout.len();
        Ok(GainNetwork {
            hidden,
            layout,
            w1: vec![0.0; 2 * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * g],
            b2: vec![0.0; g],
            base,
        })
    }

    /// Hidden layer drawn by `sample`, output layer zero.
    pub fn with_hidden_init(
        base: PidGains<f64>,
        layout: GainLayout,
        hidden: usize,
        mut sample: impl FnMut() -> f64,
    ) -> Result<Self, ControllerError> {
        let mut net = Self::zeros(base, layout, hidden)?;
        for w in &mut net.w1 {
            *w = sample();
        }
        Ok(net)
    }
}

impl<S: Copy> GainNetwork<S> {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layout(&self) -> GainLayout {
        self.layout
    }

    pub fn base(&self) -> &PidGains<f64> {
        &self.base
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Flattened as w1, b1, w2, b2.
    pub fn params(&self) -> Vec<S> {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        let g = self.layout.len();
        let mut names = Vec::with_capacity(self.param_count());
        for i in 0..2 {
            for j in 0..self.hidden {
                names.push(format!("net.w1.{i}.{j}"));
            }
        }
        names.extend((0..self.hidden).map(|j| format!("net.b1.{j}")));
        for j in 0..self.hidden {
            for k in 0..g {
                names.push(format!("net.w2.{j}.{k}"));
            }
        }
        names.extend((0..g).map(|k| format!("net.b2.{k}")));
        names
    }

    pub fn with_params<T: Copy>(&self, p: &[T]) -> Result<GainNetwork<T>, ControllerError> {
        if p.len() != self.param_count() {
            return Err(ControllerError::ParamCount {
                expected: self.param_count(),
                got: p.len(),
            });
        }
        let (w1, rest) = p.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        Ok(GainNetwork {
            hidden: self.hidden,
            layout: self.layout,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
            base: self.base,
        })
    }
}

/// Gains scheduled by the network for the current step.
pub fn dynamic_gains<E: Eval>(
    ev: &E,
    net: &GainNetwork<E::Scalar>,
    e_track: E::Scalar,
    e_act: E::Scalar,
) -> Result<PidGains<E::Scalar>, ControllerError> {
    let hn = net.hidden;
    let g = net.layout.len();
    let mut hidden = Vec::with_capacity(hn);
    for j in 0..hn {
        let a = term("gain network", ev.mul(net.w1[j], e_track))?;
        let b = term("gain network", ev.mul(net.w1[hn + j], e_act))?;
        let s = term("gain network", ev.add(a, b))?;
        let s = term("gain network", ev.add(s, net.b1[j]))?;
        hidden.push(term("gain network", ev.tanh(s))?);
    }
    let base = net.base.active(net.layout);
    let mut scaled = Vec::with_capacity(g);
    for k in 0..g {
        let mut o = net.b2[k];
        for (j, &hj) in hidden.iter().enumerate() {
            let w = term("gain network", ev.mul(net.w2[j * g + k], hj))?;
            o = term("gain network", ev.add(o, w))?;
        }
        let factor = term("gain network", ev.add(ev.constant(1.0), o))?;
        scaled.push(term("gain network", ev.scale(base[k], factor))?);
    }
    let kd = match net.layout {
        GainLayout::Pi => ev.constant(net.base.kd),
        GainLayout::Pid => scaled[2],
    };
    Ok(PidGains {
        kp: scaled[0],
        ki: scaled[1],
        kd,
        b: scaled[g - 1],
        alpha: net.base.alpha,
        time_base: net.base.time_base,
    })
}

/// A tunable controller: the static back-calculation PID or its
/// network-scheduled variant.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller<S> {
    Static { gains: PidGains<S>, layout: GainLayout },
    Dynamic(GainNetwork<S>),
}

/// Per-episode controller memory.
#[derive(Debug, Clone, Copy)]
pub struct LoopState<S> {
    pub pid: ControllerState<S>,
    /// `u_sat - v` of the previous step, fed to the gain network.
    pub prev_saturation_error: S,
}

impl<S: Primal> LoopState<S> {
    pub fn zero<E: Eval<Scalar = S>>(ev: &E) -> Self {
        LoopState {
            pid: ControllerState::zero(ev),
            prev_saturation_error: ev.constant(0.0),
        }
    }
}

impl Controller<f64> {
    pub fn fixed(gains: PidGains<f64>, layout: GainLayout) -> Self {
        Controller::Static { gains, layout }
    }

    /// Same structure with the free parameters replaced by `p`, which may
    /// live on a tape.
    pub fn with_params<E: Eval>(&self, ev: &E, p: &[E::Scalar]) -> Result<Controller<E::Scalar>, ControllerError> {
        match self {
            Controller::Static { gains, layout } => {
                let expected = layout.len();
                if p.len() != expected {
                    return Err(ControllerError::ParamCount {
                        expected,
                        got: p.len(),
                    });
                }
                let mut lifted = gains.lift(ev);
                lifted.kp = p[0];
                lifted.ki = p[1];
                if *layout == GainLayout::Pid {
                    lifted.kd = p[2];
                }
                lifted.b = p[expected - 1];
                Ok(Controller::Static {
                    gains: lifted,
                    layout: *layout,
                })
            }
            Controller::Dynamic(net) => Ok(Controller::Dynamic(net.with_params(p)?)),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Controller::Static { gains, layout } => gains.active(*layout),
            Controller::Dynamic(net) => net.params(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Controller::Static { layout, .. } => layout.names().iter().map(|s| s.to_string()).collect(),
            Controller::Dynamic(net) => net.param_names(),
        }
    }

    /// Copy with plain parameter values replaced.
    pub fn replace_params(&self, p: &[f64]) -> Result<Self, ControllerError> {
        self.with_params(&crate::autodiff::Plain, p)
    }
}

impl<S: Primal> Controller<S> {
    /// One control step: schedules gains if needed, then runs [`pid_step`].
    pub fn step<E: Eval<Scalar = S>>(
        &self,
        ev: &E,
        state: &mut LoopState<S>,
        r: f64,
        y: S,
        lim: &SaturationLimits,
    ) -> Result<(S, S), ControllerError> {
        let out = match self {
            Controller::Static { gains, .. } => pid_step(ev, gains, &state.pid, r, y, lim)?,
            Controller::Dynamic(net) => {
                let e_track = term("error", ev.sub(ev.constant(r), y))?;
                let gains = dynamic_gains(ev, net, e_track, state.prev_saturation_error)?;
                pid_step(ev, &gains, &state.pid, r, y, lim)?
            }
        };
        state.pid = out.state;
        if matches!(self, Controller::Dynamic(_)) {
            state.prev_saturation_error = term("back-calculation", ev.sub(out.u_sat, out.v))?;
        }
        Ok((out.u_sat, out.v))
    }
}
