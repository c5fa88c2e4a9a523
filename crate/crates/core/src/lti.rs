// SPDX-License-Identifier: Apache-2.0

//! SISO plants: transfer functions, controllable canonical realization and
//! exact zero-order-hold discretization.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, RowDVector};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Eval};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LtiError {
    #[error("denominator is empty")]
    EmptyDenominator,
    #[error("denominator leading coefficient is zero")]
    ZeroLeadingCoefficient,
    #[error("transfer function is improper (numerator degree {num} > denominator degree {den})")]
    Improper { num: usize, den: usize },
    #[error(
        "transfer function has direct feedthrough (numerator degree {0} equals denominator degree); \
         the output would depend on the same-step input"
    )]
    Feedthrough(usize),
    #[error("coefficients must be finite")]
    NonFiniteCoefficient,
    #[error("input delay must be finite and >= 0, got {0}")]
    InvalidDelay(f64),
    #[error("sample time must be finite and > 0, got {0}")]
    InvalidSampleTime(f64),
    #[error(
        "input delay {delay} s is not an integer multiple of dt = {dt} s; \
         dt must divide the delay exactly (dt = {delay}/k for integer k >= 1)"
    )]
    FractionalDelay { delay: f64, dt: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Numeric(#[from] AutodiffError),
}

/// `num(s) / den(s) · e^{-delay·s}`, coefficients in descending powers of s.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    num: Vec<f64>,
    den: Vec<f64>,
    delay: f64,
}

impl TransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self, LtiError> {
        Self::with_delay(num, den, 0.0)
    }

    pub fn with_delay(num: Vec<f64>, den: Vec<f64>, delay: f64) -> Result<Self, LtiError> {
        if den.is_empty() {
            return Err(LtiError::EmptyDenominator);
        }
        if num.iter().chain(&den).any(|c| !c.is_finite()) {
            return Err(LtiError::NonFiniteCoefficient);
        }
        if den[0] == 0.0 {
            return Err(LtiError::ZeroLeadingCoefficient);
        }
        if !(delay >= 0.0 && delay.is_finite()) {
            return Err(LtiError::InvalidDelay(delay));
        }
        let first = num.iter().position(|&c| c != 0.0).unwrap_or(num.len());
        let mut num = num[first..].to_vec();
        if num.is_empty() {
            num.push(0.0);
        }
        if num.len() > den.len() {
            return Err(LtiError::Improper {
                num: num.len() - 1,
                den: den.len() - 1,
            });
        }
        Ok(TransferFunction { num, den, delay })
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    pub fn order(&self) -> usize {
        self.den.len() - 1
    }

    /// `num(0)/den(0)`; infinite for plants with a pole at the origin.
    pub fn dc_gain(&self) -> f64 {
        self.num.last().unwrap() / self.den.last().unwrap()
    }
}

/// Continuous-time `ẋ = Ax + Bu(t - delay)`, `y = Cx`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
    pub input_delay: f64,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: RowDVector<f64>,
        input_delay: f64,
    ) -> Result<Self, LtiError> {
        let n = a.nrows();
        for got in [a.ncols(), b.len(), c.len()] {
            if got != n {
                return Err(LtiError::Dimension { expected: n, got });
            }
        }
        if !(input_delay >= 0.0 && input_delay.is_finite()) {
            return Err(LtiError::InvalidDelay(input_delay));
        }
        Ok(StateSpaceModel {
            a,
            b,
            c,
            input_delay,
        })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }
}

/// Controllable canonical (companion) realization of a strictly proper
/// transfer function. The delay is carried over unchanged.
pub fn tf_to_ss(tf: &TransferFunction) -> Result<StateSpaceModel, LtiError> {
    let n = tf.order();
    if tf.num.len() == tf.den.len() && tf.num.iter().any(|&c| c != 0.0) {
        return Err(LtiError::Feedthrough(n));
    }
    let lead = tf.den[0];
    let a_coeffs: Vec<f64> = tf.den[1..].iter().map(|c| c / lead).collect();
    // numerator padded to n coefficients: b_1 s^{n-1} + ... + b_n
    let mut b_coeffs = vec![0.0; n];
    let offset = n - tf.num.len().min(n);
    for (i, c) in tf.num.iter().rev().take(n).rev().enumerate() {
        b_coeffs[offset + i] = c / lead;
    }

    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = -a_coeffs[n - 1 - j];
    }
    let mut b = DVector::zeros(n);
    if n > 0 {
        b[n - 1] = 1.0;
    }
    let c = RowDVector::from_iterator(n, b_coeffs.iter().rev().copied());
    StateSpaceModel::new(a, b, c, tf.delay)
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    const ORDER: usize = 18;
    let n = m.nrows();
    let norm = (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm >= 0.5 {
        scaled_norm /= 2.0;
        squarings += 1;
    }
    let scaled = m / 2f64.powi(squarings as i32);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=ORDER {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Sampled plant `x_{t+1} = A_d x_t + B_d u_{t-d}`, `y_t = C x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: RowDVector<f64>,
    dt: f64,
    delay_steps: usize,
    // row-major copy of `a` for the stepping hot path
    a_rows: Vec<f64>,
}

impl DiscreteModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        c: RowDVector<f64>,
        dt: f64,
        delay_steps: usize,
    ) -> Result<Self, LtiError> {
        let n = a.nrows();
        for got in [a.ncols(), b.len(), c.len()] {
            if got != n {
                return Err(LtiError::Dimension { expected: n, got });
            }
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(LtiError::InvalidSampleTime(dt));
        }
        let a_rows = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)])
            .collect();
        Ok(DiscreteModel {
            a,
            b,
            c,
            dt,
            delay_steps,
            a_rows,
        })
    }

    /// Realizes and discretizes a transfer function in one go.
    pub fn from_tf(tf: &TransferFunction, dt: f64) -> Result<Self, LtiError> {
        zoh_discretize(&tf_to_ss(tf)?, dt)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn delay_steps(&self) -> usize {
        self.delay_steps
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    /// Output for a given state, `C x`.
    pub fn output<E: Eval>(&self, ev: &E, x: &[E::Scalar]) -> Result<E::Scalar, LtiError> {
        self.check_dim(x.len())?;
        Ok(ev.dot(self.c.as_slice(), x)?)
    }

    /// Advances the state by one sample. `u_delayed` is the input that reaches
    /// the plant at this step (after the caller's [`DelayLine`]). Returns the
    /// next state and the output of the current state.
    pub fn step_plant<E: Eval>(
        &self,
        ev: &E,
        x: &[E::Scalar],
        u_delayed: E::Scalar,
    ) -> Result<(Vec<E::Scalar>, E::Scalar), LtiError> {
        let y = self.output(ev, x)?;
        Ok((self.advance(ev, x, u_delayed)?, y))
    }

    /// Next state only, `A_d x + B_d u`.
    pub fn advance<E: Eval>(
        &self,
        ev: &E,
        x: &[E::Scalar],
        u_delayed: E::Scalar,
    ) -> Result<Vec<E::Scalar>, LtiError> {
        self.check_dim(x.len())?;
        let n = self.order();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let row = &self.a_rows[i * n..(i + 1) * n];
            let ax = ev.dot(row, x)?;
            let bi = self.b[i];
            next.push(if bi == 0.0 {
                ax
            } else {
                ev.add(ax, ev.scale(bi, u_delayed)?)?
            });
        }
        Ok(next)
    }

    fn check_dim(&self, got: usize) -> Result<(), LtiError> {
        if got != self.order() {
            return Err(LtiError::Dimension {
                expected: self.order(),
                got,
            });
        }
        Ok(())
    }
}

/// Exact ZOH discretization via the exponential of `[[A, B], [0, 0]]·dt`.
pub fn zoh_discretize(ss: &StateSpaceModel, dt: f64) -> Result<DiscreteModel, LtiError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(LtiError::InvalidSampleTime(dt));
    }
    let ratio = ss.input_delay / dt;
    let delay_steps = ratio.round();
    if (ratio - delay_steps).abs() > 1e-9 {
        return Err(LtiError::FractionalDelay {
            delay: ss.input_delay,
            dt,
        });
    }
    let n = ss.order();
    let mut block = DMatrix::zeros(n + 1, n + 1);
    block.view_mut((0, 0), (n, n)).copy_from(&(&ss.a * dt));
    block.view_mut((0, n), (n, 1)).copy_from(&(&ss.b * dt));
    let e = expm(&block);
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let b_d = DVector::from_column_slice(e.view((0, n), (n, 1)).into_owned().as_slice());
    DiscreteModel::new(a_d, b_d, ss.c.clone(), dt, delay_steps as usize)
}

/// Integer-sample input delay line. With zero delay the input passes through.
#[derive(Debug, Clone)]
pub struct DelayLine<S> {
    buffer: VecDeque<S>,
}

impl<S: Copy> DelayLine<S> {
    /// A line of `steps` samples, all initialized to `fill`.
    pub fn new(steps: usize, fill: S) -> Self {
        DelayLine {
            buffer: std::iter::repeat(fill).take(steps).collect(),
        }
    }

    /// Pushes the newest input and returns the one due at this step.
    pub fn push(&mut self, u: S) -> S {
        if self.buffer.is_empty() {
            return u;
        }
        self.buffer.push_back(u);
        self.buffer.pop_front().unwrap()
    }
}
