// SPDX-License-Identifier: Apache-2.0

//! Scalar reverse-mode automatic differentiation.
//!
//! Every numeric routine in this crate is written once against the [`Eval`]
//! trait. Running it with [`Plain`] evaluates plain `f64` arithmetic; running
//! it with a [`Tape`] records each operation so that [`Tape::backward`] can
//! propagate adjoints from a scalar output back to the leaves. Both
//! evaluators share [`Op::forward`], so primal values are bitwise identical
//! between taped and untaped runs.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("operands were recorded on different tapes")]
    MixedTapes,
    #[error("value is not recorded on this tape")]
    NotOnTape,
    #[error("{op} expects {expected} operand(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("division by zero")]
    DivisionByZero,
    #[error("invalid clamp bounds [{lo}, {hi}]")]
    InvalidClamp { lo: f64, hi: f64 },
    #[error("non-finite result in {op}")]
    NonFinite { op: &'static str },
    #[error("gradient step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

/// Primitive scalar operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Tanh,
    Relu,
    Square,
    /// Saturation to `[lo, hi]`. The partial is 1 strictly inside the
    /// interval and 0 on or beyond either bound.
    Clamp { lo: f64, hi: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Square => "square",
            Op::Clamp { .. } => "clamp",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            _ => 1,
        }
    }

    /// Primal value and local partial derivatives with respect to each
    /// operand. Unused partial slots are zero.
    pub fn forward(&self, args: &[f64]) -> Result<(f64, [f64; 2]), AutodiffError> {
        if args.len() != self.arity() {
            return Err(AutodiffError::Arity {
                op: self.name(),
                expected: self.arity(),
                got: args.len(),
            });
        }
        let a = args[0];
        let out = match *self {
            Op::Add => (a + args[1], [1.0, 1.0]),
            Op::Sub => (a - args[1], [1.0, -1.0]),
            Op::Mul => (a * args[1], [args[1], a]),
            Op::Div => {
                let b = args[1];
                if b == 0.0 {
                    return Err(AutodiffError::DivisionByZero);
                }
                (a / b, [1.0 / b, -a / (b * b)])
            }
            Op::Neg => (-a, [-1.0, 0.0]),
            Op::Tanh => {
                let t = a.tanh();
                (t, [1.0 - t * t, 0.0])
            }
            Op::Relu => {
                if a > 0.0 {
                    (a, [1.0, 0.0])
                } else {
                    (0.0, [0.0, 0.0])
                }
            }
            Op::Square => (a * a, [2.0 * a, 0.0]),
            Op::Clamp { lo, hi } => {
                if !(lo <= hi) {
                    return Err(AutodiffError::InvalidClamp { lo, hi });
                }
                if a <= lo {
                    (lo, [0.0, 0.0])
                } else if a >= hi {
                    (hi, [0.0, 0.0])
                } else {
                    (a, [1.0, 0.0])
                }
            }
        };
        if !out.0.is_finite() || !out.1.iter().all(|p| p.is_finite()) {
            return Err(AutodiffError::NonFinite { op: self.name() });
        }
        Ok(out)
    }
}

/// Scalar types that carry a primal `f64` value.
pub trait Primal: Copy + std::fmt::Debug {
    fn value(self) -> f64;
}

impl Primal for f64 {
    fn value(self) -> f64 {
        self
    }
}

/// An arithmetic context: either plain evaluation or recording on a tape.
pub trait Eval {
    type Scalar: Primal;

    /// A value that does not depend on any leaf.
    fn constant(&self, v: f64) -> Self::Scalar;

    fn apply(&self, op: Op, args: &[Self::Scalar]) -> Result<Self::Scalar, AutodiffError>;

    fn add(&self, a: Self::Scalar, b: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Add, &[a, b])
    }

    fn sub(&self, a: Self::Scalar, b: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Sub, &[a, b])
    }

    fn mul(&self, a: Self::Scalar, b: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Mul, &[a, b])
    }

    fn div(&self, a: Self::Scalar, b: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Div, &[a, b])
    }

    fn neg(&self, a: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Neg, &[a])
    }

    fn tanh(&self, a: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Tanh, &[a])
    }

    fn relu(&self, a: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Relu, &[a])
    }

    fn square(&self, a: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Square, &[a])
    }

    fn clamp(&self, a: Self::Scalar, lo: f64, hi: f64) -> Result<Self::Scalar, AutodiffError> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }

    /// `coeff * a` for a constant coefficient.
    fn scale(&self, coeff: f64, a: Self::Scalar) -> Result<Self::Scalar, AutodiffError> {
        self.mul(self.constant(coeff), a)
    }

    /// `Σ coeffs[i] * xs[i]`, skipping exactly-zero coefficients.
    fn dot(&self, coeffs: &[f64], xs: &[Self::Scalar]) -> Result<Self::Scalar, AutodiffError> {
        let mut acc: Option<Self::Scalar> = None;
        for (&c, &x) in coeffs.iter().zip(xs) {
            if c == 0.0 {
                continue;
            }
            let term = self.scale(c, x)?;
            acc = Some(match acc {
                Some(s) => self.add(s, term)?,
                None => term,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(0.0)))
    }
}

/// Untaped `f64` evaluation with the same finiteness checks as a tape.
#[derive(Debug, Clone, Copy, Default)]
pub struct Plain;

impl Eval for Plain {
    type Scalar = f64;

    fn constant(&self, v: f64) -> f64 {
        v
    }

    fn apply(&self, op: Op, args: &[f64]) -> Result<f64, AutodiffError> {
        op.forward(args).map(|(v, _)| v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct NodeRef {
    tape: u32,
    index: u32,
}

/// A scalar that is either a constant or a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffScalar {
    value: f64,
    node: Option<NodeRef>,
}

impl DiffScalar {
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Index of the recorded node, `None` for constants.
    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|n| n.index as usize)
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }
}

impl Primal for DiffScalar {
    fn value(self) -> f64 {
        self.value
    }
}

#[derive(Debug, Clone)]
struct Node {
    // None for leaves.
    op: Option<Op>,
    inputs: [u32; 2],
    partials: [f64; 2],
    len: u8,
}

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Append-only record of scalar operations.
///
/// Operands always reference earlier nodes, so the node order is a valid
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: RefCell<Vec<Node>>,
    values: RefCell<Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            values: RefCell::new(Vec::new()),
        }
    }

    pub fn with_capacity(cap: usize) -> Self {
        let tape = Self::new();
        tape.nodes.borrow_mut().reserve(cap);
        tape.values.borrow_mut().reserve(cap);
        tape
    }

    /// Records a new independent variable.
    pub fn var(&self, value: f64) -> Result<DiffScalar, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(
            Node {
                op: None,
                inputs: [0; 2],
                partials: [0.0; 2],
                len: 0,
            },
            value,
        ))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of leaves recorded with [`Tape::var`].
    pub fn leaf_count(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.op.is_none()).count()
    }

    /// Local partial derivatives of a recorded node with respect to its
    /// recorded operands, in operand order. Constant operands carry no entry.
    pub fn local_partials(&self, s: DiffScalar) -> Result<Vec<f64>, AutodiffError> {
        let idx = self.index_of(s)?;
        let nodes = self.nodes.borrow();
        let node = &nodes[idx];
        Ok(node.partials[..node.len as usize].to_vec())
    }

    /// Recorded operation of a node, `None` for leaves.
    pub fn op_of(&self, s: DiffScalar) -> Result<Option<Op>, AutodiffError> {
        let idx = self.index_of(s)?;
        Ok(self.nodes.borrow()[idx].op)
    }

    fn index_of(&self, s: DiffScalar) -> Result<usize, AutodiffError> {
        match s.node {
            Some(n) if n.tape == self.id => Ok(n.index as usize),
            _ => Err(AutodiffError::NotOnTape),
        }
    }

    fn push(&self, node: Node, value: f64) -> DiffScalar {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(node);
        self.values.borrow_mut().push(value);
        DiffScalar {
            value,
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    /// Gradient of `output` with respect to every node on the tape.
    ///
    /// The tape is left untouched, so several outputs can be differentiated
    /// from one recording.
    pub fn backward(&self, output: DiffScalar) -> Result<Gradients, AutodiffError> {
        let out = self.index_of(output)?;
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; out + 1];
        adjoint[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..node.len as usize {
                adjoint[node.inputs[k] as usize] += a * node.partials[k];
            }
        }
        Ok(Gradients {
            tape: self.id,
            adjoint,
        })
    }
}

impl Eval for Tape {
    type Scalar = DiffScalar;

    fn constant(&self, v: f64) -> DiffScalar {
        DiffScalar {
            value: v,
            node: None,
        }
    }

    fn apply(&self, op: Op, args: &[DiffScalar]) -> Result<DiffScalar, AutodiffError> {
        let mut primal = [0.0; 2];
        for (slot, a) in primal.iter_mut().zip(args) {
            if let Some(n) = a.node {
                if n.tape != self.id {
                    return Err(AutodiffError::MixedTapes);
                }
            }
            *slot = a.value;
        }
        let (value, partials) = op.forward(&primal[..args.len().min(2)])?;
        let mut node = Node {
            op: Some(op),
            inputs: [0; 2],
            partials: [0.0; 2],
            len: 0,
        };
        for (k, a) in args.iter().enumerate() {
            if let Some(n) = a.node {
                let slot = node.len as usize;
                node.inputs[slot] = n.index;
                node.partials[slot] = partials[k];
                node.len += 1;
            }
        }
        if node.len == 0 {
            return Ok(self.constant(value));
        }
        Ok(self.push(node, value))
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tape: u32,
    adjoint: Vec<f64>,
}

impl Gradients {
    /// Derivative of the differentiated output with respect to `s`.
    /// Constants, and nodes recorded after the output, have derivative 0.
    pub fn wrt(&self, s: DiffScalar) -> Result<f64, AutodiffError> {
        match s.node {
            None => Ok(0.0),
            Some(n) if n.tape != self.tape => Err(AutodiffError::MixedTapes),
            Some(n) => Ok(self.adjoint.get(n.index as usize).copied().unwrap_or(0.0)),
        }
    }

    pub fn wrt_all(&self, leaves: &[DiffScalar]) -> Result<Vec<f64>, AutodiffError> {
        leaves.iter().map(|&l| self.wrt(l)).collect()
    }

    /// Raw adjoint by node index.
    pub fn get(&self, node_id: usize) -> f64 {
        self.adjoint.get(node_id).copied().unwrap_or(0.0)
    }
}

/// A scalar function written once for every evaluator.
pub trait ScalarFn {
    fn eval<E: Eval>(&self, ev: &E, params: &[E::Scalar]) -> Result<E::Scalar, AutodiffError>;
}

/// Value and gradient of `f` at `params` via one taped evaluation.
pub fn value_and_grad<F: ScalarFn>(f: &F, params: &[f64]) -> Result<(f64, Vec<f64>), AutodiffError> {
    let tape = Tape::new();
    let leaves = params
        .iter()
        .map(|&p| tape.var(p))
        .collect::<Result<Vec<_>, _>>()?;
    let out = f.eval(&tape, &leaves)?;
    if !out.is_recorded() {
        return Ok((out.value(), vec![0.0; params.len()]));
    }
    let grads = tape.backward(out)?;
    Ok((out.value(), grads.wrt_all(&leaves)?))
}

/// Largest relative disagreement between the taped gradient and central
/// differences, `|analytic - fd| / max(1, |analytic|)` over coordinates.
pub fn check_gradient<F: ScalarFn>(f: &F, params: &[f64], step: f64) -> Result<f64, AutodiffError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let (_, analytic) = value_and_grad(f, params)?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = f.eval(&Plain, &probe)?;
        probe[i] = params[i] - step;
        let minus = f.eval(&Plain, &probe)?;
        probe[i] = params[i];
        let fd = (plus - minus) / (2.0 * step);
        if !fd.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "finite difference",
            });
        }
        worst = worst.max((analytic[i] - fd).abs() / analytic[i].abs().max(1.0));
    }
    Ok(worst)
}
