//! Softmax, log-sum-exp, GELU, PReLU and entropy kernels.
//!
//! All normalizing kernels act on the last axis. They are compositions of
//! [`Tape`] primitives, so their gradients come from the tape rather than
//! from hand-written rules.
//!
//! The naive softmax exponentiates raw logits:
//!
//! ```text
//! softmax(x)_i = exp(x_i) / sum_j exp(x_j)
//! ```
//!
//! which overflows as soon as some `x_i` exceeds `ln(f64::MAX) ≈ 709.78`.
//! The stabilized path shifts by the row maximum `a` first,
//!
//! ```text
//! lse(x)       = a + ln sum_i exp(x_i - a)
//! softmax(x)_j = exp(x_j - a) / sum_i exp(x_i - a) = exp(x_j - lse(x))
//! ```
//!
//! so every exponent is `<= 0` and the largest term is exactly `1`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard normal CDF, `Φ(x) = erfc(-x/√2) / 2`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `d/dx [x · Φ(x)] = Φ(x) + x · φ(x)`.
pub fn gelu_derivative_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Which softmax the attention layer uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftmaxKind {
    /// Max-shifted, via log-sum-exp.
    #[default]
    Stable,
    /// Literal `exp(x) / sum exp(x)`; overflows for large logits.
    Naive,
}

impl SoftmaxKind {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            SoftmaxKind::Stable => stable_softmax(tape, x),
            SoftmaxKind::Naive => naive_softmax(tape, x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SoftmaxKind::Stable => "stable",
            SoftmaxKind::Naive => "naive",
        }
    }
}

impl std::str::FromStr for SoftmaxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stable" => Ok(SoftmaxKind::Stable),
            "naive" => Ok(SoftmaxKind::Naive),
            other => Err(Error::Config(format!(
                "unknown softmax kind `{other}` (expected stable or naive)"
            ))),
        }
    }
}

fn last_axis(tape: &Tape, x: Var) -> Result<usize> {
    match tape.value(x).rank() {
        0 => Err(Error::dim("softmax/logsumexp needs rank >= 1")),
        r => Ok(r - 1),
    }
}

/// Reshapes a last-axis reduction back to `[.., 1]` so it broadcasts along rows.
fn keep_last(tape: &mut Tape, reduced: Var, full_shape: &[usize]) -> Result<Var> {
    let mut shape = full_shape.to_vec();
    *shape.last_mut().expect("rank >= 1") = 1;
    tape.reshape(reduced, &shape)
}

/// Unshifted softmax along the last axis. Overflow produces `inf`/`NaN`,
/// which flow through unchanged.
pub fn naive_softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    let axis = last_axis(tape, x)?;
    let shape = tape.shape(x).to_vec();
    let e = tape.exp(x)?;
    let total = tape.sum(e, axis)?;
    let total = keep_last(tape, total, &shape)?;
    tape.div(e, total)
}

/// `a + ln Σ exp(x_i − a)` along the last axis with `a` the row maximum.
/// The last axis is removed from the result.
pub fn logsumexp(tape: &mut Tape, x: Var) -> Result<Var> {
    let axis = last_axis(tape, x)?;
    let shape = tape.shape(x).to_vec();
    let row_max = tape.max(x, axis)?;
    let row_max_kept = keep_last(tape, row_max, &shape)?;
    let shifted = tape.sub(x, row_max_kept)?;
    let e = tape.exp(shifted)?;
    let total = tape.sum(e, axis)?;
    // total >= 1 because the maximal entry contributes exp(0).
    let log_total = tape.log(total)?;
    tape.add(log_total, row_max)
}

/// `exp(x_j − a) / Σ_i exp(x_i − a)` along the last axis with `a` the row
/// maximum: finite for every finite input and equal to [`naive_softmax`]
/// wherever the latter does not overflow. Mathematically this is
/// `exp(x_j − lse(x))`; dividing by the shifted sum instead keeps exact
/// results exact (a constant row gives exactly `1/n`).
pub fn stable_softmax(tape: &mut Tape, x: Var) -> Result<Var> {
    let axis = last_axis(tape, x)?;
    let shape = tape.shape(x).to_vec();
    let row_max = tape.max(x, axis)?;
    let row_max = keep_last(tape, row_max, &shape)?;
    let shifted = tape.sub(x, row_max)?;
    let e = tape.exp(shifted)?;
    let total = tape.sum(e, axis)?;
    let total = keep_last(tape, total, &shape)?;
    tape.div(e, total)
}

pub fn gelu(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.gelu(x)
}

pub fn relu(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.relu(x)
}

/// PReLU with per-channel slopes on the last axis; see [`Tape::prelu`].
pub fn prelu(tape: &mut Tape, x: Var, slope: Var) -> Result<Var> {
    tape.prelu(x, slope)
}

/// Shannon entropy `−Σ p ln p` of every row (last axis), with `0 · ln 0 = 0`.
///
/// Rows must be probability vectors: entries in `[0, 1]` and a sum within
/// `1e-6` of one.
pub fn row_entropy(p: &Tensor) -> Result<Tensor> {
    if p.rank() == 0 {
        return Err(Error::dim("row_entropy needs rank >= 1"));
    }
    let mut out = Vec::with_capacity(p.len() / p.shape()[p.rank() - 1]);
    for (r, row) in p.rows().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs().is_nan()
            || (sum - 1.0).abs() > 1e-6
            || row.iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Contract(format!(
                "row {r} is not a probability vector (sum {sum})"
            )));
        }
        let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
        out.push(h.max(0.0));
    }
    let shape = &p.shape()[..p.rank() - 1];
    Tensor::new(shape, out)
}
