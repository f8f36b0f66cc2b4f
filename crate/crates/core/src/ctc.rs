//! Connectionist temporal classification: exact marginalization over all
//! alignments by forward-backward in log space, plus greedy decoding.
//!
//! The same recursion serves the Imputer loss; there the emission set at
//! each observed frame shrinks to the single observed symbol.

use crate::alignment::{blank_augmented, can_skip, collapse_frames, PartialAlignment, TokenSeq};
use crate::error::{Error, Result};

/// Stand-in for `log 0`. Log-probabilities at or below `LOG_ZERO / 2` are
/// treated as impossible.
pub const LOG_ZERO: f64 = -1.0e30;

#[inline]
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo <= LOG_ZERO {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

#[inline]
fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO * 0.5
}

/// Per-frame unnormalized scores over BLANK and the user tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLattice {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
}

impl LogitLattice {
    pub fn new(rows: usize, cols: usize, scores: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols < 2 {
            return Err(Error::Config(format!(
                "lattice must have at least one row and two columns, got {rows}x{cols}"
            )));
        }
        if scores.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: scores.len(),
                context: "lattice scores",
            });
        }
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "lattice entry ({}, {}) is not finite",
                i / cols,
                i % cols
            )));
        }
        Ok(Self { rows, cols, scores })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            scores: vec![0.0; rows * cols],
        }
    }

    /// Canvas length.
    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// Number of symbols per frame (BLANK plus user tokens).
    pub fn width(&self) -> usize {
        self.cols
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.scores[t * self.cols..(t + 1) * self.cols]
    }

    /// Row-wise log-softmax, row-major.
    pub fn log_probs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scores.len());
        for t in 0..self.rows {
            let row = self.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        out
    }

    /// Highest-scoring symbol of row `t`, lowest index on ties.
    pub fn argmax(&self, t: usize) -> usize {
        argmax(self.row(t))
    }

    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.rows).map(|t| self.argmax(t)).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Negative log-likelihood and its gradient with respect to the lattice
/// scores (row-major, same shape as the lattice).
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub nll: f64,
    pub grad: Vec<f64>,
}

impl LossOutput {
    pub fn is_finite(&self) -> bool {
        self.nll.is_finite()
    }
}

/// CTC negative log-likelihood of `y` under `lattice`.
///
/// Returns an infinite loss with a zero gradient when no alignment of the
/// lattice's length collapses to `y`.
pub fn ctc_loss(lattice: &LogitLattice, y: &TokenSeq) -> Result<LossOutput> {
    constrained_loss(lattice, y, None)
}

/// Forward-backward over the blank-augmented target. With a constraint,
/// frames observed in it may only emit their observed symbol.
pub(crate) fn constrained_loss(
    lattice: &LogitLattice,
    y: &TokenSeq,
    constraint: Option<&PartialAlignment>,
) -> Result<LossOutput> {
    let (rows, cols) = (lattice.rows, lattice.cols);
    y.validate(cols)?;
    if let Some(c) = constraint {
        if c.len() != rows {
            return Err(Error::LengthMismatch {
                expected: rows,
                actual: c.len(),
                context: "partial alignment vs lattice",
            });
        }
        for &f in c.frames().iter().flatten() {
            if f >= cols {
                return Err(Error::InvalidToken {
                    id: f,
                    limit: cols,
                    context: "observed frame",
                });
            }
        }
    }
    let infeasible = || LossOutput {
        nll: f64::INFINITY,
        grad: vec![0.0; rows * cols],
    };
    if y.min_canvas() > rows {
        return Ok(infeasible());
    }

    let lp = lattice.log_probs();
    let z = blank_augmented(y);
    let states = z.len();
    let emit = |t: usize, s: usize| -> f64 {
        let sym = z[s];
        match constraint.and_then(|c| c.frames()[t]) {
            Some(obs) if obs != sym => LOG_ZERO,
            _ => lp[t * cols + sym],
        }
    };

    let mut alpha = vec![LOG_ZERO; rows * states];
    alpha[0] = emit(0, 0);
    if states > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..rows {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(&z, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = clamp(acc + emit(t, s));
        }
    }
    let last = (rows - 1) * states;
    let mut log_z = alpha[last + states - 1];
    if states > 1 {
        log_z = log_add(log_z, alpha[last + states - 2]);
    }
    if is_log_zero(log_z) {
        return Ok(infeasible());
    }

    let mut beta = vec![LOG_ZERO; rows * states];
    beta[last + states - 1] = emit(rows - 1, states - 1);
    if states > 1 {
        beta[last + states - 2] = emit(rows - 1, states - 2);
    }
    for t in (0..rows - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        for s in 0..states {
            let mut acc = next[s];
            if s + 1 < states {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < states && can_skip(&z, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = clamp(acc + emit(t, s));
        }
    }

    let mut grad = vec![0.0; rows * cols];
    let mut occupancy = vec![LOG_ZERO; cols];
    for t in 0..rows {
        occupancy.iter_mut().for_each(|o| *o = LOG_ZERO);
        for s in 0..states {
            let e = emit(t, s);
            if is_log_zero(e) {
                continue;
            }
            let ab = alpha[t * states + s] + beta[t * states + s] - e;
            occupancy[z[s]] = log_add(occupancy[z[s]], clamp(ab));
        }
        let g = &mut grad[t * cols..(t + 1) * cols];
        for k in 0..cols {
            let post = if is_log_zero(occupancy[k]) {
                0.0
            } else {
                (occupancy[k] - log_z).exp()
            };
            g[k] = lp[t * cols + k].exp() - post;
        }
    }
    Ok(LossOutput { nll: -log_z, grad })
}

#[inline]
fn clamp(x: f64) -> f64 {
    if x < LOG_ZERO {
        LOG_ZERO
    } else {
        x
    }
}

/// Collapse of the row-wise argmax alignment.
pub fn ctc_greedy_decode(lattice: &LogitLattice) -> TokenSeq {
    collapse_frames(&lattice.argmax_path())
}

/// Mean per-sequence loss over a batch; the gradient of each member is
/// scaled by `1 / batch`.
pub fn mean_loss(mut outputs: Vec<LossOutput>) -> (f64, Vec<LossOutput>) {
    let n = outputs.len().max(1) as f64;
    let total: f64 = outputs.iter().map(|o| o.nll).sum();
    for o in &mut outputs {
        o.grad.iter_mut().for_each(|g| *g /= n);
    }
    (total / n, outputs)
}
