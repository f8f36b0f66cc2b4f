//! Imputer: alignment marginalization constrained by a partial alignment,
//! roll-in alignment selection, and iterative top-k decoding.

use rand::Rng;

use crate::alignment::{
    blank_augmented, can_skip, collapse, Alignment, PartialAlignment, TokenSeq, Vocab, BLANK,
};
use crate::ctc::{constrained_loss, log_add, LogitLattice, LossOutput, LOG_ZERO};
use crate::error::{Error, Result};

/// Negative log of the total probability of alignments that collapse to `y`
/// and agree with `partial` at every observed frame.
///
/// With every frame masked this is exactly [`crate::ctc::ctc_loss`]. Returns
/// an infinite loss with zero gradient when the observed frames rule out
/// every alignment of `y`.
pub fn imputer_loss(
    lattice: &LogitLattice,
    y: &TokenSeq,
    partial: &PartialAlignment,
) -> Result<LossOutput> {
    constrained_loss(lattice, y, Some(partial))
}

/// The most probable alignment of `y` under `lattice` (Viterbi).
///
/// Equal scores resolve toward BLANK states during backtracking.
pub fn rollin_alignment(lattice: &LogitLattice, y: &TokenSeq) -> Result<Alignment> {
    let rows = lattice.len();
    let cols = lattice.width();
    y.validate(cols)?;
    if y.min_canvas() > rows {
        return Err(Error::NoAlignment {
            target: y.len(),
            canvas: rows,
        });
    }
    let lp = lattice.log_probs();
    let z = blank_augmented(y);
    let states = z.len();
    let mut score = vec![LOG_ZERO; rows * states];
    let mut back = vec![0usize; rows * states];
    score[0] = lp[z[0]];
    if states > 1 {
        score[1] = lp[z[1]];
    }
    for t in 1..rows {
        for s in 0..states {
            let prev = |p: usize| score[(t - 1) * states + p];
            // Candidates in preference order; later ones must be strictly better.
            let mut best = (LOG_ZERO, s);
            let mut consider = |p: usize| {
                let v = prev(p);
                if v > best.0 {
                    best = (v, p);
                }
            };
            if z[s] == BLANK {
                consider(s);
                if s >= 1 {
                    consider(s - 1);
                }
            } else {
                consider(s - 1);
                consider(s);
                if can_skip(&z, s) {
                    consider(s - 2);
                }
            }
            if best.0 > LOG_ZERO {
                score[t * states + s] = best.0 + lp[t * cols + z[s]];
                back[t * states + s] = best.1;
            }
        }
    }
    let last = (rows - 1) * states;
    let mut s = states - 1;
    if states > 1 && score[last + states - 2] > score[last + states - 1] {
        s = states - 2;
    }
    let mut frames = vec![0; rows];
    for t in (0..rows).rev() {
        frames[t] = z[s];
        if t > 0 {
            s = back[t * states + s];
        }
    }
    Ok(Alignment(frames))
}

/// Draws an alignment of `y` uniformly from all alignments of length
/// `canvas`.
pub fn sample_uniform_alignment<R: Rng + ?Sized>(
    y: &TokenSeq,
    canvas: usize,
    rng: &mut R,
) -> Result<Alignment> {
    if canvas == 0 || y.min_canvas() > canvas {
        return Err(Error::NoAlignment {
            target: y.len(),
            canvas,
        });
    }
    let z = blank_augmented(y);
    let states = z.len();
    // Log path counts from the start.
    let mut count = vec![LOG_ZERO; canvas * states];
    count[0] = 0.0;
    if states > 1 {
        count[1] = 0.0;
    }
    for t in 1..canvas {
        for s in 0..states {
            let p = |q: usize| count[(t - 1) * states + q];
            let mut acc = p(s);
            if s >= 1 {
                acc = log_add(acc, p(s - 1));
            }
            if can_skip(&z, s) {
                acc = log_add(acc, p(s - 2));
            }
            count[t * states + s] = acc;
        }
    }
    let pick = |rng: &mut R, cands: &[usize], row: &[f64]| -> usize {
        let max = cands.iter().map(|&c| row[c]).fold(LOG_ZERO, f64::max);
        let weights: Vec<f64> = cands
            .iter()
            .map(|&c| if row[c] <= LOG_ZERO { 0.0 } else { (row[c] - max).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        for (c, w) in cands.iter().zip(&weights) {
            if u < *w {
                return *c;
            }
            u -= w;
        }
        *cands
            .iter()
            .zip(&weights)
            .rev()
            .find(|(_, w)| **w > 0.0)
            .map(|(c, _)| c)
            .expect("at least one feasible candidate")
    };
    let mut frames = vec![0; canvas];
    let finals: Vec<usize> = if states > 1 {
        vec![states - 1, states - 2]
    } else {
        vec![0]
    };
    let mut s = pick(rng, &finals, &count[(canvas - 1) * states..]);
    for t in (0..canvas).rev() {
        frames[t] = z[s];
        if t > 0 {
            let mut cands = vec![s];
            if s >= 1 {
                cands.push(s - 1);
            }
            if can_skip(&z, s) {
                cands.push(s - 2);
            }
            s = pick(rng, &cands, &count[(t - 1) * states..t * states]);
        }
    }
    Ok(Alignment(frames))
}

/// Number of decoding steps and the most frames committed per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSchedule {
    steps: usize,
    per_step_budget: usize,
    canvas: usize,
}

impl DecodeSchedule {
    /// `steps` steps over a canvas of `canvas` frames, committing at most
    /// `ceil(canvas / steps)` frames per step.
    pub fn new(steps: usize, canvas: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("decode steps must be positive".into()));
        }
        Self::with_budget(steps, canvas.div_ceil(steps).max(1), canvas)
    }

    pub fn with_budget(steps: usize, per_step_budget: usize, canvas: usize) -> Result<Self> {
        if steps == 0 || per_step_budget == 0 {
            return Err(Error::Config(
                "decode steps and per-step budget must be positive".into(),
            ));
        }
        if steps * per_step_budget < canvas {
            return Err(Error::Config(format!(
                "{steps} steps of at most {per_step_budget} frames cannot fill a canvas of {canvas}"
            )));
        }
        Ok(Self {
            steps,
            per_step_budget,
            canvas,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn per_step_budget(&self) -> usize {
        self.per_step_budget
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    /// Frames to commit at step `step` (0-based) when `remaining` frames are
    /// still masked. Spreads the remainder over the steps left so that every
    /// step makes progress and the last step empties the canvas.
    pub fn commits_at(&self, step: usize, remaining: usize) -> usize {
        let left = self.steps.saturating_sub(step).max(1);
        remaining.div_ceil(left).min(self.per_step_budget).min(remaining)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub output: TokenSeq,
    pub alignment: Alignment,
    /// Partial alignment after each step; the last entry is complete.
    pub trace: Vec<PartialAlignment>,
    pub model_calls: usize,
}

/// Iterative top-k decoding.
///
/// Starts from an all-MASK canvas. Each step calls `model_fn` once, takes the
/// argmax symbol and its log-probability at every masked frame, and commits
/// the most confident frames (lower position first on ties). Committed
/// frames never change.
pub fn imputer_decode<F>(
    mut model_fn: F,
    source: &TokenSeq,
    schedule: &DecodeSchedule,
) -> Result<DecodeOutput>
where
    F: FnMut(&TokenSeq, &PartialAlignment) -> Result<LogitLattice>,
{
    let canvas = schedule.canvas();
    let mut partial = PartialAlignment::all_masked(canvas);
    let mut trace = Vec::with_capacity(schedule.steps());
    let mut calls = 0;
    for step in 0..schedule.steps() {
        let lattice = model_fn(source, &partial)?;
        calls += 1;
        if lattice.len() != canvas {
            return Err(Error::LengthMismatch {
                expected: canvas,
                actual: lattice.len(),
                context: "model lattice vs decode canvas",
            });
        }
        let remaining = partial.masked_count();
        let budget = schedule.commits_at(step, remaining);
        if budget > 0 {
            let lp = lattice.log_probs();
            let w = lattice.width();
            let mut candidates: Vec<(usize, usize, f64)> = partial
                .frames()
                .iter()
                .enumerate()
                .filter(|(_, f)| f.is_none())
                .map(|(t, _)| {
                    let row = &lp[t * w..(t + 1) * w];
                    let k = crate::ctc::argmax(row);
                    (t, k, row[k])
                })
                .collect();
            candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(t, k, _) in candidates.iter().take(budget) {
                partial.0[t] = Some(k);
            }
        }
        trace.push(partial.clone());
    }
    let alignment = partial.to_alignment().ok_or_else(|| {
        Error::Config("decode schedule finished with masked frames".into())
    })?;
    Ok(DecodeOutput {
        output: collapse(&alignment),
        alignment,
        trace,
        model_calls: calls,
    })
}

/// One line per step, frames separated by spaces; MASK renders as `▁?` and
/// BLANK as `_`.
pub fn render_trace(vocab: &Vocab, trace: &[PartialAlignment]) -> String {
    let mut out = String::new();
    for p in trace {
        let line: Vec<&str> = p.frames().iter().map(|&f| vocab.render_frame(f)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::enumerate_alignments;
    use crate::ctc::{ctc_greedy_decode, ctc_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LogitLattice {
        let scores = (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect();
        LogitLattice::new(rows, cols, scores).unwrap()
    }

    fn path_logprob(lat: &LogitLattice, a: &Alignment) -> f64 {
        let lp = lat.log_probs();
        a.frames()
            .iter()
            .enumerate()
            .map(|(t, &f)| lp[t * lat.width() + f])
            .sum()
    }

    #[test]
    fn all_mask_equals_ctc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lat = random_lattice(&mut rng, 7, 4);
        let y = TokenSeq(vec![1, 1, 3]);
        let a = imputer_loss(&lat, &y, &PartialAlignment::all_masked(7)).unwrap();
        let b = ctc_loss(&lat, &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fully_observed_is_single_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lat = random_lattice(&mut rng, 6, 4);
        let a = Alignment(vec![0, 2, 2, 0, 3, 3]);
        let y = collapse(&a);
        let out = imputer_loss(&lat, &y, &PartialAlignment::from(&a)).unwrap();
        assert!((out.nll + path_logprob(&lat, &a)).abs() < 1e-12);
    }

    #[test]
    fn incompatible_observation_is_infinite() {
        let lat = LogitLattice::zeros(3, 3);
        let y = TokenSeq(vec![1]);
        let partial = PartialAlignment(vec![Some(2), None, None]);
        let out = imputer_loss(&lat, &y, &partial).unwrap();
        assert!(out.nll.is_infinite());
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_length_mismatch() {
        let lat = LogitLattice::zeros(3, 3);
        assert!(imputer_loss(&lat, &TokenSeq(vec![1]), &PartialAlignment::all_masked(4)).is_err());
    }

    #[test]
    fn rollin_exact_length_returns_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = random_lattice(&mut rng, 3, 4);
        let a = rollin_alignment(&lat, &TokenSeq(vec![1, 3, 2])).unwrap();
        assert_eq!(a, Alignment(vec![1, 3, 2]));
    }

    #[test]
    fn rollin_tie_prefers_blank() {
        let lat = LogitLattice::zeros(2, 3);
        let a = rollin_alignment(&lat, &TokenSeq(vec![1])).unwrap();
        assert_eq!(a, Alignment(vec![1, 0]));
    }

    #[test]
    fn rollin_is_oracle_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let lat = random_lattice(&mut rng, 8, 4);
            let y = TokenSeq(vec![rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)]);
            let best = enumerate_alignments(&y, 8)
                .unwrap()
                .iter()
                .map(|a| path_logprob(&lat, a))
                .fold(f64::NEG_INFINITY, f64::max);
            let got = rollin_alignment(&lat, &y).unwrap();
            assert_eq!(collapse(&got), y);
            assert!((path_logprob(&lat, &got) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn rollin_rejects_infeasible() {
        let lat = LogitLattice::zeros(2, 3);
        assert!(rollin_alignment(&lat, &TokenSeq(vec![1, 1])).is_err());
    }

    #[test]
    fn uniform_sampler_covers_all_alignments_evenly() {
        let y = TokenSeq(vec![1, 2]);
        let all = enumerate_alignments(&y, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut hits = std::collections::HashMap::new();
        let draws = 20_000;
        for _ in 0..draws {
            let a = sample_uniform_alignment(&y, 4, &mut rng).unwrap();
            *hits.entry(a).or_insert(0usize) += 1;
        }
        assert_eq!(hits.len(), all.len());
        let expected = draws as f64 / all.len() as f64;
        for &n in hits.values() {
            assert!((n as f64 - expected).abs() < 0.1 * expected);
        }
    }

    #[test]
    fn schedule_budget() {
        let s = DecodeSchedule::new(4, 8).unwrap();
        assert_eq!(s.per_step_budget(), 2);
        assert!(DecodeSchedule::with_budget(2, 3, 8).is_err());
        assert!(DecodeSchedule::new(0, 8).is_err());
        let s = DecodeSchedule::new(4, 10).unwrap();
        let mut left = 10;
        let mut per = vec![];
        for t in 0..4 {
            let c = s.commits_at(t, left);
            assert!(c <= s.per_step_budget());
            per.push(c);
            left -= c;
        }
        assert_eq!(per, vec![3, 3, 2, 2]);
    }

    #[test]
    fn decode_single_step_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lat = random_lattice(&mut rng, 8, 4);
        let src = TokenSeq(vec![1, 2, 3, 1]);
        let sched = DecodeSchedule::new(1, 8).unwrap();
        let out = imputer_decode(|_, _| Ok(lat.clone()), &src, &sched).unwrap();
        assert_eq!(out.model_calls, 1);
        assert_eq!(out.output, ctc_greedy_decode(&lat));
    }

    #[test]
    fn decode_four_steps_masked_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lat = random_lattice(&mut rng, 8, 4);
        let sched = DecodeSchedule::new(4, 8).unwrap();
        let out = imputer_decode(|_, _| Ok(lat.clone()), &TokenSeq(vec![1; 4]), &sched).unwrap();
        let masked: Vec<usize> = out.trace.iter().map(|p| p.masked_count()).collect();
        assert_eq!(masked, vec![6, 4, 2, 0]);
    }

    #[test]
    fn decode_one_frame_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sched = DecodeSchedule::with_budget(6, 1, 6).unwrap();
        let mut calls = 0;
        let out = imputer_decode(
            |_, p| {
                calls += 1;
                assert_eq!(p.masked_count(), 6 - (calls - 1));
                Ok(random_lattice(&mut rng, 6, 3))
            },
            &TokenSeq(vec![1, 2, 1]),
            &sched,
        )
        .unwrap();
        assert_eq!(calls, 6);
        assert_eq!(out.model_calls, 6);
    }

    #[test]
    fn decode_commits_most_confident_first() {
        // Frame 2 is the most confident, then frame 0.
        let scores = vec![
            3.0, 0.0, 0.0, //
            0.0, 0.5, 0.0, //
            0.0, 0.0, 9.0, //
            1.0, 0.0, 0.0,
        ];
        let lat = LogitLattice::new(4, 3, scores).unwrap();
        let sched = DecodeSchedule::new(2, 4).unwrap();
        let out = imputer_decode(|_, _| Ok(lat.clone()), &TokenSeq(vec![1, 2]), &sched).unwrap();
        assert_eq!(out.trace[0], PartialAlignment(vec![Some(0), None, Some(2), None]));
    }

    #[test]
    fn trace_rendering() {
        let vocab = Vocab::new(["A", "B"]).unwrap();
        let trace = vec![
            PartialAlignment(vec![None, Some(1), None]),
            PartialAlignment(vec![Some(0), Some(1), Some(2)]),
        ];
        assert_eq!(render_trace(&vocab, &trace), "▁? A ▁?\n_ A B\n");
    }
}
