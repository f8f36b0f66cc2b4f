//! Brute-force and finite-difference checks of the dynamic programs and the
//! model gradients. Backs the `oracle` CLI command and the acceptance suite.
//!
//! The brute-force routes sum path probabilities over explicitly enumerated
//! alignments and never touch the forward-backward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    collapse, count_alignments, enumerate_alignments, sample_mask_with, Alignment, MaskPolicy,
    PartialAlignment, TokenSeq, Vocab,
};
use crate::ctc::{ctc_loss, LogitLattice};
use crate::error::Result;
use crate::imputer::imputer_loss;
use crate::model::{AlignmentModel, ModelConfig};
use crate::transformer::ParamSet;

/// Relative error with an absolute floor on the denominator, so that
/// near-zero gradients are compared on an absolute scale.
pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const GRAD_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for comparing gradients against central differences of
/// a loss near `loss`. Rounding alone puts about `eps * |loss| / FD_STEP` of
/// noise on every numeric entry, so structurally zero gradients would
/// otherwise fail at large losses. Entries below the floor must agree to
/// within ten times that noise.
pub fn fd_floor(loss: f64) -> f64 {
    GRAD_FLOOR.max(1e5 * f64::EPSILON * loss.abs().max(1.0) / FD_STEP)
}

/// `-log` of the summed probability of every alignment of `y` that agrees
/// with `partial` (all alignments when `partial` is `None`).
pub fn brute_force_nll(
    lattice: &LogitLattice,
    y: &TokenSeq,
    partial: Option<&PartialAlignment>,
) -> Result<f64> {
    let lp = lattice.log_probs();
    let w = lattice.width();
    let total: f64 = enumerate_alignments(y, lattice.len())?
        .iter()
        .filter(|a| partial.is_none_or(|p| p.admits(a)))
        .map(|a| {
            a.frames()
                .iter()
                .enumerate()
                .map(|(t, &f)| lp[t * w + f])
                .sum::<f64>()
                .exp()
        })
        .sum();
    Ok(-total.ln())
}

/// Central differences of `f` with respect to every lattice score.
pub fn finite_difference<F>(lattice: &LogitLattice, step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&LogitLattice) -> Result<f64>,
{
    let mut probe = lattice.clone();
    let mut out = Vec::with_capacity(lattice.scores().len());
    for i in 0..lattice.scores().len() {
        let orig = probe.scores()[i];
        probe.scores_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.scores_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.scores_mut()[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    /// Worst observed error under the suite's metric.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl SuiteReport {
    fn new(name: &'static str, cases: usize, worst: f64, tolerance: f64, extra_ok: bool) -> Self {
        Self {
            name,
            cases,
            worst,
            tolerance,
            passed: extra_ok && worst <= tolerance,
            note: String::new(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} cases={:<6} worst={:.3e} tol={:.0e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            if self.note.is_empty() {
                String::new()
            } else {
                format!(" ({})", self.note)
            }
        )
    }
}

/// A random feasible instance: lattice width `|V| + 1` with `|V| <= 4`,
/// `|y| <= 5`, canvas `<= 12`.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (LogitLattice, TokenSeq) {
    loop {
        let vocab = rng.gen_range(1..=4usize);
        let ylen = rng.gen_range(1..=5usize);
        let y = TokenSeq((0..ylen).map(|_| rng.gen_range(1..=vocab)).collect());
        if y.min_canvas() > 12 {
            continue;
        }
        let canvas = rng.gen_range(y.min_canvas()..=12);
        let width = vocab + 1;
        let scores = (0..canvas * width).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let lattice = LogitLattice::new(canvas, width, scores).expect("finite scores");
        return (lattice, y);
    }
}

pub fn ctc_equivalence(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (lat, y) = random_instance(&mut rng);
        let dp = ctc_loss(&lat, &y)?.nll;
        let bf = brute_force_nll(&lat, &y, None)?;
        worst = worst.max(rel_error(dp, bf, 0.0));
    }
    Ok(SuiteReport::new("ctc-vs-enumeration", cases, worst, 1e-8, true))
}

/// Imputer loss against the filtered enumeration, masks drawn by the
/// Bernoulli policy from an enumerated alignment of the target. Also checks
/// that an all-MASK input reproduces the CTC loss to within 1e-12.
pub fn imputer_equivalence(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut all_mask_worst: f64 = 0.0;
    for _ in 0..cases {
        let (lat, y) = random_instance(&mut rng);
        let members = enumerate_alignments(&y, lat.len())?;
        let a = &members[rng.gen_range(0..members.len())];
        let partial = sample_mask_with(a, MaskPolicy::Bernoulli, &mut rng);
        let dp = imputer_loss(&lat, &y, &partial)?.nll;
        let bf = brute_force_nll(&lat, &y, Some(&partial))?;
        worst = worst.max(rel_error(dp, bf, 0.0));

        let all = PartialAlignment::all_masked(lat.len());
        let masked = imputer_loss(&lat, &y, &all)?;
        let plain = ctc_loss(&lat, &y)?;
        let grad_gap = masked
            .grad
            .iter()
            .zip(&plain.grad)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        all_mask_worst = all_mask_worst.max((masked.nll - plain.nll).abs()).max(grad_gap);
    }
    let mut report = SuiteReport::new(
        "imputer-vs-enumeration",
        cases,
        worst,
        1e-8,
        all_mask_worst <= 1e-12,
    );
    report.note = format!("all-mask gap {all_mask_worst:.1e}");
    Ok(report)
}

/// DP gradients against central differences.
pub fn dp_gradient_check(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..cases {
        let (lat, y) = random_instance(&mut rng);
        let (analytic, numeric, loss) = if i % 2 == 0 {
            let out = ctc_loss(&lat, &y)?;
            let fd = finite_difference(&lat, FD_STEP, |l| Ok(ctc_loss(l, &y)?.nll))?;
            (out.grad, fd, out.nll)
        } else {
            let members = enumerate_alignments(&y, lat.len())?;
            let a = &members[rng.gen_range(0..members.len())];
            let partial = sample_mask_with(a, MaskPolicy::Bernoulli, &mut rng);
            let out = imputer_loss(&lat, &y, &partial)?;
            let fd = finite_difference(&lat, FD_STEP, |l| Ok(imputer_loss(l, &y, &partial)?.nll))?;
            (out.grad, fd, out.nll)
        };
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_error(*a, *n, fd_floor(loss)));
        }
    }
    Ok(SuiteReport::new("dp-gradient-vs-fd", cases, worst, 1e-4, true))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        scale: 2,
        dropout: 0.0,
        positional: true,
        max_len: 64,
    }
}

fn nudge(model: &mut AlignmentModel, index: usize, delta: f64) {
    let mut off = 0;
    model.params.visit_mut(&mut |_, m| {
        if index >= off && index < off + m.len() {
            m.data[index - off] += delta;
        }
        off += m.len();
    });
}

/// Full-chain gradient (DP gradient through the model's reverse pass)
/// against central differences on every parameter of a depth-1, width-8
/// model, for both the CTC and the Imputer input paths.
pub fn model_gradient_check(seed: u64) -> Result<SuiteReport> {
    let vocab = Vocab::new(["a", "b", "c"])?;
    let model = AlignmentModel::new(tiny_config(), vocab, seed)?;
    let x = TokenSeq(vec![1, 3, 2]);
    let y = TokenSeq(vec![2, 2, 3]);
    let partial = PartialAlignment(vec![None, Some(2), None, None, Some(0), None]);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for p in [None, Some(&partial)] {
        let loss_of = |m: &AlignmentModel| -> Result<f64> {
            let lat = match p {
                Some(p) => m.forward_imputer(&x, p)?,
                None => m.forward_ctc(&x)?,
            };
            Ok(match p {
                Some(p) => imputer_loss(&lat, &y, p)?.nll,
                None => ctc_loss(&lat, &y)?.nll,
            })
        };
        let (lat, cache) = model.forward_train::<ChaCha8Rng>(&x, p, None)?;
        let dp = match p {
            Some(p) => imputer_loss(&lat, &y, p)?,
            None => ctc_loss(&lat, &y)?,
        };
        let analytic = model.backward(&cache, &dp.grad)?.flatten();
        let mut probe = model.clone();
        let total = analytic.len();
        for i in 0..total {
            let numeric = {
                nudge(&mut probe, i, FD_STEP);
                let up = loss_of(&probe)?;
                nudge(&mut probe, i, -2.0 * FD_STEP);
                let down = loss_of(&probe)?;
                nudge(&mut probe, i, FD_STEP);
                (up - down) / (2.0 * FD_STEP)
            };
            worst = worst.max(rel_error(analytic[i], numeric, fd_floor(dp.nll)));
        }
        checked += total;
    }
    Ok(SuiteReport::new("model-gradient-vs-fd", checked, worst, 1e-3, true))
}

/// Every enumerated alignment collapses back to its target; counts agree.
pub fn collapse_round_trip(cases: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for _ in 0..cases {
        let vocab = rng.gen_range(1..=4usize);
        let ylen = rng.gen_range(1..=5usize);
        let y = TokenSeq((0..ylen).map(|_| rng.gen_range(1..=vocab)).collect());
        let canvas = rng.gen_range(ylen..=12);
        let members = enumerate_alignments(&y, canvas)?;
        if members.len() as u128 != count_alignments(&y, canvas) {
            failures += 1;
        }
        failures += members.iter().filter(|a| collapse(a) != y).count();
    }
    let worked = collapse(&Alignment(vec![0, 1, 1, 0, 1, 2, 2, 3, 0, 4]))
        == TokenSeq(vec![1, 1, 2, 3, 4]);
    let mut report = SuiteReport::new("collapse-round-trip", cases, failures as f64, 0.0, worked);
    report.note = format!("worked example {}", if worked { "ok" } else { "wrong" });
    Ok(report)
}

/// Runs every suite with the acceptance case counts.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        collapse_round_trip(10_000, seed)?,
        ctc_equivalence(1000, seed.wrapping_add(1))?,
        imputer_equivalence(1000, seed.wrapping_add(2))?,
        dp_gradient_check(200, seed.wrapping_add(3))?,
        model_gradient_check(seed.wrapping_add(4))?,
    ])
}
