//! Optimization loops: CTC, two-stage Imputer, the autoregressive teacher,
//! and distillation.
//!
//! All loops use Adam with a linear-warmup, inverse-square-root learning
//! rate, clip the global gradient norm, and draw from three independent RNG
//! streams (data order, masking, dropout) derived from one seed.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{sample_mask_with, MaskPolicy, PartialAlignment, TokenSeq};
use crate::config::{get, KeyValues};
use crate::ctc::ctc_loss;
use crate::data::{make_batches, Corpus, Pair, Provenance};
use crate::error::{Error, Result};
use crate::eval::bleu;
use crate::imputer::{imputer_loss, rollin_alignment, sample_uniform_alignment};
use crate::model::{AlignmentModel, Teacher};
use crate::transformer::ParamSet;

/// How the alignment behind each stage-2 training mask is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RollIn {
    /// Best path under the current model's all-MASK lattice.
    Viterbi,
    /// Uniformly random member of the target's alignment set.
    Uniform,
}

impl fmt::Display for RollIn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RollIn::Viterbi => "viterbi",
            RollIn::Uniform => "uniform",
        })
    }
}

impl FromStr for RollIn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viterbi" => Ok(RollIn::Viterbi),
            "uniform" => Ok(RollIn::Uniform),
            other => Err(Error::Config(format!("unknown roll-in {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Ctc,
    Imputer,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Ctc => "ctc",
            TrainMode::Imputer => "imputer",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(TrainMode::Ctc),
            "imputer" => Ok(TrainMode::Imputer),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup: usize,
    pub total_steps: usize,
    /// Number of all-MASK steps before the Bernoulli-mask stage; Imputer
    /// only. 0 starts masking at once, `total_steps` never does.
    pub stage_switch: usize,
    /// Padded source tokens per batch.
    pub token_budget: usize,
    pub seed: u64,
    /// Steps between dev evaluations; the final step is always evaluated.
    pub eval_every: usize,
    /// At most this many dev pairs are decoded per evaluation.
    pub dev_limit: usize,
    /// Decode steps used for dev BLEU.
    pub eval_steps: usize,
    pub clip_norm: f64,
    pub rollin: RollIn,
    /// Average the parameters of this many best dev snapshots; 0 or 1 keeps
    /// the single best.
    pub average: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
            peak_lr: 1e-3,
            warmup: 500,
            total_steps: 5000,
            stage_switch: 2500,
            token_budget: 256,
            seed: 1,
            eval_every: 500,
            dev_limit: 200,
            eval_steps: 1,
            clip_norm: 1.0,
            rollin: RollIn::Viterbi,
            average: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup == 0 || self.total_steps == 0 {
            return fail("warmup and total_steps must be positive".into());
        }
        if self.warmup >= self.total_steps {
            return fail(format!(
                "warmup {} must be below total_steps {}",
                self.warmup, self.total_steps
            ));
        }
        if self.stage_switch > self.total_steps {
            return fail(format!(
                "stage_switch {} exceeds total_steps {}",
                self.stage_switch, self.total_steps
            ));
        }
        if self.token_budget == 0 || self.eval_every == 0 || self.dev_limit == 0 {
            return fail("token_budget, eval_every and dev_limit must be positive".into());
        }
        if self.eval_steps == 0 {
            return fail("eval_steps must be positive".into());
        }
        if !(self.peak_lr > 0.0 && self.eps > 0.0 && self.clip_norm > 0.0) {
            return fail("peak_lr, eps and clip_norm must be positive".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("beta1".into(), self.beta1.to_string()),
            ("beta2".into(), self.beta2.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("peak_lr".into(), self.peak_lr.to_string()),
            ("warmup".into(), self.warmup.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("stage_switch".into(), self.stage_switch.to_string()),
            ("token_budget".into(), self.token_budget.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("dev_limit".into(), self.dev_limit.to_string()),
            ("eval_steps".into(), self.eval_steps.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
            ("rollin".into(), self.rollin.to_string()),
            ("average".into(), self.average.to_string()),
        ]
    }

    /// Overrides fields from `key = value` entries; unknown keys are ignored.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = get(kv, stringify!($field))? { self.$field = v; })*
            };
        }
        set!(
            beta1, beta2, eps, peak_lr, warmup, total_steps, stage_switch, token_budget, seed,
            eval_every, dev_limit, eval_steps, clip_norm, rollin, average
        );
        self.validate()
    }
}

/// Linear warmup to `peak_lr` at `warmup`, then `peak_lr * sqrt(warmup / step)`.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = config.warmup as f64;
    if step <= warmup {
        config.peak_lr * step / warmup
    } else {
        config.peak_lr * (warmup / step).sqrt()
    }
}

/// Adam moments over a flattened parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64, c: &TrainConfig) {
        self.t += 1;
        let g = grads.flatten();
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut(&mut |_, p| {
            for (i, w) in p.data.iter_mut().enumerate() {
                let k = off + i;
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                *w -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
            off += p.len();
        });
    }
}

/// Scales `grads` so that its global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Independent RNG streams derived from one seed.
pub struct Streams {
    pub data: ChaCha8Rng,
    pub mask: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            data: stream(1),
            mask: stream(2),
            dropout: stream(3),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    /// Mean per-sequence loss since the previous row.
    pub loss: f64,
    pub dev_bleu: f64,
}

pub fn render_log(rows: &[LogRow]) -> String {
    let mut out = String::from("step\tlr\tloss\tdev_bleu\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.6e}\t{:.6}\t{:.4}", r.step, r.lr, r.loss, r.dev_bleu);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Best dev-BLEU snapshot (or the average of the best few).
    pub model: M,
    /// Parameters after the last step.
    pub last: M,
    pub best_step: usize,
    pub best_bleu: f64,
    pub log: Vec<LogRow>,
    /// Mean batch loss at every step.
    pub step_losses: Vec<f64>,
    pub skipped_examples: usize,
}

/// Endless stream of index batches, reshuffled every epoch.
struct BatchStream<'a> {
    pairs: &'a [Pair],
    budget: usize,
    queue: Vec<Vec<usize>>,
}

impl BatchStream<'_> {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.queue.is_empty() {
            let mut batches = make_batches(self.pairs, self.budget, rand::Rng::gen(rng));
            batches.shuffle(rng);
            batches.reverse();
            self.queue = batches;
        }
        self.queue.pop().expect("nonempty corpus")
    }
}

/// Keeps the best dev snapshots and picks the final model.
struct Selector<M> {
    keep: usize,
    best: Vec<(f64, usize, M)>,
}

impl<M: Clone> Selector<M> {
    fn offer(&mut self, bleu: f64, step: usize, model: &M) {
        let keep = self.keep.max(1);
        if self.best.len() < keep || bleu > self.best.last().map_or(f64::MIN, |b| b.0) {
            self.best.push((bleu, step, model.clone()));
            self.best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            self.best.truncate(keep);
        }
    }
}

fn check_pairs(corpus: &Corpus, scale: usize) -> Result<()> {
    corpus.validate_lengths(scale).map_err(|e| {
        Error::Corpus(format!("training aborted, corpus violates |y| <= s*|x|: {e}"))
    })
}

/// Dev BLEU with `steps`-step decoding over at most `limit` pairs.
pub fn dev_bleu(model: &AlignmentModel, dev: &Corpus, steps: usize, limit: usize) -> Result<f64> {
    let pairs = &dev.pairs[..dev.len().min(limit)];
    let mut hyps = Vec::with_capacity(pairs.len());
    for p in pairs {
        hyps.push(model.decode(&p.source, steps)?.output);
    }
    let refs: Vec<TokenSeq> = pairs.iter().map(|p| p.target.clone()).collect();
    bleu(&hyps, &refs)
}

/// Fraction of pairs decoded exactly right.
pub fn exact_accuracy(model: &AlignmentModel, corpus: &Corpus, steps: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut hits = 0;
    for p in &corpus.pairs {
        if model.decode(&p.source, steps)?.output == p.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

fn average_models(snapshots: &[(f64, usize, AlignmentModel)]) -> AlignmentModel {
    let mut avg = snapshots[0].2.clone();
    for (_, _, m) in &snapshots[1..] {
        avg.params.add_assign(&m.params);
    }
    avg.params.scale(1.0 / snapshots.len() as f64);
    avg
}

/// Trains a CTC model, or an Imputer in two stages: all-MASK inputs (the
/// CTC objective) for the first `stage_switch` steps, then per example a roll-in
/// alignment, a Bernoulli mask of it, and the constrained loss.
///
/// `model` is the initialization. Before the stage switch the two modes
/// follow identical trajectories for a shared seed.
pub fn train_alignment(
    mut model: AlignmentModel,
    mode: TrainMode,
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
) -> Result<TrainOutcome<AlignmentModel>> {
    config.validate()?;
    let scale = model.config.scale;
    check_pairs(train, scale)?;
    check_pairs(dev, scale)?;
    let width = model.width();
    for p in train.pairs.iter().chain(&dev.pairs) {
        p.source.validate(width)?;
        p.target.validate(width)?;
    }

    let mut streams = Streams::new(config.seed);
    let mut adam = Adam::new(model.params.num_params());
    let mut batches = BatchStream {
        pairs: &train.pairs,
        budget: config.token_budget,
        queue: Vec::new(),
    };
    let mut selector = Selector {
        keep: config.average,
        best: Vec::new(),
    };
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(config.total_steps);
    let mut skipped = 0usize;
    let mut window = (0.0, 0usize);

    for step in 1..=config.total_steps {
        let batch = batches.next(&mut streams.data);
        let stage_two = mode == TrainMode::Imputer && step > config.stage_switch;
        let mut grads = model.params.zeros_like();
        let mut total = 0.0;
        let mut counted = 0usize;
        let n = batch.len() as f64;
        for &i in &batch {
            let pair = &train.pairs[i];
            let partial: Option<PartialAlignment> = if stage_two {
                let a = match config.rollin {
                    RollIn::Viterbi => rollin_alignment(&model.forward_ctc(&pair.source)?, &pair.target)?,
                    RollIn::Uniform => sample_uniform_alignment(
                        &pair.target,
                        model.canvas_len(pair.source.len()),
                        &mut streams.mask,
                    )?,
                };
                Some(sample_mask_with(&a, MaskPolicy::Bernoulli, &mut streams.mask))
            } else {
                None
            };
            let (lattice, cache) =
                model.forward_train(&pair.source, partial.as_ref(), Some(&mut streams.dropout))?;
            let out = match &partial {
                Some(p) => imputer_loss(&lattice, &pair.target, p)?,
                None => ctc_loss(&lattice, &pair.target)?,
            };
            if !out.is_finite() {
                skipped += 1;
                continue;
            }
            total += out.nll;
            counted += 1;
            let g: Vec<f64> = out.grad.iter().map(|v| v / n).collect();
            grads.add_assign(&model.backward(&cache, &g)?);
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = lr_schedule(step, config);
        adam.step(&mut model.params, &grads, lr, config);

        let mean = if counted > 0 { total / counted as f64 } else { f64::NAN };
        step_losses.push(mean);
        window.0 += total;
        window.1 += counted;

        if step % config.eval_every == 0 || step == config.total_steps {
            let bleu = dev_bleu(&model, dev, config.eval_steps, config.dev_limit)?;
            let loss = if window.1 > 0 { window.0 / window.1 as f64 } else { f64::NAN };
            info!("{mode} step {step} lr {lr:.3e} loss {loss:.4} dev_bleu {bleu:.2}");
            log.push(LogRow {
                step,
                lr,
                loss,
                dev_bleu: bleu,
            });
            window = (0.0, 0);
            selector.offer(bleu, step, &model);
        }
    }

    let (best_bleu, best_step) = (selector.best[0].0, selector.best[0].1);
    let chosen = if selector.best.len() > 1 {
        average_models(&selector.best)
    } else {
        selector.best[0].2.clone()
    };
    Ok(TrainOutcome {
        model: chosen,
        last: model,
        best_step,
        best_bleu,
        log,
        step_losses,
        skipped_examples: skipped,
    })
}

pub fn train_ctc(
    model: AlignmentModel,
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
) -> Result<TrainOutcome<AlignmentModel>> {
    train_alignment(model, TrainMode::Ctc, train, dev, config)
}

pub fn train_imputer(
    model: AlignmentModel,
    train: &Corpus,
    dev: &Corpus,
    config: &TrainConfig,
) -> Result<TrainOutcome<AlignmentModel>> {
    train_alignment(model, TrainMode::Imputer, train, dev, config)
}

fn teacher_dev_bleu(teacher: &Teacher, dev: &Corpus, scale: usize, limit: usize) -> Result<f64> {
    let pairs = &dev.pairs[..dev.len().min(limit)];
    let mut hyps = Vec::with_capacity(pairs.len());
    for p in pairs {
        hyps.push(teacher.greedy_decode(&p.source, scale * p.source.len())?);
    }
    let refs: Vec<TokenSeq> = pairs.iter().map(|p| p.target.clone()).collect();
    bleu(&hyps, &refs)
}

/// Fits the autoregressive teacher by teacher-forced cross-entropy. The
/// stage switch does not apply. Dev BLEU uses greedy decoding capped at
/// `scale * |x|` tokens.
pub fn train_teacher(
    mut teacher: Teacher,
    train: &Corpus,
    dev: &Corpus,
    scale: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome<Teacher>> {
    config.validate()?;
    let width = teacher.num_outputs();
    for p in train.pairs.iter().chain(&dev.pairs) {
        p.source.validate(width)?;
        p.target.validate(width)?;
    }
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Empty("teacher corpus"));
    }
    let mut streams = Streams::new(config.seed);
    let mut adam = Adam::new(teacher.params.num_params());
    let mut batches = BatchStream {
        pairs: &train.pairs,
        budget: config.token_budget,
        queue: Vec::new(),
    };
    let mut best: Option<(f64, usize, Teacher)> = None;
    let mut log = Vec::new();
    let mut step_losses = Vec::with_capacity(config.total_steps);
    let mut window = (0.0, 0usize);
    for step in 1..=config.total_steps {
        let batch = batches.next(&mut streams.data);
        let n = batch.len() as f64;
        let mut grads = teacher.params.zeros_like();
        let mut total = 0.0;
        for &i in &batch {
            let p = &train.pairs[i];
            let (nll, mut dlogits, cache) =
                teacher.loss(&p.source, &p.target, Some(&mut streams.dropout))?;
            total += nll;
            dlogits.scale(1.0 / n);
            grads.add_assign(&teacher.backward(&cache, &dlogits)?);
        }
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = lr_schedule(step, config);
        adam.step(&mut teacher.params, &grads, lr, config);
        step_losses.push(total / n);
        window.0 += total;
        window.1 += batch.len();
        if step % config.eval_every == 0 || step == config.total_steps {
            let bleu = teacher_dev_bleu(&teacher, dev, scale, config.dev_limit)?;
            let loss = window.0 / window.1.max(1) as f64;
            info!("teacher step {step} lr {lr:.3e} loss {loss:.4} dev_bleu {bleu:.2}");
            log.push(LogRow {
                step,
                lr,
                loss,
                dev_bleu: bleu,
            });
            window = (0.0, 0);
            if best.as_ref().is_none_or(|b| bleu > b.0) {
                best = Some((bleu, step, teacher.clone()));
            }
        }
    }
    let (best_bleu, best_step, model) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        model,
        last: teacher,
        best_step,
        best_bleu,
        log,
        step_losses,
        skipped_examples: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillReport {
    pub corpus: Corpus,
    pub skipped_empty: usize,
    pub skipped_too_long: usize,
}

/// Replaces each training target with the teacher's greedy decode of its
/// source. Pairs whose decode is empty or does not fit `scale * |x|` frames
/// are dropped and counted.
pub fn distill(teacher: &Teacher, train: &Corpus, scale: usize) -> Result<DistillReport> {
    let mut pairs = Vec::with_capacity(train.len());
    let (mut empty, mut long) = (0, 0);
    for p in &train.pairs {
        let canvas = scale * p.source.len();
        // One token past the canvas is enough to know the decode is too long.
        let y = teacher.greedy_decode(&p.source, canvas + 1)?;
        if y.is_empty() {
            empty += 1;
        } else if y.min_canvas() > canvas {
            long += 1;
        } else {
            pairs.push(Pair {
                source: p.source.clone(),
                target: y,
            });
        }
    }
    if empty + long > 0 {
        info!("distillation skipped {empty} empty and {long} overlong decodes");
    }
    let mut corpus = Corpus::new(pairs, train.split);
    corpus.provenance = Provenance::Distilled;
    Ok(DistillReport {
        corpus,
        skipped_empty: empty,
        skipped_too_long: long,
    })
}
