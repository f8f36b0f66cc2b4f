//! Scoring networks.
//!
//! [`AlignmentModel`] embeds the source, upsamples it `scale`-fold with one
//! affine map per sub-position, superimposes the embedding of a partial
//! alignment (all MASK for the plain CTC pass), and runs a bidirectional self-attention stack with an
//! output projection onto BLANK and the user tokens. There is no
//! encoder-decoder split and no cross-attention.
//!
//! [`Teacher`] is a small decoder-only causal model over
//! `[source, SEP, target prefix]`, used to produce distilled targets. Its
//! position codes restart at SEP and a learned segment vector marks the
//! target side, which makes position-wise source lookups easy to learn.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{PartialAlignment, TokenSeq, Vocab};
use crate::ctc::LogitLattice;
use crate::error::{Error, Result};
use crate::imputer::{imputer_decode, DecodeOutput, DecodeSchedule};
use crate::tensor::{add_matmul_tn, log_softmax_row, matmul, matmul_nt, sinusoidal, Mat};
use crate::transformer::{
    apply_mask, stack_backward, stack_forward, Dropout, ParamSet, StackCache, StackParams,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    /// Canvas scale: each source position owns `scale` frames.
    pub scale: usize,
    pub dropout: f64,
    /// Add sinusoidal position encodings to the stack input.
    pub positional: bool,
    /// Longest input sequence the model accepts.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            scale: 2,
            dropout: 0.1,
            positional: true,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return fail("depth, d_model, d_ff and heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.scale == 0 {
            return fail("canvas scale must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("depth".into(), self.depth.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("scale".into(), self.scale.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("positional".into(), self.positional.to_string()),
            ("max_len".into(), self.max_len.to_string()),
        ]
    }

    /// Overrides fields from `key = value` entries; unknown keys are ignored.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "depth" => self.depth = parse(k, v)?,
                "d_model" => self.d_model = parse(k, v)?,
                "d_ff" => self.d_ff = parse(k, v)?,
                "heads" => self.heads = parse(k, v)?,
                "scale" => self.scale = parse(k, v)?,
                "dropout" => self.dropout = parse(k, v)?,
                "positional" => self.positional = parse(k, v)?,
                "max_len" => self.max_len = parse(k, v)?,
                _ => {}
            }
        }
        self.validate()
    }
}

/// Learnable tensors of an [`AlignmentModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// One row per symbol id: BLANK, user tokens, MASK.
    pub embed: Mat,
    pub up_w: Vec<Mat>,
    pub up_b: Vec<Mat>,
    pub stack: StackParams,
    pub out_w: Mat,
    pub out_b: Mat,
}

impl ParamSet for ModelParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat)) {
        f("embed".into(), &self.embed);
        for (r, (w, b)) in self.up_w.iter().zip(&self.up_b).enumerate() {
            f(format!("upsample{r}.w"), w);
            f(format!("upsample{r}.b"), b);
        }
        self.stack.visit_prefixed("stack.", f);
        f("out.w".into(), &self.out_w);
        f("out.b".into(), &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat)) {
        f("embed".into(), &mut self.embed);
        for (r, (w, b)) in self.up_w.iter_mut().zip(self.up_b.iter_mut()).enumerate() {
            f(format!("upsample{r}.w"), w);
            f(format!("upsample{r}.b"), b);
        }
        self.stack.visit_prefixed_mut("stack.", f);
        f("out.w".into(), &mut self.out_w);
        f("out.b".into(), &mut self.out_b);
    }
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, vocab: &Vocab, rng: &mut R) -> Self {
        let d = config.d_model;
        let width = vocab.lattice_width();
        Self {
            embed: Mat::uniform(width + 1, d, 3f64.sqrt() * 0.5, rng),
            up_w: (0..config.scale).map(|_| Mat::glorot(d, d, rng)).collect(),
            up_b: (0..config.scale).map(|_| Mat::zeros(1, d)).collect(),
            stack: StackParams::init(config.depth, d, config.d_ff, rng),
            out_w: Mat::glorot(d, width, rng),
            out_b: Mat::zeros(1, width),
        }
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    source: Vec<usize>,
    frames: Vec<usize>,
    source_embed: Mat,
    input_drop: Option<Vec<f64>>,
    stack: StackCache,
    hidden: Mat,
}

impl ForwardCache {
    pub fn canvas(&self) -> usize {
        self.hidden.rows
    }
}

/// The CTC / Imputer scoring network.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl AlignmentModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &vocab, &mut rng);
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn canvas_len(&self, source_len: usize) -> usize {
        self.config.scale * source_len
    }

    pub fn width(&self) -> usize {
        self.vocab.lattice_width()
    }

    /// Lattice conditioned on the source only.
    pub fn forward_ctc(&self, source: &TokenSeq) -> Result<LogitLattice> {
        self.forward_train::<ChaCha8Rng>(source, None, None)
            .map(|(l, _)| l)
    }

    /// Lattice conditioned on the source and a partial alignment.
    pub fn forward_imputer(
        &self,
        source: &TokenSeq,
        partial: &PartialAlignment,
    ) -> Result<LogitLattice> {
        self.forward_train::<ChaCha8Rng>(source, Some(partial), None)
            .map(|(l, _)| l)
    }

    /// `steps`-step top-k decode; one step is greedy CTC decoding.
    pub fn decode(&self, source: &TokenSeq, steps: usize) -> Result<DecodeOutput> {
        let schedule = DecodeSchedule::new(steps, self.canvas_len(source.len()))?;
        imputer_decode(|x, p| self.forward_imputer(x, p), source, &schedule)
    }

    /// Forward pass that keeps activations for [`Self::backward`]. Dropout
    /// is active only when `rng` is given.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        source: &TokenSeq,
        partial: Option<&PartialAlignment>,
        rng: Option<&mut R>,
    ) -> Result<(LogitLattice, ForwardCache)> {
        let width = self.width();
        if source.is_empty() {
            return Err(Error::Empty("source sequence"));
        }
        source.validate(width)?;
        let canvas = self.canvas_len(source.len());
        if canvas > self.config.max_len {
            return Err(Error::Config(format!(
                "canvas of {canvas} frames exceeds max_len {}",
                self.config.max_len
            )));
        }
        let frames = match partial {
            Some(p) => {
                if p.len() != canvas {
                    return Err(Error::LengthMismatch {
                        expected: canvas,
                        actual: p.len(),
                        context: "partial alignment vs canvas",
                    });
                }
                for &f in p.frames().iter().flatten() {
                    if f >= width {
                        return Err(Error::InvalidToken {
                            id: f,
                            limit: width,
                            context: "alignment frame",
                        });
                    }
                }
                p.ids(self.vocab.mask_id())
            }
            None => vec![self.vocab.mask_id(); canvas],
        };

        let d = self.config.d_model;
        let s = self.config.scale;
        let p = &self.params;
        let mut source_embed = Mat::zeros(source.len(), d);
        for (i, &id) in source.ids().iter().enumerate() {
            source_embed.row_mut(i).copy_from_slice(p.embed.row(id));
        }
        let mut h0 = Mat::zeros(canvas, d);
        for r in 0..s {
            let mut up = matmul(&source_embed, &p.up_w[r]);
            up.add_row(&p.up_b[r]);
            for i in 0..source.len() {
                h0.row_mut(s * i + r).copy_from_slice(up.row(i));
            }
        }
        for (j, &f) in frames.iter().enumerate() {
            let e = p.embed.row(f);
            h0.row_mut(j).iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        if self.config.positional {
            h0.add_assign(&sinusoidal(canvas, d));
        }
        let mut dropout = rng.map(|rng| Dropout {
            p: self.config.dropout,
            rng,
        });
        let input_drop = dropout.as_mut().and_then(|d| d.mask(h0.len()));
        apply_mask(&mut h0, &input_drop);

        let (hidden, stack) = stack_forward(&p.stack, h0, self.config.heads, false, dropout);
        let mut logits = matmul(&hidden, &p.out_w);
        logits.add_row(&p.out_b);
        let lattice = LogitLattice::new(canvas, width, logits.data)?;
        Ok((
            lattice,
            ForwardCache {
                source: source.ids().to_vec(),
                frames,
                source_embed,
                input_drop,
                stack,
                hidden,
            },
        ))
    }

    /// Exact parameter gradients given the gradient of a scalar loss with
    /// respect to the lattice scores of the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, lattice_grad: &[f64]) -> Result<ModelParams> {
        let width = self.width();
        let canvas = cache.canvas();
        if lattice_grad.len() != canvas * width {
            return Err(Error::LengthMismatch {
                expected: canvas * width,
                actual: lattice_grad.len(),
                context: "lattice gradient",
            });
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let dlogits = Mat::from_vec(canvas, width, lattice_grad.to_vec());
        add_matmul_tn(&mut g.out_w, &cache.hidden, &dlogits);
        dlogits.col_sums_into(&mut g.out_b);
        let dhidden = matmul_nt(&dlogits, &p.out_w);
        let mut dh0 = stack_backward(&p.stack, &cache.stack, &dhidden, &mut g.stack);
        apply_mask(&mut dh0, &cache.input_drop);

        for (j, &f) in cache.frames.iter().enumerate() {
            g.embed
                .row_mut(f)
                .iter_mut()
                .zip(dh0.row(j))
                .for_each(|(a, b)| *a += b);
        }
        let s = self.config.scale;
        let n = cache.source.len();
        let d = self.config.d_model;
        let mut dsource = Mat::zeros(n, d);
        for r in 0..s {
            let mut dup = Mat::zeros(n, d);
            for i in 0..n {
                dup.row_mut(i).copy_from_slice(dh0.row(s * i + r));
            }
            add_matmul_tn(&mut g.up_w[r], &cache.source_embed, &dup);
            dup.col_sums_into(&mut g.up_b[r]);
            dsource.add_assign(&matmul_nt(&dup, &p.up_w[r]));
        }
        for (i, &id) in cache.source.iter().enumerate() {
            g.embed
                .row_mut(id)
                .iter_mut()
                .zip(dsource.row(i))
                .for_each(|(a, b)| *a += b);
        }
        Ok(g)
    }
}

/// Learnable tensors of a [`Teacher`].
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherParams {
    /// Row 0 is SEP, rows `1..=n` the user tokens.
    pub embed: Mat,
    /// Added to SEP and every target-side position.
    pub segment: Mat,
    pub stack: StackParams,
    /// Output column 0 is END, columns `1..=n` the user tokens.
    pub out_w: Mat,
    pub out_b: Mat,
}

impl ParamSet for TeacherParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat)) {
        f("embed".into(), &self.embed);
        f("segment".into(), &self.segment);
        self.stack.visit_prefixed("stack.", f);
        f("out.w".into(), &self.out_w);
        f("out.b".into(), &self.out_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat)) {
        f("embed".into(), &mut self.embed);
        f("segment".into(), &mut self.segment);
        self.stack.visit_prefixed_mut("stack.", f);
        f("out.w".into(), &mut self.out_w);
        f("out.b".into(), &mut self.out_b);
    }
}

/// Index of END among teacher outputs and of SEP among teacher inputs.
pub const TEACHER_END: usize = 0;
pub const TEACHER_SEP: usize = 0;

#[derive(Clone, Debug)]
pub struct TeacherCache {
    tokens: Vec<usize>,
    source_len: usize,
    input_drop: Option<Vec<f64>>,
    stack: StackCache,
    hidden: Mat,
}

/// Decoder-only autoregressive model used as the distillation teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: TeacherParams,
}

impl Teacher {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let n = vocab.num_user() + 1;
        let params = TeacherParams {
            embed: Mat::uniform(n, d, 3f64.sqrt() * 0.5, &mut rng),
            segment: Mat::uniform(1, d, 3f64.sqrt() * 0.5, &mut rng),
            stack: StackParams::init(config.depth, d, config.d_ff, &mut rng),
            out_w: Mat::glorot(d, n, &mut rng),
            out_b: Mat::zeros(1, n),
        };
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.vocab.num_user() + 1
    }

    fn input_tokens(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<usize>> {
        let width = self.num_outputs();
        if source.is_empty() {
            return Err(Error::Empty("source sequence"));
        }
        source.validate(width)?;
        prefix.validate(width)?;
        let len = source.len() + 1 + prefix.len();
        if len > self.config.max_len {
            return Err(Error::Config(format!(
                "teacher input of {len} tokens exceeds max_len {}",
                self.config.max_len
            )));
        }
        let mut tokens = Vec::with_capacity(len);
        tokens.extend_from_slice(source.ids());
        tokens.push(TEACHER_SEP);
        tokens.extend_from_slice(prefix.ids());
        Ok(tokens)
    }

    /// Logits for every position of `[source, SEP, prefix]`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        source: &TokenSeq,
        prefix: &TokenSeq,
        rng: Option<&mut R>,
    ) -> Result<(Mat, TeacherCache)> {
        let tokens = self.input_tokens(source, prefix)?;
        let d = self.config.d_model;
        let p = &self.params;
        let n = source.len();
        let mut h0 = Mat::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            h0.row_mut(i).copy_from_slice(p.embed.row(t));
            if i >= n {
                h0.row_mut(i)
                    .iter_mut()
                    .zip(p.segment.row(0))
                    .for_each(|(a, b)| *a += b);
            }
        }
        if self.config.positional {
            // Positions restart at SEP, so the state predicting target token
            // j carries the same code as source token j.
            let pe = sinusoidal(n.max(tokens.len() - n), d);
            for i in 0..tokens.len() {
                let pos = if i < n { i } else { i - n };
                h0.row_mut(i)
                    .iter_mut()
                    .zip(pe.row(pos))
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut dropout = rng.map(|rng| Dropout {
            p: self.config.dropout,
            rng,
        });
        let input_drop = dropout.as_mut().and_then(|d| d.mask(h0.len()));
        apply_mask(&mut h0, &input_drop);
        let (hidden, stack) = stack_forward(&p.stack, h0, self.config.heads, true, dropout);
        let mut logits = matmul(&hidden, &p.out_w);
        logits.add_row(&p.out_b);
        Ok((
            logits,
            TeacherCache {
                tokens,
                source_len: n,
                input_drop,
                stack,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &TeacherCache, dlogits: &Mat) -> Result<TeacherParams> {
        if dlogits.shape() != (cache.tokens.len(), self.num_outputs()) {
            return Err(Error::LengthMismatch {
                expected: cache.tokens.len() * self.num_outputs(),
                actual: dlogits.len(),
                context: "teacher logit gradient",
            });
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        add_matmul_tn(&mut g.out_w, &cache.hidden, dlogits);
        dlogits.col_sums_into(&mut g.out_b);
        let dhidden = matmul_nt(dlogits, &p.out_w);
        let mut dh0 = stack_backward(&p.stack, &cache.stack, &dhidden, &mut g.stack);
        apply_mask(&mut dh0, &cache.input_drop);
        for (i, &t) in cache.tokens.iter().enumerate() {
            g.embed
                .row_mut(t)
                .iter_mut()
                .zip(dh0.row(i))
                .for_each(|(a, b)| *a += b);
            if i >= cache.source_len {
                g.segment
                    .row_mut(0)
                    .iter_mut()
                    .zip(dh0.row(i))
                    .for_each(|(a, b)| *a += b);
            }
        }
        Ok(g)
    }

    /// Summed cross-entropy of `target` followed by END, with its logit
    /// gradient.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        source: &TokenSeq,
        target: &TokenSeq,
        rng: Option<&mut R>,
    ) -> Result<(f64, Mat, TeacherCache)> {
        let (logits, cache) = self.forward_train(source, target, rng)?;
        let n = self.num_outputs();
        let mut grad = Mat::zeros(logits.rows, n);
        let mut nll = 0.0;
        let first = source.len();
        for step in 0..=target.len() {
            let pos = first + step;
            let gold = target.ids().get(step).copied().unwrap_or(TEACHER_END);
            let lp = log_softmax_row(logits.row(pos));
            nll -= lp[gold];
            let g = grad.row_mut(pos);
            for k in 0..n {
                g[k] = lp[k].exp();
            }
            g[gold] -= 1.0;
        }
        Ok((nll, grad, cache))
    }

    /// Log-probabilities of the next token (END at index 0) after `prefix`.
    pub fn forward_teacher(&self, source: &TokenSeq, prefix: &TokenSeq) -> Result<Vec<f64>> {
        let (logits, _) = self.forward_train::<ChaCha8Rng>(source, prefix, None)?;
        Ok(log_softmax_row(logits.row(logits.rows - 1)))
    }

    /// Greedy decode; stops at END, at `max_target` tokens, or at max_len.
    pub fn greedy_decode(&self, source: &TokenSeq, max_target: usize) -> Result<TokenSeq> {
        let mut out = TokenSeq::default();
        let room = self.config.max_len.saturating_sub(source.len() + 1);
        while out.len() < max_target.min(room) {
            let lp = self.forward_teacher(source, &out)?;
            let next = crate::ctc::argmax(&lp);
            if next == TEACHER_END {
                break;
            }
            out.0.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelConfig, Vocab) {
        let config = ModelConfig {
            depth: 1,
            d_model: 8,
            d_ff: 16,
            heads: 2,
            scale: 2,
            dropout: 0.0,
            positional: true,
            max_len: 64,
        };
        (config, Vocab::new(["a", "b", "c"]).unwrap())
    }

    #[test]
    fn lattice_shape() {
        let (config, vocab) = tiny();
        let m = AlignmentModel::new(config, vocab, 1).unwrap();
        let lat = m.forward_ctc(&TokenSeq(vec![1, 2, 3])).unwrap();
        assert_eq!((lat.len(), lat.width()), (6, 4));
        let lat = m
            .forward_imputer(&TokenSeq(vec![1, 2, 3, 1]), &PartialAlignment::all_masked(8))
            .unwrap();
        assert_eq!((lat.len(), lat.width()), (8, 4));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (config, vocab) = tiny();
        let m = AlignmentModel::new(config, vocab, 1).unwrap();
        assert!(m.forward_ctc(&TokenSeq(vec![1, 9])).is_err());
        assert!(m.forward_ctc(&TokenSeq(vec![0])).is_err());
        assert!(m
            .forward_imputer(&TokenSeq(vec![1, 2]), &PartialAlignment::all_masked(3))
            .is_err());
    }

    #[test]
    fn config_validation() {
        let (mut config, _) = tiny();
        config.heads = 3;
        assert!(config.validate().is_err());
        let (mut config, _) = tiny();
        config.scale = 0;
        assert!(config.validate().is_err());
        let (mut config, _) = tiny();
        config.dropout = 1.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn zero_params_give_uniform_rows_without_positions() {
        let (mut config, vocab) = tiny();
        config.positional = false;
        let mut m = AlignmentModel::new(config, vocab, 1).unwrap();
        m.params.visit_mut(&mut |_, t| t.fill(0.0));
        let lat = m.forward_ctc(&TokenSeq(vec![1, 2, 3])).unwrap();
        for t in 0..lat.len() {
            for v in lat.log_probs()[t * 4..(t + 1) * 4].iter() {
                assert!((v + 4f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ctc_pass_is_the_all_mask_imputer_pass() {
        let (config, vocab) = tiny();
        let m = AlignmentModel::new(config, vocab, 2).unwrap();
        let x = TokenSeq(vec![3, 1, 2]);
        let a = m.forward_ctc(&x).unwrap();
        let b = m.forward_imputer(&x, &PartialAlignment::all_masked(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_alignment_changes_output() {
        let (config, vocab) = tiny();
        let m = AlignmentModel::new(config, vocab, 3).unwrap();
        let x = TokenSeq(vec![1, 2]);
        let p1 = PartialAlignment(vec![None, Some(1), None, None]);
        let p2 = PartialAlignment(vec![None, Some(2), None, None]);
        assert_ne!(m.forward_imputer(&x, &p1).unwrap(), m.forward_imputer(&x, &p2).unwrap());
    }

    #[test]
    fn zero_lattice_grad_gives_zero_param_grad() {
        let (config, vocab) = tiny();
        let m = AlignmentModel::new(config, vocab, 4).unwrap();
        let (lat, cache) = m
            .forward_train::<ChaCha8Rng>(&TokenSeq(vec![1, 2]), None, None)
            .unwrap();
        let g = m.backward(&cache, &vec![0.0; lat.scores().len()]).unwrap();
        assert_eq!(g.sum_sq(), 0.0);
        assert!(m.backward(&cache, &[0.0; 3]).is_err());
    }

    #[test]
    fn ctc_pass_touches_only_source_and_mask_rows() {
        let (config, vocab) = tiny();
        let mask = vocab.mask_id();
        let m = AlignmentModel::new(config, vocab, 5).unwrap();
        let (lat, cache) = m
            .forward_train::<ChaCha8Rng>(&TokenSeq(vec![1, 3]), None, None)
            .unwrap();
        let grad: Vec<f64> = (0..lat.scores().len()).map(|i| (i as f64).sin()).collect();
        let g = m.backward(&cache, &grad).unwrap();
        assert!(g.embed.row(mask).iter().any(|&v| v != 0.0));
        assert!(g.embed.row(0).iter().all(|&v| v == 0.0));
        assert!(g.embed.row(2).iter().all(|&v| v == 0.0));
        assert!(g.embed.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn deterministic_without_dropout() {
        let (config, vocab) = tiny();
        let m = AlignmentModel::new(config, vocab, 6).unwrap();
        let x = TokenSeq(vec![2, 2, 1]);
        assert_eq!(m.forward_ctc(&x).unwrap(), m.forward_ctc(&x).unwrap());
    }

    #[test]
    fn teacher_shapes_and_limits() {
        let (mut config, vocab) = tiny();
        config.max_len = 6;
        let t = Teacher::new(config, vocab, 7).unwrap();
        let lp = t.forward_teacher(&TokenSeq(vec![1, 2]), &TokenSeq::default()).unwrap();
        assert_eq!(lp.len(), 4);
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(t
            .forward_teacher(&TokenSeq(vec![1, 2, 3]), &TokenSeq(vec![1, 2, 3]))
            .is_err());
    }

    #[test]
    fn teacher_is_causal() {
        let (config, vocab) = tiny();
        let t = Teacher::new(config, vocab, 8).unwrap();
        let x = TokenSeq(vec![1, 2]);
        let (a, _) = t.forward_train::<ChaCha8Rng>(&x, &TokenSeq(vec![1, 1]), None).unwrap();
        let (b, _) = t.forward_train::<ChaCha8Rng>(&x, &TokenSeq(vec![1, 3]), None).unwrap();
        for r in 0..4 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn teacher_gradient_matches_finite_difference() {
        let (config, vocab) = tiny();
        let t = Teacher::new(config, vocab, 11).unwrap();
        let x = TokenSeq(vec![1, 3, 2]);
        let y = TokenSeq(vec![2, 2]);
        let (_, dl, cache) = t.loss::<ChaCha8Rng>(&x, &y, None).unwrap();
        let g = t.backward(&cache, &dl).unwrap().flatten();
        let h = 1e-5;
        let mut probe = t.clone();
        for i in (0..g.len()).step_by(7) {
            bump(&mut probe, i, h);
            let up = t_loss(&probe, &x, &y);
            bump(&mut probe, i, -2.0 * h);
            let down = t_loss(&probe, &x, &y);
            bump(&mut probe, i, h);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {fd} vs {}", g[i]);
        }
    }

    fn bump(t: &mut Teacher, index: usize, delta: f64) {
        let mut off = 0;
        t.params.visit_mut(&mut |_, m| {
            if index >= off && index < off + m.len() {
                m.data[index - off] += delta;
            }
            off += m.len();
        });
    }

    fn t_loss(t: &Teacher, x: &TokenSeq, y: &TokenSeq) -> f64 {
        t.loss::<ChaCha8Rng>(x, y, None).unwrap().0
    }
}
