use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use latent_align::alignment::{
    collapse, count_alignments, enumerate_alignments, sample_mask, Alignment, MaskPolicy,
    PartialAlignment, TokenSeq, Vocab,
};
use latent_align::ctc::{ctc_greedy_decode, ctc_loss, LogitLattice};
use latent_align::data::{gen_task, make_batches, Pair, TaskKind, TaskSpec};
use latent_align::eval::{bleu, bucketed_bleu, repetition_rate};
use latent_align::imputer::{imputer_decode, imputer_loss, sample_uniform_alignment, DecodeSchedule};
use latent_align::model::{AlignmentModel, ModelConfig};
use latent_align::train::{lr_schedule, TrainConfig};

/// (vocab size, target, canvas) with |V| <= 4, |y| <= 5, L <= 12 and a
/// feasible canvas.
fn instance() -> impl Strategy<Value = (usize, TokenSeq, usize)> {
    (1usize..=4, 1usize..=5)
        .prop_flat_map(|(v, n)| (Just(v), prop::collection::vec(1..=v, n)))
        .prop_filter("fits in 12 frames", |(_, y)| TokenSeq(y.clone()).min_canvas() <= 12)
        .prop_flat_map(|(v, y)| {
            let min = TokenSeq(y.clone()).min_canvas();
            (Just(v), Just(TokenSeq(y)), min..=12usize)
        })
}

fn lattice(rows: usize, cols: usize) -> impl Strategy<Value = LogitLattice> {
    prop::collection::vec(-4.0f64..4.0, rows * cols)
        .prop_map(move |s| LogitLattice::new(rows, cols, s).unwrap())
}

fn instance_with_lattice() -> impl Strategy<Value = (TokenSeq, LogitLattice)> {
    instance().prop_flat_map(|(v, y, l)| (Just(y), lattice(l, v + 1)))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn enumerated_alignments_collapse_back((_, y, l) in instance()) {
        let all = enumerate_alignments(&y, l).unwrap();
        prop_assert!(!all.is_empty());
        for a in &all {
            prop_assert_eq!(a.len(), l);
            prop_assert_eq!(&collapse(a), &y);
        }
        prop_assert_eq!(all.len() as u128, count_alignments(&y, l));
    }

    #[test]
    fn collapse_ignores_trailing_blank_padding(
        frames in prop::collection::vec(0usize..5, 0..12),
        extra in 0usize..5,
    ) {
        let a = Alignment(frames);
        let y = collapse(&a);
        let spaced: Vec<usize> = y.ids().iter().flat_map(|&t| [t, 0]).collect();
        let embedded = Alignment(spaced).pad_blanks(extra);
        prop_assert_eq!(collapse(&embedded), y.clone());
        prop_assert_eq!(collapse(&a.pad_blanks(extra)), y);
    }

    #[test]
    fn mask_sampling_is_reproducible(frames in prop::collection::vec(0usize..5, 1..12), seed: u64) {
        let a = Alignment(frames);
        for policy in [MaskPolicy::Bernoulli, MaskPolicy::FixedRatio(0.3)] {
            let p = sample_mask(&a, policy, seed);
            prop_assert_eq!(&p, &sample_mask(&a, policy, seed));
            prop_assert!(p.admits(&a));
        }
        prop_assert_eq!(sample_mask(&a, MaskPolicy::AllMask, seed).masked_count(), a.len());
    }

    #[test]
    fn ctc_matches_enumeration((y, lat) in instance_with_lattice()) {
        let dp = ctc_loss(&lat, &y).unwrap().nll;
        let lp = lat.log_probs();
        let w = lat.width();
        let total: f64 = enumerate_alignments(&y, lat.len()).unwrap().iter()
            .map(|a| a.frames().iter().enumerate().map(|(t, &f)| lp[t * w + f]).sum::<f64>().exp())
            .sum();
        prop_assert!(rel(dp, -total.ln()) < 1e-8, "{} vs {}", dp, -total.ln());
    }

    #[test]
    fn row_shift_leaves_loss_unchanged((y, lat) in instance_with_lattice(), row in 0usize..12, c in -50.0f64..50.0) {
        let row = row % lat.len();
        let mut shifted = lat.clone();
        let w = lat.width();
        shifted.scores_mut()[row * w..(row + 1) * w].iter_mut().for_each(|v| *v += c);
        let a = ctc_loss(&lat, &y).unwrap().nll;
        let b = ctc_loss(&shifted, &y).unwrap().nll;
        prop_assert!(rel(a, b) < 1e-9);
    }

    #[test]
    fn all_mask_imputer_is_ctc((y, lat) in instance_with_lattice()) {
        let c = ctc_loss(&lat, &y).unwrap();
        let i = imputer_loss(&lat, &y, &PartialAlignment::all_masked(lat.len())).unwrap();
        prop_assert!((c.nll - i.nll).abs() <= 1e-12);
        for (a, b) in c.grad.iter().zip(&i.grad) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constrained_marginal_is_a_lower_bound((y, lat) in instance_with_lattice(), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = sample_uniform_alignment(&y, lat.len(), &mut rng).unwrap();
        let partial = sample_mask(&a, MaskPolicy::Bernoulli, seed);
        let constrained = imputer_loss(&lat, &y, &partial).unwrap().nll;
        let free = ctc_loss(&lat, &y).unwrap().nll;
        // a higher loss is a lower probability
        prop_assert!(constrained >= free - 1e-12 * free.abs().max(1.0));
        prop_assert!(constrained.is_finite());
    }

    #[test]
    fn decode_commits_are_frozen(lat in lattice(9, 4), steps in 1usize..=9) {
        let source = TokenSeq(vec![1, 2, 3]);
        let schedule = DecodeSchedule::new(steps, 9).unwrap();
        let mut calls = 0;
        let out = imputer_decode(
            |_, p| {
                calls += 1;
                // the lattice depends on the partial alignment, as a real model's would
                let mut l = lat.clone();
                for (t, f) in p.frames().iter().enumerate() {
                    if let Some(f) = f {
                        l.scores_mut()[t * 4 + (f + 1) % 4] += 0.5;
                    }
                }
                Ok(l)
            },
            &source,
            &schedule,
        )
        .unwrap();
        prop_assert_eq!(out.model_calls, steps);
        prop_assert_eq!(calls, steps);
        prop_assert_eq!(out.trace.len(), steps);
        for w in out.trace.windows(2) {
            for (before, after) in w[0].frames().iter().zip(w[1].frames()) {
                if before.is_some() {
                    prop_assert_eq!(before, after);
                }
            }
            prop_assert!(w[1].masked_count() < w[0].masked_count() || w[0].masked_count() == 0);
        }
        prop_assert!(out.trace.last().unwrap().is_complete());
        if steps == 1 {
            prop_assert_eq!(out.output, ctc_greedy_decode(&lat));
        }
    }

    #[test]
    fn bleu_is_order_invariant_and_self_scores_100(
        corpus in prop::collection::vec(
            (prop::collection::vec(1usize..6, 0..8), prop::collection::vec(1usize..6, 1..8)), 1..8),
        seed: u64,
    ) {
        let hyps: Vec<TokenSeq> = corpus.iter().map(|(h, _)| TokenSeq(h.clone())).collect();
        let refs: Vec<TokenSeq> = corpus.iter().map(|(_, r)| TokenSeq(r.clone())).collect();
        prop_assert_eq!(bleu(&refs, &refs).unwrap(), 100.0);
        let base = bleu(&hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0).contains(&base));
        let mut order: Vec<usize> = (0..hyps.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let h2: Vec<TokenSeq> = order.iter().map(|&i| hyps[i].clone()).collect();
        let r2: Vec<TokenSeq> = order.iter().map(|&i| refs[i].clone()).collect();
        prop_assert!((bleu(&h2, &r2).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn buckets_agree_with_restricted_corpora(
        corpus in prop::collection::vec(
            (prop::collection::vec(1usize..4, 1..30), prop::collection::vec(1usize..4, 1..30)), 1..12),
    ) {
        let hyps: Vec<TokenSeq> = corpus.iter().map(|(h, _)| TokenSeq(h.clone())).collect();
        let refs: Vec<TokenSeq> = corpus.iter().map(|(_, r)| TokenSeq(r.clone())).collect();
        let edges = [10, 20];
        for b in bucketed_bleu(&hyps, &refs, &edges).unwrap() {
            let upper = b.upper.unwrap_or(usize::MAX);
            let (h, r): (Vec<_>, Vec<_>) = hyps.iter().zip(&refs)
                .filter(|(_, r)| r.len() >= b.lower && r.len() <= upper)
                .map(|(h, r)| (h.clone(), r.clone()))
                .unzip();
            prop_assert_eq!(h.len(), b.count);
            prop_assert_eq!(bleu(&h, &r).unwrap(), b.bleu);
        }
    }

    #[test]
    fn collapse_of_repeat_free_targets_has_no_repeats((_, y, l) in instance(), seed: u64) {
        prop_assume!(y.adjacent_repeats() == 0);
        let a = sample_uniform_alignment(&y, l, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(repetition_rate(&[collapse(&a)]).unwrap(), 0.0);
    }

    #[test]
    fn batches_respect_the_budget(
        lens in prop::collection::vec(1usize..15, 1..60),
        budget in 1usize..64,
        seed: u64,
    ) {
        let pairs: Vec<Pair> = lens.iter()
            .map(|&n| Pair { source: TokenSeq(vec![1; n]), target: TokenSeq(vec![1]) })
            .collect();
        let batches = make_batches(&pairs, budget, seed);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| lens[i]).max().unwrap();
            let shortest = b.iter().map(|&i| lens[i]).min().unwrap();
            // padded size may exceed the budget only by a single sequence
            prop_assert!(b.len() == 1 || b.len() * longest <= budget);
            // the sort key jitters by less than one token
            prop_assert!(longest - shortest <= longest.max(1));
        }
        prop_assert_eq!(batches, make_batches(&pairs, budget, seed));
    }

    #[test]
    fn lr_schedule_shape(warmup in 1usize..5000, step in 1usize..100_000) {
        let c = TrainConfig { warmup, total_steps: warmup + 1, stage_switch: 1, ..TrainConfig::default() };
        let lr = lr_schedule(step, &c);
        prop_assert!(lr > 0.0 && lr <= c.peak_lr * (1.0 + 1e-12));
        if step > warmup {
            prop_assert!(lr_schedule(step + 1, &c) < lr);
        } else {
            prop_assert!(lr_schedule(step + 1, &c) >= lr);
        }
    }
}

#[test]
fn outputs_over_all_alignments_sum_to_one() {
    // every K^L path grouped by its collapse, for L <= 4, K <= 3
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (rows, cols) in [(1, 2), (2, 3), (3, 2), (3, 3), (4, 3)] {
        let scores = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
        let lat = LogitLattice::new(rows, cols, scores).unwrap();
        let mut outputs: HashMap<TokenSeq, ()> = HashMap::new();
        let mut frames = vec![0usize; rows];
        loop {
            outputs.insert(collapse(&Alignment(frames.clone())), ());
            let mut i = 0;
            while i < rows {
                frames[i] += 1;
                if frames[i] < cols {
                    break;
                }
                frames[i] = 0;
                i += 1;
            }
            if i == rows {
                break;
            }
        }
        let total: f64 = outputs
            .keys()
            .map(|y| (-ctc_loss(&lat, y).unwrap().nll).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12, "{rows}x{cols}: {total}");
    }
}

#[test]
fn lr_schedule_is_continuous_at_warmup() {
    let c = TrainConfig::default();
    let w = c.warmup;
    assert_eq!(lr_schedule(w, &c), c.peak_lr);
    let left = lr_schedule(w - 1, &c);
    let right = lr_schedule(w + 1, &c);
    assert!((c.peak_lr - left) < 2.0 * c.peak_lr / w as f64);
    assert!((c.peak_lr - right) < 2.0 * c.peak_lr / w as f64);
}

fn tiny_model(positional: bool, scale: usize) -> AlignmentModel {
    let config = ModelConfig {
        depth: 1,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        scale,
        dropout: 0.0,
        positional,
        max_len: 64,
    };
    AlignmentModel::new(config, Vocab::new(["a", "b", "c", "d"]).unwrap(), 21).unwrap()
}

#[test]
fn positions_break_permutation_equivariance() {
    let x = TokenSeq(vec![1, 2, 3, 4]);
    let perm = [2usize, 0, 3, 1];
    let px = TokenSeq(perm.iter().map(|&i| x.ids()[i]).collect());

    let plain = tiny_model(false, 1);
    let a = plain.forward_ctc(&x).unwrap();
    let b = plain.forward_ctc(&px).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        for (u, v) in b.row(j).iter().zip(a.row(i)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    let positional = tiny_model(true, 1);
    let a = positional.forward_ctc(&x).unwrap();
    let b = positional.forward_ctc(&px).unwrap();
    let moved = perm
        .iter()
        .enumerate()
        .any(|(j, &i)| b.row(j).iter().zip(a.row(i)).any(|(u, v)| (u - v).abs() > 1e-9));
    assert!(moved);
}

#[test]
fn decode_trace_is_deterministic() {
    let m = tiny_model(true, 2);
    let x = TokenSeq(vec![3, 1, 4, 1]);
    assert_eq!(m.decode(&x, 3).unwrap(), m.decode(&x, 3).unwrap());
}

#[test]
fn generated_splits_are_disjoint_and_reproducible() {
    for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Lexicon, TaskKind::Multimodal] {
        let spec = TaskSpec {
            kind,
            train: 300,
            dev: 50,
            test: 50,
            seed: 9,
            ..TaskSpec::default()
        };
        let a = gen_task(&spec).unwrap();
        let b = gen_task(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let mut seen = std::collections::HashSet::new();
        for c in [&a.train, &a.dev, &a.test] {
            for x in c.sources() {
                assert!(seen.insert(x.clone()), "{kind}: source repeated across splits");
            }
            c.validate_lengths(spec.scale).unwrap();
        }
    }
}

#[test]
fn multimodal_targets_have_two_support_points() {
    let spec = TaskSpec {
        kind: TaskKind::Multimodal,
        train: 20,
        dev: 1,
        test: 1,
        ..TaskSpec::default()
    };
    let g = gen_task(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for x in g.train.sources() {
        let draws: std::collections::HashSet<TokenSeq> =
            (0..200).map(|_| g.task.sample_target(x, &mut rng)).collect();
        assert_eq!(draws.len(), 2);
    }
}
