use latent_align::checkpoint::{load_model, load_teacher, save_model, save_teacher, ModelKind};
use latent_align::config::KeyValues;
use latent_align::ctc::ctc_loss;
use latent_align::data::{gen_task, Corpus, GeneratedTask, Pair, Provenance, Split, TaskKind, TaskSpec};
use latent_align::model::{AlignmentModel, ModelConfig, Teacher};
use latent_align::train::{distill, train_ctc, train_imputer, train_teacher, TrainConfig};
use latent_align::{Error, TokenSeq};

fn small() -> ModelConfig {
    ModelConfig {
        depth: 1,
        d_model: 32,
        d_ff: 64,
        heads: 2,
        ..ModelConfig::default()
    }
}

fn copy_task() -> GeneratedTask {
    gen_task(&TaskSpec {
        kind: TaskKind::Copy,
        train: 400,
        dev: 40,
        test: 40,
        vocab_size: 10,
        max_len: 8,
        ..TaskSpec::default()
    })
    .unwrap()
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup: steps / 10,
        stage_switch: steps,
        eval_every: steps,
        dev_limit: 20,
        ..TrainConfig::default()
    }
}

fn mean_dev_loss(model: &AlignmentModel, dev: &Corpus) -> f64 {
    let total: f64 = dev
        .pairs
        .iter()
        .map(|p| ctc_loss(&model.forward_ctc(&p.source).unwrap(), &p.target).unwrap().nll)
        .sum();
    total / dev.len() as f64
}

#[test]
fn loss_falls_over_the_first_hundred_steps() {
    let g = copy_task();
    let model = AlignmentModel::new(small(), g.vocab.clone(), 1).unwrap();
    let out = train_ctc(model, &g.train, &g.dev, &short_run(100)).unwrap();
    let first: f64 = out.step_losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = out.step_losses[90..].iter().sum::<f64>() / 10.0;
    assert!(last < 0.7 * first, "first {first}, last {last}");
    assert!(out.step_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn identical_seeds_give_identical_models() {
    let g = copy_task();
    let run = || {
        let model = AlignmentModel::new(small(), g.vocab.clone(), 4).unwrap();
        train_ctc(model, &g.train, &g.dev, &short_run(30)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.last.params, b.last.params);
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn imputer_before_the_switch_is_ctc() {
    let g = copy_task();
    let c = short_run(30);
    let init = AlignmentModel::new(small(), g.vocab.clone(), 2).unwrap();
    let ctc = train_ctc(init.clone(), &g.train, &g.dev, &c).unwrap();
    let imp = train_imputer(init, &g.train, &g.dev, &c).unwrap();
    assert_eq!(ctc.last.params, imp.last.params);
    assert_eq!(ctc.step_losses, imp.step_losses);
}

#[test]
fn imputer_stage_two_runs_and_stays_finite() {
    let g = copy_task();
    let c = TrainConfig {
        stage_switch: 10,
        ..short_run(30)
    };
    let init = AlignmentModel::new(small(), g.vocab.clone(), 2).unwrap();
    let out = train_imputer(init, &g.train, &g.dev, &c).unwrap();
    assert!(out.step_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn checkpoint_round_trip_preserves_dev_loss() {
    let g = copy_task();
    let model = AlignmentModel::new(small(), g.vocab.clone(), 3).unwrap();
    let trained = train_ctc(model, &g.train, &g.dev, &short_run(20)).unwrap().last;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&path, &trained, ModelKind::Ctc, 20, &KeyValues::new()).unwrap();
    let (loaded, header) = load_model(&path).unwrap();
    assert_eq!(header.step, 20);
    assert_eq!(header.kind, ModelKind::Ctc);
    let (a, b) = (mean_dev_loss(&trained, &g.dev), mean_dev_loss(&loaded, &g.dev));
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
}

#[test]
fn distillation_drops_only_unusable_decodes() {
    let g = copy_task();
    let config = ModelConfig {
        dropout: 0.0,
        ..small()
    };
    let teacher = Teacher::new(config, g.vocab.clone(), 5).unwrap();
    // an untrained teacher produces plenty of empty and overlong decodes
    let report = distill(&teacher, &g.train, 2).unwrap();
    assert_eq!(report.corpus.provenance, Provenance::Distilled);
    assert_eq!(report.corpus.len() + report.skipped_empty + report.skipped_too_long, g.train.len());
    for p in &report.corpus.pairs {
        assert!(!p.target.is_empty());
        assert!(p.target.min_canvas() <= 2 * p.source.len());
    }

    let trained = train_teacher(teacher, &g.train, &g.dev, 2, &short_run(20)).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    save_teacher(&path, &trained, 20, &KeyValues::new()).unwrap();
    let (back, _) = load_teacher(&path).unwrap();
    let x = &g.dev.pairs[0].source;
    assert_eq!(back.greedy_decode(x, 16).unwrap(), trained.greedy_decode(x, 16).unwrap());
}

#[test]
fn length_violations_abort_training() {
    let g = copy_task();
    let mut pairs = g.train.pairs.clone();
    pairs.push(Pair {
        source: TokenSeq(vec![1]),
        target: TokenSeq(vec![1, 1, 2]),
    });
    let bad = Corpus::new(pairs, Split::Train);
    let model = AlignmentModel::new(small(), g.vocab.clone(), 1).unwrap();
    let err = train_ctc(model, &bad, &g.dev, &short_run(10)).unwrap_err();
    assert!(matches!(err, Error::Corpus(_)), "{err}");
}
