//! The `latent-align` command line.
//!
//! Every subcommand reads one optional `key = value` config file holding
//! model, training and data keys; command-line flags override it.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand};

use crate::alignment::{collapse, strip_blanks, TokenSeq, Vocab};
use crate::checkpoint::{self, ModelKind};
use crate::config::{get, load_kv, KeyValues};
use crate::data::{gen_task, load_tsv, save_tsv, Corpus, Split, TaskKind, TaskSpec};
use crate::eval::{bleu, bucketed_bleu, repetition_rate, Metrics, DEFAULT_BUCKET_EDGES};
use crate::imputer::render_trace;
use crate::io::write_atomic;
use crate::model::{AlignmentModel, ModelConfig, Teacher};
use crate::oracle;
use crate::train::{distill, render_log, train_alignment, train_teacher, TrainConfig, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "latent-align", version, about = "CTC and Imputer latent-alignment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` config file; flags win over its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Canvas scale s (frames per source token).
    #[arg(long, global = true)]
    scale: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic task as train/dev/test TSV files plus a vocabulary.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// copy, reverse, lexicon or multimodal.
        #[arg(long)]
        task: Option<TaskKind>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoregressive teacher used for distillation.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Directory with train.tsv, dev.tsv and vocab.txt.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace training targets with the teacher's greedy decodes.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory; dev, test and vocabulary are copied unchanged.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a CTC model or a two-stage Imputer.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ctc")]
        mode: TrainMode,
        #[arg(long)]
        data: PathBuf,
        /// Initial checkpoint (for example a CTC model to continue as an Imputer).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log; defaults to `<out>.log.tsv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode sources with T-step top-k decoding (T = 1 is greedy CTC).
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Source tokens per line, or a TSV whose first column is used.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Hypothesis file.
        #[arg(long)]
        out: PathBuf,
        /// Per-step partial alignments, one block per input.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Remove blanks without merging repeats (repetition ablation).
        #[arg(long)]
        strip_blanks_only: bool,
    },
    /// Score hypotheses: BLEU, repetition rate and length buckets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyp: PathBuf,
        /// References, one per line, or a TSV whose second column is used.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Comma-separated bucket edges on reference length.
        #[arg(long, value_delimiter = ',')]
        buckets: Option<Vec<usize>>,
        /// Also write the key=value lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Brute-force equivalence and gradient-check suites.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// Fewer cases, for smoke runs.
        #[arg(long)]
        quick: bool,
    },
    /// Model calls and throughput per decode schedule.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        steps: Vec<usize>,
    },
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

struct Settings {
    kv: KeyValues,
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
}

impl Settings {
    fn load(common: &Common) -> anyhow::Result<Self> {
        let mut kv = match &common.config {
            Some(p) => load_kv(p)?,
            None => KeyValues::new(),
        };
        if let Some(seed) = common.seed {
            kv.insert("seed".into(), seed.to_string());
        }
        if let Some(scale) = common.scale {
            kv.insert("scale".into(), scale.to_string());
        }
        let mut model = ModelConfig::default();
        model.apply_kv(&kv).context("model config")?;
        let mut train = TrainConfig::default();
        train.apply_kv(&kv).context("training config")?;
        let seed = train.seed;
        Ok(Self {
            kv,
            model,
            train,
            seed,
        })
    }

    fn echo(&self) -> KeyValues {
        self.train
            .to_kv()
            .into_iter()
            .map(|(k, v)| (format!("train.{k}"), v))
            .collect()
    }
}

fn require(path: &Path) -> anyhow::Result<()> {
    ensure!(path.exists(), "missing file {}", path.display());
    Ok(())
}

struct DataDir {
    vocab: Vocab,
    train: Corpus,
    dev: Corpus,
}

fn load_data(dir: &Path) -> anyhow::Result<DataDir> {
    let files = ["vocab.txt", "train.tsv", "dev.tsv"].map(|f| dir.join(f));
    for f in &files {
        require(f)?;
    }
    let vocab = Vocab::load(&files[0])?;
    let train = load_tsv(&files[1], &vocab, Split::Train)?;
    let dev = load_tsv(&files[2], &vocab, Split::Dev)?;
    Ok(DataDir { vocab, train, dev })
}

/// Non-empty lines, tokens split on spaces; for TSV input, `column` picks
/// the side. Empty lines are kept as empty sequences.
fn read_token_lines(path: &Path, column: usize) -> anyhow::Result<Vec<Vec<String>>> {
    require(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| {
            let l = l.trim_end_matches('\r');
            let field = match l.split_once('\t') {
                Some((a, b)) => [a, b][column.min(1)],
                None => l,
            };
            field.split(' ').filter(|t| !t.is_empty()).map(String::from).collect()
        })
        .collect())
}

fn encode_lines(vocab: &Vocab, lines: &[Vec<String>], path: &Path) -> anyhow::Result<Vec<TokenSeq>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, toks)| {
            ensure!(!toks.is_empty(), "{} line {}: empty source", path.display(), i + 1);
            vocab
                .encode(toks)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenerateData { common, task, out } => {
            let s = Settings::load(&common)?;
            let mut spec = TaskSpec {
                scale: s.model.scale,
                seed: s.seed,
                ..TaskSpec::default()
            };
            if let Some(v) = get::<TaskKind>(&s.kv, "task")? {
                spec.kind = v;
            }
            if let Some(t) = task {
                spec.kind = t;
            }
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = get(&s.kv, stringify!($f))? { spec.$f = v; })* };
            }
            set!(vocab_size);
            if let Some(v) = get(&s.kv, "min_source_len")? {
                spec.min_len = v;
            }
            if let Some(v) = get(&s.kv, "max_source_len")? {
                spec.max_len = v;
            }
            if let Some(v) = get(&s.kv, "train_pairs")? {
                spec.train = v;
            }
            if let Some(v) = get(&s.kv, "dev_pairs")? {
                spec.dev = v;
            }
            if let Some(v) = get(&s.kv, "test_pairs")? {
                spec.test = v;
            }
            let g = gen_task(&spec)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            g.vocab.save(out.join("vocab.txt"))?;
            save_tsv(&g.train, &g.vocab, out.join("train.tsv"))?;
            save_tsv(&g.dev, &g.vocab, out.join("dev.tsv"))?;
            save_tsv(&g.test, &g.vocab, out.join("test.tsv"))?;
            emit_line(&format!(
                "{} task: {} train, {} dev, {} test pairs in {}",
                spec.kind,
                g.train.len(),
                g.dev.len(),
                g.test.len(),
                out.display()
            ));
        }
        Command::TrainTeacher { common, data, out } => {
            let s = Settings::load(&common)?;
            let d = load_data(&data)?;
            let teacher = Teacher::new(s.model.clone(), d.vocab, s.seed)?;
            let outcome = train_teacher(teacher, &d.train, &d.dev, s.model.scale, &s.train)?;
            checkpoint::save_teacher(&out, &outcome.model, outcome.best_step as u64, &s.echo())?;
            write_atomic(log_path(&out, None), render_log(&outcome.log).as_bytes())?;
            emit_line(&format!(
                "teacher best dev BLEU {:.2} at step {}",
                outcome.best_bleu, outcome.best_step
            ));
        }
        Command::Distill {
            common,
            teacher,
            data,
            out,
        } => {
            let s = Settings::load(&common)?;
            require(&teacher)?;
            let (t, _) = checkpoint::load_teacher(&teacher)?;
            let d = load_data(&data)?;
            ensure!(
                t.vocab == d.vocab,
                "teacher vocabulary differs from {}",
                data.join("vocab.txt").display()
            );
            let report = distill(&t, &d.train, s.model.scale)?;
            std::fs::create_dir_all(&out)?;
            d.vocab.save(out.join("vocab.txt"))?;
            save_tsv(&report.corpus, &d.vocab, out.join("train.tsv"))?;
            save_tsv(&d.dev, &d.vocab, out.join("dev.tsv"))?;
            let test = data.join("test.tsv");
            if test.exists() {
                let bytes = std::fs::read(&test)?;
                write_atomic(out.join("test.tsv"), &bytes)?;
            }
            emit_line(&format!(
                "distilled {} of {} pairs (skipped {} empty, {} too long)",
                report.corpus.len(),
                d.train.len(),
                report.skipped_empty,
                report.skipped_too_long
            ));
        }
        Command::Train {
            common,
            mode,
            data,
            init,
            out,
            log,
        } => {
            let s = Settings::load(&common)?;
            let d = load_data(&data)?;
            let model = match init {
                Some(p) => {
                    require(&p)?;
                    let (m, _) = checkpoint::load_model(&p)?;
                    ensure!(m.vocab == d.vocab, "init checkpoint vocabulary differs from the data");
                    m
                }
                None => AlignmentModel::new(s.model.clone(), d.vocab, s.seed)?,
            };
            let outcome = train_alignment(model, mode, &d.train, &d.dev, &s.train)?;
            let kind = match mode {
                TrainMode::Ctc => ModelKind::Ctc,
                TrainMode::Imputer => ModelKind::Imputer,
            };
            checkpoint::save_model(&out, &outcome.model, kind, outcome.best_step as u64, &s.echo())?;
            write_atomic(log_path(&out, log), render_log(&outcome.log).as_bytes())?;
            emit_line(&format!(
                "{mode} best dev BLEU {:.2} at step {}",
                outcome.best_bleu, outcome.best_step
            ));
        }
        Command::Decode {
            common,
            model,
            input,
            steps,
            out,
            trace,
            strip_blanks_only,
        } => {
            let _ = Settings::load(&common)?;
            require(&model)?;
            let (m, _) = checkpoint::load_model(&model)?;
            let sources = encode_lines(&m.vocab, &read_token_lines(&input, 0)?, &input)?;
            let mut hyps = String::new();
            let mut traces = String::new();
            for x in &sources {
                let d = m.decode(x, steps)?;
                let y = if strip_blanks_only {
                    strip_blanks(d.alignment.frames())
                } else {
                    collapse(&d.alignment)
                };
                hyps.push_str(&m.vocab.decode(&y).join(" "));
                hyps.push('\n');
                if trace.is_some() {
                    let _ = writeln!(traces, "# {}", m.vocab.decode(x).join(" "));
                    traces.push_str(&render_trace(&m.vocab, &d.trace));
                    traces.push('\n');
                }
            }
            write_atomic(&out, hyps.as_bytes())?;
            if let Some(t) = trace {
                write_atomic(t, traces.as_bytes())?;
            }
        }
        Command::Eval {
            common,
            hyp,
            reference,
            buckets,
            out,
        } => {
            let _ = Settings::load(&common)?;
            let hyps = read_token_lines(&hyp, 0)?;
            let refs = read_token_lines(&reference, 1)?;
            ensure!(
                hyps.len() == refs.len(),
                "{} has {} lines but {} has {}",
                hyp.display(),
                hyps.len(),
                reference.display(),
                refs.len()
            );
            let mut ids: HashMap<String, usize> = HashMap::new();
            let mut intern = |lines: &[Vec<String>]| -> Vec<TokenSeq> {
                lines
                    .iter()
                    .map(|l| {
                        TokenSeq(
                            l.iter()
                                .map(|t| {
                                    let n = ids.len() + 1;
                                    *ids.entry(t.clone()).or_insert(n)
                                })
                                .collect(),
                        )
                    })
                    .collect()
            };
            let h = intern(&hyps);
            let r = intern(&refs);
            let mut metrics = Metrics::default();
            metrics.push("bleu", bleu(&h, &r)?);
            if h.iter().any(|s| !s.is_empty()) {
                metrics.push("repetition_rate", repetition_rate(&h)?);
            }
            let edges = buckets.unwrap_or_else(|| DEFAULT_BUCKET_EDGES.to_vec());
            for b in bucketed_bleu(&h, &r, &edges)? {
                metrics.push(format!("bleu_len_{}", b.label()), b.bleu);
                metrics.push(format!("count_len_{}", b.label()), b.count as f64);
            }
            emit(&metrics.to_table());
            emit(&metrics.to_kv());
            if let Some(p) = out {
                write_atomic(p, metrics.to_kv().as_bytes())?;
            }
        }
        Command::Oracle { common, quick } => {
            let s = Settings::load(&common)?;
            let reports = if quick {
                vec![
                    oracle::collapse_round_trip(500, s.seed)?,
                    oracle::ctc_equivalence(100, s.seed + 1)?,
                    oracle::imputer_equivalence(100, s.seed + 2)?,
                    oracle::dp_gradient_check(20, s.seed + 3)?,
                    oracle::model_gradient_check(s.seed + 4)?,
                ]
            } else {
                oracle::run_all(s.seed)?
            };
            for r in &reports {
                emit_line(&r.line());
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} oracle suite(s) failed");
            }
        }
        Command::Bench {
            common,
            model,
            input,
            steps,
        } => {
            let _ = Settings::load(&common)?;
            require(&model)?;
            let (m, _) = checkpoint::load_model(&model)?;
            let sources = encode_lines(&m.vocab, &read_token_lines(&input, 0)?, &input)?;
            ensure!(!sources.is_empty(), "{} has no sources", input.display());
            let mut metrics = Metrics::default();
            for &t in &steps {
                let start = Instant::now();
                let mut calls = 0;
                for x in &sources {
                    calls += m.decode(x, t)?.model_calls;
                }
                let secs = start.elapsed().as_secs_f64().max(1e-9);
                metrics.push(format!("steps{t}.model_calls"), calls as f64);
                metrics.push(
                    format!("steps{t}.calls_per_sentence"),
                    calls as f64 / sources.len() as f64,
                );
                metrics.push(format!("steps{t}.sentences_per_sec"), sources.len() as f64 / secs);
            }
            emit(&metrics.to_table());
            emit(&metrics.to_kv());
        }
    }
    Ok(())
}

/// Writes to stdout; a closed pipe (as with `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing to stdout: {e}");
        }
    }
}

fn emit_line(text: &str) {
    emit(&format!("{text}\n"));
}

fn log_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.tsv");
        PathBuf::from(s)
    })
}
