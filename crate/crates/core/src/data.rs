//! Synthetic transduction tasks, TSV corpora and length-bucketed batching.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{TokenSeq, Vocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Raw,
    Distilled,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub source: TokenSeq,
    pub target: TokenSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
    pub split: Split,
    pub provenance: Provenance,
}

impl Corpus {
    pub fn new(pairs: Vec<Pair>, split: Split) -> Self {
        Self {
            pairs,
            split,
            provenance: Provenance::Raw,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Fails unless every target fits a canvas of `scale * |source|`
    /// frames, counting the BLANK each adjacent repeat needs.
    pub fn validate_lengths(&self, scale: usize) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::Corpus(format!("{} pair {} has an empty side", self.split, i + 1)));
            }
            let canvas = scale * p.source.len();
            if p.target.min_canvas() > canvas {
                return Err(Error::Corpus(format!(
                    "{} pair {}: target needs {} frames but the canvas has {} (scale {scale}, source length {})",
                    self.split,
                    i + 1,
                    p.target.min_canvas(),
                    canvas,
                    p.source.len()
                )));
            }
        }
        Ok(())
    }

    pub fn sources(&self) -> impl Iterator<Item = &TokenSeq> {
        self.pairs.iter().map(|p| &p.source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &TokenSeq> {
        self.pairs.iter().map(|p| &p.target)
    }
}

/// Parses TSV text into token strings. Line numbers in errors are 1-based.
pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let tabs = line.matches('\t').count();
        if tabs != 1 {
            return Err(err(format!("expected exactly one TAB, found {tabs}")));
        }
        let (src, tgt) = line.split_once('\t').expect("one tab");
        let side = |s: &str, name: &str| -> Result<Vec<String>> {
            let toks: Vec<String> = s.split(' ').filter(|t| !t.is_empty()).map(String::from).collect();
            if toks.is_empty() {
                Err(err(format!("empty {name} side")))
            } else {
                Ok(toks)
            }
        };
        out.push((side(src, "source")?, side(tgt, "target")?));
    }
    Ok(out)
}

pub fn load_tsv(path: impl AsRef<Path>, vocab: &Vocab, split: Split) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let rows = parse_tsv(&text, path)?;
    let mut pairs = Vec::with_capacity(rows.len());
    let mut line = 0;
    for (src, tgt) in rows {
        line += 1;
        let enc = |t: &[String]| {
            vocab.encode(t).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })
        };
        pairs.push(Pair {
            source: enc(&src)?,
            target: enc(&tgt)?,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("corpus file"));
    }
    Ok(Corpus::new(pairs, split))
}

pub fn corpus_to_tsv(corpus: &Corpus, vocab: &Vocab) -> String {
    let mut out = String::new();
    for p in &corpus.pairs {
        out.push_str(&vocab.decode(&p.source).join(" "));
        out.push('\t');
        out.push_str(&vocab.decode(&p.target).join(" "));
        out.push('\n');
    }
    out
}

pub fn save_tsv(corpus: &Corpus, vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path, corpus_to_tsv(corpus, vocab).as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Lexicon,
    Multimodal,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lexicon" => Ok(TaskKind::Lexicon),
            "multimodal" => Ok(TaskKind::Multimodal),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected copy, reverse, lexicon or multimodal)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Lexicon => "lexicon",
            TaskKind::Multimodal => "multimodal",
        })
    }
}

/// Probability that a token triggers a swap with its right neighbour in the
/// lexicon task.
pub const SWAP_PROBABILITY: f64 = 0.3;

/// A synthetic source-to-target relation with its fixed random tables.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    vocab_size: usize,
    primary: Vec<usize>,
    secondary: Vec<usize>,
    swap_trigger: Vec<bool>,
    particle: usize,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461_736b);
        let ids: Vec<usize> = (1..=vocab_size).collect();
        let mut primary = ids.clone();
        primary.shuffle(&mut rng);
        // A second bijection that differs from the first at every token.
        let shift = rng.gen_range(1..vocab_size);
        let secondary: Vec<usize> = (0..vocab_size)
            .map(|i| primary[(i + shift) % vocab_size])
            .collect();
        let swap_trigger: Vec<bool> = (0..vocab_size)
            .map(|_| rng.gen::<f64>() < SWAP_PROBABILITY)
            .collect();
        let particle = rng.gen_range(1..=vocab_size);
        Ok(Self {
            kind,
            vocab_size,
            primary: std::iter::once(0).chain(primary).collect(),
            secondary: std::iter::once(0).chain(secondary).collect(),
            swap_trigger: std::iter::once(false).chain(swap_trigger).collect(),
            particle,
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new((0..self.vocab_size).map(|i| format!("w{i}"))).expect("distinct names")
    }

    /// Every target this source can map to (two for the multimodal task).
    pub fn support(&self, x: &TokenSeq) -> Vec<TokenSeq> {
        let ids = x.ids();
        match self.kind {
            TaskKind::Copy => vec![x.clone()],
            TaskKind::Reverse => vec![TokenSeq(ids.iter().rev().copied().collect())],
            TaskKind::Lexicon => {
                let mut y: Vec<usize> = ids.iter().map(|&t| self.primary[t]).collect();
                let mut i = 0;
                while i + 1 < y.len() {
                    if self.swap_trigger[ids[i]] {
                        y.swap(i, i + 1);
                    }
                    i += 2;
                }
                vec![TokenSeq(y)]
            }
            TaskKind::Multimodal => {
                let a = ids.iter().map(|&t| self.primary[t]).collect();
                let mut b: Vec<usize> = ids.iter().map(|&t| self.secondary[t]).collect();
                b.push(self.particle);
                vec![TokenSeq(a), TokenSeq(b)]
            }
        }
    }

    pub fn sample_target<R: Rng + ?Sized>(&self, x: &TokenSeq, rng: &mut R) -> TokenSeq {
        let mut support = self.support(x);
        let i = if support.len() > 1 { rng.gen_range(0..support.len()) } else { 0 };
        support.swap_remove(i)
    }
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub scale: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            train: 2000,
            dev: 200,
            test: 200,
            vocab_size: 20,
            min_len: 3,
            max_len: 12,
            scale: 2,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedTask {
    pub task: SyntheticTask,
    pub vocab: Vocab,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Generates train/dev/test corpora with sources unique across splits.
pub fn gen_task(spec: &TaskSpec) -> Result<GeneratedTask> {
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "invalid length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let task = SyntheticTask::new(spec.kind, spec.vocab_size, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train + spec.dev + spec.test;
    let capacity: f64 = (spec.min_len..=spec.max_len)
        .map(|l| (spec.vocab_size as f64).powi(l as i32))
        .sum();
    if (total as f64) > capacity * 0.5 {
        return Err(Error::Config(format!(
            "cannot draw {total} distinct sources from {capacity} candidates"
        )));
    }
    let mut seen = HashSet::with_capacity(total);
    let mut draw = |n: usize, split: Split, rng: &mut ChaCha8Rng| -> Result<Corpus> {
        let mut pairs = Vec::with_capacity(n);
        while pairs.len() < n {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let x = TokenSeq((0..len).map(|_| rng.gen_range(1..=spec.vocab_size)).collect());
            if !seen.insert(x.clone()) {
                continue;
            }
            for y in task.support(&x) {
                if y.min_canvas() > spec.scale * x.len() {
                    return Err(Error::Config(format!(
                        "{} task produces a target needing {} frames from a source of length {} at scale {}",
                        spec.kind,
                        y.min_canvas(),
                        x.len(),
                        spec.scale
                    )));
                }
            }
            let target = task.sample_target(&x, rng);
            pairs.push(Pair { source: x, target });
        }
        Ok(Corpus::new(pairs, split))
    };
    let train = draw(spec.train, Split::Train, &mut rng)?;
    let dev = draw(spec.dev, Split::Dev, &mut rng)?;
    let test = draw(spec.test, Split::Test, &mut rng)?;
    Ok(GeneratedTask {
        vocab: task.vocab(),
        task,
        train,
        dev,
        test,
    })
}

/// Groups pair indices into batches of similar source length whose padded
/// size `count * max_len` stays within `token_budget`. A pair longer than
/// the budget gets a batch of its own.
pub fn make_batches(pairs: &[Pair], token_budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.source.len() as f64 + rng.gen::<f64>() * 0.5, i))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for (_, i) in keyed {
        let len = pairs[i].source.len();
        if len > token_budget {
            log::warn!("pair {i} of length {len} exceeds the batch budget {token_budget}");
            batches.push(vec![i]);
            continue;
        }
        let next_longest = longest.max(len);
        if !current.is_empty() && (current.len() + 1) * next_longest > token_budget {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}
