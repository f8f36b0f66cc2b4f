//! Alignment algebra: the collapse function, the expansion set of a target,
//! masking of alignments, and brute-force enumeration used as an oracle for
//! the dynamic programs in [`crate::ctc`] and [`crate::imputer`].
//!
//! Symbol ids are dense. For a vocabulary of `n` user tokens:
//!
//! | id        | symbol            |
//! |-----------|-------------------|
//! | `0`       | BLANK             |
//! | `1..=n`   | user tokens       |
//! | `n + 1`   | MASK (input only) |
//!
//! Lattices therefore have `n + 1` columns (BLANK plus user tokens) and the
//! embedding table has `n + 2` rows.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Id of the BLANK symbol in every vocabulary.
pub const BLANK: usize = 0;

/// Largest number of alignments [`enumerate_alignments`] will materialize.
pub const ENUMERATION_BOUND: u128 = 1_000_000;

pub const BLANK_TOKEN: &str = "<blank>";
pub const MASK_TOKEN: &str = "<mask>";

/// Token inventory with reserved BLANK and MASK symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Vocab("at least one user token is required".into()));
        }
        let mut seen = HashSet::new();
        for t in &tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("token {t:?} is empty or contains whitespace")));
            }
            if t == BLANK_TOKEN || t == MASK_TOKEN {
                return Err(Error::Vocab(format!("{t} is reserved")));
            }
            if !seen.insert(t.as_str()) {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens })
    }

    /// Builds a vocabulary from tokens in first-seen order, skipping repeats.
    pub fn from_corpus_tokens<'a, I>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut seen = HashSet::new();
        let mut ordered = Vec::new();
        for t in tokens {
            if seen.insert(t) {
                ordered.push(t.to_string());
            }
        }
        Self::new(ordered)
    }

    /// Number of user tokens (excludes BLANK and MASK).
    pub fn num_user(&self) -> usize {
        self.tokens.len()
    }

    /// Lattice width: user tokens plus BLANK.
    pub fn lattice_width(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    pub fn mask_id(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token).map(|i| i + 1)
    }

    /// Token string for any id, reserved symbols included.
    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            BLANK => Some(BLANK_TOKEN),
            i if i == self.mask_id() => Some(MASK_TOKEN),
            i => self.tokens.get(i - 1).map(String::as_str),
        }
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TokenSeq> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).ok_or_else(|| Error::UnknownToken {
                    token: t.as_ref().to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq)
    }

    pub fn decode(&self, seq: &TokenSeq) -> Vec<&str> {
        seq.0.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect()
    }

    /// Frame rendering used by decode traces: `_` for BLANK, `▁?` for MASK.
    pub fn render_frame(&self, frame: Option<usize>) -> &str {
        match frame {
            None => "▁?",
            Some(BLANK) => "_",
            Some(i) => self.token(i).unwrap_or("<unk>"),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            let expect_reserved = match i {
                0 => Some(BLANK_TOKEN),
                1 => Some(MASK_TOKEN),
                _ => None,
            };
            match expect_reserved {
                Some(r) if line != r => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("expected reserved token {r}, found {line:?}"),
                    })
                }
                Some(_) => {}
                None if line.is_empty() => {}
                None => tokens.push(line.to_string()),
            }
        }
        Self::new(tokens).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!("{BLANK_TOKEN}\n{MASK_TOKEN}\n");
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, self.to_file_string().as_bytes())
    }
}

/// A sequence of user-token ids. Source and target sequences are nonempty;
/// the output of [`collapse`] may be empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSeq(pub Vec<usize>);

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// Checks that every id is a user token of a lattice with `width` columns.
    pub fn validate(&self, width: usize) -> Result<()> {
        for &id in &self.0 {
            if id == BLANK || id >= width {
                return Err(Error::InvalidToken {
                    id,
                    limit: width,
                    context: "user-token",
                });
            }
        }
        Ok(())
    }

    /// Number of adjacent equal pairs; each one forces an extra BLANK frame.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Shortest canvas that admits an alignment of this sequence.
    pub fn min_canvas(&self) -> usize {
        self.len() + self.adjacent_repeats()
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// A frame sequence over user tokens and BLANK.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Alignment(pub Vec<usize>);

impl Alignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn frames(&self) -> &[usize] {
        &self.0
    }

    /// Appends `extra` BLANK frames.
    pub fn pad_blanks(&self, extra: usize) -> Alignment {
        let mut frames = self.0.clone();
        frames.extend(std::iter::repeat_n(BLANK, extra));
        Alignment(frames)
    }
}

impl From<Vec<usize>> for Alignment {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// An alignment with some frames masked out (`None`). Unmasked frames are
/// called observed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialAlignment(pub Vec<Option<usize>>);

impl PartialAlignment {
    pub fn all_masked(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn frames(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|f| f.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    /// Whether `a` agrees with every observed frame.
    pub fn admits(&self, a: &Alignment) -> bool {
        a.len() == self.len()
            && self
                .0
                .iter()
                .zip(&a.0)
                .all(|(o, &f)| o.is_none_or(|o| o == f))
    }

    /// Converts a fully observed partial alignment.
    pub fn to_alignment(&self) -> Option<Alignment> {
        self.0.iter().copied().collect::<Option<Vec<_>>>().map(Alignment)
    }

    /// Symbol ids with MASK substituted by `mask_id`.
    pub fn ids(&self, mask_id: usize) -> Vec<usize> {
        self.0.iter().map(|f| f.unwrap_or(mask_id)).collect()
    }
}

impl From<&Alignment> for PartialAlignment {
    fn from(a: &Alignment) -> Self {
        Self(a.0.iter().copied().map(Some).collect())
    }
}

/// Merges runs of equal frames, then removes BLANK.
pub fn collapse(a: &Alignment) -> TokenSeq {
    collapse_frames(&a.0)
}

pub fn collapse_frames(frames: &[usize]) -> TokenSeq {
    let mut out = Vec::with_capacity(frames.len());
    let mut prev = None;
    for &f in frames {
        if prev != Some(f) && f != BLANK {
            out.push(f);
        }
        prev = Some(f);
    }
    TokenSeq(out)
}

/// Removes BLANK without merging repeats. Used as the ablation baseline for
/// the repetition metric.
pub fn strip_blanks(frames: &[usize]) -> TokenSeq {
    TokenSeq(frames.iter().copied().filter(|&f| f != BLANK).collect())
}

/// The blank-augmented target `(_, y1, _, y2, ..., _, yU, _)`.
pub(crate) fn blank_augmented(y: &TokenSeq) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * y.len() + 1);
    z.push(BLANK);
    for &t in &y.0 {
        z.push(t);
        z.push(BLANK);
    }
    z
}

/// Whether the DP may jump from state `s - 2` straight to `s`.
#[inline]
pub(crate) fn can_skip(z: &[usize], s: usize) -> bool {
    s >= 2 && z[s] != BLANK && z[s] != z[s - 2]
}

/// Number of alignments of length `canvas` collapsing to `y`, saturating at
/// `u128::MAX`.
pub fn count_alignments(y: &TokenSeq, canvas: usize) -> u128 {
    if y.len() > canvas {
        return 0;
    }
    if canvas == 0 {
        return u128::from(y.is_empty());
    }
    let z = blank_augmented(y);
    let states = z.len();
    let mut prev = vec![0u128; states];
    prev[0] = 1;
    if states > 1 {
        prev[1] = 1;
    }
    let mut next = vec![0u128; states];
    for _ in 1..canvas {
        for s in 0..states {
            let mut c = prev[s];
            if s >= 1 {
                c = c.saturating_add(prev[s - 1]);
            }
            if can_skip(&z, s) {
                c = c.saturating_add(prev[s - 2]);
            }
            next[s] = c;
        }
        std::mem::swap(&mut prev, &mut next);
    }
    let mut total = prev[states - 1];
    if states > 1 {
        total = total.saturating_add(prev[states - 2]);
    }
    total
}

/// Every alignment of length `canvas` that collapses to `y`.
///
/// Refuses instances with more than [`ENUMERATION_BOUND`] members. The
/// result is sorted.
pub fn enumerate_alignments(y: &TokenSeq, canvas: usize) -> Result<Vec<Alignment>> {
    if y.len() > canvas {
        return Err(Error::NoAlignment {
            target: y.len(),
            canvas,
        });
    }
    let count = count_alignments(y, canvas);
    if count > ENUMERATION_BOUND {
        return Err(Error::EnumerationBound {
            count,
            bound: ENUMERATION_BOUND,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    if count == 0 {
        return Ok(out);
    }
    if canvas == 0 {
        out.push(Alignment(Vec::new()));
        return Ok(out);
    }
    let z = blank_augmented(y);
    // reachable[t][s]: the final state can be reached from state s at frame t.
    let states = z.len();
    let mut reachable = vec![vec![false; states]; canvas];
    reachable[canvas - 1][states - 1] = true;
    if states > 1 {
        reachable[canvas - 1][states - 2] = true;
    }
    for t in (0..canvas - 1).rev() {
        for s in 0..states {
            reachable[t][s] = reachable[t + 1][s]
                || (s + 1 < states && reachable[t + 1][s + 1])
                || (s + 2 < states && can_skip(&z, s + 2) && reachable[t + 1][s + 2]);
        }
    }
    let mut frames = Vec::with_capacity(canvas);
    let starts: &[usize] = if states > 1 { &[0, 1] } else { &[0] };
    for &s in starts {
        if reachable[0][s] {
            walk(&z, &reachable, 0, s, &mut frames, &mut out);
        }
    }
    out.sort();
    Ok(out)
}

fn walk(
    z: &[usize],
    reachable: &[Vec<bool>],
    t: usize,
    s: usize,
    frames: &mut Vec<usize>,
    out: &mut Vec<Alignment>,
) {
    frames.push(z[s]);
    if t + 1 == reachable.len() {
        out.push(Alignment(frames.clone()));
    } else {
        let row = &reachable[t + 1];
        if row[s] {
            walk(z, reachable, t + 1, s, frames, out);
        }
        if s + 1 < z.len() && row[s + 1] {
            walk(z, reachable, t + 1, s + 1, frames, out);
        }
        if s + 2 < z.len() && can_skip(z, s + 2) && row[s + 2] {
            walk(z, reachable, t + 1, s + 2, frames, out);
        }
    }
    frames.pop();
}

/// How frames of an alignment are hidden to form a training input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskPolicy {
    /// Every frame masked.
    AllMask,
    /// Draw a ratio uniformly from `[0, 1)` per call, then mask each frame
    /// independently with that probability.
    Bernoulli,
    /// Bernoulli masking at a fixed ratio.
    FixedRatio(f64),
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskPolicy::AllMask => f.write_str("all-mask"),
            MaskPolicy::Bernoulli => f.write_str("bernoulli"),
            MaskPolicy::FixedRatio(r) => write!(f, "bernoulli({r})"),
        }
    }
}

pub fn sample_mask(a: &Alignment, policy: MaskPolicy, seed: u64) -> PartialAlignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(a, policy, &mut rng)
}

pub fn sample_mask_with<R: Rng + ?Sized>(
    a: &Alignment,
    policy: MaskPolicy,
    rng: &mut R,
) -> PartialAlignment {
    let ratio = match policy {
        MaskPolicy::AllMask => return PartialAlignment::all_masked(a.len()),
        MaskPolicy::Bernoulli => rng.gen::<f64>(),
        MaskPolicy::FixedRatio(r) => r,
    };
    PartialAlignment(
        a.0.iter()
            .map(|&f| if rng.gen::<f64>() < ratio { None } else { Some(f) })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: usize = 1;
    const B: usize = 2;
    const C: usize = 3;
    const D: usize = 4;
    const _B: usize = BLANK;

    fn seq(v: &[usize]) -> TokenSeq {
        TokenSeq(v.to_vec())
    }

    #[test]
    fn collapse_worked_example() {
        let a = Alignment(vec![_B, A, A, _B, A, B, B, C, _B, D]);
        assert_eq!(collapse(&a), seq(&[A, A, B, C, D]));
    }

    #[test]
    fn collapse_all_blank_is_empty() {
        assert!(collapse(&Alignment(vec![_B, _B, _B])).is_empty());
    }

    #[test]
    fn collapse_merges_then_drops() {
        assert_eq!(collapse(&Alignment(vec![A, _B, A, A, B])), seq(&[A, A, B]));
    }

    #[test]
    fn enumerate_small_cases() {
        let got = enumerate_alignments(&seq(&[A]), 2).unwrap();
        assert_eq!(
            got,
            vec![Alignment(vec![_B, A]), Alignment(vec![A, _B]), Alignment(vec![A, A])]
        );
        assert!(enumerate_alignments(&seq(&[A, A]), 2).unwrap().is_empty());
        assert_eq!(
            enumerate_alignments(&seq(&[A, B]), 2).unwrap(),
            vec![Alignment(vec![A, B])]
        );
    }

    #[test]
    fn enumerate_rejects_long_target_and_blowup() {
        assert!(matches!(
            enumerate_alignments(&seq(&[A, B, C]), 2),
            Err(Error::NoAlignment { .. })
        ));
        let long = seq(&[A, B, A, B, A, B]);
        assert!(matches!(
            enumerate_alignments(&long, 40),
            Err(Error::EnumerationBound { .. })
        ));
    }

    #[test]
    fn count_small_cases() {
        assert_eq!(count_alignments(&seq(&[A]), 2), 3);
        assert_eq!(count_alignments(&seq(&[A, A]), 2), 0);
        assert_eq!(count_alignments(&seq(&[A, B, C]), 3), 1);
        assert_eq!(count_alignments(&seq(&[A, A]), 3), 1);
        assert_eq!(count_alignments(&seq(&[]), 3), 1);
    }

    #[test]
    fn min_canvas_counts_repeats() {
        assert_eq!(seq(&[A, A, B, B, B]).min_canvas(), 8);
        assert_eq!(count_alignments(&seq(&[A, A, B, B, B]), 7), 0);
        assert_eq!(count_alignments(&seq(&[A, A, B, B, B]), 8), 1);
    }

    #[test]
    fn all_mask_policy() {
        let a = Alignment(vec![A, _B, B, C]);
        let m = sample_mask(&a, MaskPolicy::AllMask, 7);
        assert_eq!(m, PartialAlignment(vec![None; 4]));
        assert_eq!(m.masked_count(), 4);
    }

    #[test]
    fn zero_ratio_observes_everything() {
        let a = Alignment(vec![A, _B, B, C, C, _B]);
        let m = sample_mask(&a, MaskPolicy::FixedRatio(0.0), 3);
        assert_eq!(m.to_alignment(), Some(a));
    }

    #[test]
    fn bernoulli_mask_golden() {
        let a = Alignment(vec![A, _B, B, C, _B, D]);
        let m = sample_mask(&a, MaskPolicy::Bernoulli, 42);
        assert_eq!(m, sample_mask(&a, MaskPolicy::Bernoulli, 42));
        assert!(m.admits(&a));
        assert_eq!(
            m,
            PartialAlignment(vec![Some(A), None, None, None, None, None])
        );
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::new(["x", "y", "z"]).unwrap();
        assert_eq!(v.id("x"), Some(1));
        assert_eq!(v.mask_id(), 4);
        assert_eq!(v.lattice_width(), 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<blank>\n<mask>\n"));
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn vocab_rejects_reserved_and_duplicates() {
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new([BLANK_TOKEN]).is_err());
        assert!(Vocab::new(Vec::<String>::new()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "a\n<mask>\nb\n").unwrap();
        assert!(matches!(Vocab::load(&p), Err(Error::Parse { line: 1, .. })));
    }
}
