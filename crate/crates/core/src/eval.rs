//! Corpus BLEU, repeated-token rate, length-bucketed BLEU and metric
//! formatting.
//!
//! BLEU here is corpus-level BLEU-4 with uniform weights and brevity penalty
//! `exp(min(0, 1 - ref_len / hyp_len))`. An order with zero clipped matches
//! gets precision `1 / (2 * max(hyp_ngrams, 1))`. An order with no n-grams on
//! either side of the corpus is vacuous and counts as precision 1, so that
//! any corpus scored against itself gets exactly 100.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::alignment::TokenSeq;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub hyp_ngrams: [usize; MAX_ORDER],
    pub ref_ngrams: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[usize], reference: &[usize]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.hyp_ngrams[n - 1] += hyp.len().saturating_sub(n - 1);
            self.ref_ngrams[n - 1] += reference.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [1.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            p[n] = if self.hyp_ngrams[n] == 0 && self.ref_ngrams[n] == 0 {
                1.0
            } else if self.matches[n] == 0 {
                1.0 / (2.0 * self.hyp_ngrams[n].max(1) as f64)
            } else {
                self.matches[n] as f64 / self.hyp_ngrams[n] as f64
            };
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp()
    }

    pub fn score(&self) -> f64 {
        let bp = self.brevity_penalty();
        if bp == 0.0 {
            return 0.0;
        }
        let log_mean = self.precisions().iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * bp * log_mean.exp()
    }
}

/// Corpus BLEU-4 in `[0, 100]`.
pub fn bleu(hypotheses: &[TokenSeq], references: &[TokenSeq]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score())
}

pub fn bleu_stats(hypotheses: &[TokenSeq], references: &[TokenSeq]) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis list"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            expected: references.len(),
            actual: hypotheses.len(),
            context: "hypotheses vs references",
        });
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h.ids(), r.ids());
    }
    Ok(stats)
}

/// Percentage of tokens equal to their immediate predecessor.
pub fn repetition_rate(hypotheses: &[TokenSeq]) -> Result<f64> {
    let total: usize = hypotheses.iter().map(TokenSeq::len).sum();
    if total == 0 {
        return Err(Error::Empty("hypothesis corpus"));
    }
    let repeats: usize = hypotheses.iter().map(TokenSeq::adjacent_repeats).sum();
    Ok(100.0 * repeats as f64 / total as f64)
}

pub const DEFAULT_BUCKET_EDGES: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Clone, Debug, PartialEq)]
pub struct BucketScore {
    /// Smallest reference length in the bucket.
    pub lower: usize,
    /// Largest reference length, `None` for the open last bucket.
    pub upper: Option<usize>,
    pub count: usize,
    pub bleu: f64,
}

impl BucketScore {
    pub fn label(&self) -> String {
        match self.upper {
            Some(u) if self.lower == 0 => format!("<={u}"),
            Some(u) => format!("{}-{u}", self.lower),
            None => format!(">{}", self.lower - 1),
        }
    }
}

/// BLEU per reference-length bucket; empty buckets are omitted.
pub fn bucketed_bleu(
    hypotheses: &[TokenSeq],
    references: &[TokenSeq],
    edges: &[usize],
) -> Result<Vec<BucketScore>> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            expected: references.len(),
            actual: hypotheses.len(),
            context: "hypotheses vs references",
        });
    }
    let mut edges = edges.to_vec();
    edges.sort_unstable();
    edges.dedup();
    let bucket_of = |len: usize| edges.iter().position(|&e| len <= e).unwrap_or(edges.len());
    let mut groups: Vec<(Vec<TokenSeq>, Vec<TokenSeq>)> = vec![Default::default(); edges.len() + 1];
    for (h, r) in hypotheses.iter().zip(references) {
        let g = &mut groups[bucket_of(r.len())];
        g.0.push(h.clone());
        g.1.push(r.clone());
    }
    let mut out = Vec::new();
    for (i, (h, r)) in groups.into_iter().enumerate() {
        if h.is_empty() {
            continue;
        }
        out.push(BucketScore {
            lower: if i == 0 { 0 } else { edges[i - 1] + 1 },
            upper: edges.get(i).copied(),
            count: h.len(),
            bleu: bleu(&h, &r)?,
        });
    }
    Ok(out)
}

/// Named metric values rendered as an aligned table and as `key=value`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.0.push((key.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn to_table(&self) -> String {
        let width = self.0.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k:<width$}  {v:>10.4}");
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[usize]) -> TokenSeq {
        TokenSeq(v.to_vec())
    }

    // the=1 cat=2 sat=3
    #[test]
    fn identical_is_100() {
        let c = vec![s(&[1, 2, 3, 4, 5]), s(&[2])];
        assert_eq!(bleu(&c, &c).unwrap(), 100.0);
        let short = vec![s(&[1, 2]), s(&[3])];
        assert_eq!(bleu(&short, &short).unwrap(), 100.0);
    }

    #[test]
    fn hand_computed_single_pair() {
        let got = bleu(&[s(&[1, 2])], &[s(&[1, 2, 3])]).unwrap();
        assert!((got - 51.002_945_749_382_4).abs() < 1e-9, "{got}");
    }

    #[test]
    fn hand_computed_two_pairs() {
        let hyp = vec![s(&[1, 2]), s(&[4, 5, 6, 7, 8])];
        let reference = vec![s(&[1, 2, 3]), s(&[4, 5, 6, 7, 9])];
        let got = bleu(&hyp, &reference).unwrap();
        assert!((got - 59.939_541_538_078_15).abs() < 1e-9, "{got}");
    }

    #[test]
    fn disjoint_is_small_and_finite() {
        let hyp: Vec<TokenSeq> = (0..10).map(|_| s(&[1; 10])).collect();
        let reference: Vec<TokenSeq> = (0..10).map(|_| s(&[2; 10])).collect();
        let got = bleu(&hyp, &reference).unwrap();
        assert!(got.is_finite() && got < 1.0, "{got}");
        let got = bleu(&[s(&[1, 2, 3, 4])], &[s(&[5, 6, 7, 8])]).unwrap();
        assert!((got - 22.590_050_090_246_12).abs() < 1e-9);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        assert_eq!(bleu(&[s(&[])], &[s(&[1, 2])]).unwrap(), 0.0);
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&[s(&[1])], &[]).is_err());
    }

    #[test]
    fn repetition_examples() {
        assert!((repetition_rate(&[s(&[1, 1, 2])]).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(repetition_rate(&[s(&[1, 2, 1])]).unwrap(), 0.0);
        assert_eq!(repetition_rate(&[s(&[1, 1, 1, 1])]).unwrap(), 75.0);
        assert!(repetition_rate(&[s(&[])]).is_err());
    }

    #[test]
    fn buckets() {
        let refs = vec![s(&[1; 5]), s(&[2; 25])];
        let b = bucketed_bleu(&refs, &refs, &[10, 20]).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].lower, b[0].upper, b[0].count), (0, Some(10), 1));
        assert_eq!((b[1].lower, b[1].upper), (21, None));
        assert_eq!(b[1].label(), ">20");
    }

    #[test]
    fn single_bucket_equals_corpus() {
        let hyp = vec![s(&[1, 2, 3]), s(&[4, 5, 6, 7, 8, 9])];
        let reference = vec![s(&[1, 2, 4]), s(&[4, 5, 6, 7, 9, 9])];
        let b = bucketed_bleu(&hyp, &reference, &[1000]).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].bleu, bleu(&hyp, &reference).unwrap());
    }

    #[test]
    fn metrics_rendering() {
        let mut m = Metrics::default();
        m.push("bleu", 42.5);
        assert_eq!(m.to_kv(), "bleu=42.5\n");
        assert!(m.to_table().contains("42.5000"));
    }
}
