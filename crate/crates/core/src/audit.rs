//! Verbatim memorization scoring.
//!
//! A prediction is compared word by word against every training entry. All
//! maximal common substrings of at least `n` words are located with a
//! generalized suffix array (prediction and training texts concatenated
//! with unique separators, plus its LCP array). The prediction-side
//! intervals are unioned into a global coverage whose size is the absolute
//! score; dividing by the prediction length gives the relative score.
//!
//! A match `(i, j, len)` is maximal when it cannot be extended on either
//! side: `p[i-1] != s[j-1]` (or either index is 0) and `len` equals the
//! longest common prefix of `p[i..]` and `s[j..]`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::TokenSequence;
use crate::error::{Error, Result};

pub const DEFAULT_N_VALUES: [usize; 4] = [8, 12, 15, 18];

/// Inclusive word-index range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WordInterval {
    pub start: usize,
    pub end: usize,
}

impl WordInterval {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One maximal common substring occurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CommonSubstring {
    pub prediction: WordInterval,
    pub training: WordInterval,
}

/// A matched span inside training entry `entry` (index into the training list).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingSpan {
    pub entry: usize,
    pub interval: WordInterval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub prediction_id: String,
    pub n: usize,
    pub word_count: usize,
    /// Disjoint, sorted, non-adjacent.
    pub global_intervals: Vec<WordInterval>,
    pub absolute: usize,
    pub relative: f64,
    pub training_spans: Vec<TrainingSpan>,
}

/// `{"id": .., "text": ..}` record used for predictions and training entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEntry {
    pub id: String,
    pub text: String,
}

/// Merge overlapping or adjacent intervals.
pub fn union_intervals(mut intervals: Vec<WordInterval>) -> Vec<WordInterval> {
    intervals.sort_unstable();
    let mut out: Vec<WordInterval> = Vec::with_capacity(intervals.len());
    for iv in intervals {
        match out.last_mut() {
            Some(last) if iv.start <= last.end + 1 => last.end = last.end.max(iv.end),
            _ => out.push(iv),
        }
    }
    out
}

pub fn covered(intervals: &[WordInterval]) -> usize {
    intervals.iter().map(WordInterval::len).sum()
}

/// Suffix array with LCP over prediction texts followed by training texts.
struct GeneralizedSuffixArray {
    /// Text index and offset of every position (separators get `None`).
    origin: Vec<Option<(usize, usize)>>,
    symbols: Vec<u32>,
    sa: Vec<usize>,
    rank: Vec<usize>,
    /// `lcp[r]` = LCP of suffixes `sa[r-1]` and `sa[r]`; `lcp[0] = 0`.
    lcp: Vec<usize>,
    starts: Vec<usize>,
}

impl GeneralizedSuffixArray {
    fn build(texts: &[&[String]]) -> Self {
        let mut vocab: HashMap<&str, u32> = HashMap::new();
        let separators = texts.len() as u32;
        let total = texts.iter().map(|t| t.len() + 1).sum();
        let mut symbols = Vec::with_capacity(total);
        let mut origin = Vec::with_capacity(total);
        let mut starts = Vec::with_capacity(texts.len());
        for (t, words) in texts.iter().enumerate() {
            starts.push(symbols.len());
            for (offset, w) in words.iter().enumerate() {
                let next = separators + vocab.len() as u32;
                symbols.push(*vocab.entry(w.as_str()).or_insert(next));
                origin.push(Some((t, offset)));
            }
            // unique terminator: no common prefix can run across it
            symbols.push(t as u32);
            origin.push(None);
        }
        let sa = suffix_array(&symbols);
        let mut rank = vec![0; sa.len()];
        for (r, &i) in sa.iter().enumerate() {
            rank[i] = r;
        }
        let lcp = kasai(&symbols, &sa, &rank);
        Self {
            origin,
            symbols,
            sa,
            rank,
            lcp,
            starts,
        }
    }

    /// Maximal matches of length ≥ `min_len` between text `query` and any
    /// text for which `is_target` holds. Yields `(target, query_offset, target_offset, len)`.
    fn maximal_matches(
        &self,
        query: usize,
        min_len: usize,
        is_target: impl Fn(usize) -> bool,
    ) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let start = self.starts[query];
        let mut pos = start;
        while let Some(Some((t, i))) = self.origin.get(pos).copied() {
            debug_assert_eq!(t, query);
            let r = self.rank[pos];
            let mut visit = |other_rank: usize, len: usize| {
                let other = self.sa[other_rank];
                if let Some((target, j)) = self.origin[other] {
                    let left_maximal =
                        i == 0 || j == 0 || self.symbols[pos - 1] != self.symbols[other - 1];
                    if is_target(target) && left_maximal {
                        out.push((target, i, j, len));
                    }
                }
            };
            let mut run = usize::MAX;
            for up in (0..r).rev() {
                run = run.min(self.lcp[up + 1]);
                if run < min_len {
                    break;
                }
                visit(up, run);
            }
            run = usize::MAX;
            for down in r + 1..self.sa.len() {
                run = run.min(self.lcp[down]);
                if run < min_len {
                    break;
                }
                visit(down, run);
            }
            pos += 1;
        }
        out
    }
}

/// Prefix-doubling construction; `symbols` must end in a unique terminator.
fn suffix_array(symbols: &[u32]) -> Vec<usize> {
    let n = symbols.len();
    let mut sa: Vec<usize> = (0..n).collect();
    if n == 0 {
        return sa;
    }
    let mut rank: Vec<usize> = symbols.iter().map(|&s| s as usize).collect();
    let mut next = vec![0usize; n];
    let mut k = 1;
    loop {
        let key = |i: usize, rank: &[usize]| (rank[i], if i + k < n { rank[i + k] + 1 } else { 0 });
        sa.sort_unstable_by_key(|&i| key(i, &rank));
        next[sa[0]] = 0;
        for w in 1..n {
            let bump = key(sa[w - 1], &rank) < key(sa[w], &rank);
            next[sa[w]] = next[sa[w - 1]] + usize::from(bump);
        }
        std::mem::swap(&mut rank, &mut next);
        if rank[sa[n - 1]] == n - 1 {
            return sa;
        }
        k *= 2;
    }
}

fn kasai(symbols: &[u32], sa: &[usize], rank: &[usize]) -> Vec<usize> {
    let n = symbols.len();
    let mut lcp = vec![0; n];
    let mut h = 0usize;
    for i in 0..n {
        if rank[i] == 0 {
            h = 0;
            continue;
        }
        let j = sa[rank[i] - 1];
        while i + h < n && j + h < n && symbols[i + h] == symbols[j + h] {
            h += 1;
        }
        lcp[rank[i]] = h;
        h = h.saturating_sub(1);
    }
    lcp
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("minimum substring length n must be at least 1".into()));
    }
    Ok(())
}

/// Every maximal common word substring of length ≥ `n`, ordered by
/// prediction start then training start.
pub fn common_substrings(p: &TokenSequence, s: &TokenSequence, n: usize) -> Result<Vec<CommonSubstring>> {
    check_n(n)?;
    let gsa = GeneralizedSuffixArray::build(&[p.tokens(), s.tokens()]);
    let mut out: Vec<CommonSubstring> = gsa
        .maximal_matches(0, n, |t| t == 1)
        .into_iter()
        .map(|(_, i, j, len)| CommonSubstring {
            prediction: WordInterval::new(i, i + len - 1),
            training: WordInterval::new(j, j + len - 1),
        })
        .collect();
    out.sort_unstable_by_key(|c| (c.prediction.start, c.training.start));
    Ok(out)
}

/// Training corpus prepared for repeated scoring.
pub struct TrainingCorpus {
    entries: Vec<TokenSequence>,
}

impl TrainingCorpus {
    pub fn new(entries: Vec<TokenSequence>) -> Self {
        Self { entries }
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().map(TokenSequence::tokenize).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maximal matches of length ≥ `min_n` for `p` against every entry:
    /// `(entry, prediction_start, training_start, len)`.
    fn matches(&self, p: &TokenSequence, min_n: usize) -> Vec<(usize, usize, usize, usize)> {
        let mut texts: Vec<&[String]> = Vec::with_capacity(self.entries.len() + 1);
        texts.push(p.tokens());
        texts.extend(self.entries.iter().map(|e| e.tokens()));
        let gsa = GeneralizedSuffixArray::build(&texts);
        let mut out: Vec<_> = gsa
            .maximal_matches(0, min_n, |t| t != 0)
            .into_iter()
            .map(|(t, i, j, len)| (t - 1, i, j, len))
            .collect();
        out.sort_unstable();
        out
    }

    /// Score `p` at each `n` in `n_values` from a single match enumeration.
    pub fn score_many(&self, prediction_id: &str, p: &TokenSequence, n_values: &[usize]) -> Result<Vec<OverlapReport>> {
        if p.is_empty() {
            return Err(Error::EmptyPrediction);
        }
        let Some(&min_n) = n_values.iter().min() else {
            return Ok(Vec::new());
        };
        check_n(min_n)?;
        let matches = self.matches(p, min_n);
        Ok(n_values
            .iter()
            .map(|&n| {
                let kept: Vec<_> = matches.iter().filter(|m| m.3 >= n).collect();
                let global_intervals = union_intervals(
                    kept.iter()
                        .map(|&&(_, i, _, len)| WordInterval::new(i, i + len - 1))
                        .collect(),
                );
                let absolute = covered(&global_intervals);
                OverlapReport {
                    prediction_id: prediction_id.to_owned(),
                    n,
                    word_count: p.len(),
                    global_intervals,
                    absolute,
                    relative: absolute as f64 / p.len() as f64,
                    training_spans: kept
                        .iter()
                        .map(|&&(entry, _, j, len)| TrainingSpan {
                            entry,
                            interval: WordInterval::new(j, j + len - 1),
                        })
                        .collect(),
                }
            })
            .collect())
    }

    pub fn score(&self, prediction_id: &str, p: &TokenSequence, n: usize) -> Result<OverlapReport> {
        Ok(self.score_many(prediction_id, p, &[n])?.remove(0))
    }
}

/// Memorization report for one prediction against a training set.
pub fn score_prediction(p: &TokenSequence, training: &[TokenSequence], n: usize) -> Result<OverlapReport> {
    TrainingCorpus::new(training.to_vec()).score("", p, n)
}

/// Distinct memorized training words across several predictions of the
/// same query. Spans are unioned per training entry, so a capture contained
/// in another prediction's longer capture is counted once.
pub fn merge_predictions(reports: &[OverlapReport]) -> usize {
    let mut per_entry: BTreeMap<usize, Vec<WordInterval>> = BTreeMap::new();
    for span in reports.iter().flat_map(|r| &r.training_spans) {
        per_entry.entry(span.entry).or_default().push(span.interval);
    }
    per_entry.into_values().map(|ivs| covered(&union_intervals(ivs))).sum()
}

/// One row per (prediction, n), in prediction order then `n_values` order.
/// Predictions are scored in parallel.
pub fn audit_corpus(predictions: &[TextEntry], training: &TrainingCorpus, n_values: &[usize]) -> Result<Vec<OverlapReport>> {
    let per_prediction: Vec<Vec<OverlapReport>> = predictions
        .par_iter()
        .map(|entry| training.score_many(&entry.id, &TokenSequence::tokenize(&entry.text), n_values))
        .collect::<Result<_>>()?;
    Ok(per_prediction.into_iter().flatten().collect())
}
