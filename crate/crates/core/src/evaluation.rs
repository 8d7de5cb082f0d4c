//! ROUGE-1, ROUGE-2 and ROUGE-L.
//!
//! Text is scored after lowercasing, turning every non-alphanumeric
//! character into a space and splitting on whitespace. No stemming, no
//! stopword removal. Corpus scores are per-line means.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::read_jsonl;
use crate::{Error, Result};

pub fn score_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, hyp: usize, reference: usize) -> Self {
        if overlap == 0 || hyp == 0 || reference == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / hyp as f64;
        let recall = overlap as f64 / reference as f64;
        Self { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
    }

    fn scaled(self, s: f64) -> Self {
        Self { precision: self.precision * s, recall: self.recall * s, f1: self.f1 * s }
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> Prf {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    Prf::from_counts(overlap, h.values().sum(), r.values().sum())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level longest common subsequence.
pub fn rouge_l<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Prf {
    Prf::from_counts(lcs_len(hyp, reference), hyp.len(), reference.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

pub fn score_pair(hyp: &str, reference: &str) -> PairScores {
    let (h, r) = (score_tokens(hyp), score_tokens(reference));
    PairScores { rouge1: rouge_n(&h, &r, 1), rouge2: rouge_n(&h, &r, 2), rouge_l: rouge_l(&h, &r) }
}

/// Macro-averaged scores, each in [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub count: usize,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

impl RougeReport {
    /// The same report on the 0-100 scale.
    pub fn percent(&self) -> Self {
        Self {
            count: self.count,
            rouge1: self.rouge1.scaled(100.0),
            rouge2: self.rouge2.scaled(100.0),
            rouge_l: self.rouge_l.scaled(100.0),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.percent()).expect("report serializes") + "\n"
    }

    /// F1 table with one row per model.
    pub fn table(rows: &[(&str, RougeReport)]) -> String {
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Model".len());
        let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>7}\n", "Model", "ROUGE-1", "ROUGE-2", "ROUGE-L");
        for (name, report) in rows {
            let p = report.percent();
            let _ = writeln!(out, "{name:<width$}  {:>7.2}  {:>7.2}  {:>7.2}", p.rouge1.f1, p.rouge2.f1, p.rouge_l.f1);
        }
        out
    }
}

fn mean(scores: &[PairScores], pick: impl Fn(&PairScores) -> Prf) -> Prf {
    let n = scores.len() as f64;
    let sum = scores.iter().map(pick).fold(Prf::default(), |a, b| Prf {
        precision: a.precision + b.precision,
        recall: a.recall + b.recall,
        f1: a.f1 + b.f1,
    });
    if scores.is_empty() {
        sum
    } else {
        sum.scaled(1.0 / n)
    }
}

pub fn evaluate_corpus<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<RougeReport> {
    if hyps.len() != refs.len() {
        return Err(Error::LineCountMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    let scores: Vec<PairScores> = hyps.iter().zip(refs).map(|(h, r)| score_pair(h.as_ref(), r.as_ref())).collect();
    Ok(RougeReport {
        count: scores.len(),
        rouge1: mean(&scores, |s| s.rouge1),
        rouge2: mean(&scores, |s| s.rouge2),
        rouge_l: mean(&scores, |s| s.rouge_l),
    })
}

/// Lines of a text file; a trailing newline does not add an empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// References from plain text, or the punchlines of a `.jsonl` split.
pub fn read_references(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        Ok(read_jsonl(path)?.into_iter().map(|r| r.punchline).collect())
    } else {
        read_lines(path)
    }
}

pub fn evaluate_files(hyps: &Path, refs: &Path) -> Result<RougeReport> {
    evaluate_corpus(&read_lines(hyps)?, &read_references(refs)?)
}
