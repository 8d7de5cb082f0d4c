//! Beam search and greedy decoding over any next-token scorer.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::corpus::JokeRecord;
use crate::model::{Example, ForwardOptions, Prepared, Seq2Seq};
use crate::tokenizer::{Tokenizer, BOS, EOS};
use crate::Result;

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 64;

/// Source of next-token log-probabilities for a prefix that starts with BOS.
pub trait StepScorer {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS; ends with EOS once finished.
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start() -> Self {
        Self { tokens: vec![BOS], logprob: 0.0, finished: false }
    }

    /// Tokens after BOS, including EOS if present.
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn normalized_score(&self) -> f64 {
        self.logprob / self.generated_len().max(1) as f64
    }

    /// Generated tokens without BOS and EOS.
    pub fn content(&self) -> &[u32] {
        let end = if self.finished { self.tokens.len() - 1 } else { self.tokens.len() };
        &self.tokens[1..end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Rank finished hypotheses by mean token log-probability instead of total.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: DEFAULT_BEAM, max_len: DEFAULT_MAX_LEN, length_normalize: true }
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Hypothesis, b: &Hypothesis, score: impl Fn(&Hypothesis) -> f64) -> Ordering {
    score(b).total_cmp(&score(a)).then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn beam_search(scorer: &dyn StepScorer, config: BeamConfig) -> Result<Hypothesis> {
    let width = config.beam.max(1);
    let mut beams = vec![Hypothesis::start()];
    for _ in 0..config.max_len {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for h in &beams {
            if h.finished {
                candidates.push(h.clone());
                continue;
            }
            for (tok, lp) in scorer.next_log_probs(&h.tokens)?.into_iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis { tokens, logprob: h.logprob + lp, finished: tok as u32 == EOS });
            }
        }
        candidates.sort_by(|a, b| rank(a, b, |h| h.logprob));
        candidates.truncate(width);
        beams = candidates;
    }
    let pool: Vec<&Hypothesis> = if beams.iter().any(|h| h.finished) {
        beams.iter().filter(|h| h.finished).collect()
    } else {
        beams.iter().collect()
    };
    let score = |h: &Hypothesis| if config.length_normalize { h.normalized_score() } else { h.logprob };
    let best = pool.into_iter().min_by(|a, b| rank(a, b, score)).expect("beam is never empty");
    Ok(best.clone())
}

/// Argmax decoding, lowest token id on ties.
pub fn greedy(scorer: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis::start();
    for _ in 0..max_len {
        let lps = scorer.next_log_probs(&h.tokens)?;
        let (tok, lp) = lps
            .iter()
            .enumerate()
            .min_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(&b.0)))
            .expect("non-empty vocabulary");
        h.tokens.push(tok as u32);
        h.logprob += lp;
        if tok as u32 == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Total log-probability of a token sequence under the scorer.
pub fn rescore(scorer: &dyn StepScorer, tokens: &[u32]) -> Result<f64> {
    let mut total = 0.0;
    for t in 1..tokens.len() {
        total += scorer.next_log_probs(&tokens[..t])?[tokens[t] as usize];
    }
    Ok(total)
}

/// A model bound to one prepared input.
pub struct ModelScorer<'m> {
    model: &'m Seq2Seq,
    prepared: Prepared,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Seq2Seq, example: &Example, options: ForwardOptions) -> Result<Self> {
        let prepared = model.prepare(&example.source, example.graph.as_ref(), options)?;
        Ok(Self { model, prepared })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.prepared, prefix)
    }
}

/// Beam length capped so the prefix always fits the decoder positions.
fn effective(model: &Seq2Seq, config: BeamConfig) -> BeamConfig {
    BeamConfig { max_len: config.max_len.min(model.config.max_tgt_len), ..config }
}

/// One detokenized punchline per record, in input order.
pub fn generate(model: &Seq2Seq, tokenizer: &Tokenizer, records: &[JokeRecord], config: BeamConfig) -> Result<Vec<String>> {
    let config = effective(model, config);
    records
        .par_iter()
        .map(|r| {
            let example = Example::from_record(r, tokenizer, &model.config)?;
            let scorer = ModelScorer::new(model, &example, ForwardOptions::default())?;
            let best = beam_search(&scorer, config)?;
            Ok(tokenizer.decode(best.content()).replace(['\n', '\r'], " "))
        })
        .collect()
}
