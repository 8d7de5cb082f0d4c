//! Raw jokes to a filtered, segmented, de-duplicated and split dataset.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::knowledge::Triple;
use crate::{Error, Result};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.93;
pub const MIN_WORDS: usize = 15;
pub const MIN_SENTENCES: usize = 2;

const SENTENCE_DELIMITERS: [char; 3] = ['.', '!', '?'];
const CLAUSE_DELIMITERS: [char; 5] = ['.', '!', '?', ';', ','];
/// Characters that may close a joke after its final punctuation.
const TRAILING_CLOSERS: [char; 6] = ['"', '\'', ')', ']', '\u{2019}', '\u{201D}'];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawJoke {
    pub text: String,
    pub source_id: String,
}

impl RawJoke {
    pub fn new(text: impl Into<String>, source_id: impl Into<String>) -> Self {
        Self { text: text.into(), source_id: source_id.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JokeRecord {
    pub setup: String,
    pub punchline: String,
    #[serde(default)]
    pub triples: Vec<Triple>,
}

impl JokeRecord {
    pub fn new(setup: impl Into<String>, punchline: impl Into<String>) -> Self {
        Self { setup: setup.into(), punchline: punchline.into(), triples: Vec::new() }
    }

    /// The joke as one string, used for de-duplication.
    pub fn full_text(&self) -> String {
        format!("{} {}", self.setup, self.punchline)
    }
}

/// Which characters a joke may contain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharsetPolicy {
    /// Allowed on top of printable ASCII (space through `~`).
    pub extra_allowed: Vec<char>,
}

impl Default for CharsetPolicy {
    fn default() -> Self {
        Self { extra_allowed: vec!['\u{2018}', '\u{2019}', '\u{201C}', '\u{201D}'] }
    }
}

impl CharsetPolicy {
    pub fn allows(&self, c: char) -> bool {
        (' '..='~').contains(&c) || self.extra_allowed.contains(&c)
    }
}

fn sentence_count(text: &str) -> usize {
    text.split(|c| SENTENCE_DELIMITERS.contains(&c))
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .count()
}

/// Keeps a joke iff it has only allowed characters, at least two sentences
/// and at least fifteen whitespace-delimited words.
pub fn filter_joke(raw: RawJoke, policy: &CharsetPolicy) -> Option<RawJoke> {
    let text = raw.text.trim();
    if text.is_empty() || !text.chars().all(|c| policy.allows(c)) {
        return None;
    }
    if sentence_count(text) < MIN_SENTENCES || text.split_whitespace().count() < MIN_WORDS {
        return None;
    }
    Some(raw)
}

/// Splits a joke after its last internal clause delimiter: the punchline is
/// the final clause, the set-up everything before it.
pub fn segment_punchline(joke: &RawJoke) -> Result<(String, String)> {
    let text = joke.text.trim();
    // Skip the closing run of punctuation so a trailing "." or "?!" is never
    // taken as the split point.
    let body_end = text
        .char_indices()
        .rev()
        .find(|(_, c)| {
            !(CLAUSE_DELIMITERS.contains(c) || TRAILING_CLOSERS.contains(c) || c.is_whitespace())
        })
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);

    for (pos, c) in text[..body_end].char_indices().rev() {
        if !CLAUSE_DELIMITERS.contains(&c) {
            continue;
        }
        let split = pos + c.len_utf8();
        let setup = text[..split].trim();
        let punchline = text[split..].trim();
        if setup.chars().any(char::is_alphanumeric) && punchline.chars().any(char::is_alphanumeric) {
            return Ok((setup.to_string(), punchline.to_string()));
        }
    }
    Err(Error::Segmentation(text.to_string()))
}

/// Bag-of-words count vector. Zero counts are never stored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BowVector {
    counts: BTreeMap<String, u64>,
}

impl BowVector {
    /// Lowercased tokens split on runs of non-alphanumeric characters.
    pub fn from_text(text: &str) -> Self {
        let mut counts = BTreeMap::new();
        for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            *counts.entry(tok.to_lowercase()).or_insert(0) += 1;
        }
        Self { counts }
    }

    pub fn from_counts<I, S>(counts: I) -> Self
    where
        I: IntoIterator<Item = (S, u64)>,
        S: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in counts {
            if v > 0 {
                *map.entry(k.into()).or_insert(0) += v;
            }
        }
        Self { counts: map }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    fn squared_norm(&self) -> u64 {
        self.counts.values().map(|c| c * c).sum()
    }
}

/// Cosine of two count vectors; dot products and norms are exact integers.
pub fn bow_cosine(a: &BowVector, b: &BowVector) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (small, large) = if a.counts.len() <= b.counts.len() { (a, b) } else { (b, a) };
    let dot: u64 = small
        .counts
        .iter()
        .filter_map(|(k, v)| large.counts.get(k).map(|w| v * w))
        .sum();
    cosine_from_parts(dot, a.squared_norm(), b.squared_norm())
}

fn cosine_from_parts(dot: u64, na: u64, nb: u64) -> f64 {
    if dot == 0 {
        return 0.0;
    }
    (dot as f64 / (na as f64 * nb as f64).sqrt()).min(1.0)
}

/// Keep-first near-duplicate removal: a record survives iff its cosine to
/// every earlier survivor is at most `threshold`.
///
/// Candidates are found through an inverted index over survivor tokens;
/// records sharing no token have cosine 0 and can never collide.
pub fn deduplicate(jokes: Vec<JokeRecord>, threshold: f64) -> Vec<JokeRecord> {
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0, 1]");
    struct Kept {
        ids: Vec<(usize, u64)>,
        norm: u64,
    }
    let mut vocab: HashMap<String, usize> = HashMap::new();
    let mut postings: Vec<Vec<usize>> = Vec::new();
    let mut kept: Vec<Kept> = Vec::new();
    let mut out = Vec::new();
    let mut dots: HashMap<usize, u64> = HashMap::new();

    for record in jokes {
        let bow = BowVector::from_text(&record.full_text());
        let norm = bow.squared_norm();
        dots.clear();
        for (tok, &count) in &bow.counts {
            if let Some(&id) = vocab.get(tok) {
                for &k in &postings[id] {
                    let other = kept[k].ids.binary_search_by_key(&id, |p| p.0).expect("posting is consistent");
                    *dots.entry(k).or_insert(0) += count * kept[k].ids[other].1;
                }
            }
        }
        let duplicate = !bow.is_empty()
            && dots.iter().any(|(&k, &dot)| cosine_from_parts(dot, norm, kept[k].norm) > threshold);
        if duplicate {
            continue;
        }
        let k = kept.len();
        let mut ids = Vec::with_capacity(bow.counts.len());
        for (tok, &count) in &bow.counts {
            let next = vocab.len();
            let id = *vocab.entry(tok.clone()).or_insert(next);
            if id == postings.len() {
                postings.push(Vec::new());
            }
            postings[id].push(k);
            ids.push((id, count));
        }
        ids.sort_unstable_by_key(|p| p.0);
        kept.push(Kept { ids, norm });
        out.push(record);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<JokeRecord>,
    pub valid: Vec<JokeRecord>,
    pub test: Vec<JokeRecord>,
}

/// Seeded shuffle, then a contiguous 70/20/10 partition.
pub fn split_dataset(mut records: Vec<JokeRecord>, seed: u64) -> DatasetSplit {
    let n = records.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n_train = ((0.7 * n as f64).round() as usize).min(n);
    let n_valid = ((0.2 * n as f64).round() as usize).min(n - n_train);
    let test = records.split_off(n_train + n_valid);
    let valid = records.split_off(n_train);
    DatasetSplit { train: records, valid, test }
}

/// Summary of one corpus build.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BuildStats {
    pub raw: usize,
    pub filtered: usize,
    pub segmented: usize,
    pub deduplicated: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// filter → segment → deduplicate → split.
pub fn build_dataset(
    raw: Vec<RawJoke>,
    policy: &CharsetPolicy,
    threshold: f64,
    seed: u64,
) -> (DatasetSplit, BuildStats) {
    let mut stats = BuildStats { raw: raw.len(), ..Default::default() };
    let filtered: Vec<RawJoke> = raw.into_iter().filter_map(|j| filter_joke(j, policy)).collect();
    stats.filtered = filtered.len();
    let records: Vec<JokeRecord> = filtered
        .iter()
        .filter_map(|j| segment_punchline(j).ok())
        .map(|(s, p)| JokeRecord::new(s, p))
        .collect();
    stats.segmented = records.len();
    let records = deduplicate(records, threshold);
    stats.deduplicated = records.len();
    let split = if records.is_empty() { DatasetSplit::default() } else { split_dataset(records, seed) };
    stats.train = split.train.len();
    stats.valid = split.valid.len();
    stats.test = split.test.len();
    (split, stats)
}

/// Reads raw jokes: a CSV with a `Joke` column when the extension is `.csv`,
/// otherwise one joke per non-blank line.
pub fn read_raw_jokes(path: &Path) -> Result<Vec<RawJoke>> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let col = headers.iter().position(|h| h == "Joke").ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            message: "CSV has no `Joke` column".into(),
        })?;
        let id_col = headers.iter().position(|h| h.eq_ignore_ascii_case("id"));
        let mut out = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let text = row.get(col).unwrap_or_default().to_string();
            if text.trim().is_empty() {
                continue;
            }
            let id = id_col.and_then(|c| row.get(c)).map_or_else(|| (i + 1).to_string(), str::to_string);
            out.push(RawJoke::new(text, id));
        }
        Ok(out)
    } else {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                out.push(RawJoke::new(line, (i + 1).to_string()));
            }
        }
        Ok(out)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse { path: path.into(), line, message: e.to_string() }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<JokeRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[JokeRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("train.jsonl"), &split.train)?;
    write_jsonl(&dir.join("valid.jsonl"), &split.valid)?;
    write_jsonl(&dir.join("test.jsonl"), &split.test)
}
