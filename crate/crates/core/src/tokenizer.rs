//! Byte-level byte-pair-encoding tokenizer shared by set-ups, punchlines and
//! knowledge labels.
//!
//! Every string is representable: the base alphabet is the 256 byte values,
//! so encoding never fails and `decode(encode(s)) == s` for all UTF-8 input.
//! Merges are learned greedily by pair frequency over pre-tokenized chunks.
//! On disk the tokenizer is the usual pair of plain-text files: `vocab.txt`
//! (one token per line, id = line number) and `merges.txt`, with bytes
//! written through the GPT-2 printable byte alphabet.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Marks a reverse relation label.
pub const REVERSE: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<s>", "</s>", "<r>"];
const BYTE_OFFSET: u32 = SPECIAL_TOKENS.len() as u32;
const BASE_VOCAB: usize = SPECIAL_TOKENS.len() + 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    /// Byte expansion of every non-special id.
    pieces: Vec<Vec<u8>>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }
}

/// Splits text into chunks that merges never cross: an optional single
/// leading space followed by a run of letters, digits, or other symbols;
/// whitespace not attached to a following chunk stands alone.
pub fn pretokenize(text: &str) -> Vec<&str> {
    #[derive(PartialEq)]
    enum Class {
        Alpha,
        Digit,
        Space,
        Other,
    }
    fn class(c: char) -> Class {
        if c.is_alphabetic() {
            Class::Alpha
        } else if c.is_numeric() {
            Class::Digit
        } else if c.is_whitespace() {
            Class::Space
        } else {
            Class::Other
        }
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map_or(text.len(), |(b, _)| *b);
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].1.is_whitespace() {
            let mut j = i;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            // The last space of a run attaches to a following word.
            if j < chars.len() && chars[j - 1].1 == ' ' {
                if j - 1 > i {
                    out.push(&text[chars[i].0..end_of(j - 1)]);
                }
                i = j - 1;
            } else {
                out.push(&text[chars[i].0..end_of(j)]);
                i = j;
                continue;
            }
        }
        let start = i;
        let mut j = i;
        if chars[j].1 == ' ' {
            j += 1;
        }
        let cls = class(chars[j].1);
        while j < chars.len() && class(chars[j].1) == cls && cls != Class::Space {
            j += 1;
        }
        debug_assert!(j > start);
        out.push(&text[chars[start].0..end_of(j)]);
        i = j;
    }
    out
}

impl Tokenizer {
    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = BASE_VOCAB as u32 + rank as u32;
            for id in [a, b] {
                if id < BYTE_OFFSET || id >= next {
                    return Err(Error::Config(format!("merge {rank} references invalid token {id}")));
                }
            }
            let mut bytes = pieces[(a - BYTE_OFFSET) as usize].clone();
            bytes.extend_from_slice(&pieces[(b - BYTE_OFFSET) as usize]);
            pieces.push(bytes);
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(Error::Config(format!("duplicate merge {rank}")));
            }
        }
        Ok(Self { merges, ranks, pieces })
    }

    /// Learns merges until `vocab_size` tokens exist or no pair repeats.
    pub fn train<'t>(texts: impl IntoIterator<Item = &'t str>, vocab_size: usize) -> Self {
        let mut word_counts: BTreeMap<&str, i64> = BTreeMap::new();
        for t in texts {
            for chunk in pretokenize(t) {
                *word_counts.entry(chunk).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(Vec<u32>, i64)> = word_counts
            .into_iter()
            .map(|(w, c)| (w.bytes().map(|b| b as u32 + BYTE_OFFSET).collect(), c))
            .collect();

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, (syms, c)) in words.iter().enumerate() {
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> =
            pair_counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

        let mut merges = Vec::new();
        while BASE_VOCAB + merges.len() < vocab_size {
            let Some((count, Reverse(pair))) = heap.pop() else { break };
            if pair_counts.get(&pair).copied().unwrap_or(0) != count {
                continue; // stale heap entry
            }
            if count < 2 {
                break;
            }
            let new_id = (BASE_VOCAB + merges.len()) as u32;
            merges.push(pair);
            let mut affected: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let (syms, c) = &mut words[wi];
                for p in syms.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_counts.get_mut(&key).expect("counted pair") -= *c;
                    touched.insert(key);
                }
                *syms = merge_pair(syms, pair, new_id);
                for p in syms.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_counts.entry(key).or_insert(0) += *c;
                    where_.entry(key).or_default().insert(wi);
                    touched.insert(key);
                }
            }
            pair_counts.remove(&pair);
            for key in touched {
                if let Some(&c) = pair_counts.get(&key) {
                    if c > 0 {
                        heap.push((c, Reverse(key)));
                    }
                }
            }
        }
        Self::from_merges(merges).expect("trained merges are well-formed")
    }

    pub fn vocab_size(&self) -> usize {
        BASE_VOCAB + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = chunk.bytes().map(|b| b as u32 + BYTE_OFFSET).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            syms = merge_pair(&syms, pair, BASE_VOCAB as u32 + rank);
        }
        out.extend(syms);
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// Bytes of all non-special tokens, decoded as UTF-8 (lossily for
    /// sequences that split a code point).
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id >= BYTE_OFFSET {
                if let Some(p) = self.pieces.get((id - BYTE_OFFSET) as usize) {
                    bytes.extend_from_slice(p);
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn token_string(&self, id: u32) -> Option<String> {
        if id < BYTE_OFFSET {
            return SPECIAL_TOKENS.get(id as usize).map(|s| s.to_string());
        }
        self.pieces.get((id - BYTE_OFFSET) as usize).map(|p| bytes_to_printable(p))
    }

    pub fn vocab_lines(&self) -> Vec<String> {
        (0..self.vocab_size() as u32).map(|id| self.token_string(id).expect("id in range")).collect()
    }

    pub fn merge_lines(&self) -> Vec<String> {
        self.merges
            .iter()
            .map(|&(a, b)| {
                format!("{} {}", self.token_string(a).expect("merge id"), self.token_string(b).expect("merge id"))
            })
            .collect()
    }

    /// Rebuilds a tokenizer from `left right` merge lines.
    pub fn from_merge_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut ids: HashMap<String, u32> = HashMap::new();
        for b in 0..=255u8 {
            ids.insert(bytes_to_printable(&[b]), b as u32 + BYTE_OFFSET);
        }
        let mut merges = Vec::with_capacity(lines.len());
        for (k, line) in lines.iter().enumerate() {
            let line = line.as_ref();
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Config(format!("merge line {} is not `left right`: {line:?}", k + 1)))?;
            let lookup = |s: &str| ids.get(s).copied().ok_or_else(|| Error::Config(format!("unknown merge piece {s:?}")));
            let pair = (lookup(a)?, lookup(b)?);
            merges.push(pair);
            ids.entry(format!("{a}{b}")).or_insert((BASE_VOCAB + k) as u32);
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab = dir.join("vocab.txt");
        let mut v = self.vocab_lines().join("\n");
        v.push('\n');
        fs::write(&vocab, v).map_err(|e| Error::io(&vocab, e))?;
        let merges = dir.join("merges.txt");
        let mut m = String::from("#version: 0.2\n");
        for line in self.merge_lines() {
            m.push_str(&line);
            m.push('\n');
        }
        fs::write(&merges, m).map_err(|e| Error::io(&merges, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let merges_path = dir.join("merges.txt");
        let text = fs::read_to_string(&merges_path).map_err(|e| Error::io(&merges_path, e))?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with("#version") && !l.is_empty()).collect();
        let tok = Self::from_merge_lines(&lines)?;
        let vocab_path = dir.join("vocab.txt");
        if let Ok(vocab) = fs::read_to_string(&vocab_path) {
            let listed: Vec<&str> = vocab.lines().collect();
            if listed != tok.vocab_lines() {
                return Err(Error::Parse {
                    path: vocab_path,
                    line: 0,
                    message: "vocabulary does not match the merge list".into(),
                });
            }
        }
        Ok(tok)
    }
}

fn merge_pair(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

fn byte_alphabet() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    let mut table = ['\0'; 256];
    for &b in &printable {
        table[b as usize] = char::from_u32(b).expect("latin-1");
    }
    let mut n = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            table[b as usize] = char::from_u32(256 + n).expect("valid code point");
            n += 1;
            printable.push(b);
        }
    }
    table
}

fn bytes_to_printable(bytes: &[u8]) -> String {
    thread_local! {
        static ALPHABET: [char; 256] = byte_alphabet();
    }
    ALPHABET.with(|a| bytes.iter().map(|&b| a[b as usize]).collect())
}
