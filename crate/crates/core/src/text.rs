//! Tokenization, vocabularies, triple corpora and the count-based
//! representations (bags of words, n-gram multisets) built on top of them.
//!
//! Tokenizer rules, applied in order:
//!
//! 1. lowercase the whole input;
//! 2. split on Unicode whitespace;
//! 3. drop any whitespace-delimited chunk found in [`EMOTICONS`];
//! 4. drop characters in the pictographic emoji blocks;
//! 5. split every ASCII punctuation character off as its own token.
//!
//! The emoticon list only holds entries that mix punctuation with at least
//! one other character, so no token emitted by step 5 can match it and
//! re-tokenizing the space-joined output is the identity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, Write};
use std::ops::Add;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Emoticons removed by [`tokenize`], already lowercased.
pub const EMOTICONS: &[&str] = &[
    ":)", ":-)", ":(", ":-(", ":d", ":-d", ";)", ";-)", ":p", ":-p", ";p", ";-p", ":o", ":-o",
    ":/", ":-/", ":\\", ":|", ":-|", ":'(", ":')", ":*", ":-*", ":3", "=)", "=(", "=d", "=p",
    "(:", "):", "<3", "</3", "^_^", "^^", "-_-", "o_o", ">_<", "t_t", ":]", ":[", "8)", "b)",
];

pub const START: &str = "<s>";
pub const END: &str = "</s>";
pub const UNK: &str = "<unk>";
/// Separates utterances when a triple is flattened into one sequence.
pub const SEP: &str = "<sep>";

pub const START_ID: usize = 0;
pub const END_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SEP_ID: usize = 3;
const RESERVED: [&str; 4] = [START, END, UNK, SEP];

fn is_pictograph(c: char) -> bool {
    matches!(c as u32, 0x1F300..=0x1FAFF | 0x2600..=0x27BF | 0xFE0F | 0x200D)
}

pub fn tokenize(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let mut out = Vec::new();
    for chunk in lowered.split_whitespace() {
        if EMOTICONS.contains(&chunk) {
            continue;
        }
        let mut word = String::new();
        for c in chunk.chars() {
            if is_pictograph(c) {
                continue;
            }
            if c.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// One (context, message, response) conversational unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub id: String,
    pub context: Vec<String>,
    pub message: Vec<String>,
    pub response: Vec<String>,
}

impl Triple {
    pub fn new(id: impl Into<String>, context: Vec<String>, message: Vec<String>, response: Vec<String>) -> Self {
        Self { id: id.into(), context, message, response }
    }

    /// Builds a triple from raw utterances; `None` if any utterance is empty
    /// after tokenization.
    pub fn from_raw(id: &str, context: &str, message: &str, response: &str) -> Option<Self> {
        let (c, m, r) = (tokenize(context), tokenize(message), tokenize(response));
        if c.is_empty() || m.is_empty() || r.is_empty() {
            return None;
        }
        Some(Self::new(id, c, m, r))
    }

    pub fn utterances(&self) -> [&[String]; 3] {
        [&self.context, &self.message, &self.response]
    }
}

/// Reads a `id<TAB>context<TAB>message<TAB>response` corpus.
///
/// Good triples and per-line errors are returned separately so the caller
/// can decide how much damage to tolerate. Blank lines are ignored.
pub fn parse_triples<R: BufRead>(reader: R) -> Result<(Vec<Triple>, Vec<Error>)> {
    let mut triples = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            errors.push(Error::Parse { line: lineno, message: format!("expected 4 tab-separated columns, found {}", cols.len()) });
            continue;
        }
        let id = cols[0].trim();
        if id.is_empty() {
            errors.push(Error::Parse { line: lineno, message: "empty id".into() });
            continue;
        }
        if !seen.insert(id.to_string()) {
            errors.push(Error::Parse { line: lineno, message: format!("duplicate id `{id}`") });
            continue;
        }
        match Triple::from_raw(id, cols[1], cols[2], cols[3]) {
            Some(t) => triples.push(t),
            None => errors.push(Error::Parse { line: lineno, message: "utterance empty after tokenization".into() }),
        }
    }
    Ok((triples, errors))
}

/// Strict variant of [`parse_triples`]: the first bad line is an error.
pub fn read_triples<R: BufRead>(reader: R) -> Result<Vec<Triple>> {
    let (triples, mut errors) = parse_triples(reader)?;
    if !errors.is_empty() {
        return Err(errors.swap_remove(0));
    }
    Ok(triples)
}

/// Writes triples with their tokens joined by single spaces; reading the
/// output back yields the same triples.
pub fn write_triples<W: Write>(mut w: W, triples: &[Triple]) -> Result<()> {
    for t in triples {
        writeln!(w, "{}\t{}\t{}\t{}", t.id, t.context.join(" "), t.message.join(" "), t.response.join(" "))?;
    }
    Ok(())
}

/// Token ↔ index bijection with reserved markers at indices 0..4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, counts, index }
    }

    /// Keeps the `cap` most frequent tokens (ties broken by lexicographic
    /// token order) plus the reserved markers.
    ///
    /// The frequency table drives the NCE noise distribution: `</s>` counts
    /// once per utterance, `<unk>` counts the dropped tokens, `<s>` and `<sep>`
    /// are never predicted and count zero.
    pub fn build(corpus: &[Triple], cap: usize) -> Self {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut utterances = 0u64;
        for t in corpus {
            for u in t.utterances() {
                utterances += 1;
                for tok in u {
                    *freq.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().filter(|(t, _)| !RESERVED.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let dropped: u64 = ranked.iter().skip(cap).map(|(_, c)| c).sum();
        ranked.truncate(cap);

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0, utterances, dropped, 0];
        for (tok, c) in ranked {
            tokens.push(tok.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to indices, OOV → `<unk>`; `framed` wraps the result in
    /// `<s> … </s>`.
    pub fn encode(&self, tokens: &[String], framed: bool) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        if framed {
            out.push(START_ID);
        }
        out.extend(tokens.iter().map(|t| self.id(t).unwrap_or(UNK_ID)));
        if framed {
            out.push(END_ID);
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK).to_string()).collect()
    }

    /// Content digest over the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `index<TAB>token<TAB>count` per line.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (t, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{i}\t{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(format!("expected 3 columns, found {}", cols.len())));
            }
            let idx: usize = cols[0].parse().map_err(|_| bad("bad index".into()))?;
            if idx != tokens.len() {
                return Err(bad(format!("index {idx} out of sequence")));
            }
            tokens.push(cols[1].to_string());
            counts.push(cols[2].parse().map_err(|_| bad("bad count".into()))?);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse { line: 1, message: "reserved tokens missing".into() });
        }
        Ok(Self::from_parts(tokens, counts))
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }
}

/// Sparse token-count vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagOfWords {
    dim: usize,
    counts: BTreeMap<usize, u32>,
}

impl BagOfWords {
    pub fn new(dim: usize) -> Self {
        Self { dim, counts: BTreeMap::new() }
    }

    pub fn from_ids(ids: &[usize], dim: usize) -> Result<Self> {
        let mut bag = Self::new(dim);
        for &id in ids {
            if id >= dim {
                return Err(Error::IndexOutOfRange { index: id, dim });
            }
            *bag.counts.entry(id).or_default() += 1;
        }
        Ok(bag)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: usize) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// Nonzero entries in ascending index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts.iter().map(|(&i, &c)| (i, c))
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (i, c) in self.iter() {
            v[i] = c as f64;
        }
        v
    }
}

impl Add for &BagOfWords {
    type Output = BagOfWords;

    fn add(self, rhs: &BagOfWords) -> BagOfWords {
        assert_eq!(self.dim, rhs.dim, "bag dimension mismatch");
        let mut out = self.clone();
        for (i, c) in rhs.iter() {
            *out.counts.entry(i).or_default() += c;
        }
        out
    }
}

pub fn bag_of_words(ids: &[usize], dim: usize) -> Result<BagOfWords> {
    BagOfWords::from_ids(ids, dim)
}

/// Multiset of contiguous n-token windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramMultiset<T: Eq + Hash> {
    order: usize,
    counts: HashMap<Vec<T>, u32>,
}

impl<T: Eq + Hash + Clone> NGramMultiset<T> {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn count(&self, gram: &[T]) -> u32 {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn contains(&self, gram: &[T]) -> bool {
        self.counts.contains_key(gram)
    }

    /// Total number of windows, with multiplicity.
    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<T>, u32)> {
        self.counts.iter().map(|(g, &c)| (g, c))
    }
}

pub fn ngrams<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> NGramMultiset<T> {
    assert!(n >= 1, "n-gram order must be at least 1");
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_default() += 1;
    }
    NGramMultiset { order: n, counts }
}

/// Keeps triples containing at least one bigram whose corpus-wide count
/// exceeds `min_count`. Bigrams never span utterance boundaries.
pub fn filter_triples(corpus: &[Triple], min_count: u32) -> Vec<Triple> {
    let mut bigrams: HashMap<(&str, &str), u32> = HashMap::new();
    for t in corpus {
        for u in t.utterances() {
            for w in u.windows(2) {
                *bigrams.entry((w[0].as_str(), w[1].as_str())).or_default() += 1;
            }
        }
    }
    corpus
        .iter()
        .filter(|t| {
            t.utterances()
                .iter()
                .any(|u| u.windows(2).any(|w| bigrams[&(w[0].as_str(), w[1].as_str())] > min_count))
        })
        .cloned()
        .collect()
}
