//! BM25 retrieval over triples, multi-reference mining, rating ingestion and
//! leave-one-out BLEU bounds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{bleu_stats, corpus_bleu, BleuStats};
use crate::text::Triple;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_CANDIDATES: usize = 15;
pub const DEFAULT_ALPHA: f64 = 0.7;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_RATING_THRESHOLD: f64 = 4.0;
pub const DEFAULT_LOO_TRIALS: usize = 100;

const INDEX_MAGIC: &[u8; 8] = b"DCGMIDX\0";
const INDEX_VERSION: u32 = 1;

/// Query term frequencies, ordered so score sums are reproducible.
pub type Query = BTreeMap<String, u32>;

pub fn query(tokens: &[String]) -> Query {
    let mut q = Query::new();
    for t in tokens {
        *q.entry(t.clone()).or_default() += 1;
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Field {
    Message,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldIndex {
    postings: BTreeMap<String, Vec<Posting>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl FieldIndex {
    fn build<'a>(docs: impl Iterator<Item = &'a [String]>) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::new();
        for (d, tokens) in docs.enumerate() {
            doc_len.push(tokens.len() as u32);
            for (term, tf) in query(tokens) {
                postings.entry(term).or_default().push(Posting { doc: d as u32, tf });
            }
        }
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_len = if doc_len.is_empty() { 0.0 } else { total as f64 / doc_len.len() as f64 };
        Self { postings, doc_len, avg_len }
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_len[doc]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    fn check(&self, n: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Checkpoint(format!("index statistics inconsistent: {m}")));
        if self.doc_len.len() != n {
            return bad("document count");
        }
        let mut lens = vec![0u32; n];
        for list in self.postings.values() {
            if list.is_empty() || list.windows(2).any(|w| w[0].doc >= w[1].doc) {
                return bad("postings order");
            }
            for p in list {
                match lens.get_mut(p.doc as usize) {
                    Some(l) => *l += p.tf,
                    None => return bad("posting document id"),
                }
            }
        }
        if lens != self.doc_len {
            return bad("document lengths");
        }
        Ok(())
    }
}

/// Two-field BM25 index over a fixed set of triples. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleIndex {
    k1: f64,
    b: f64,
    triples: Vec<Triple>,
    message: FieldIndex,
    response: FieldIndex,
}

impl TripleIndex {
    pub fn build(triples: Vec<Triple>) -> Self {
        Self::with_params(triples, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params(triples: Vec<Triple>, k1: f64, b: f64) -> Self {
        let message = FieldIndex::build(triples.iter().map(|t| t.message.as_slice()));
        let response = FieldIndex::build(triples.iter().map(|t| t.response.as_slice()));
        Self { k1, b, triples, message, response }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triple(&self, doc: usize) -> Result<&Triple> {
        self.triples.get(doc).ok_or(Error::UnknownDocument(doc))
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn field(&self, field: Field) -> &FieldIndex {
        match field {
            Field::Message => &self.message,
            Field::Response => &self.response,
        }
    }

    pub fn params(&self) -> (f64, f64) {
        (self.k1, self.b)
    }

    pub fn idf(&self, field: Field, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.field(field).doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, qtf: u32, tf: u32, len: u32, avg_len: f64) -> f64 {
        let ratio = if avg_len > 0.0 { len as f64 / avg_len } else { 1.0 };
        let tf = tf as f64;
        qtf as f64 * idf * tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * ratio))
    }

    /// BM25 similarity of one document field to the query.
    pub fn bm25(&self, field: Field, q: &Query, doc: usize) -> Result<f64> {
        if doc >= self.len() {
            return Err(Error::UnknownDocument(doc));
        }
        let f = self.field(field);
        let mut score = 0.0;
        for (term, &qtf) in q {
            let list = f.postings(term);
            if let Ok(i) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_score(self.idf(field, term), qtf, list[i].tf, f.doc_len[doc], f.avg_len);
            }
        }
        Ok(score)
    }

    /// Scores every document by walking the query's postings lists.
    pub fn score_all(&self, field: Field, q: &Query) -> Vec<f64> {
        let f = self.field(field);
        let mut acc = vec![0.0; self.len()];
        for (term, &qtf) in q {
            let idf = self.idf(field, term);
            for p in f.postings(term) {
                let d = p.doc as usize;
                acc[d] += self.term_score(idf, qtf, p.tf, f.doc_len[d], f.avg_len);
            }
        }
        acc
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        bincode::serialize_into(&mut w, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Checkpoint("not an index file".into()));
        }
        let mut version = [0u8; 4];
        r.read_exact(&mut version)?;
        let version = u32::from_le_bytes(version);
        if version != INDEX_VERSION {
            return Err(Error::Checkpoint(format!("unsupported index version {version}")));
        }
        let index: Self = bincode::deserialize_from(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
        index.message.check(index.len())?;
        index.response.check(index.len())?;
        Ok(index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub doc: usize,
    pub score: f64,
}

fn rank(scores: impl Iterator<Item = (usize, f64)>, n: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = scores.map(|(doc, score)| Candidate { doc, score }).collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc.cmp(&b.doc)));
    all.truncate(n);
    all
}

/// Top-`n` triples by message similarity; ties go to the lower document id.
pub fn ir_nbest(index: &TripleIndex, message: &[String], n: usize) -> Result<Vec<Candidate>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let scores = index.score_all(Field::Message, &query(message));
    Ok(rank(scores.into_iter().enumerate(), n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinerConfig {
    pub candidates: usize,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self { candidates: DEFAULT_CANDIDATES, alpha: DEFAULT_ALPHA, epsilon: DEFAULT_EPSILON }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 || !(0.0..=1.0).contains(&self.alpha) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid miner parameters {self:?}")));
        }
        Ok(())
    }

    pub fn score(&self, d_message: f64, d_response: f64) -> f64 {
        d_message * (self.alpha * d_response + (1.0 - self.alpha) * self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedCandidate {
    pub doc: usize,
    pub id: String,
    pub response: Vec<String>,
    pub d_message: f64,
    pub d_response: f64,
    pub score: f64,
}

/// Ranks indexed triples other than `item` itself by
/// `d(m̃, m) · (α d(r̃, r) + (1 − α) ε)`, keeping positive scores only.
pub fn mine_candidates(index: &TripleIndex, item: &Triple, cfg: &MinerConfig) -> Result<Vec<MinedCandidate>> {
    cfg.validate()?;
    let dm = index.score_all(Field::Message, &query(&item.message));
    let dr = index.score_all(Field::Response, &query(&item.response));
    let scored = (0..index.len())
        .filter(|&d| index.triples[d].id != item.id)
        .map(|d| (d, cfg.score(dm[d], dr[d])))
        .filter(|&(_, s)| s > 0.0);
    Ok(rank(scored, cfg.candidates)
        .into_iter()
        .map(|c| MinedCandidate {
            doc: c.doc,
            id: index.triples[c.doc].id.clone(),
            response: index.triples[c.doc].response.clone(),
            d_message: dm[c.doc],
            d_response: dr[c.doc],
            score: c.score,
        })
        .collect())
}

/// Mines every item in parallel; results are in input order.
pub fn mine_all(index: &TripleIndex, items: &[Triple], cfg: &MinerConfig) -> Result<Vec<Vec<MinedCandidate>>> {
    items.par_iter().map(|t| mine_candidates(index, t, cfg)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rating {
    pub item: String,
    pub candidate: String,
    pub rating: f64,
}

pub fn read_ratings<R: BufRead>(reader: R) -> Result<Vec<Rating>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        let rating: f64 = cols[2].trim().parse().map_err(|_| err(format!("bad rating `{}`", cols[2])))?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(err(format!("rating {rating} outside 1-5")));
        }
        out.push(Rating { item: cols[0].to_string(), candidate: cols[1].to_string(), rating });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Mined,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Mined => "mined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub tokens: Vec<String>,
    pub provenance: Provenance,
    pub rating: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub item: String,
    pub references: Vec<Reference>,
}

impl ReferenceSet {
    pub fn single(item: &Triple) -> Self {
        Self {
            item: item.id.clone(),
            references: vec![Reference { tokens: item.response.clone(), provenance: Provenance::Original, rating: None }],
        }
    }

    pub fn responses(&self) -> Vec<Vec<String>> {
        self.references.iter().map(|r| r.tokens.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }
}

/// Keeps each item's original response plus mined responses whose mean
/// rating reaches `threshold`, collapsing identical token sequences.
pub fn build_reference_sets(
    items: &[Triple],
    candidates: &[Vec<MinedCandidate>],
    ratings: &[Rating],
    threshold: f64,
) -> Result<Vec<ReferenceSet>> {
    if items.len() != candidates.len() {
        return Err(Error::DimensionMismatch(format!("{} items but {} candidate lists", items.len(), candidates.len())));
    }
    let mut known: HashMap<(&str, &str), &MinedCandidate> = HashMap::new();
    for (t, list) in items.iter().zip(candidates) {
        for c in list {
            known.insert((t.id.as_str(), c.id.as_str()), c);
        }
    }
    let mut sums: HashMap<(&str, &str), (f64, u32)> = HashMap::new();
    for r in ratings {
        let key = known
            .get_key_value(&(r.item.as_str(), r.candidate.as_str()))
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::UnknownCandidate { item: r.item.clone(), candidate: r.candidate.clone() })?;
        let e = sums.entry(key).or_default();
        e.0 += r.rating;
        e.1 += 1;
    }
    let mut out = Vec::with_capacity(items.len());
    for (t, list) in items.iter().zip(candidates) {
        let mut set = ReferenceSet::single(t);
        let mut seen: HashSet<&[String]> = HashSet::from([t.response.as_slice()]);
        for c in list {
            let Some(&(sum, n)) = sums.get(&(t.id.as_str(), c.id.as_str())) else { continue };
            let mean = sum / n as f64;
            if mean >= threshold && seen.insert(c.response.as_slice()) {
                set.references.push(Reference { tokens: c.response.clone(), provenance: Provenance::Mined, rating: Some(mean) });
            }
        }
        out.push(set);
    }
    Ok(out)
}

pub fn write_reference_sets<W: Write>(mut w: W, sets: &[ReferenceSet]) -> Result<()> {
    for s in sets {
        for r in &s.references {
            writeln!(w, "{}\t{}\t{}", s.item, r.provenance.as_str(), r.tokens.join(" "))?;
        }
    }
    Ok(())
}

/// Reads sets back in order of first appearance. Ratings are not stored.
pub fn read_reference_sets<R: BufRead>(reader: R) -> Result<Vec<ReferenceSet>> {
    let mut sets: Vec<ReferenceSet> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(err(format!("expected 3 columns, found {}", cols.len())));
        }
        let provenance = match cols[1] {
            "original" => Provenance::Original,
            "mined" => Provenance::Mined,
            other => return Err(err(format!("unknown provenance `{other}`"))),
        };
        let tokens: Vec<String> = cols[2].split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            return Err(err("empty reference".into()));
        }
        let idx = *pos.entry(cols[0].to_string()).or_insert_with(|| {
            sets.push(ReferenceSet { item: cols[0].to_string(), references: Vec::new() });
            sets.len() - 1
        });
        sets[idx].references.push(Reference { tokens, provenance, rating: None });
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy)]
pub enum HypothesisSource<'a> {
    /// The held-out reference itself.
    Human,
    /// One hypothesis per reference set, in the same order.
    System(&'a [Vec<String>]),
    Random(&'a [Vec<String>]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub mean_bleu: f64,
    pub trials: usize,
    pub items: usize,
    /// Items with a single reference, left out of every source.
    pub excluded: usize,
}

/// Mean corpus BLEU over `trials`, each dropping one uniformly chosen
/// reference per item. A given seed drops the same references for every
/// source, so bounds computed with one seed are directly comparable.
pub fn leave_one_out_bleu(sets: &[ReferenceSet], source: HypothesisSource<'_>, trials: usize, seed: u64) -> Result<LooReport> {
    if trials == 0 {
        return Err(Error::Config("leave-one-out needs at least one trial".into()));
    }
    let hyps = match source {
        HypothesisSource::Human => None,
        HypothesisSource::System(h) | HypothesisSource::Random(h) => {
            if h.len() != sets.len() {
                return Err(Error::DimensionMismatch(format!("{} hypotheses for {} reference sets", h.len(), sets.len())));
            }
            Some(h)
        }
    };
    let usable: Vec<usize> = (0..sets.len()).filter(|&i| sets[i].len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::MissingReferences("no item has two or more references".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut stats = BleuStats::default();
        for &i in &usable {
            let refs = sets[i].responses();
            let out = rng.gen_range(0..refs.len());
            let rest: Vec<Vec<String>> = refs.iter().enumerate().filter(|&(j, _)| j != out).map(|(_, r)| r.clone()).collect();
            let hyp = match hyps {
                None => &refs[out],
                Some(h) => &h[i],
            };
            stats += bleu_stats(hyp, &rest);
        }
        total += corpus_bleu(&stats);
    }
    Ok(LooReport { mean_bleu: total / trials as f64, trials, items: usable.len(), excluded: sets.len() - usable.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn triple(id: &str, c: &str, m: &str, r: &str) -> Triple {
        Triple::new(id, t(c), t(m), t(r))
    }

    pub(crate) fn fixture() -> Vec<Triple> {
        vec![
            triple("t1", "hi there", "how are you today", "fine thanks and you"),
            triple("t2", "good morning", "are you coming tonight", "yes i am coming"),
            triple("t3", "lol", "what are you doing", "nothing much you"),
            triple("t4", "so tired", "how was work today", "work was long today"),
            triple("t5", "hey", "you you you", "me me"),
        ]
    }

    /// Linear scan over raw tokens, no postings.
    fn brute_force(triples: &[Triple], field: Field, q: &Query, doc: usize, k1: f64, b: f64) -> f64 {
        let text = |t: &Triple| match field {
            Field::Message => t.message.clone(),
            Field::Response => t.response.clone(),
        };
        let n = triples.len() as f64;
        let total: usize = triples.iter().map(|t| text(t).len()).sum();
        let avg = total as f64 / n;
        let d = text(&triples[doc]);
        let mut s = 0.0;
        for (term, &qtf) in q {
            let tf = d.iter().filter(|w| *w == term).count();
            if tf == 0 {
                continue;
            }
            let df = triples.iter().filter(|t| text(t).contains(term)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let tf = tf as f64;
            s += qtf as f64 * idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * (d.len() as f64 / avg)));
        }
        s
    }

    #[test]
    fn matches_brute_force_on_fixture() {
        let triples = fixture();
        let index = TripleIndex::build(triples.clone());
        let queries = ["how are you", "you you", "work today today", "zebra", "are you coming tonight"];
        for q in queries {
            let q = query(&t(q));
            for field in [Field::Message, Field::Response] {
                let all = index.score_all(field, &q);
                for d in 0..triples.len() {
                    let oracle = brute_force(&triples, field, &q, d, DEFAULT_K1, DEFAULT_B);
                    assert_eq!(index.bm25(field, &q, d).unwrap(), oracle);
                    assert_eq!(all[d], oracle);
                }
            }
        }
    }

    #[test]
    fn idf_two_documents() {
        let index = TripleIndex::build(vec![triple("a", "x", "foo", "y"), triple("b", "x", "bar", "y")]);
        assert!((index.idf(Field::Message, "foo") - 2f64.ln()).abs() < 1e-15);
        assert_eq!(index.bm25(Field::Message, &query(&t("baz")), 0).unwrap(), 0.0);
        assert!(matches!(index.bm25(Field::Message, &query(&t("foo")), 2), Err(Error::UnknownDocument(2))));
    }

    #[test]
    fn nbest_ranks_exact_message_first() {
        let index = TripleIndex::build(fixture());
        for (d, tr) in fixture().iter().enumerate() {
            let best = ir_nbest(&index, &tr.message, 1).unwrap();
            assert_eq!(best[0].doc, d);
        }
        let all = ir_nbest(&index, &t("zebra"), 10).unwrap();
        assert_eq!(all.iter().map(|c| c.doc).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(matches!(ir_nbest(&TripleIndex::build(vec![]), &t("a"), 1), Err(Error::EmptyIndex)));
    }

    #[test]
    fn miner_score_arithmetic() {
        let cfg = MinerConfig { candidates: 15, alpha: 0.5, epsilon: 0.1 };
        assert!((cfg.score(2.0, 1.0) - 1.1).abs() < 1e-15);
        assert_eq!(cfg.score(0.0, 5.0), 0.0);
        let flat = MinerConfig { alpha: 0.0, ..cfg };
        assert!((flat.score(3.0, 100.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mining_excludes_the_item() {
        let index = TripleIndex::build(fixture());
        let cfg = MinerConfig::default();
        for tr in fixture() {
            let c = mine_candidates(&index, &tr, &cfg).unwrap();
            assert!(c.iter().all(|c| c.id != tr.id));
            assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
            assert!(c.iter().all(|c| c.score > 0.0));
        }
        let few = MinerConfig { candidates: 1, ..cfg };
        assert_eq!(mine_candidates(&index, &fixture()[0], &few).unwrap().len(), 1);
    }

    #[test]
    fn reference_sets_follow_ratings() {
        let items = vec![triple("q", "c", "are you coming", "yes")];
        let cand = |id: &str, r: &str| MinedCandidate {
            doc: 0,
            id: id.into(),
            response: t(r),
            d_message: 1.0,
            d_response: 1.0,
            score: 1.0,
        };
        let lists = vec![vec![cand("a", "sure"), cand("b", "no way"), cand("c", "yes"), cand("d", "sure")]];
        let ratings = vec![
            Rating { item: "q".into(), candidate: "a".into(), rating: 5.0 },
            Rating { item: "q".into(), candidate: "b".into(), rating: 4.0 },
            Rating { item: "q".into(), candidate: "b".into(), rating: 3.0 },
            Rating { item: "q".into(), candidate: "c".into(), rating: 5.0 },
            Rating { item: "q".into(), candidate: "d".into(), rating: 4.0 },
        ];
        let sets = build_reference_sets(&items, &lists, &ratings, 4.0).unwrap();
        assert_eq!(sets[0].responses(), vec![t("yes"), t("sure")]);
        assert_eq!(sets[0].references[1].rating, Some(5.0));

        let low = vec![Rating { item: "q".into(), candidate: "a".into(), rating: 2.0 }];
        assert_eq!(build_reference_sets(&items, &lists, &low, 4.0).unwrap()[0].len(), 1);

        let bad = vec![Rating { item: "q".into(), candidate: "zz".into(), rating: 5.0 }];
        assert!(matches!(build_reference_sets(&items, &lists, &bad, 4.0), Err(Error::UnknownCandidate { .. })));
    }

    #[test]
    fn reference_set_round_trip() {
        let sets = vec![
            ReferenceSet {
                item: "x".into(),
                references: vec![
                    Reference { tokens: t("a b"), provenance: Provenance::Original, rating: None },
                    Reference { tokens: t("c"), provenance: Provenance::Mined, rating: None },
                ],
            },
            ReferenceSet::single(&triple("y", "c", "m", "r r")),
        ];
        let mut buf = Vec::new();
        write_reference_sets(&mut buf, &sets).unwrap();
        assert_eq!(read_reference_sets(buf.as_slice()).unwrap(), sets);
        assert!(read_ratings("a\tb\t7\n".as_bytes()).is_err());
        assert_eq!(read_ratings("a\tb\t4.5\n".as_bytes()).unwrap()[0].rating, 4.5);
    }

    #[test]
    fn leave_one_out_trivial_bounds() {
        let sets: Vec<ReferenceSet> = (0..5)
            .map(|i| ReferenceSet {
                item: i.to_string(),
                references: vec![
                    Reference { tokens: t("a b c d e"), provenance: Provenance::Original, rating: None },
                    Reference { tokens: t("a b c d e"), provenance: Provenance::Mined, rating: None },
                ],
            })
            .chain(std::iter::once(ReferenceSet::single(&triple("s", "c", "m", "x"))))
            .collect();
        let human = leave_one_out_bleu(&sets, HypothesisSource::Human, 10, 1).unwrap();
        assert_eq!(human.mean_bleu, 1.0);
        assert_eq!(human.excluded, 1);
        let junk = vec![t("z y x w v"); sets.len()];
        let rnd = leave_one_out_bleu(&sets, HypothesisSource::Random(&junk), 10, 1).unwrap();
        assert_eq!(rnd.mean_bleu, 0.0);
        assert!(leave_one_out_bleu(&sets, HypothesisSource::Human, 0, 1).is_err());
    }

    #[test]
    fn index_container_round_trip() {
        let index = TripleIndex::build(fixture());
        let mut buf = Vec::new();
        index.write(&mut buf).unwrap();
        assert_eq!(TripleIndex::read(buf.as_slice()).unwrap(), index);
        buf[0] = b'X';
        assert!(TripleIndex::read(buf.as_slice()).is_err());
    }

    fn small_corpus() -> impl Strategy<Value = Vec<Triple>> {
        let utt = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..6)
            .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
        prop::collection::vec((utt.clone(), utt.clone(), utt), 1..8).prop_map(|v| {
            v.into_iter().enumerate().map(|(i, (c, m, r))| Triple::new(format!("t{i}"), c, m, r)).collect()
        })
    }

    proptest! {
        #[test]
        fn index_equals_linear_scan(corpus in small_corpus(), q in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "z"]), 0..5)) {
            let index = TripleIndex::build(corpus.clone());
            let q = query(&q.into_iter().map(String::from).collect::<Vec<_>>());
            for field in [Field::Message, Field::Response] {
                let all = index.score_all(field, &q);
                for d in 0..corpus.len() {
                    let oracle = brute_force(&corpus, field, &q, d, DEFAULT_K1, DEFAULT_B);
                    prop_assert_eq!(all[d], oracle);
                    prop_assert!(all[d] >= 0.0);
                }
            }
        }

        #[test]
        fn miner_score_is_monotone(dm in 0.0f64..10.0, dr in 0.0f64..10.0, step in 0.001f64..5.0, alpha in 0.01f64..1.0) {
            let cfg = MinerConfig { alpha, ..MinerConfig::default() };
            prop_assert!(cfg.score(dm, dr + step) >= cfg.score(dm, dr));
            prop_assert!(cfg.score(dm + step, dr) > cfg.score(dm, dr));
        }

        #[test]
        fn reference_set_sizes_are_bounded(corpus in small_corpus(), seed in 0u64..1000) {
            let index = TripleIndex::build(corpus.clone());
            let cfg = MinerConfig::default();
            let lists = mine_all(&index, &corpus, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ratings: Vec<Rating> = corpus.iter().zip(&lists).flat_map(|(t, l)| {
                l.iter().map(|c| Rating { item: t.id.clone(), candidate: c.id.clone(), rating: rng.gen_range(1..=5) as f64 }).collect::<Vec<_>>()
            }).collect();
            let sets = build_reference_sets(&corpus, &lists, &ratings, 4.0).unwrap();
            for s in &sets {
                prop_assert!(s.len() >= 1 && s.len() <= 1 + cfg.candidates);
                prop_assert_eq!(s.references[0].provenance, Provenance::Original);
                prop_assert!(s.references.iter().skip(1).all(|r| r.rating.unwrap() >= 4.0));
            }
        }
    }
}
