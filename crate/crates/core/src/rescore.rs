//! Log-linear rescoring of n-best lists: feature providers, the n-best and
//! weights file formats, and one-pass MERT against corpus BLEU.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{bleu_stats, corpus_bleu, BleuStats, BLEU_ORDER};
use crate::model::Model;
use crate::retrieval::ReferenceSet;
use crate::text::{ngrams, Triple, Vocabulary};

pub const WORD_PENALTY: &str = "word_penalty";
pub const IR_SCORE: &str = "ir_score";
pub const MODEL_LOGPROB: &str = "model_logprob";
pub const CMM_FEATURES: usize = 2 * BLEU_ORDER;

pub fn cmm_names() -> Vec<String> {
    let c = (1..=BLEU_ORDER).map(|n| format!("cmm_c_{n}"));
    let m = (1..=BLEU_ORDER).map(|n| format!("cmm_m_{n}"));
    c.chain(m).collect()
}

/// For n = 1..4, the number of n-gram occurrences in `r` that appear
/// anywhere in `c`, then the same against `m`.
pub fn cmm_features(c: &[String], m: &[String], r: &[String]) -> [f64; CMM_FEATURES] {
    let mut out = [0.0; CMM_FEATURES];
    for (s, src) in [c, m].into_iter().enumerate() {
        for n in 1..=BLEU_ORDER {
            let have = ngrams(src, n);
            out[s * BLEU_ORDER + n - 1] = r.windows(n).filter(|g| have.contains(g)).count() as f64;
        }
    }
    out
}

pub fn word_penalty(r: &[String]) -> f64 {
    r.len() as f64
}

/// Ordered, duplicate-free feature names shared by lists and weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRegistry {
    names: Vec<String>,
}

impl FeatureRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains(char::is_whitespace) || n.contains('=') {
                return Err(Error::RegistryMismatch(format!("invalid feature name `{n}`")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::RegistryMismatch(format!("feature `{n}` registered twice")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn ensure_same(&self, other: &FeatureRegistry) -> Result<()> {
        if self != other {
            return Err(Error::RegistryMismatch(format!("[{}] vs [{}]", self.names.join(","), other.names.join(","))));
        }
        Ok(())
    }
}

/// The (context, message) side of an item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItemSource {
    pub id: String,
    pub context: Vec<String>,
    pub message: Vec<String>,
}

impl From<&Triple> for ItemSource {
    fn from(t: &Triple) -> Self {
        Self { id: t.id.clone(), context: t.context.clone(), message: t.message.clone() }
    }
}

/// A candidate response before feature extraction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawHypothesis {
    pub tokens: Vec<String>,
    pub ir_score: Option<f64>,
    /// Values for imported features, in the importing provider's order.
    pub imported: Vec<f64>,
}

pub trait FeatureProvider: Sync {
    fn names(&self) -> Vec<String>;
    fn compute(&self, item: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>>;
}

pub struct CmmProvider;

impl FeatureProvider for CmmProvider {
    fn names(&self) -> Vec<String> {
        cmm_names()
    }

    fn compute(&self, item: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>> {
        Ok(cmm_features(&item.context, &item.message, &hyp.tokens).to_vec())
    }
}

pub struct WordPenaltyProvider;

impl FeatureProvider for WordPenaltyProvider {
    fn names(&self) -> Vec<String> {
        vec![WORD_PENALTY.into()]
    }

    fn compute(&self, _: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>> {
        Ok(vec![word_penalty(&hyp.tokens)])
    }
}

pub struct IrScoreProvider;

impl FeatureProvider for IrScoreProvider {
    fn names(&self) -> Vec<String> {
        vec![IR_SCORE.into()]
    }

    fn compute(&self, _: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>> {
        hyp.ir_score.map(|s| vec![s]).ok_or_else(|| Error::Config("hypothesis has no retrieval score".into()))
    }
}

/// `log p(r | c, m)` under a trained model.
pub struct ModelLogProbProvider<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
}

impl FeatureProvider for ModelLogProbProvider<'_> {
    fn names(&self) -> Vec<String> {
        vec![MODEL_LOGPROB.into()]
    }

    fn compute(&self, item: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>> {
        let enc = |t: &[String]| self.vocab.encode(t, false);
        let lp = self.model.response_log_prob(&enc(&item.context), &enc(&item.message), &enc(&hyp.tokens))?;
        Ok(vec![lp])
    }
}

/// Features carried over from an external n-best file.
pub struct ImportedProvider {
    pub names: Vec<String>,
}

impl FeatureProvider for ImportedProvider {
    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn compute(&self, _: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>> {
        if hyp.imported.len() != self.names.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} imported values for {} imported features",
                hyp.imported.len(),
                self.names.len()
            )));
        }
        Ok(hyp.imported.clone())
    }
}

pub fn registry_of(providers: &[&dyn FeatureProvider]) -> Result<FeatureRegistry> {
    if providers.is_empty() {
        return Err(Error::NoProviders);
    }
    FeatureRegistry::new(providers.iter().flat_map(|p| p.names()).collect())
}

/// Concatenates every provider's values; failures name the first feature of
/// the failing provider.
pub fn extract_features(providers: &[&dyn FeatureProvider], item: &ItemSource, hyp: &RawHypothesis) -> Result<Vec<f64>> {
    if providers.is_empty() {
        return Err(Error::NoProviders);
    }
    let mut out = Vec::new();
    for p in providers {
        let names = p.names();
        let label = names.first().cloned().unwrap_or_default();
        let fail = |message: String| Error::Provider { feature: label.clone(), message };
        let values = p.compute(item, hyp).map_err(|e| fail(e.to_string()))?;
        if values.len() != names.len() {
            return Err(fail(format!("returned {} values for {} names", values.len(), names.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Provider { feature: names[i].clone(), message: "non-finite value".into() });
        }
        out.extend(values);
    }
    Ok(out)
}

/// The system configurations compared in the experiments, each with a fixed
/// feature count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureSet {
    /// Retrieval score and word penalty.
    Ir,
    /// Eight match counts and word penalty.
    Cmm,
    IrCmm,
    /// Imported decoder features only.
    Mt,
    MtCmm,
    /// Model log-probability and word penalty.
    Neural,
    NeuralCmm,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 7] = [Self::Ir, Self::Cmm, Self::IrCmm, Self::Mt, Self::MtCmm, Self::Neural, Self::NeuralCmm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ir => "ir",
            Self::Cmm => "cmm",
            Self::IrCmm => "ir+cmm",
            Self::Mt => "mt",
            Self::MtCmm => "mt+cmm",
            Self::Neural => "neural",
            Self::NeuralCmm => "neural+cmm",
        }
    }

    pub fn uses_model(self) -> bool {
        matches!(self, Self::Neural | Self::NeuralCmm)
    }

    pub fn uses_import(self) -> bool {
        matches!(self, Self::Mt | Self::MtCmm)
    }

    pub fn uses_ir(self) -> bool {
        matches!(self, Self::Ir | Self::IrCmm)
    }

    fn uses_cmm(self) -> bool {
        matches!(self, Self::Cmm | Self::IrCmm | Self::MtCmm | Self::NeuralCmm)
    }

    /// Registry size given the number of imported features.
    pub fn expected_len(self, imported: usize) -> usize {
        let cmm = if self.uses_cmm() { CMM_FEATURES } else { 0 };
        let own = match self {
            Self::Mt | Self::MtCmm => imported,
            _ => 2,
        };
        match self {
            Self::Cmm => cmm + 1,
            _ => own + cmm,
        }
    }

    /// Providers in registry order: imported, match counts, word penalty,
    /// retrieval score, model log-probability.
    pub fn providers<'a>(self, model: Option<ModelLogProbProvider<'a>>, imported: &[String]) -> Result<Vec<Box<dyn FeatureProvider + 'a>>> {
        let mut out: Vec<Box<dyn FeatureProvider + 'a>> = Vec::new();
        if self.uses_import() {
            if imported.is_empty() {
                return Err(Error::Config(format!("feature set {self} needs imported n-best features")));
            }
            out.push(Box::new(ImportedProvider { names: imported.to_vec() }));
        }
        if self.uses_cmm() {
            out.push(Box::new(CmmProvider));
        }
        if !self.uses_import() {
            out.push(Box::new(WordPenaltyProvider));
        }
        if self.uses_ir() {
            out.push(Box::new(IrScoreProvider));
        }
        if self.uses_model() {
            let p = model.ok_or_else(|| Error::Config(format!("feature set {self} needs a model checkpoint")))?;
            out.push(Box::new(p));
        }
        let refs: Vec<&dyn FeatureProvider> = out.iter().map(|b| b.as_ref()).collect();
        let reg = registry_of(&refs)?;
        assert_eq!(reg.len(), self.expected_len(imported.len()), "feature accounting for {self}");
        Ok(out)
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown feature set `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    pub features: Vec<f64>,
    /// Total model score, as last assigned.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub item: String,
    pub context: Vec<String>,
    pub message: Vec<String>,
    pub hypotheses: Vec<Hypothesis>,
}

/// Extracts features for every raw hypothesis of one item.
pub fn build_nbest(providers: &[&dyn FeatureProvider], item: &ItemSource, raw: &[RawHypothesis]) -> Result<NBestList> {
    let hypotheses = raw
        .iter()
        .map(|h| {
            Ok(Hypothesis {
                tokens: h.tokens.clone(),
                features: extract_features(providers, item, h)?,
                score: h.ir_score.unwrap_or(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NBestList { item: item.id.clone(), context: item.context.clone(), message: item.message.clone(), hypotheses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearWeights {
    pub registry: FeatureRegistry,
    pub values: Vec<f64>,
}

impl LogLinearWeights {
    pub fn zeros(registry: FeatureRegistry) -> Self {
        let values = vec![0.0; registry.len()];
        Self { registry, values }
    }

    pub fn new(registry: FeatureRegistry, values: Vec<f64>) -> Result<Self> {
        if values.len() != registry.len() {
            return Err(Error::RegistryMismatch(format!("{} weights for {} features", values.len(), registry.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log-linear weight".into()));
        }
        Ok(Self { registry, values })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.registry.index_of(name).map(|i| self.values[i])
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (n, v) in self.registry.names().iter().zip(&self.values) {
            writeln!(w, "{n}\t{v}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { line: i + 1, message };
            let (n, v) = line.split_once('\t').ok_or_else(|| err("expected `name<TAB>weight`".into()))?;
            names.push(n.to_string());
            values.push(v.trim().parse().map_err(|_| err(format!("bad weight `{v}`")))?);
        }
        Self::new(FeatureRegistry::new(names)?, values)
    }
}

fn dot(w: &[f64], f: &[f64]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * b).sum()
}

pub fn score_hypothesis(w: &LogLinearWeights, registry: &FeatureRegistry, features: &[f64]) -> Result<f64> {
    w.registry.ensure_same(registry)?;
    if features.len() != registry.len() {
        return Err(Error::RegistryMismatch(format!("{} values for {} features", features.len(), registry.len())));
    }
    Ok(dot(&w.values, features))
}

/// Rescores and stably sorts by descending score.
pub fn rescore_nbest(list: &NBestList, registry: &FeatureRegistry, w: &LogLinearWeights) -> Result<NBestList> {
    let mut out = list.clone();
    for h in &mut out.hypotheses {
        h.score = score_hypothesis(w, registry, &h.features)?;
    }
    out.hypotheses.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Index of the top hypothesis; ties go to the earliest.
fn argmax(list: &NBestList, w: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, h) in list.hypotheses.iter().enumerate() {
        let s = dot(w, &h.features);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// N-best lists paired with per-hypothesis BLEU statistics.
pub struct TuningSet<'a> {
    lists: &'a [NBestList],
    stats: Vec<Vec<BleuStats>>,
}

impl<'a> TuningSet<'a> {
    pub fn new(lists: &'a [NBestList], registry: &FeatureRegistry, refsets: &[ReferenceSet]) -> Result<Self> {
        if lists.is_empty() {
            return Err(Error::Config("no n-best lists to tune on".into()));
        }
        let by_id: HashMap<&str, &ReferenceSet> = refsets.iter().map(|r| (r.item.as_str(), r)).collect();
        let stats = lists
            .par_iter()
            .map(|l| {
                if l.hypotheses.is_empty() {
                    return Err(Error::Config(format!("empty n-best list for item {}", l.item)));
                }
                if let Some(h) = l.hypotheses.iter().find(|h| h.features.len() != registry.len()) {
                    return Err(Error::RegistryMismatch(format!("{} values for {} features", h.features.len(), registry.len())));
                }
                let refs = by_id.get(l.item.as_str()).ok_or_else(|| Error::MissingReferences(l.item.clone()))?.responses();
                if refs.is_empty() {
                    return Err(Error::MissingReferences(l.item.clone()));
                }
                Ok(l.hypotheses.iter().map(|h| bleu_stats(&h.tokens, &refs)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lists, stats })
    }

    pub fn selection(&self, w: &[f64]) -> Vec<usize> {
        self.lists.iter().map(|l| argmax(l, w)).collect()
    }

    pub fn stats_of(&self, selection: &[usize]) -> BleuStats {
        selection.iter().enumerate().map(|(i, &h)| self.stats[i][h]).sum()
    }

    pub fn bleu(&self, w: &[f64]) -> f64 {
        corpus_bleu(&self.stats_of(&self.selection(w)))
    }

    /// Highest corpus BLEU reachable by any per-item choice. Exponential;
    /// for small fixtures only.
    pub fn oracle_bleu(&self) -> f64 {
        fn go(ts: &TuningSet<'_>, i: usize, acc: BleuStats) -> f64 {
            if i == ts.stats.len() {
                return corpus_bleu(&acc);
            }
            ts.stats[i].iter().map(|&s| go(ts, i + 1, acc + s)).fold(0.0, f64::max)
        }
        go(self, 0, BleuStats::default())
    }

    /// Exact line search along feature `j`: returns the step γ (relative to
    /// `w`) at the leftmost best interval and that interval's BLEU.
    pub fn line_search(&self, w: &[f64], j: usize) -> (f64, f64) {
        let envelopes: Vec<Vec<(f64, usize)>> = self
            .lists
            .par_iter()
            .map(|l| {
                let lines: Vec<(f64, f64)> = l.hypotheses.iter().map(|h| (h.features[j], dot(w, &h.features))).collect();
                upper_envelope(&lines)
            })
            .collect();
        let mut events: Vec<(f64, usize, usize)> = Vec::new();
        let mut current: Vec<usize> = Vec::with_capacity(envelopes.len());
        for (i, env) in envelopes.iter().enumerate() {
            current.push(env[0].1);
            events.extend(env[1..].iter().map(|&(x, h)| (x, i, h)));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut stats = self.stats_of(&current);
        let mut bps: Vec<f64> = Vec::new();
        let mut scores = vec![corpus_bleu(&stats)];
        let mut k = 0;
        while k < events.len() {
            let x = events[k].0;
            while k < events.len() && events[k].0 == x {
                let (_, i, h) = events[k];
                stats = sub(stats, self.stats[i][current[i]]) + self.stats[i][h];
                current[i] = h;
                k += 1;
            }
            bps.push(x);
            scores.push(corpus_bleu(&stats));
        }
        let mut best = 0;
        for (s, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = s;
            }
        }
        let gamma = match (best, bps.len()) {
            (_, 0) => 0.0,
            (0, _) => bps[0] - 1.0,
            (b, n) if b == n => bps[n - 1] + 1.0,
            (b, _) => 0.5 * (bps[b - 1] + bps[b]),
        };
        (gamma, scores[best])
    }
}

fn sub(a: BleuStats, b: BleuStats) -> BleuStats {
    let mut out = a;
    for n in 0..BLEU_ORDER {
        out.matches[n] -= b.matches[n];
        out.totals[n] -= b.totals[n];
    }
    out.hyp_len -= b.hyp_len;
    out.ref_len -= b.ref_len;
    out
}

/// Upper envelope of lines `intercept + γ·slope` as (start γ, line index)
/// segments from γ = −∞. Equal lines resolve to the lowest index.
pub fn upper_envelope(lines: &[(f64, f64)]) -> Vec<(f64, usize)> {
    let mut order: Vec<usize> = (0..lines.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, ia) = lines[a];
        let (sb, ib) = lines[b];
        sa.total_cmp(&sb).then(ib.total_cmp(&ia)).then(a.cmp(&b))
    });
    order.dedup_by(|b, a| lines[*a].0 == lines[*b].0);
    let mut hull: Vec<(f64, usize)> = Vec::new();
    for &l in &order {
        let (s, c) = lines[l];
        let mut start = f64::NEG_INFINITY;
        while let Some(&(top_start, t)) = hull.last() {
            let (ts, tc) = lines[t];
            let x = (tc - c) / (s - ts);
            if x <= top_start {
                hull.pop();
            } else {
                start = x;
                break;
            }
        }
        hull.push((start, l));
    }
    hull
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MertOptions {
    /// Passes over all features.
    pub passes: usize,
    /// Extra runs from randomly perturbed starting points.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MertOptions {
    fn default() -> Self {
        Self { passes: 1, restarts: 0, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MertOutcome {
    pub weights: LogLinearWeights,
    pub bleu_before: f64,
    pub bleu_after: f64,
}

fn coordinate_pass(ts: &TuningSet<'_>, w: &mut [f64], bleu: &mut f64) {
    for j in 0..w.len() {
        let (gamma, best) = ts.line_search(w, j);
        if best > *bleu {
            let old = w[j];
            w[j] += gamma;
            let actual = ts.bleu(w);
            if actual >= *bleu {
                *bleu = actual;
            } else {
                w[j] = old;
            }
        }
    }
}

/// One coordinate pass of exact line search over the features in registry
/// order. Never lowers tuning BLEU.
pub fn mert_iteration(lists: &[NBestList], registry: &FeatureRegistry, refsets: &[ReferenceSet], w0: &LogLinearWeights) -> Result<MertOutcome> {
    mert(lists, registry, refsets, w0, &MertOptions::default())
}

pub fn mert(
    lists: &[NBestList],
    registry: &FeatureRegistry,
    refsets: &[ReferenceSet],
    w0: &LogLinearWeights,
    opts: &MertOptions,
) -> Result<MertOutcome> {
    w0.registry.ensure_same(registry)?;
    let ts = TuningSet::new(lists, registry, refsets)?;
    let before = ts.bleu(&w0.values);
    let run = |start: Vec<f64>| {
        let mut w = start;
        let mut bleu = ts.bleu(&w);
        for _ in 0..opts.passes {
            coordinate_pass(&ts, &mut w, &mut bleu);
        }
        (w, bleu)
    };
    let (mut best_w, mut best) = run(w0.values.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.restarts {
        let start: Vec<f64> = w0
            .values
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + z
            })
            .collect();
        let (w, b) = run(start);
        if b > best {
            best_w = w;
            best = b;
        }
    }
    Ok(MertOutcome { weights: LogLinearWeights::new(registry.clone(), best_w)?, bleu_before: before, bleu_after: best })
}

pub fn write_nbest<W: Write>(mut w: W, registry: &FeatureRegistry, lists: &[NBestList]) -> Result<()> {
    for l in lists {
        for h in &l.hypotheses {
            if h.tokens.iter().any(|t| t == "|||") {
                return Err(Error::Config(format!("item {}: token `|||` cannot be written", l.item)));
            }
            let feats: Vec<String> = registry.names().iter().zip(&h.features).map(|(n, v)| format!("{n}={v}")).collect();
            writeln!(w, "{} ||| {} ||| {} ||| {}", l.item, h.tokens.join(" "), feats.join(" "), h.score)?;
        }
    }
    Ok(())
}

/// Reads an n-best file. Consecutive lines with the same id form one list;
/// context and message are left empty (see [`attach_sources`]).
pub fn read_nbest<R: BufRead>(reader: R) -> Result<(FeatureRegistry, Vec<NBestList>)> {
    let mut registry: Option<FeatureRegistry> = None;
    let mut lists: Vec<NBestList> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let parts: Vec<&str> = line.split(" ||| ").collect();
        if parts.len() != 4 {
            return Err(err(format!("expected 4 `|||`-separated fields, found {}", parts.len())));
        }
        let item = parts[0].trim();
        let mut names = Vec::new();
        let mut features = Vec::new();
        for pair in parts[2].split_whitespace() {
            let (n, v) = pair.split_once('=').ok_or_else(|| err(format!("bad feature `{pair}`")))?;
            names.push(n.to_string());
            features.push(v.parse::<f64>().map_err(|_| err(format!("bad value in `{pair}`")))?);
        }
        let reg = FeatureRegistry::new(names).map_err(|e| err(e.to_string()))?;
        match &registry {
            None => registry = Some(reg),
            Some(r) if *r != reg => return Err(err("feature names differ from earlier lines".into())),
            _ => {}
        }
        let score = parts[3].trim().parse::<f64>().map_err(|_| err(format!("bad total `{}`", parts[3])))?;
        let hyp = Hypothesis { tokens: parts[1].split_whitespace().map(String::from).collect(), features, score };
        match lists.last_mut() {
            Some(l) if l.item == item => l.hypotheses.push(hyp),
            _ => {
                if !seen.insert(item.to_string()) {
                    return Err(err(format!("item {item} is not contiguous")));
                }
                lists.push(NBestList { item: item.to_string(), context: Vec::new(), message: Vec::new(), hypotheses: vec![hyp] });
            }
        }
    }
    let registry = registry.ok_or(Error::EmptyCorpus)?;
    Ok((registry, lists))
}

/// Fills in context and message from the triples with matching ids.
pub fn attach_sources(lists: &mut [NBestList], triples: &[Triple]) -> Result<()> {
    let by_id: HashMap<&str, &Triple> = triples.iter().map(|t| (t.id.as_str(), t)).collect();
    for l in lists {
        let t = by_id.get(l.item.as_str()).ok_or_else(|| Error::MissingReferences(l.item.clone()))?;
        l.context = t.context.clone();
        l.message = t.message.clone();
    }
    Ok(())
}

/// Recomputes features for existing lists, passing their current features
/// through as imported values.
pub fn augment(lists: &[NBestList], providers: &[&dyn FeatureProvider]) -> Result<Vec<NBestList>> {
    lists
        .par_iter()
        .map(|l| {
            let src = ItemSource { id: l.item.clone(), context: l.context.clone(), message: l.message.clone() };
            let raw: Vec<RawHypothesis> = l
                .hypotheses
                .iter()
                .map(|h| RawHypothesis { tokens: h.tokens.clone(), ir_score: None, imported: h.features.clone() })
                .collect();
            let mut out = build_nbest(providers, &src, &raw)?;
            for (o, h) in out.hypotheses.iter_mut().zip(&l.hypotheses) {
                o.score = h.score;
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{Provenance, Reference};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// Every window of r checked against every window of the source.
    fn cmm_oracle(c: &[String], m: &[String], r: &[String]) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (s, src) in [c, m].iter().enumerate() {
            for n in 1..=4 {
                if r.len() < n {
                    continue;
                }
                for i in 0..=r.len() - n {
                    let hit = src.len() >= n && (0..=src.len() - n).any(|k| src[k..k + n] == r[i..i + n]);
                    if hit {
                        out[s * 4 + n - 1] += 1.0;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cmm_worked_examples() {
        assert_eq!(cmm_features(&t("a b c"), &t("d e"), &t("a b d")), [2.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(cmm_features(&t("a b"), &t("c"), &t("x y z")), [0.0; 8]);
        let c = t("a b c d e");
        let f = cmm_features(&c, &t("q"), &c);
        assert_eq!(&f[..4], &[5.0, 4.0, 3.0, 2.0]);
        assert_eq!(word_penalty(&[]), 0.0);
        assert_eq!(word_penalty(&t("a b c")), 3.0);
    }

    #[test]
    fn extraction_composes_providers() {
        let item = ItemSource { id: "x".into(), context: t("a b c"), message: t("d e") };
        let hyp = RawHypothesis { tokens: t("a b d"), ..Default::default() };
        let providers: [&dyn FeatureProvider; 2] = [&CmmProvider, &WordPenaltyProvider];
        let f = extract_features(&providers, &item, &hyp).unwrap();
        assert_eq!(f, vec![2.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 3.0]);
        let reg = registry_of(&providers).unwrap();
        assert_eq!(reg.names().last().unwrap(), WORD_PENALTY);
        assert!(matches!(extract_features(&[], &item, &hyp), Err(Error::NoProviders)));
        assert!(matches!(registry_of(&[]), Err(Error::NoProviders)));
        let err = extract_features(&[&IrScoreProvider], &item, &hyp).unwrap_err();
        assert!(matches!(err, Error::Provider { ref feature, .. } if feature == IR_SCORE));
    }

    #[test]
    fn feature_set_accounting() {
        let mt: Vec<String> = (0..9).map(|i| format!("mt_{i}")).collect();
        let sizes: Vec<(FeatureSet, usize)> = FeatureSet::ALL.iter().map(|&f| (f, f.expected_len(9))).collect();
        assert_eq!(
            sizes,
            vec![
                (FeatureSet::Ir, 2),
                (FeatureSet::Cmm, 9),
                (FeatureSet::IrCmm, 10),
                (FeatureSet::Mt, 9),
                (FeatureSet::MtCmm, 17),
                (FeatureSet::Neural, 2),
                (FeatureSet::NeuralCmm, 10),
            ]
        );
        for f in [FeatureSet::Ir, FeatureSet::Cmm, FeatureSet::IrCmm, FeatureSet::Mt, FeatureSet::MtCmm] {
            let p = f.providers(None, &mt).unwrap();
            let refs: Vec<&dyn FeatureProvider> = p.iter().map(|b| b.as_ref()).collect();
            assert_eq!(registry_of(&refs).unwrap().len(), f.expected_len(9));
        }
        assert!(FeatureSet::Neural.providers(None, &[]).is_err());
        assert!(FeatureSet::Mt.providers(None, &[]).is_err());
        assert_eq!("IR+CMM".parse::<FeatureSet>().unwrap(), FeatureSet::IrCmm);
    }

    #[test]
    fn uniform_model_log_prob_feature() {
        let vocab = Vocabulary::build(&[Triple::new("a", t("x y"), t("y z"), t("z w"))], 100);
        for family in crate::model::Family::ALL {
            let model = Model::zeros(family, vocab.len(), 4, &[3, 4]).unwrap();
            let p = ModelLogProbProvider { model: &model, vocab: &vocab };
            let item = ItemSource { id: "a".into(), context: t("x"), message: t("y") };
            let hyp = RawHypothesis { tokens: t("z w x"), ..Default::default() };
            let v = p.compute(&item, &hyp).unwrap()[0];
            let expected = -4.0 * (vocab.len() as f64).ln();
            assert!((v - expected).abs() < 1e-12, "{family}: {v} vs {expected}");
        }
    }

    fn reg(n: usize) -> FeatureRegistry {
        FeatureRegistry::new((0..n).map(|i| format!("f{i}")).collect()).unwrap()
    }

    fn list(item: &str, hyps: &[(&str, Vec<f64>)]) -> NBestList {
        NBestList {
            item: item.into(),
            context: vec![],
            message: vec![],
            hypotheses: hyps.iter().map(|(s, f)| Hypothesis { tokens: t(s), features: f.clone(), score: 0.0 }).collect(),
        }
    }

    #[test]
    fn scoring_and_stable_rescoring() {
        let r = reg(2);
        let zero = LogLinearWeights::zeros(r.clone());
        assert_eq!(score_hypothesis(&zero, &r, &[3.0, 4.0]).unwrap(), 0.0);
        let pick = LogLinearWeights::new(r.clone(), vec![1.0, 0.0]).unwrap();
        assert_eq!(score_hypothesis(&pick, &r, &[3.0, 4.0]).unwrap(), 3.0);
        assert!(matches!(score_hypothesis(&pick, &reg(3), &[1.0, 2.0, 3.0]), Err(Error::RegistryMismatch(_))));

        let l = list("i", &[("a", vec![1.0, 0.0]), ("b", vec![3.0, 0.0]), ("c", vec![2.0, 1.0]), ("d", vec![3.0, 0.0])]);
        let same = rescore_nbest(&l, &r, &zero).unwrap();
        assert_eq!(same.hypotheses.iter().map(|h| h.tokens[0].as_str()).collect::<Vec<_>>(), ["a", "b", "c", "d"]);
        let up = rescore_nbest(&l, &r, &pick).unwrap();
        assert_eq!(up.hypotheses.iter().map(|h| h.tokens[0].as_str()).collect::<Vec<_>>(), ["b", "d", "c", "a"]);
        let neg = LogLinearWeights::new(r.clone(), vec![-1.0, 0.0]).unwrap();
        let down = rescore_nbest(&l, &r, &neg).unwrap();
        assert_eq!(down.hypotheses.iter().map(|h| h.tokens[0].as_str()).collect::<Vec<_>>(), ["a", "c", "b", "d"]);
    }

    #[test]
    fn envelope_segments() {
        // y = 0, y = γ, y = −γ, y = 0.5 (dominates 0)
        let env = upper_envelope(&[(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, 0.5)]);
        assert_eq!(env, vec![(f64::NEG_INFINITY, 2), (-0.5, 3), (0.5, 1)]);
        let dup = upper_envelope(&[(1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(dup, vec![(f64::NEG_INFINITY, 0)]);
    }

    #[test]
    fn weights_round_trip() {
        let w = LogLinearWeights::new(reg(3), vec![0.1, -1.0 / 3.0, 1e-300]).unwrap();
        let mut buf = Vec::new();
        w.write(&mut buf).unwrap();
        assert_eq!(LogLinearWeights::read(buf.as_slice()).unwrap(), w);
        assert!(LogLinearWeights::read("a\t1\na\t2\n".as_bytes()).is_err());
    }

    #[test]
    fn nbest_round_trip_is_exact() {
        let r = reg(2);
        let mut lists = vec![
            list("q1", &[("hello there", vec![0.1, 1.0 / 3.0]), ("hi", vec![-2.5e-17, 7.0])]),
            list("q2", &[("yo", vec![f64::MIN_POSITIVE, -0.0])]),
        ];
        lists[0].hypotheses[1].score = std::f64::consts::PI;
        let mut buf = Vec::new();
        write_nbest(&mut buf, &r, &lists).unwrap();
        let (r2, back) = read_nbest(buf.as_slice()).unwrap();
        assert_eq!(r2, r);
        assert_eq!(back, lists);
        let mut again = Vec::new();
        write_nbest(&mut again, &r2, &back).unwrap();
        assert_eq!(again, buf);
        assert!(read_nbest("a ||| x ||| f=1 ||| 0\nb ||| y ||| f=1 ||| 0\na ||| z ||| f=1 ||| 0\n".as_bytes()).is_err());
        assert!(read_nbest("a ||| x ||| f=1 ||| 0\na ||| y ||| g=1 ||| 0\n".as_bytes()).is_err());
    }

    fn refset(item: &str, refs: &[&str]) -> ReferenceSet {
        ReferenceSet {
            item: item.into(),
            references: refs.iter().map(|r| Reference { tokens: t(r), provenance: Provenance::Original, rating: None }).collect(),
        }
    }

    #[test]
    fn mert_identical_hypotheses_keep_w0() {
        let r = reg(2);
        let lists = vec![list("a", &[("x y", vec![1.0, 2.0]), ("x y", vec![1.0, 2.0])])];
        let refs = vec![refset("a", &["x y"])];
        let w0 = LogLinearWeights::new(r.clone(), vec![0.3, -0.2]).unwrap();
        let out = mert_iteration(&lists, &r, &refs, &w0).unwrap();
        assert_eq!(out.weights, w0);
        assert_eq!(out.bleu_before, out.bleu_after);
        assert!(mert_iteration(&[], &r, &refs, &w0).is_err());
        assert!(matches!(mert_iteration(&lists, &r, &[], &w0), Err(Error::MissingReferences(_))));
    }

    #[test]
    fn mert_finds_marked_hypotheses() {
        let r = reg(2);
        let lists = vec![
            list("a", &[("p q r s", vec![0.0, 0.3]), ("a b c d e", vec![1.0, 0.1]), ("z z", vec![0.0, 0.9])]),
            list("b", &[("m n o", vec![0.0, 0.5]), ("k", vec![0.0, 0.2]), ("f g h i", vec![1.0, 0.0])]),
        ];
        let refs = vec![refset("a", &["a b c d e"]), refset("b", &["f g h i"])];
        let w0 = LogLinearWeights::zeros(r.clone());
        let out = mert_iteration(&lists, &r, &refs, &w0).unwrap();
        assert_eq!(out.bleu_before, 0.0);
        assert_eq!(out.bleu_after, 1.0);
        assert!(out.weights.values[0] > 0.0);
    }

    fn random_fixture(rng: &mut ChaCha8Rng, items: usize, hyps: usize, feats: usize) -> (Vec<NBestList>, Vec<ReferenceSet>) {
        let words = ["a", "b", "c", "d"];
        let sent = |rng: &mut ChaCha8Rng| -> String {
            let n = rng.gen_range(4..9);
            (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let mut lists = Vec::new();
        let mut refs = Vec::new();
        for i in 0..items {
            let id = format!("i{i}");
            let hs: Vec<(String, Vec<f64>)> =
                (0..hyps).map(|_| (sent(rng), (0..feats).map(|_| rng.gen_range(-2i32..3) as f64).collect())).collect();
            let hs_ref: Vec<(&str, Vec<f64>)> = hs.iter().map(|(s, f)| (s.as_str(), f.clone())).collect();
            lists.push(list(&id, &hs_ref));
            let r1 = sent(rng);
            let r2 = sent(rng);
            refs.push(refset(&id, &[&r1, &r2]));
        }
        (lists, refs)
    }

    #[test]
    fn mert_never_lowers_bleu_and_beats_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..30 {
            let (lists, refs) = random_fixture(&mut rng, 4, 5, 1);
            let r = reg(1);
            let w0 = LogLinearWeights::new(r.clone(), vec![rng.gen_range(-1.0..1.0)]).unwrap();
            let out = mert_iteration(&lists, &r, &refs, &w0).unwrap();
            assert!(out.bleu_after >= out.bleu_before);
            let ts = TuningSet::new(&lists, &r, &refs).unwrap();
            assert_eq!(ts.bleu(&out.weights.values), out.bleu_after);
            // off-grid by half a step so w never hits 0, where every hypothesis ties
            let grid = (-400..400).map(|k| ts.bleu(&[(k as f64 + 0.5) * 0.025])).fold(0.0, f64::max);
            assert!(out.bleu_after >= grid, "{out:?} grid {grid}");
        }
    }

    proptest! {
        #[test]
        fn cmm_matches_enumeration(
            c in prop::collection::vec(0u8..4, 0..8),
            m in prop::collection::vec(0u8..4, 0..8),
            r in prop::collection::vec(0u8..4, 0..8),
        ) {
            let s = |v: &[u8]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            let (c, m, r) = (s(&c), s(&m), s(&r));
            prop_assert_eq!(cmm_features(&c, &m, &r), cmm_oracle(&c, &m, &r));
        }

        #[test]
        fn argmax_survives_positive_scaling(
            feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
            w in prop::collection::vec(-2.0f64..2.0, 3),
            lambda in 0.01f64..100.0,
        ) {
            let l = NBestList {
                item: "x".into(), context: vec![], message: vec![],
                hypotheses: feats.iter().map(|f| Hypothesis { tokens: vec![], features: f.clone(), score: 0.0 }).collect(),
            };
            let scaled: Vec<f64> = w.iter().map(|v| v * lambda).collect();
            let a = argmax(&l, &w);
            let b = argmax(&l, &scaled);
            let sa = dot(&w, &l.hypotheses[a].features);
            let sb = dot(&w, &l.hypotheses[b].features);
            prop_assert!(a == b || (sa - sb).abs() < 1e-9 * (1.0 + sa.abs()));
        }

        #[test]
        fn envelope_is_the_pointwise_max(lines in prop::collection::vec((-3i32..4, -3i32..4), 1..8), x in -10.0f64..10.0) {
            let lines: Vec<(f64, f64)> = lines.into_iter().map(|(s, c)| (s as f64, c as f64)).collect();
            let env = upper_envelope(&lines);
            let seg = env.iter().rposition(|&(start, _)| start <= x).unwrap();
            let (s, c) = lines[env[seg].1];
            let best = lines.iter().map(|&(s, c)| c + x * s).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((c + x * s - best).abs() < 1e-9);
        }
    }
}
