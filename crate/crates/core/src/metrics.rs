//! Multi-reference corpus BLEU from additive sufficient statistics, and
//! `meteor-lite`, the exact-match stage of METEOR.

use std::collections::HashMap;
use std::hash::Hash;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

pub const BLEU_ORDER: usize = 4;
/// Added to zero match counts in smoothed sentence-level diagnostics only.
pub const DIAGNOSTIC_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; BLEU_ORDER],
    pub totals: [u64; BLEU_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..BLEU_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

impl Add for BleuStats {
    type Output = BleuStats;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for BleuStats {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(BleuStats::default(), Add::add)
    }
}

impl BleuStats {
    /// Modified n-gram precisions; `None` where the hypothesis has no n-grams.
    pub fn precisions(&self) -> [Option<f64>; BLEU_ORDER] {
        let mut p = [None; BLEU_ORDER];
        for n in 0..BLEU_ORDER {
            if self.totals[n] > 0 {
                p[n] = Some(self.matches[n] as f64 / self.totals[n] as f64);
            }
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp().min(1.0)
    }
}

/// Clipped n-gram matches of `hyp` against `refs` (clip = max count in any
/// single reference) and the closest reference length (ties → shorter).
pub fn bleu_stats<T: Eq + Hash + Clone>(hyp: &[T], refs: &[Vec<T>]) -> BleuStats {
    assert!(!refs.is_empty(), "BLEU needs at least one reference");
    fn counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u32> {
        let mut m = HashMap::new();
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
        m
    }
    let mut s = BleuStats { hyp_len: hyp.len() as u64, ..Default::default() };
    for n in 1..=BLEU_ORDER {
        let h = counts(hyp, n);
        let ref_grams: Vec<_> = refs.iter().map(|r| counts(r, n)).collect();
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
        s.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| {
                let clip = ref_grams.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(clip) as u64
            })
            .sum();
    }
    s.ref_len = refs
        .iter()
        .map(|r| r.len() as u64)
        .min_by_key(|&l| (l.abs_diff(s.hyp_len), l))
        .unwrap();
    s
}

/// `BP · exp(¼ Σ ln p_n)`, unsmoothed: any zero precision gives 0.
pub fn corpus_bleu(stats: &BleuStats) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for p in stats.precisions() {
        match p {
            Some(p) if p > 0.0 => log_sum += p.ln(),
            _ => return 0.0,
        }
    }
    stats.brevity_penalty() * (log_sum / BLEU_ORDER as f64).exp()
}

/// Sentence BLEU with ε added to zero match counts; for per-item
/// diagnostics, never for reported scores.
pub fn smoothed_sentence_bleu(stats: &BleuStats) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..BLEU_ORDER {
        if stats.totals[n] == 0 {
            continue;
        }
        let m = if stats.matches[n] == 0 { DIAGNOSTIC_EPSILON } else { stats.matches[n] as f64 };
        log_sum += (m / stats.totals[n] as f64).ln();
        orders += 1;
    }
    stats.brevity_penalty() * (log_sum / orders as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorConfig {
    /// Recall weight in the harmonic mean.
    pub alpha: f64,
    /// Fragmentation penalty exponent.
    pub beta: f64,
    /// Fragmentation penalty scale.
    pub gamma: f64,
}

impl Default for MeteorConfig {
    fn default() -> Self {
        Self { alpha: 0.9, beta: 3.0, gamma: 0.5 }
    }
}

impl MeteorConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.beta > 0.0) || !(0.0..=1.0).contains(&self.gamma) {
            return Err(crate::Error::Config(format!("invalid meteor-lite parameters {self:?}")));
        }
        Ok(())
    }
}

/// One-to-one exact unigram alignment: each hypothesis token, left to right,
/// takes the reference position continuing the current chunk when one is
/// free, otherwise the leftmost free occurrence. Returns (matches, chunks).
fn align<T: Eq>(hyp: &[T], reference: &[T]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let mut matches = 0;
    let mut chunks = 0;
    for h in hyp {
        let next = prev.map(|p| p + 1).filter(|&q| q < reference.len() && !used[q] && reference[q] == *h);
        let pick = next.or_else(|| (0..reference.len()).find(|&q| !used[q] && reference[q] == *h));
        match pick {
            Some(q) => {
                used[q] = true;
                matches += 1;
                if next.is_none() {
                    chunks += 1;
                }
                prev = Some(q);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

fn meteor_single<T: Eq>(hyp: &[T], reference: &[T], cfg: &MeteorConfig) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (cfg.alpha * p + (1.0 - cfg.alpha) * r);
    let penalty = cfg.gamma * (chunks as f64 / m as f64).powf(cfg.beta);
    fmean * (1.0 - penalty)
}

/// Best exact-match METEOR score over the references.
pub fn meteor_lite<T: Eq>(hyp: &[T], refs: &[Vec<T>], cfg: &MeteorConfig) -> f64 {
    refs.iter().map(|r| meteor_single(hyp, r, cfg)).fold(0.0, f64::max)
}
