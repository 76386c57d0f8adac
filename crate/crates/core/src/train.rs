//! Initialization, Adagrad with elementwise clipping, minibatch training and
//! held-out early stopping.

use std::fmt::Write as _;
use std::io::BufRead;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize_columns, Matrix};
use crate::model::{EncodedTriple, Family, Model, NceSetup, Objective};
use crate::rnnlm::{NoiseDistribution, DEFAULT_BPTT_CAP, DEFAULT_NCE_SAMPLES};

/// Standard deviation of the initial weights (N(0, 0.01) read as σ = 0.01).
pub const INIT_STD: f64 = 0.01;
/// Scale applied to the random orthogonal recurrent matrix.
pub const RECURRENT_SCALE: f64 = 0.01;
pub const ADAGRAD_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradients are clamped to `[-clip, clip]`.
    pub clip: f64,
    pub max_epochs: usize,
    /// Held-out evaluation every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub objective: Objective,
    pub nce_samples: usize,
    pub bptt_cap: usize,
    pub damping: f64,
    pub hidden_size: usize,
    pub encoder_layers: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 100,
            clip: 10.0,
            max_epochs: 20,
            eval_every: 1,
            seed: 1,
            objective: Objective::Softmax,
            nce_samples: DEFAULT_NCE_SAMPLES,
            bptt_cap: DEFAULT_BPTT_CAP,
            damping: ADAGRAD_DAMPING,
            hidden_size: 512,
            encoder_layers: vec![512, 256, 512],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 12] = [
        "learning_rate",
        "batch_size",
        "clip",
        "max_epochs",
        "eval_every",
        "seed",
        "objective",
        "nce_samples",
        "bptt_cap",
        "damping",
        "hidden_size",
        "encoder_layers",
    ];

    /// Sets one field by name; `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "objective" => self.objective = value.parse()?,
            "nce_samples" => self.nce_samples = parse(key, value)?,
            "bptt_cap" => self.bptt_cap = parse(key, value)?,
            "damping" => self.damping = parse(key, value)?,
            "hidden_size" => self.hidden_size = parse(key, value)?,
            "encoder_layers" => {
                self.encoder_layers = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `(key, value)` in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let layers: Vec<String> = self.encoder_layers.iter().map(|x| x.to_string()).collect();
        let values = [
            self.learning_rate.to_string(),
            self.batch_size.to_string(),
            self.clip.to_string(),
            self.max_epochs.to_string(),
            self.eval_every.to_string(),
            self.seed.to_string(),
            self.objective.to_string(),
            self.nce_samples.to_string(),
            self.bptt_cap.to_string(),
            self.damping.to_string(),
            self.hidden_size.to_string(),
            layers.join(","),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return bad("clip must be positive and finite");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.objective == Objective::Nce && self.nce_samples == 0 {
            return bad("nce_samples must be at least 1");
        }
        if !(self.damping > 0.0) {
            return bad("damping must be positive");
        }
        if self.hidden_size == 0 {
            return bad("hidden_size must be positive");
        }
        Ok(())
    }
}

/// Reads a flat `key = value` file (`#` starts a comment). Each pair is
/// handed to `apply`, which reports whether it knew the key; unknown keys are
/// errors.
pub fn read_key_values<R: BufRead>(reader: R, mut apply: impl FnMut(&str, &str) -> Result<bool>) -> Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line: i + 1, message: "expected `key = value`".into() })?;
        let (key, value) = (key.trim(), value.trim());
        let known = apply(key, value).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if !known {
            return Err(Error::Parse { line: i + 1, message: format!("unknown key `{key}`") });
        }
    }
    Ok(())
}

fn gaussian(m: &mut Matrix, std: f64, rng: &mut impl Rng) {
    for x in m.as_mut_slice() {
        *x = std * rng.sample::<f64, _>(StandardNormal);
    }
}

/// N(0, 0.01²) everywhere except `W_hh = 0.01·Q` with Q orthogonal.
pub fn init_params(family: Family, vocab: usize, hidden: usize, encoder: &[usize], seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::zeros(family, vocab, hidden, encoder)?;
    for (i, t) in model.tensors_mut().into_iter().enumerate() {
        gaussian(t, INIT_STD, &mut rng);
        if i == 1 {
            orthonormalize_columns(t);
            t.scale(RECURRENT_SCALE);
        }
    }
    Ok(model)
}

/// Elementwise clamp to `[lo, hi]`.
pub fn clip_gradients(g: &mut Model, lo: f64, hi: f64) {
    assert!(lo < hi, "empty clip range");
    for t in g.tensors_mut() {
        for x in t.as_mut_slice() {
            *x = x.clamp(lo, hi);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accum: Model,
    pub damping: f64,
}

impl AdagradState {
    pub fn new(like: &Model, damping: f64) -> Self {
        Self { accum: like.zeros_like(), damping }
    }

    /// `G += g²; θ −= lr·g / √(G + damping)`
    pub fn step(&mut self, params: &mut Model, g: &Model, lr: f64) {
        let damping = self.damping;
        for ((p, a), g) in params.tensors_mut().into_iter().zip(self.accum.tensors_mut()).zip(g.tensors()) {
            for ((p, a), &g) in p.as_mut_slice().iter_mut().zip(a.as_mut_slice()).zip(g.as_slice()) {
                if g == 0.0 {
                    continue;
                }
                *a += g * g;
                *p -= lr * g / (*a + damping).sqrt();
            }
        }
    }
}

pub fn adagrad_step(params: &mut Model, g: &Model, state: &mut AdagradState, lr: f64) {
    state.step(params, g, lr);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    HeldOutIncrease,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-token exact NLL of the training set after the epoch.
    pub train_nll: f64,
    pub heldout_nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub family: Family,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch at which training stopped.
    pub stop_epoch: usize,
    /// Epoch whose parameters were returned (0 = initialization).
    pub returned_epoch: usize,
    pub wall_clock: Duration,
}

impl TrainReport {
    /// Trajectory TSV; deterministic (no timings).
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_nll\ttrain_ppl\theldout_nll\theldout_ppl\n");
        for e in &self.epochs {
            let (h, hp) = match e.heldout_nll {
                Some(h) => (h.to_string(), h.exp().to_string()),
                None => ("-".into(), "-".into()),
            };
            writeln!(s, "{}\t{}\t{}\t{}\t{}", e.epoch, e.train_nll, e.train_nll.exp(), h, hp).unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let last = self.epochs.last();
        format!(
            "family {}: stopped at epoch {} ({:?}), returned epoch {}, final train ppl {:.4}, wall clock {:.2}s",
            self.family,
            self.stop_epoch,
            self.stop_reason,
            self.returned_epoch,
            last.map(|e| e.train_nll.exp()).unwrap_or(f64::NAN),
            self.wall_clock.as_secs_f64()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
}

/// Mean per-token exact NLL of `model` over `data`.
pub fn per_token_nll(model: &Model, data: &[EncodedTriple]) -> Result<f64> {
    let parts: Vec<Result<(f64, usize)>> =
        data.par_iter().map(|ex| Ok((model.objective(ex)?, model.objective_tokens(ex)))).collect();
    let (mut loss, mut tokens) = (0.0, 0usize);
    for p in parts {
        let (l, t) = p?;
        loss += l;
        tokens += t;
    }
    Ok(if tokens == 0 { 0.0 } else { loss / tokens as f64 })
}

fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed ^ ((epoch as u64) << 40) ^ index as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Minibatch Adagrad with clipping; evaluates held-out NLL every
/// `eval_every` epochs and stops at the first increase, returning the
/// parameters from the evaluation before it.
///
/// `noise_counts` (add-one smoothed) feeds the NCE noise distribution and is
/// ignored for the softmax objective.
pub fn train(
    family: Family,
    vocab_size: usize,
    noise_counts: &[u64],
    train_set: &[EncodedTriple],
    heldout: &[EncodedTriple],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let started = Instant::now();
    let encoder_sizes: &[usize] = if family == Family::Rlmt { &[] } else { &config.encoder_layers };
    let mut model = init_params(family, vocab_size, config.hidden_size, encoder_sizes, config.seed)?;
    let noise = match config.objective {
        Objective::Nce => {
            // add-one so markers with no unigram count (e.g. <sep>) can still be targets
            let smoothed: Vec<u64> = noise_counts.iter().map(|c| c + 1).collect();
            Some(NoiseDistribution::from_counts(&smoothed)?)
        }
        Objective::Softmax => None,
    };
    let nce = noise.as_ref().map(|n| NceSetup { noise: n, samples: config.nce_samples });
    let mut adagrad = AdagradState::new(&model, config.damping);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut epochs = Vec::new();
    // parameters as of the last held-out evaluation that did not increase
    let mut validated = (0usize, model.clone());
    let mut last_finite = (0usize, model.clone());
    let mut last_heldout: Option<f64> = None;
    let mut stop = (StopReason::MaxEpochs, config.max_epochs);

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Model)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(config.seed, epoch, i));
                    model.loss_and_grad(&train_set[i], nce.as_ref(), &mut rng, config.bptt_cap)
                })
                .collect();
            // fixed-order reduction keeps updates bit-reproducible
            let mut grad = model.zeros_like();
            let mut finite = true;
            for r in results {
                match r {
                    Ok((loss, g)) => {
                        finite &= loss.is_finite();
                        grad.add_assign(&g);
                    }
                    Err(Error::NonFinite(_)) => finite = false,
                    Err(e) => return Err(e),
                }
            }
            grad.scale(1.0 / batch.len() as f64);
            if !finite || !grad.is_finite() {
                stop = (StopReason::Diverged, epoch);
                break 'epochs;
            }
            clip_gradients(&mut grad, -config.clip, config.clip);
            adagrad.step(&mut model, &grad, config.learning_rate);
        }
        let train_nll = match per_token_nll(&model, train_set) {
            Ok(x) if x.is_finite() && model.is_finite() => x,
            Ok(_) | Err(Error::NonFinite(_)) => {
                stop = (StopReason::Diverged, epoch);
                break;
            }
            Err(e) => return Err(e),
        };
        last_finite = (epoch, model.clone());
        let mut record = EpochRecord { epoch, train_nll, heldout_nll: None };
        if !heldout.is_empty() && epoch % config.eval_every == 0 {
            let h = per_token_nll(&model, heldout)?;
            record.heldout_nll = Some(h);
            epochs.push(record);
            if last_heldout.is_some_and(|prev| h > prev) {
                stop = (StopReason::HeldOutIncrease, epoch);
                break;
            }
            last_heldout = Some(h);
            validated = (epoch, model.clone());
        } else {
            epochs.push(record);
        }
    }

    let (returned_epoch, returned) = match stop.0 {
        StopReason::MaxEpochs => (epochs.len(), model),
        StopReason::HeldOutIncrease => validated,
        StopReason::Diverged => last_finite,
    };
    Ok(TrainOutcome {
        model: returned,
        report: TrainReport {
            family,
            epochs,
            stop_reason: stop.0,
            stop_epoch: stop.1,
            returned_epoch,
            wall_clock: started.elapsed(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { hidden_size: 4, encoder_layers: vec![6, 3, 4], ..TrainConfig::default() }
    }

    #[test]
    fn recurrent_init_is_scaled_orthogonal() {
        let m = init_params(Family::Dcgm1, 30, 16, &[8, 4, 16], 7).unwrap();
        let g = m.decoder.w_hh.transpose_mul(&m.decoder.w_hh);
        for r in 0..16 {
            for c in 0..16 {
                let want = if r == c { 1e-4 } else { 0.0 };
                assert!((g.get(r, c) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_has_requested_spread() {
        let a = init_params(Family::Dcgm2, 1000, 16, &[8, 4, 16], 3).unwrap();
        let b = init_params(Family::Dcgm2, 1000, 16, &[8, 4, 16], 3).unwrap();
        assert_eq!(a, b);
        let c = init_params(Family::Dcgm2, 1000, 16, &[8, 4, 16], 4).unwrap();
        assert_ne!(a, c);
        // 16000 W_in entries
        let xs = a.decoder.w_in.as_slice();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.01).abs() < 0.002, "sd {sd}");
    }

    #[test]
    fn clip_examples() {
        let mut g = Model::zeros(Family::Rlmt, 4, 1, &[]).unwrap();
        g.decoder.w_in.as_mut_slice().copy_from_slice(&[15.0, -3.0, -12.0, 10.0]);
        clip_gradients(&mut g, -10.0, 10.0);
        assert_eq!(g.decoder.w_in.as_slice(), &[10.0, -3.0, -10.0, 10.0]);
    }

    #[test]
    fn adagrad_examples() {
        let mut p = Model::zeros(Family::Rlmt, 1, 1, &[]).unwrap();
        let mut g = p.zeros_like();
        g.decoder.w_in.set(0, 0, 2.0);
        let mut st = AdagradState::new(&p, 1e-6);
        adagrad_step(&mut p, &g, &mut st, 0.1);
        assert_eq!(st.accum.decoder.w_in.get(0, 0), 4.0);
        let d1 = p.decoder.w_in.get(0, 0);
        assert!((d1 - (-0.1 * 2.0 / (4.0f64 + 1e-6).sqrt())).abs() < 1e-15);
        assert!((d1 + 0.0999999875).abs() < 1e-12);

        adagrad_step(&mut p, &g, &mut st, 0.1);
        let d2 = p.decoder.w_in.get(0, 0) - d1;
        assert!(d2.abs() < d1.abs());

        // zero gradient: nothing moves
        let before = (p.clone(), st.clone());
        let zero = p.zeros_like();
        adagrad_step(&mut p, &zero, &mut st, 0.1);
        assert_eq!((p, st), before);
    }

    #[test]
    fn config_keys_round_trip() {
        let mut c = TrainConfig::default();
        let text = "learning_rate = 0.05\n# comment\nencoder_layers = 10, 6, 8\nobjective = nce\n";
        read_key_values(text.as_bytes(), |k, v| c.set(k, v)).unwrap();
        assert_eq!(c.learning_rate, 0.05);
        assert_eq!(c.encoder_layers, vec![10, 6, 8]);
        assert_eq!(c.objective, Objective::Nce);

        let mut d = TrainConfig { learning_rate: 1.0, ..TrainConfig::default() };
        for (k, v) in c.entries() {
            assert!(d.set(k, &v).unwrap());
        }
        assert_eq!(c, d);

        let err = read_key_values("lr = 1\n".as_bytes(), |k, v| c.set(k, v)).unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert!(read_key_values("batch_size = -1\n".as_bytes(), |k, v| c.set(k, v)).is_err());
    }

    fn tiny_corpus() -> Vec<EncodedTriple> {
        vec![
            EncodedTriple { context: vec![4, 5], message: vec![6], response: vec![7, 8] },
            EncodedTriple { context: vec![5], message: vec![6, 4], response: vec![8, 9, 7] },
            EncodedTriple { context: vec![9], message: vec![4], response: vec![5] },
        ]
    }

    #[test]
    fn full_batch_small_lr_is_monotone() {
        let data = tiny_corpus();
        for family in Family::ALL {
            for seed in 1..=3 {
                let c = TrainConfig { learning_rate: 0.01, batch_size: 3, max_epochs: 15, seed, ..cfg() };
                let out = train(family, 10, &[], &data, &[], &c).unwrap();
                let nll: Vec<f64> = out.report.epochs.iter().map(|e| e.train_nll).collect();
                assert_eq!(nll.len(), 15);
                assert!(nll.windows(2).all(|w| w[1] <= w[0]), "{family} seed {seed}: {nll:?}");
            }
        }
    }

    #[test]
    fn stops_when_heldout_worsens() {
        let data = tiny_corpus();
        // held-out uses tokens the training set never predicts
        let heldout = vec![EncodedTriple { context: vec![10], message: vec![11], response: vec![12, 13] }];
        let c = TrainConfig { batch_size: 1, max_epochs: 10, ..cfg() };
        let out = train(Family::Dcgm2, 14, &[], &data, &heldout, &c).unwrap();
        assert_eq!(out.report.stop_reason, StopReason::HeldOutIncrease);
        assert_eq!(out.report.stop_epoch, 2);
        assert_eq!(out.report.returned_epoch, 1);
        assert_eq!(out.report.epochs.len(), 2);
        let h = per_token_nll(&out.model, &heldout).unwrap();
        assert_eq!(Some(h), out.report.epochs[0].heldout_nll);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_corpus();
        let counts = vec![0, 10, 1, 0, 5, 5, 5, 5, 5, 5];
        let c = TrainConfig { batch_size: 2, max_epochs: 3, objective: Objective::Nce, nce_samples: 3, ..cfg() };
        let a = train(Family::Dcgm1, 10, &counts, &data, &[], &c).unwrap();
        let b = train(Family::Dcgm1, 10, &counts, &data, &[], &c).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.report.to_tsv(), b.report.to_tsv());
    }

    #[test]
    fn divergence_returns_last_finite_parameters() {
        let data = tiny_corpus();
        let c = TrainConfig { learning_rate: 1e300, clip: 1e300, batch_size: 1, max_epochs: 5, ..cfg() };
        let out = train(Family::Rlmt, 10, &[], &data, &[], &c).unwrap();
        assert_eq!(out.report.stop_reason, StopReason::Diverged);
        assert!(out.model.is_finite());
    }
}
