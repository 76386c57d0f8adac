//! Recurrent language model: sigmoid recurrence, softmax output layer,
//! sequence negative log-likelihood, backpropagation through time and the
//! noise-contrastive training objective.
//!
//! Hidden update, for an input token `s_t`:
//!
//! ```text
//! h_t = σ(W_in[s_t] + h_{t-1}ᵀ W_hh + bias)      h_0 = 0 unless supplied
//! o_t = h_tᵀ W_out
//! P(· | s_1..s_t) = softmax(o_t)
//! ```
//!
//! `bias` is zero for the plain model and the context vector for the
//! context-conditioned decoders.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, sigmoid, Matrix};

/// Default number of recurrent steps the error signal is carried back.
pub const DEFAULT_BPTT_CAP: usize = 50;
/// Default NCE noise samples per predicted token.
pub const DEFAULT_NCE_SAMPLES: usize = 20;
/// Exponent applied to unigram counts to form the NCE noise distribution.
pub const NOISE_POWER: f64 = 0.75;

/// `W_in` (V×K), `W_hh` (K×K), `W_out` (K×V). Also used as the gradient
/// container for the same parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlmParams {
    pub w_in: Matrix,
    pub w_hh: Matrix,
    pub w_out: Matrix,
}

impl RlmParams {
    pub fn zeros(vocab: usize, hidden: usize) -> Self {
        Self {
            w_in: Matrix::zeros(vocab, hidden),
            w_hh: Matrix::zeros(hidden, hidden),
            w_out: Matrix::zeros(hidden, vocab),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size(), self.hidden_size())
    }

    pub fn validate(&self) -> Result<()> {
        let (v, k) = self.w_in.shape();
        if self.w_hh.shape() != (k, k) || self.w_out.shape() != (k, v) {
            return Err(Error::DimensionMismatch(format!(
                "W_in {:?}, W_hh {:?}, W_out {:?}",
                self.w_in.shape(),
                self.w_hh.shape(),
                self.w_out.shape()
            )));
        }
        if !(self.w_in.is_finite() && self.w_hh.is_finite() && self.w_out.is_finite()) {
            return Err(Error::NonFinite("decoder parameters".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w_in, &self.w_hh, &self.w_out]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_in, &mut self.w_hh, &mut self.w_out]
    }

    fn logit(&self, h: &[f64], word: usize) -> f64 {
        h.iter().enumerate().map(|(k, hk)| hk * self.w_out.get(k, word)).sum()
    }
}

/// Everything the backward pass needs from a forward run.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input tokens `s_1..s_T`.
    pub inputs: Vec<usize>,
    pub h0: Vec<f64>,
    /// `h_1..h_T`.
    pub hidden: Vec<Vec<f64>>,
    /// Next-token distribution after each input.
    pub probs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// `log P(targets[t] | inputs[..=t])` for each step.
    pub fn step_log_probs(&self, targets: &[usize]) -> Vec<f64> {
        self.probs.iter().zip(targets).map(|(p, &y)| p[y].ln()).collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab) {
        Some(&bad) => Err(Error::IndexOutOfRange { index: bad, dim: vocab }),
        None => Ok(()),
    }
}

fn check_vec(name: &str, v: Option<&[f64]>, k: usize) -> Result<()> {
    match v {
        Some(v) if v.len() != k => Err(Error::DimensionMismatch(format!("{name} has length {}, expected {k}", v.len()))),
        _ => Ok(()),
    }
}

/// Runs the recurrence only (no output layer).
pub fn hidden_states(params: &RlmParams, inputs: &[usize], h0: Option<&[f64]>, bias: Option<&[f64]>) -> Result<Vec<Vec<f64>>> {
    let k = params.hidden_size();
    check_ids(inputs, params.vocab_size())?;
    check_vec("h0", h0, k)?;
    check_vec("bias", bias, k)?;
    let mut prev = h0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; k]);
    let mut out = Vec::with_capacity(inputs.len());
    let mut pre = vec![0.0; k];
    for &s in inputs {
        params.w_hh.vec_mul(&prev, &mut pre);
        axpy(1.0, params.w_in.row(s), &mut pre);
        if let Some(b) = bias {
            axpy(1.0, b, &mut pre);
        }
        let h: Vec<f64> = pre.iter().map(|&x| sigmoid(x)).collect();
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("hidden state".into()));
        }
        out.push(h.clone());
        prev = h;
    }
    Ok(out)
}

pub fn forward(params: &RlmParams, inputs: &[usize], h0: Option<&[f64]>, bias: Option<&[f64]>) -> Result<ForwardTrace> {
    if inputs.is_empty() {
        return Err(Error::DimensionMismatch("empty input sequence".into()));
    }
    let hidden = hidden_states(params, inputs, h0, bias)?;
    let mut logits = vec![0.0; params.vocab_size()];
    let mut probs = Vec::with_capacity(hidden.len());
    for h in &hidden {
        params.w_out.vec_mul(h, &mut logits);
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("output logits".into()));
        }
        probs.push(softmax(&logits));
    }
    Ok(ForwardTrace {
        inputs: inputs.to_vec(),
        h0: h0.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; params.hidden_size()]),
        hidden,
        probs,
    })
}

/// Splits a framed sequence into (inputs, targets): every token but the last
/// conditions, every token but the first is predicted.
pub fn shift(ids: &[usize]) -> Result<(&[usize], &[usize])> {
    if ids.len() < 2 {
        return Err(Error::DimensionMismatch("a modeled sequence needs at least two tokens".into()));
    }
    Ok((&ids[..ids.len() - 1], &ids[1..]))
}

/// `−Σ_t log P(s_t | s_<t)` over a framed sequence.
pub fn sequence_nll(params: &RlmParams, ids: &[usize], bias: Option<&[f64]>) -> Result<f64> {
    let (inputs, targets) = shift(ids)?;
    check_ids(targets, params.vocab_size())?;
    let trace = forward(params, inputs, None, bias)?;
    Ok(-trace.step_log_probs(targets).iter().sum::<f64>())
}

/// Gradient of the loss with respect to one step's logits.
#[derive(Debug, Clone)]
pub enum OutputGrad {
    Dense(Vec<f64>),
    Sparse(Vec<(usize, f64)>),
}

/// Parameter gradients plus the gradient reaching the per-step bias,
/// summed over time.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: RlmParams,
    pub bias: Vec<f64>,
}

/// Backpropagation through time from per-step logit gradients.
///
/// The recurrent error signal is cut every `cap` steps counting back from the
/// end of the sequence; sequences no longer than `cap` get exact gradients.
pub fn bptt(params: &RlmParams, trace: &ForwardTrace, out_grads: &[OutputGrad], cap: usize) -> Backward {
    assert_eq!(out_grads.len(), trace.len());
    let k = params.hidden_size();
    let cap = cap.max(1);
    let mut grads = params.zeros_like();
    let mut dbias = vec![0.0; k];
    let mut carry = vec![0.0; k];
    let mut dh = vec![0.0; k];
    let mut dpre = vec![0.0; k];
    let t_len = trace.len();
    for t in (0..t_len).rev() {
        let h = &trace.hidden[t];
        match &out_grads[t] {
            OutputGrad::Dense(d) => {
                grads.w_out.add_outer(h, d);
                params.w_out.mul_vec(d, &mut dh);
            }
            OutputGrad::Sparse(entries) => {
                dh.iter_mut().for_each(|x| *x = 0.0);
                for &(w, g) in entries {
                    for kk in 0..k {
                        let cur = grads.w_out.get(kk, w);
                        grads.w_out.set(kk, w, cur + h[kk] * g);
                        dh[kk] += params.w_out.get(kk, w) * g;
                    }
                }
            }
        }
        // blocks of `cap` steps, counted from the end; no carry across blocks
        if (t_len - t - 1) % cap != 0 {
            axpy(1.0, &carry, &mut dh);
        }
        for i in 0..k {
            dpre[i] = dh[i] * h[i] * (1.0 - h[i]);
        }
        axpy(1.0, &dpre, grads.w_in.row_mut(trace.inputs[t]));
        axpy(1.0, &dpre, &mut dbias);
        let prev = if t == 0 { &trace.h0 } else { &trace.hidden[t - 1] };
        grads.w_hh.add_outer(prev, &dpre);
        params.w_hh.mul_vec(&dpre, &mut carry);
    }
    Backward { grads, bias: dbias }
}

/// `(p_t − onehot(y_t))` for each step of a softmax trace.
pub fn softmax_output_grads(trace: &ForwardTrace, targets: &[usize]) -> Vec<OutputGrad> {
    trace
        .probs
        .iter()
        .zip(targets)
        .map(|(p, &y)| {
            let mut d = p.clone();
            d[y] -= 1.0;
            OutputGrad::Dense(d)
        })
        .collect()
}

/// Exact gradient of the sequence NLL for the trace produced from
/// `inputs = ids[..T-1]`, predicting `targets = ids[1..]`.
pub fn backward(params: &RlmParams, trace: &ForwardTrace, targets: &[usize], cap: usize) -> Backward {
    bptt(params, trace, &softmax_output_grads(trace, targets), cap)
}

/// Loss and gradient of the sequence NLL in one call.
pub fn nll_and_grad(params: &RlmParams, ids: &[usize], bias: Option<&[f64]>, cap: usize) -> Result<(f64, Backward)> {
    let (inputs, targets) = shift(ids)?;
    check_ids(targets, params.vocab_size())?;
    let trace = forward(params, inputs, None, bias)?;
    let loss = -trace.step_log_probs(targets).iter().sum::<f64>();
    Ok((loss, backward(params, &trace, targets, cap)))
}

/// Smoothed unigram distribution the NCE noise samples come from.
#[derive(Debug, Clone)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl NoiseDistribution {
    /// `count^0.75`, renormalized.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(NOISE_POWER)).collect();
        Self::from_weights(&weights)
    }

    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("noise weights must be nonnegative with a positive sum".into()));
        }
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let sampler = WeightedIndex::new(&probs).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { probs, sampler })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, w: usize) -> f64 {
        self.probs[w]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sampler.sample(rng)
    }
}

/// Logit of the NCE data-vs-noise classifier for a word with unnormalized
/// model log-score `score` (normalization constant fixed to 1).
#[inline]
pub fn nce_logit(score: f64, noise_prob: f64, k: usize) -> f64 {
    score - (k as f64 * noise_prob).ln()
}

/// Per-step NCE logit gradients for the given hidden states; returns the
/// summed loss alongside.
pub fn nce_output_grads<R: Rng + ?Sized>(
    params: &RlmParams,
    hidden: &[Vec<f64>],
    targets: &[usize],
    noise: &NoiseDistribution,
    k: usize,
    rng: &mut R,
) -> Result<(f64, Vec<OutputGrad>)> {
    if k == 0 {
        return Err(Error::Config("NCE needs at least one noise sample".into()));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (h, &y) in hidden.iter().zip(targets) {
        if noise.prob(y) <= 0.0 {
            return Err(Error::ZeroNoiseProbability(y));
        }
        let mut entries = Vec::with_capacity(k + 1);
        let dy = nce_logit(params.logit(h, y), noise.prob(y), k);
        let py = sigmoid(dy);
        loss -= log_sigmoid(dy);
        entries.push((y, py - 1.0));
        for _ in 0..k {
            let x = noise.sample(rng);
            let dx = nce_logit(params.logit(h, x), noise.prob(x), k);
            loss -= log_sigmoid(-dx);
            entries.push((x, sigmoid(dx)));
        }
        grads.push(OutputGrad::Sparse(entries));
    }
    Ok((loss, grads))
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// NCE loss over a framed sequence and its gradient. Only the `W_out`
/// columns of the target and the sampled noise words receive gradient.
pub fn nce_loss<R: Rng + ?Sized>(
    params: &RlmParams,
    ids: &[usize],
    noise: &NoiseDistribution,
    k: usize,
    rng: &mut R,
    bias: Option<&[f64]>,
    cap: usize,
) -> Result<(f64, Backward)> {
    let (inputs, targets) = shift(ids)?;
    check_ids(targets, params.vocab_size())?;
    if noise.probs().len() != params.vocab_size() {
        return Err(Error::DimensionMismatch("noise distribution size differs from vocabulary".into()));
    }
    let hidden = hidden_states(params, inputs, None, bias)?;
    let (loss, out) = nce_output_grads(params, &hidden, targets, noise, k, rng)?;
    let trace = ForwardTrace {
        inputs: inputs.to_vec(),
        h0: vec![0.0; params.hidden_size()],
        hidden,
        probs: Vec::new(),
    };
    Ok((loss, bptt(params, &trace, &out, cap)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_params(v: usize, k: usize, scale: f64, seed: u64) -> RlmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = |_, _| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
        RlmParams {
            w_in: Matrix::from_fn(v, k, &mut g),
            w_hh: Matrix::from_fn(k, k, &mut g),
            w_out: Matrix::from_fn(k, v, &mut g),
        }
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert_eq!(softmax(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[10.3, 8.8, 12.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = RlmParams::zeros(7, 3);
        let trace = forward(&p, &[0, 4, 5], None, None).unwrap();
        for (h, probs) in trace.hidden.iter().zip(&trace.probs) {
            assert!(h.iter().all(|&x| x == 0.5));
            assert!(probs.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
        }
        let nll = sequence_nll(&p, &[0, 4, 5, 1], None).unwrap();
        assert!((nll - 3.0 * 7f64.ln()).abs() < 1e-12);
    }

    /// K=1, V=2 model evaluated by hand:
    /// w_in = [0.5, -1.0], w_hh = 2.0, w_out = [1.0, -1.0].
    fn scalar_model() -> RlmParams {
        RlmParams {
            w_in: Matrix::from_vec(2, 1, vec![0.5, -1.0]),
            w_hh: Matrix::from_vec(1, 1, vec![2.0]),
            w_out: Matrix::from_vec(1, 2, vec![1.0, -1.0]),
        }
    }

    #[test]
    fn scalar_recurrence_matches_hand_values() {
        let p = scalar_model();
        let trace = forward(&p, &[0, 1, 0], None, None).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let h1 = s(0.5);
        let h2 = s(-1.0 + 2.0 * h1);
        let h3 = s(0.5 + 2.0 * h2);
        for (got, want) in trace.hidden.iter().zip([h1, h2, h3]) {
            assert!((got[0] - want).abs() < 1e-15);
        }
        // P(word 0 | h) = e^h / (e^h + e^-h) = σ(2h)
        let nll = sequence_nll(&p, &[0, 1, 0, 1], None).unwrap();
        let want = -((1.0 - s(2.0 * h1)).ln() + s(2.0 * h2).ln() + (1.0 - s(2.0 * h3)).ln());
        assert!((nll - want).abs() < 1e-12);

        // bias enters inside the sigmoid
        let trace = forward(&p, &[0], None, Some(&[0.25])).unwrap();
        assert!((trace.hidden[0][0] - s(0.75)).abs() < 1e-15);
    }

    #[test]
    fn single_step_gradient_at_zero_params() {
        // h = 0.5·1, p uniform; dL/dW_out[k][v] = 0.5·(1/V − [v=y]),
        // dL/dh = 0 because W_out = 0, so nothing else moves.
        let p = RlmParams::zeros(5, 3);
        let (_, b) = nll_and_grad(&p, &[0, 2], None, DEFAULT_BPTT_CAP).unwrap();
        for k in 0..3 {
            for v in 0..5 {
                let want = 0.5 * (0.2 - if v == 2 { 1.0 } else { 0.0 });
                assert!((b.grads.w_out.get(k, v) - want).abs() < 1e-15);
            }
        }
        assert!(b.grads.w_in.as_slice().iter().all(|&x| x == 0.0));
        assert!(b.grads.w_hh.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn unused_embedding_rows_get_zero_gradient() {
        let p = random_params(10, 4, 0.5, 3);
        let (_, b) = nll_and_grad(&p, &[0, 5, 6, 1], None, DEFAULT_BPTT_CAP).unwrap();
        for row in [1, 2, 3, 4, 7, 8, 9] {
            assert!(b.grads.w_in.row(row).iter().all(|&x| x == 0.0), "row {row}");
        }
        assert!(b.grads.w_in.row(5).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn traces_are_normalized_and_bounded() {
        let p = random_params(12, 5, 2.0, 11);
        let trace = forward(&p, &[0, 3, 9, 11, 4, 4, 2], None, Some(&[0.1, -0.3, 2.0, 0.0, 1.0])).unwrap();
        for (h, probs) in trace.hidden.iter().zip(&trace.probs) {
            assert!(h.iter().all(|&x| x > 0.0 && x < 1.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bptt_cap_truncates_long_sequences_only() {
        let p = random_params(6, 3, 0.8, 5);
        let ids = [0, 1, 2, 3, 4, 5, 1];
        let (_, full) = nll_and_grad(&p, &ids, None, 50).unwrap();
        let (_, exact_cap) = nll_and_grad(&p, &ids, None, 6).unwrap();
        assert_eq!(full.grads, exact_cap.grads);
        let (_, cut) = nll_and_grad(&p, &ids, None, 2).unwrap();
        assert_ne!(full.grads.w_hh, cut.grads.w_hh);
        // W_out gradient never depends on the recurrent carry
        assert_eq!(full.grads.w_out, cut.grads.w_out);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let p = RlmParams::zeros(4, 2);
        assert!(matches!(forward(&p, &[4], None, None), Err(Error::IndexOutOfRange { .. })));
        assert!(sequence_nll(&p, &[0], None).is_err());
    }

    #[test]
    fn nce_posterior_is_half_at_noise_score() {
        let (q, k) = (0.05, 20);
        let score = (k as f64 * q).ln();
        assert!((sigmoid(nce_logit(score, q, k)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noise_distribution_is_smoothed_unigram() {
        let n = NoiseDistribution::from_counts(&[0, 16, 1, 81]).unwrap();
        let z = 8.0 + 1.0 + 27.0;
        assert_eq!(n.prob(0), 0.0);
        assert!((n.prob(1) - 8.0 / z).abs() < 1e-12);
        assert!((n.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| n.sample(&mut rng) != 0));
    }

    #[test]
    fn nce_rejects_zero_noise_target() {
        let p = RlmParams::zeros(4, 2);
        let n = NoiseDistribution::from_weights(&[0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = nce_loss(&p, &[0, 2, 1], &n, 5, &mut rng, None, 50).unwrap_err();
        assert!(matches!(err, Error::ZeroNoiseProbability(2)));
    }

    #[test]
    fn nce_touches_only_sampled_output_columns() {
        let p = random_params(30, 4, 0.3, 2);
        let mut w = vec![0.0; 30];
        for i in [1, 7, 8] {
            w[i] = 1.0;
        }
        let n = NoiseDistribution::from_weights(&w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (loss, b) = nce_loss(&p, &[0, 7, 1], &n, 4, &mut rng, None, 50).unwrap();
        assert!(loss > 0.0);
        for v in 0..30 {
            let touched = (0..4).any(|k| b.grads.w_out.get(k, v) != 0.0);
            if touched {
                assert!([1, 7, 8].contains(&v), "column {v}");
            }
        }
    }
}
