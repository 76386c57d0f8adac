//! Feed-forward context encoders and the context-conditioned decoders built
//! on them.
//!
//! The encoder maps bag-of-words input to a fixed vector `k_L` that is added
//! inside the decoder sigmoid at every step. The first layer is linear:
//!
//! ```text
//! joint:  k_1 = b_cmᵀ W_1
//! split:  k_1 = [b_cᵀ W_1, b_mᵀ W_1]
//!         k_l = σ(k_{l-1}ᵀ W_l)    l = 2..L
//! ```
//!
//! `W_1` holds the encoder's own word embeddings, separate from the
//! decoder's `W_in`. In the split variant `W_2` has twice the rows so the
//! two halves of `k_1` keep their order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, sigmoid, Matrix};
use crate::rnnlm::{self, Backward, RlmParams};
use crate::text::{BagOfWords, END_ID, SEP_ID, START_ID};

/// Full-scale encoder layer sizes.
pub const DEFAULT_LAYERS: [usize; 3] = [512, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    /// One bag over context and message together.
    Joint,
    /// Separate bags for context and message, concatenated after the first layer.
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub variant: EncoderVariant,
    pub layers: Vec<Matrix>,
}

impl EncoderParams {
    /// `sizes` are the per-layer output widths; the last must equal the
    /// decoder hidden size.
    pub fn zeros(variant: EncoderVariant, vocab: usize, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!("encoder needs at least 2 layers, got {}", sizes.len())));
        }
        if sizes.contains(&0) {
            return Err(Error::Config("encoder layer sizes must be positive".into()));
        }
        let mut layers = vec![Matrix::zeros(vocab, sizes[0])];
        for l in 1..sizes.len() {
            let fan_in = if l == 1 && variant == EncoderVariant::Split { 2 * sizes[0] } else { sizes[l - 1] };
            layers.push(Matrix::zeros(fan_in, sizes[l]));
        }
        Ok(Self { variant, layers })
    }

    pub fn vocab_size(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Matrix::cols).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Matrix::cols).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            variant: self.variant,
            layers: self.layers.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::DimensionMismatch("encoder has fewer than 2 layers".into()));
        }
        for l in 1..self.layers.len() {
            let want = match (l, self.variant) {
                (1, EncoderVariant::Split) => 2 * self.layers[0].cols(),
                _ => self.layers[l - 1].cols(),
            };
            if self.layers[l].rows() != want {
                return Err(Error::DimensionMismatch(format!(
                    "encoder layer {} has {} rows, expected {want}",
                    l + 1,
                    self.layers[l].rows()
                )));
            }
        }
        if self.layers.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("encoder parameters".into()));
        }
        Ok(())
    }
}

/// Bag-of-words input in the shape the variant expects.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    Joint(BagOfWords),
    Split { context: BagOfWords, message: BagOfWords },
}

impl EncoderInput {
    pub fn from_ids(variant: EncoderVariant, context: &[usize], message: &[usize], vocab: usize) -> Result<Self> {
        let c = BagOfWords::from_ids(context, vocab)?;
        let m = BagOfWords::from_ids(message, vocab)?;
        Ok(match variant {
            EncoderVariant::Joint => EncoderInput::Joint(&c + &m),
            EncoderVariant::Split => EncoderInput::Split { context: c, message: m },
        })
    }
}

/// Encoder activations `k_1..k_L`; `k_L` is the decoder bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector {
    pub activations: Vec<Vec<f64>>,
}

impl ContextVector {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("encoder has layers")
    }
}

fn embed(w: &Matrix, bag: &BagOfWords, out: &mut [f64]) -> Result<()> {
    if bag.dim() != w.rows() {
        return Err(Error::DimensionMismatch(format!("bag dimension {} vs encoder vocabulary {}", bag.dim(), w.rows())));
    }
    for (i, c) in bag.iter() {
        axpy(c as f64, w.row(i), out);
    }
    Ok(())
}

pub fn encode(enc: &EncoderParams, input: &EncoderInput) -> Result<ContextVector> {
    let w1 = &enc.layers[0];
    let d1 = w1.cols();
    let k1 = match (enc.variant, input) {
        (EncoderVariant::Joint, EncoderInput::Joint(b)) => {
            let mut k = vec![0.0; d1];
            embed(w1, b, &mut k)?;
            k
        }
        (EncoderVariant::Split, EncoderInput::Split { context, message }) => {
            let mut k = vec![0.0; 2 * d1];
            let (left, right) = k.split_at_mut(d1);
            embed(w1, context, left)?;
            embed(w1, message, right)?;
            k
        }
        (v, _) => return Err(Error::DimensionMismatch(format!("input shape does not match {v:?} encoder"))),
    };
    let mut activations = vec![k1];
    for w in &enc.layers[1..] {
        let prev = activations.last().unwrap();
        let mut pre = vec![0.0; w.cols()];
        w.vec_mul(prev, &mut pre);
        activations.push(pre.into_iter().map(sigmoid).collect());
    }
    if activations.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("encoder activation".into()));
    }
    Ok(ContextVector { activations })
}

pub fn encode_dcgm1(enc: &EncoderParams, b_cm: &BagOfWords) -> Result<ContextVector> {
    encode(enc, &EncoderInput::Joint(b_cm.clone()))
}

pub fn encode_dcgm2(enc: &EncoderParams, b_c: &BagOfWords, b_m: &BagOfWords) -> Result<ContextVector> {
    encode(enc, &EncoderInput::Split { context: b_c.clone(), message: b_m.clone() })
}

/// Backpropagates `∂loss/∂k_L` through the encoder stack.
pub fn encoder_backward(enc: &EncoderParams, input: &EncoderInput, ctx: &ContextVector, d_out: &[f64]) -> EncoderParams {
    let mut grads = enc.zeros_like();
    let mut delta = d_out.to_vec();
    for l in (1..enc.layers.len()).rev() {
        let k = &ctx.activations[l];
        let dpre: Vec<f64> = delta.iter().zip(k).map(|(d, a)| d * a * (1.0 - a)).collect();
        grads.layers[l].add_outer(&ctx.activations[l - 1], &dpre);
        let mut below = vec![0.0; enc.layers[l].rows()];
        enc.layers[l].mul_vec(&dpre, &mut below);
        delta = below;
    }
    let d1 = enc.layers[0].cols();
    let g1 = &mut grads.layers[0];
    match input {
        EncoderInput::Joint(b) => {
            for (i, c) in b.iter() {
                axpy(c as f64, &delta, g1.row_mut(i));
            }
        }
        EncoderInput::Split { context, message } => {
            for (i, c) in context.iter() {
                axpy(c as f64, &delta[..d1], g1.row_mut(i));
            }
            for (i, c) in message.iter() {
                axpy(c as f64, &delta[d1..], g1.row_mut(i));
            }
        }
    }
    grads
}

/// Decoder plus context encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcgmModel {
    pub decoder: RlmParams,
    pub encoder: EncoderParams,
}

/// Gradients of a [`DcgmModel`], shape-matched.
#[derive(Debug, Clone, PartialEq)]
pub struct DcgmGrads {
    pub decoder: RlmParams,
    pub encoder: EncoderParams,
}

/// `<s> r </s>`
pub fn frame_response(r: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(r.len() + 2);
    ids.push(START_ID);
    ids.extend_from_slice(r);
    ids.push(END_ID);
    ids
}

/// Checks that a decoder and encoder fit together.
pub fn validate_pair(decoder: &RlmParams, encoder: &EncoderParams) -> Result<()> {
    decoder.validate()?;
    encoder.validate()?;
    if encoder.output_dim() != decoder.hidden_size() {
        return Err(Error::DimensionMismatch(format!(
            "encoder output {} vs decoder hidden {}",
            encoder.output_dim(),
            decoder.hidden_size()
        )));
    }
    if encoder.vocab_size() != decoder.vocab_size() {
        return Err(Error::DimensionMismatch("encoder and decoder vocabularies differ".into()));
    }
    Ok(())
}

impl DcgmModel {
    pub fn validate(&self) -> Result<()> {
        validate_pair(&self.decoder, &self.encoder)
    }

    pub fn input(&self, c: &[usize], m: &[usize]) -> Result<EncoderInput> {
        EncoderInput::from_ids(self.encoder.variant, c, m, self.encoder.vocab_size())
    }

    pub fn context(&self, c: &[usize], m: &[usize]) -> Result<ContextVector> {
        encode(&self.encoder, &self.input(c, m)?)
    }

    /// Decoder trace over `<s> r` biased by the context vector.
    pub fn trace(&self, ctx: &ContextVector, r: &[usize]) -> Result<rnnlm::ForwardTrace> {
        let ids = frame_response(r);
        rnnlm::forward(&self.decoder, &ids[..ids.len() - 1], None, Some(ctx.output()))
    }

    /// `Σ_t log p(r_t | r_<t, c, m)` over `r </s>`.
    pub fn log_prob(&self, c: &[usize], m: &[usize], r: &[usize]) -> Result<f64> {
        let ctx = self.context(c, m)?;
        let ids = frame_response(r);
        let trace = self.trace(&ctx, r)?;
        Ok(trace.step_log_probs(&ids[1..]).iter().sum())
    }

    /// Response NLL and its exact gradient with respect to every matrix.
    pub fn loss_and_grad(&self, c: &[usize], m: &[usize], r: &[usize], cap: usize) -> Result<(f64, DcgmGrads)> {
        let input = self.input(c, m)?;
        let ctx = encode(&self.encoder, &input)?;
        let ids = frame_response(r);
        let (loss, back) = rnnlm::nll_and_grad(&self.decoder, &ids, Some(ctx.output()), cap)?;
        Ok((loss, self.finish_backward(&input, &ctx, back)))
    }

    /// Completes a decoder backward pass by pushing the accumulated bias
    /// gradient through the encoder.
    pub fn finish_backward(&self, input: &EncoderInput, ctx: &ContextVector, back: Backward) -> DcgmGrads {
        let encoder = encoder_backward(&self.encoder, input, ctx, &back.bias);
        DcgmGrads { decoder: back.grads, encoder }
    }
}

pub fn dcgm_log_prob(model: &DcgmModel, c: &[usize], m: &[usize], r: &[usize]) -> Result<f64> {
    model.log_prob(c, m, r)
}

pub fn dcgm_backward(model: &DcgmModel, c: &[usize], m: &[usize], r: &[usize]) -> Result<DcgmGrads> {
    Ok(model.loss_and_grad(c, m, r, rnnlm::DEFAULT_BPTT_CAP)?.1)
}

/// `<s> c <sep> m <sep> r </s>` and the index (into the shifted targets) of
/// the first response position.
pub fn rlmt_sequence(c: &[usize], m: &[usize], r: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = Vec::with_capacity(c.len() + m.len() + r.len() + 4);
    ids.push(START_ID);
    ids.extend_from_slice(c);
    ids.push(SEP_ID);
    ids.extend_from_slice(m);
    ids.push(SEP_ID);
    let first_response_target = ids.len() - 1;
    ids.extend_from_slice(r);
    ids.push(END_ID);
    (ids, first_response_target)
}

/// Log-probability of `r </s>` after reading `<s> c <sep> m <sep>`.
pub fn rlmt_log_prob(rlm: &RlmParams, c: &[usize], m: &[usize], r: &[usize]) -> Result<f64> {
    let (ids, first) = rlmt_sequence(c, m, r);
    let (inputs, targets) = rnnlm::shift(&ids)?;
    let trace = rnnlm::forward(rlm, inputs, None, None)?;
    Ok(trace.step_log_probs(targets)[first..].iter().sum())
}
