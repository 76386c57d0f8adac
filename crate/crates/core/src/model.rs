//! The three trainable model families behind one type, their training
//! objectives, and the checkpoint container.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderParams, EncoderVariant};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rnnlm::{self, NoiseDistribution, RlmParams};
use crate::text::{Triple, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Plain recurrent LM over the concatenated triple.
    Rlmt,
    /// Joint bag-of-words context encoder.
    Dcgm1,
    /// Split context/message encoder.
    Dcgm2,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Rlmt, Family::Dcgm1, Family::Dcgm2];

    pub fn encoder_variant(self) -> Option<EncoderVariant> {
        match self {
            Family::Rlmt => None,
            Family::Dcgm1 => Some(EncoderVariant::Joint),
            Family::Dcgm2 => Some(EncoderVariant::Split),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Rlmt => "rlmt",
            Family::Dcgm1 => "dcgm1",
            Family::Dcgm2 => "dcgm2",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rlmt" => Ok(Family::Rlmt),
            "dcgm1" | "dcgm-i" => Ok(Family::Dcgm1),
            "dcgm2" | "dcgm-ii" => Ok(Family::Dcgm2),
            other => Err(Error::Config(format!("unknown model family `{other}` (expected rlmt, dcgm1 or dcgm2)"))),
        }
    }
}

/// A triple as vocabulary indices, without sentence markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTriple {
    pub context: Vec<usize>,
    pub message: Vec<usize>,
    pub response: Vec<usize>,
}

impl EncodedTriple {
    pub fn new(vocab: &Vocabulary, t: &Triple) -> Self {
        Self {
            context: vocab.encode(&t.context, false),
            message: vocab.encode(&t.message, false),
            response: vocab.encode(&t.response, false),
        }
    }
}

/// Which output-layer objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Softmax,
    Nce,
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Objective::Softmax),
            "nce" => Ok(Objective::Nce),
            other => Err(Error::Config(format!("unknown objective `{other}` (expected softmax or nce)"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Softmax => "softmax",
            Objective::Nce => "nce",
        })
    }
}

/// NCE settings passed down to the loss.
pub struct NceSetup<'a> {
    pub noise: &'a NoiseDistribution,
    pub samples: usize,
}

/// Decoder and, for the DCGM families, the context encoder. Also serves as
/// the gradient container for itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub family: Family,
    pub decoder: RlmParams,
    pub encoder: Option<EncoderParams>,
}

impl Model {
    pub fn zeros(family: Family, vocab: usize, hidden: usize, encoder_sizes: &[usize]) -> Result<Self> {
        let encoder = match family.encoder_variant() {
            Some(v) => {
                if encoder_sizes.last() != Some(&hidden) {
                    return Err(Error::Config(format!(
                        "last encoder layer ({:?}) must equal the hidden size {hidden}",
                        encoder_sizes.last()
                    )));
                }
                Some(EncoderParams::zeros(v, vocab, encoder_sizes)?)
            }
            None => None,
        };
        Ok(Self { family, decoder: RlmParams::zeros(vocab, hidden), encoder })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            family: self.family,
            decoder: self.decoder.zeros_like(),
            encoder: self.encoder.as_ref().map(EncoderParams::zeros_like),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.decoder.hidden_size()
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.encoder, self.family.encoder_variant()) {
            (None, None) => self.decoder.validate(),
            (Some(enc), Some(v)) if enc.variant == v => encoder::validate_pair(&self.decoder, enc),
            _ => Err(Error::Checkpoint(format!("encoder does not match family {}", self.family))),
        }
    }

    /// All matrices in a fixed order: `W_in`, `W_hh`, `W_out`, then encoder layers.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v = self.decoder.tensors();
        if let Some(e) = &self.encoder {
            v.extend(e.layers.iter());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.decoder.tensors_mut();
        if let Some(e) = &mut self.encoder {
            v.extend(e.layers.iter_mut());
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn add_assign(&mut self, other: &Model) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `log p(r | c, m)` (response tokens plus the end marker).
    pub fn response_log_prob(&self, c: &[usize], m: &[usize], r: &[usize]) -> Result<f64> {
        match &self.encoder {
            None => encoder::rlmt_log_prob(&self.decoder, c, m, r),
            Some(enc) => {
                let ctx = encoder::encode(enc, &encoder::EncoderInput::from_ids(enc.variant, c, m, enc.vocab_size())?)?;
                let ids = encoder::frame_response(r);
                let trace = rnnlm::forward(&self.decoder, &ids[..ids.len() - 1], None, Some(ctx.output()))?;
                Ok(trace.step_log_probs(&ids[1..]).iter().sum())
            }
        }
    }

    /// Number of predicted tokens in this family's training objective.
    pub fn objective_tokens(&self, ex: &EncodedTriple) -> usize {
        match self.family {
            Family::Rlmt => ex.context.len() + ex.message.len() + ex.response.len() + 3,
            _ => ex.response.len() + 1,
        }
    }

    /// Exact training NLL: whole concatenated sequence for RLMT, response
    /// only for the DCGMs.
    pub fn objective(&self, ex: &EncodedTriple) -> Result<f64> {
        match &self.encoder {
            None => {
                let (ids, _) = encoder::rlmt_sequence(&ex.context, &ex.message, &ex.response);
                rnnlm::sequence_nll(&self.decoder, &ids, None)
            }
            Some(_) => Ok(-self.response_log_prob(&ex.context, &ex.message, &ex.response)?),
        }
    }

    /// Training loss and gradient for one example.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        ex: &EncodedTriple,
        nce: Option<&NceSetup<'_>>,
        rng: &mut R,
        cap: usize,
    ) -> Result<(f64, Model)> {
        let (ids, bias_input) = match &self.encoder {
            None => (encoder::rlmt_sequence(&ex.context, &ex.message, &ex.response).0, None),
            Some(enc) => {
                let input = encoder::EncoderInput::from_ids(enc.variant, &ex.context, &ex.message, enc.vocab_size())?;
                let ctx = encoder::encode(enc, &input)?;
                (encoder::frame_response(&ex.response), Some((input, ctx)))
            }
        };
        let bias = bias_input.as_ref().map(|(_, ctx)| ctx.output());
        let (loss, back) = match nce {
            None => rnnlm::nll_and_grad(&self.decoder, &ids, bias, cap)?,
            Some(n) => rnnlm::nce_loss(&self.decoder, &ids, n.noise, n.samples, rng, bias, cap)?,
        };
        let encoder = match (&self.encoder, bias_input) {
            (Some(enc), Some((input, ctx))) => Some(encoder::encoder_backward(enc, &input, &ctx, &back.bias)),
            _ => None,
        };
        Ok((loss, Model { family: self.family, decoder: back.grads, encoder }))
    }
}

pub const CHECKPOINT_FORMAT: &str = "dcgm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON container: dimensions, vocabulary hash, row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub encoder_sizes: Vec<usize>,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, vocab: &Vocabulary) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            vocab_hash: vocab.hash(),
            vocab_size: model.vocab_size(),
            hidden_size: model.hidden_size(),
            encoder_sizes: model.encoder.as_ref().map(EncoderParams::sizes).unwrap_or_default(),
            model,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    /// Parses and checks the container against the vocabulary it will be
    /// used with.
    pub fn read<R: Read>(r: R, vocab: &Vocabulary) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(r).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported container {} v{}", ck.format, ck.version)));
        }
        let found = vocab.hash();
        if ck.vocab_hash != found {
            return Err(Error::VocabularyMismatch { expected: ck.vocab_hash, found });
        }
        ck.model.validate()?;
        if ck.vocab_size != vocab.len() || ck.model.vocab_size() != vocab.len() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint vocabulary size {} vs vocabulary {}",
                ck.vocab_size,
                vocab.len()
            )));
        }
        let sizes = ck.model.encoder.as_ref().map(EncoderParams::sizes).unwrap_or_default();
        if ck.hidden_size != ck.model.hidden_size() || ck.encoder_sizes != sizes {
            return Err(Error::DimensionMismatch("checkpoint header disagrees with its matrices".into()));
        }
        Ok(ck)
    }
}
