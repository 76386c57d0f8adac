//! Context-sensitive neural response generation: recurrent language models
//! conditioned on conversation context, plus the retrieval, rescoring and
//! evaluation machinery around them.

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rescore;
pub mod retrieval;
pub mod rnnlm;
pub mod text;
pub mod train;

pub use encoder::{EncoderParams, EncoderVariant};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use metrics::{bleu_stats, corpus_bleu, meteor_lite, BleuStats, MeteorConfig};
pub use model::{Checkpoint, EncodedTriple, Family, Model, Objective};
pub use rescore::{FeatureRegistry, FeatureSet, LogLinearWeights, NBestList};
pub use retrieval::{MinerConfig, ReferenceSet, TripleIndex};
pub use rnnlm::RlmParams;
pub use text::{Triple, Vocabulary};
pub use train::{train, TrainConfig, TrainReport};
