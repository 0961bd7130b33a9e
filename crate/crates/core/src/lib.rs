//! Meta-training for in-context learning at desk scale.
//!
//! A small causal language model is trained on episodes assembled from many
//! tasks so that, at inference time, it can pick up a new task from k
//! concatenated examples without any parameter update. The crate contains the
//! full pipeline: task corpora ([`corpus`]), deterministic synthetic task
//! families ([`synth`]), byte tokenization ([`tokenizer`]), prompt/sequence
//! assembly ([`seqbuild`]), the transformer with hand-written gradients
//! ([`model`]), the training regimes ([`trainer`]), candidate scoring
//! ([`scorer`]) and the multi-seed evaluation protocol ([`eval`]).
//!
//! All numeric code is generic over the scalar type: training runs in `f32`,
//! gradient verification in `f64`. Concrete aliases are exported below.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod scorer;
pub mod seqbuild;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model, the training configuration.
pub type Model32 = model::ModelParams<f32>;
/// Double-precision model, used for gradient verification.
pub type Model64 = model::ModelParams<f64>;
