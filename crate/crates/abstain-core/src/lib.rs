//! Energy-calibrated abstention scoring over dense embeddings.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`corpus`] — synthetic corpus generation with controlled hard/easy
//!   out-of-domain structure, split assignment, and a binary embedding
//!   interchange format;
//! * [`pairing`] — reciprocal-nearest-neighbour positive pairing and
//!   similarity-band negative pool assembly;
//! * [`model`] — the shared projector with energy and softmax heads,
//!   batched forward/backward passes, and checkpoint serialisation;
//! * [`loss`] — the contrastive training objective with per-term
//!   decomposition and ablation switches;
//! * [`train`] — the AdamW loop with cosine learning-rate decay and
//!   deterministic per-epoch resampling;
//! * [`eval`] — abstention scorers (energy, softmax probability, k-NN
//!   distance), ranking metrics, threshold calibration, and the full
//!   exposure-grid runner;
//! * [`diffmath`] — the scalar/vector primitives and the finite-difference
//!   oracle the hand-written gradients are tested against.
//!
//! Everything is deterministic given a seed: random draws go through
//! [`rng::stream`], which derives an independent ChaCha8 stream per
//! `(seed, purpose, site)` so re-running any stage reproduces its output
//! byte for byte.

pub mod config;
pub mod corpus;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod pairing;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
