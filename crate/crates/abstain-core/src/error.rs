//! Error taxonomy shared across the crate.
//!
//! Numeric guards (`DegenerateNorm`, `NonPositiveTemperature`, `EmptyMask`)
//! fire as close to the offending operation as possible so callers see the
//! math that broke, not a downstream symptom. Data errors carry the record
//! id involved.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector that must be normalised has norm at or below the epsilon floor.
    #[error("cannot normalise vector with norm {norm:.3e} (floor {eps:.0e})")]
    DegenerateNorm { norm: f64, eps: f64 },

    /// Temperature parameters enter as divisors and must be strictly positive.
    #[error("temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),

    /// A masked reduction was asked to reduce over zero active entries.
    #[error("masked reduction over an empty selection")]
    EmptyMask,

    /// Operands disagree on dimensions; the message spells out both sides.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A serialized artifact failed structural validation (bad magic, short
    /// buffer, trailer/row-count disagreement, unknown enum tag, ...).
    #[error("malformed file: {0}")]
    Format(String),

    /// An embedding row arrived with a norm too far from unit to be trusted
    /// as pre-normalised data.
    #[error("row {id} has norm {norm:.6} — expected unit-normalised input")]
    Norm { id: String, norm: f64 },

    /// Record ids must be unique within a store.
    #[error("duplicate record id {0}")]
    DuplicateId(String),

    /// The synthetic-corpus sampler could not satisfy its separation
    /// constraints (dimension too small, bands inverted, rejection budget
    /// exhausted, ...).
    #[error("infeasible synthetic geometry: {0}")]
    InfeasibleGeometry(String),

    /// Split assignment produced a split with zero anchors.
    #[error("split {0} received zero anchors")]
    EmptySplit(&'static str),

    /// Tuple assembly found an anchor without its constructed hard negative.
    #[error("anchor {0} has no paired hard negative")]
    MissingHardNegative(String),

    /// The exposure configuration calls for an external-OOD hinge but the
    /// pool it draws from is empty.
    #[error("external OOD pool is empty but the configuration requires it")]
    EmptyOodPool,

    /// A gradient went NaN/Inf before clipping; carries the parameter block.
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    /// The training loss became non-finite.
    #[error("training loss diverged at epoch {0}")]
    DivergedLoss(usize),

    /// Ranking metrics need both classes present.
    #[error("scored set contains a single class")]
    SingleClass,

    /// A k-NN index was built with fewer reference rows than k.
    #[error("reference set has {len} rows, fewer than k = {k}")]
    IndexTooSmall { k: usize, len: usize },

    /// Embedding dimensionality disagrees with what the consumer expects.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Roles and splits are immutable once assigned; something tried twice.
    #[error("splits already assigned for this store")]
    SplitsAlreadyAssigned,

    /// A configuration value violates its documented domain (bad fractions,
    /// inverted bands, zero counts where positives are required, ...).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A checkpoint was produced under a different configuration than the
    /// one now in effect.
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
