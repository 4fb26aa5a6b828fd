//! One configuration document for a whole run.
//!
//! Every stage's knobs nest under a single [`RunConfig`] so a run is
//! reproducible from one JSON file plus nothing else. The identity of a
//! run is the SHA-256 of the canonical JSON form ([`RunConfig::hash`]);
//! checkpoints carry that hash and loaders compare it, which catches the
//! classic mistake of evaluating a checkpoint under edited settings.
//!
//! Presentation-only fields — the output directory and the scenario
//! filter — are excluded from the hash: they change where results go and
//! which subset is reported, never the numbers themselves.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{SplitFractions, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::Scenario;
use crate::loss::LossConfig;
use crate::model::ModelDims;
use crate::pairing::{NegativeExposure, PairingConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Stage-level streams are salted internally, so one
    /// value drives corpus synthesis, splits, init, shuffling, and
    /// sampling without collisions.
    pub seed: u64,
    /// Where artifacts land. Not part of the run's identity.
    pub out_dir: String,
    /// Restrict evaluation to one scenario; `None` means all three.
    /// Not part of the run's identity.
    pub scenario: Option<Scenario>,
    pub synth: SynthSpec,
    pub splits: SplitFractions,
    pub pairing: PairingConfig,
    /// Which negatives the training tuples expose — a row of the
    /// comparison grid.
    pub negatives: NegativeExposure,
    pub dims: ModelDims,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: "runs".into(),
            scenario: None,
            synth: SynthSpec::default(),
            splits: SplitFractions::default(),
            pairing: PairingConfig::default(),
            negatives: NegativeExposure::All,
            dims: ModelDims::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Propagate one seed to every stage that keeps its own copy.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.splits.validate()?;
        self.pairing.validate()?;
        self.dims.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.dims.input != self.synth.dim {
            return Err(Error::InvalidConfig(format!(
                "model input dimension {} does not match corpus dimension {}",
                self.dims.input, self.synth.dim
            )));
        }
        if self.out_dir.is_empty() {
            return Err(Error::InvalidConfig("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Canonical JSON: routed through `serde_json::Value`, whose object
    /// maps are sorted by key, so formatting and field order in the
    /// source file cannot change the bytes.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        let obj = value.as_object_mut().expect("config is a JSON object");
        obj.remove("out_dir");
        obj.remove("scenario");
        value.to_string()
    }

    /// Hex SHA-256 of the canonical form — the run's identity.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
