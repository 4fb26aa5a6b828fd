//! Abstention scoring and evaluation.
//!
//! Everything downstream of training funnels into one shape: a
//! [`ScoredSet`] of higher-means-abstain scores with out-of-domain labels.
//! Three scorers produce them — the energy head, the softmax head's
//! abstain probability, and a training-free k-NN baseline over the raw
//! input embeddings — and the metrics layer neither knows nor cares which
//! one it is ranking.
//!
//! Evaluation scenarios are assembled per split so thresholds calibrated
//! on validation material can be applied, frozen, to the test split:
//!
//! * `hard`  — in-domain anchors vs. their paired near-domain confusables;
//! * `easy`  — the same anchors vs. well-separated external samples,
//!   class-balanced;
//! * `mixed` — the union of both.

mod grid;
mod knn;
mod metrics;

pub use grid::{
    ordering_checks, run_grid, CellFailure, GridOutcome, GridSettings, OrderingCheck,
};
pub use knn::KnnIndex;
pub use metrics::{
    aupr, auroc, calibrate, confusion_at, threshold_candidates, Confusion, Thresholds,
};

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, Role, Split};
use crate::diffmath::sigmoid;
use crate::error::{Error, Result};
use crate::model::{head_forward, project_batch, Block, ModelParams};

/// Which scoring rule produced a set of abstention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Raw energy of the projected embedding.
    EbmEnergy,
    /// Softmax head's probability of the out-of-domain class.
    SoftmaxProb,
    /// One minus the k-th highest cosine to the in-domain reference set.
    Knn,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::EbmEnergy, Method::SoftmaxProb, Method::Knn];

    pub fn name(self) -> &'static str {
        match self {
            Method::EbmEnergy => "ebm_energy",
            Method::SoftmaxProb => "softmax_prob",
            Method::Knn => "knn",
        }
    }
}

/// Scores for a set of queries, oriented so larger means more likely
/// out-of-domain; `labels[i]` is true when query `i` truly is.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub method: Method,
}

/// Evaluation condition, differing only in which negatives face the
/// in-domain queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Hard,
    Easy,
    Mixed,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Hard, Scenario::Easy, Scenario::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Hard => "hard",
            Scenario::Easy => "easy",
            Scenario::Mixed => "mixed",
        }
    }
}

/// Row indices making up one scenario on one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioRows {
    pub id_rows: Vec<u32>,
    pub ood_rows: Vec<u32>,
}

/// Assemble the query rows for a scenario on the given split.
///
/// The in-domain side is always the split's anchors. `hard` pits them
/// against their own paired confusables (same split by construction);
/// `easy` against the split's external pool, with both sides truncated to
/// the smaller count (in row order) so the classes stay balanced; `mixed`
/// is the union of the two with the anchor side appearing once.
pub fn scenario_rows(
    store: &EmbeddingStore,
    scenario: Scenario,
    split: Split,
) -> Result<ScenarioRows> {
    let anchors = store.select(|role, s| role == Role::Anchor && s == split);
    if anchors.is_empty() {
        return Err(Error::EmptySplit(split_name(split)));
    }

    let paired_negatives = |anchors: &[u32]| -> Result<Vec<u32>> {
        anchors
            .iter()
            .map(|&a| {
                store
                    .hard_negative_of(a)
                    .ok_or_else(|| Error::MissingHardNegative(store.id(a).to_string()))
            })
            .collect()
    };

    let balanced_easy = |anchors: &[u32]| -> Result<(Vec<u32>, Vec<u32>)> {
        let easy = store.select(|role, s| role == Role::EasyOod && s == split);
        if easy.is_empty() {
            return Err(Error::EmptyOodPool);
        }
        let n = anchors.len().min(easy.len());
        Ok((anchors[..n].to_vec(), easy[..n].to_vec()))
    };

    match scenario {
        Scenario::Hard => Ok(ScenarioRows {
            ood_rows: paired_negatives(&anchors)?,
            id_rows: anchors,
        }),
        Scenario::Easy => {
            let (id_rows, ood_rows) = balanced_easy(&anchors)?;
            Ok(ScenarioRows { id_rows, ood_rows })
        }
        Scenario::Mixed => {
            let mut ood_rows = paired_negatives(&anchors)?;
            let (_, easy_rows) = balanced_easy(&anchors)?;
            ood_rows.extend(easy_rows);
            Ok(ScenarioRows {
                id_rows: anchors,
                ood_rows,
            })
        }
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Unassigned => "unassigned",
    }
}

/// Anything that can turn store rows into abstention scores.
pub trait Scorer {
    fn method(&self) -> Method;

    /// Scores for the given rows, in order. Must be a pure function of
    /// the store contents so repeated calls are bitwise identical.
    fn raw_scores(&self, store: &EmbeddingStore, rows: &[u32]) -> Result<Vec<f64>>;
}

/// Score with the trained energy head: s(x) = E(proj(x)).
pub struct EnergyScorer<'a> {
    pub params: &'a ModelParams,
}

impl Scorer for EnergyScorer<'_> {
    fn method(&self) -> Method {
        Method::EbmEnergy
    }

    fn raw_scores(&self, store: &EmbeddingStore, rows: &[u32]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let cache = project_batch(self.params, store.gather(rows))?;
        let head = head_forward(self.params, Block::Energy, &cache.z);
        Ok(head.out().column(0).to_vec())
    }
}

/// Score with the softmax head: s(x) = p(abstain | proj(x)), computed as
/// σ(l₁ − l₀) to stay stable for large logit gaps.
pub struct SoftmaxScorer<'a> {
    pub params: &'a ModelParams,
}

impl Scorer for SoftmaxScorer<'_> {
    fn method(&self) -> Method {
        Method::SoftmaxProb
    }

    fn raw_scores(&self, store: &EmbeddingStore, rows: &[u32]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let cache = project_batch(self.params, store.gather(rows))?;
        let head = head_forward(self.params, Block::Softmax, &cache.z);
        let logits = head.out();
        Ok(logits
            .rows()
            .into_iter()
            .map(|l| sigmoid(l[1] - l[0]))
            .collect())
    }
}

/// Run a scorer over a scenario: in-domain rows first (label false), then
/// out-of-domain rows (label true).
pub fn score_scenario(
    scorer: &dyn Scorer,
    store: &EmbeddingStore,
    rows: &ScenarioRows,
) -> Result<ScoredSet> {
    let mut scores = scorer.raw_scores(store, &rows.id_rows)?;
    scores.extend(scorer.raw_scores(store, &rows.ood_rows)?);
    let mut labels = vec![false; rows.id_rows.len()];
    labels.extend(std::iter::repeat_n(true, rows.ood_rows.len()));
    Ok(ScoredSet {
        scores,
        labels,
        method: scorer.method(),
    })
}

/// One cell of the evaluation grid, serialisable as JSON and as a CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub config: String,
    pub scenario: Scenario,
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95: f64,
    pub det_err: f64,
    pub tau_deterr: f64,
    pub tau_95: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
}

pub const REPORT_CSV_HEADER: &str =
    "method,config,scenario,auroc,aupr,fpr_at_95,det_err,tau_deterr,tau_95,n_id,n_ood,seed";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method.name(),
            self.config,
            self.scenario.name(),
            self.auroc,
            self.aupr,
            self.fpr_at_95,
            self.det_err,
            self.tau_deterr,
            self.tau_95,
            self.n_id,
            self.n_ood,
            self.seed,
        )
    }
}

/// Apply frozen thresholds to a test scored set and compute all metrics.
///
/// `fpr_at_95` is the false-abstain rate at the τ₉₅ operating point;
/// `det_err` is ½(FPR + FNR) at the τ_DetErr point. Both thresholds come
/// in from the calibration split and are not adjusted here.
pub fn evaluate(
    test: &ScoredSet,
    thresholds: &Thresholds,
    config: &str,
    scenario: Scenario,
    seed: u64,
) -> Result<MetricReport> {
    let at_95 = confusion_at(test, thresholds.tau_95)?;
    let at_deterr = confusion_at(test, thresholds.tau_deterr)?;
    let n_ood = test.labels.iter().filter(|&&l| l).count();
    Ok(MetricReport {
        method: test.method,
        config: config.to_string(),
        scenario,
        auroc: auroc(test)?,
        aupr: aupr(test)?,
        fpr_at_95: at_95.fpr,
        det_err: at_deterr.det_err(),
        tau_deterr: thresholds.tau_deterr,
        tau_95: thresholds.tau_95,
        n_id: test.labels.len() - n_ood,
        n_ood,
        seed,
    })
}
