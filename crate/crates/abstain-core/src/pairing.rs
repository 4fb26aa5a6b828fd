//! Training-tuple assembly: reciprocal-nearest-neighbour positives, banded
//! negative pools, paired hard negatives, the external OOD pool, and
//! per-epoch mined-negative sampling with padding and masking.
//!
//! Leakage rule: every mined-candidate pool and the external OOD pool draw
//! exclusively from rows whose split is `Unassigned`. Rows assigned to
//! train/val/test only ever appear as the anchor/positive/hard-negative of
//! their own split's tuples, so no scoring item doubles as training
//! material.

use std::collections::HashSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingStore, Role, Split};
use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// A closed cosine band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeBand {
    pub lo: f64,
    pub hi: f64,
}

impl NegativeBand {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi && self.lo >= -1.0 && self.hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "negative band [{}, {}] is not an increasing cosine range",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, cos: f64) -> bool {
        cos >= self.lo && cos <= self.hi
    }
}

/// Which negatives a training run is exposed to. The variants mirror the
/// rows of the results grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeExposure {
    /// Hard negative + mid/easy/reserve mined pool + external OOD hinge.
    All,
    /// Only the paired hard negative; no mined pool, no OOD hinge.
    HardOnly,
    /// Only easy-OOD mined negatives and the OOD hinge; hard negative masked.
    EasyOnly,
    /// Full mined pool and OOD hinge, hard negative masked.
    NoHard,
    /// Hard negative + mid/reserve mined pool; nothing easy anywhere.
    NoEasy,
    /// Hard negative + easy mined pool + OOD hinge; no mid/reserve.
    HardEasy,
}

impl NegativeExposure {
    pub const ALL_CONFIGS: [Self; 6] = [
        Self::All,
        Self::HardOnly,
        Self::EasyOnly,
        Self::NoHard,
        Self::NoEasy,
        Self::HardEasy,
    ];

    /// Does the loss see the paired hard negative?
    pub fn uses_hard(self) -> bool {
        !matches!(self, Self::EasyOnly | Self::NoHard)
    }

    /// Mined-pool components: (mid-band, easy, reserve).
    pub fn pool_components(self) -> (bool, bool, bool) {
        match self {
            Self::All | Self::NoHard => (true, true, true),
            Self::HardOnly => (false, false, false),
            Self::EasyOnly | Self::HardEasy => (false, true, false),
            Self::NoEasy => (true, false, true),
        }
    }

    /// Is the external-OOD hinge active? Tied to whether easy material is
    /// part of the exposure at all.
    pub fn uses_ood_hinge(self) -> bool {
        self.pool_components().1
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::HardOnly => "hard_only",
            Self::EasyOnly => "easy_only",
            Self::NoHard => "no_hard",
            Self::NoEasy => "no_easy",
            Self::HardEasy => "hard_easy",
        }
    }
}

/// Knobs for pool construction and mining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairingConfig {
    pub mid_band: NegativeBand,
    pub easy_band: NegativeBand,
    pub k_mine: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self {
            mid_band: NegativeBand { lo: 0.5, hi: 0.8 },
            easy_band: NegativeBand { lo: -1.0, hi: 0.3 },
            k_mine: 8,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        self.mid_band.validate()?;
        self.easy_band.validate()
    }
}

/// One anchor's training material. `hard_negative` is always resolved;
/// whether the loss uses it is the exposure's decision. `mined`/`mined_mask`
/// are filled by [`sample_k_mine`] — freshly assembled tuples start empty.
#[derive(Debug, Clone)]
pub struct TrainingTuple {
    pub anchor: u32,
    pub positive: u32,
    pub hard_negative: u32,
    /// Mined-candidate pool, deterministic order (banded components by
    /// descending cosine then id; reserve by id).
    pub pool: Vec<u32>,
    pub mined: Vec<u32>,
    pub mined_mask: Vec<bool>,
}

/// All tuples of one split under one exposure, plus the shared external
/// OOD pool the hinge samples from.
#[derive(Debug, Clone)]
pub struct TupleSet {
    pub split: Split,
    pub exposure: NegativeExposure,
    pub k_mine: usize,
    pub tuples: Vec<TrainingTuple>,
    /// Unassigned easy-OOD rows; empty when the exposure has no OOD hinge.
    pub ood_pool: Vec<u32>,
}

/// Reciprocal-nearest-neighbour filtering: keep (anchor, candidate) iff
/// each is the other's top-1 by cosine. Exact duplicates (cosine above
/// 1 − 1e-9) are dropped; cosine ties resolve to the lexicographically
/// lower id so results are deterministic. Output is ordered by anchor id.
pub fn rnn_filter(
    store: &EmbeddingStore,
    anchors: &[u32],
    candidates: &[u32],
) -> Vec<(u32, u32)> {
    if anchors.is_empty() || candidates.is_empty() {
        return Vec::new();
    }
    let a_mat = store.gather(anchors);
    let c_mat = store.gather(candidates);
    let sims = a_mat.dot(&c_mat.t());

    // Top-1 with lower-id tie-breaking, in both directions.
    let top_for = |scores: ndarray::ArrayView1<f64>, refs: &[u32]| -> usize {
        let mut best = 0usize;
        for i in 1..refs.len() {
            let (s, b) = (scores[i], scores[best]);
            if s > b || (s == b && store.id(refs[i]) < store.id(refs[best])) {
                best = i;
            }
        }
        best
    };

    let best_candidate: Vec<usize> = (0..anchors.len())
        .map(|i| top_for(sims.row(i), candidates))
        .collect();
    let best_anchor: Vec<usize> = (0..candidates.len())
        .map(|j| top_for(sims.column(j), anchors))
        .collect();

    let mut pairs: Vec<(u32, u32)> = (0..anchors.len())
        .filter_map(|i| {
            let j = best_candidate[i];
            let mutual = best_anchor[j] == i;
            let duplicate = sims[(i, j)] > 1.0 - 1e-9;
            (mutual && !duplicate).then_some((anchors[i], candidates[j]))
        })
        .collect();
    pairs.sort_by(|a, b| store.id(a.0).cmp(store.id(b.0)));
    pairs
}

/// Pool items whose cosine to `anchor` falls inside `band`, ordered by
/// descending cosine with ties broken by id.
pub fn band_negatives(
    store: &EmbeddingStore,
    anchor: u32,
    pool: &[u32],
    band: NegativeBand,
) -> Vec<u32> {
    let a = store.unit_row(anchor);
    let mut hits: Vec<(f64, u32)> = pool
        .iter()
        .filter_map(|&p| {
            let cos = a.dot(&store.unit_row(p));
            band.contains(cos).then_some((cos, p))
        })
        .collect();
    hits.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .expect("cosines are finite")
            .then_with(|| store.id(x.1).cmp(store.id(y.1)))
    });
    hits.into_iter().map(|(_, p)| p).collect()
}

/// Assemble one tuple per surviving anchor of `split` under `exposure`.
///
/// Positives come from reciprocal-nearest-neighbour filtering against the
/// split's positive pool; anchors whose RNN match fails are dropped. Every
/// surviving anchor must have its constructed hard negative. Mined pools
/// and the OOD pool draw only from unassigned rows (leakage rule).
pub fn assemble_tuples(
    store: &EmbeddingStore,
    cfg: &PairingConfig,
    exposure: NegativeExposure,
    split: Split,
) -> Result<TupleSet> {
    cfg.validate()?;
    let anchors = store.select(|r, s| r == Role::Anchor && s == split);
    let positives = store.select(|r, s| r == Role::PositivePool && s == split);
    let pairs = rnn_filter(store, &anchors, &positives);

    let (want_mid, want_easy, want_reserve) = exposure.pool_components();
    let mid_rows = if want_mid {
        store.select(|r, s| r == Role::MidPool && s == Split::Unassigned)
    } else {
        Vec::new()
    };
    let easy_rows = if want_easy {
        store.select(|r, s| r == Role::EasyOod && s == Split::Unassigned)
    } else {
        Vec::new()
    };
    let reserve_rows = if want_reserve {
        store.select(|r, s| r == Role::Reserve && s == Split::Unassigned)
    } else {
        Vec::new()
    };

    let ood_pool = if exposure.uses_ood_hinge() {
        let pool = store.select(|r, s| r == Role::EasyOod && s == Split::Unassigned);
        if pool.is_empty() {
            return Err(Error::EmptyOodPool);
        }
        pool
    } else {
        Vec::new()
    };

    let tuples = pairs
        .iter()
        .map(|&(anchor, positive)| {
            let hard_negative = store
                .hard_negative_of(anchor)
                .ok_or_else(|| Error::MissingHardNegative(store.id(anchor).to_owned()))?;
            let mut pool = band_negatives(store, anchor, &mid_rows, cfg.mid_band);
            pool.extend(band_negatives(store, anchor, &easy_rows, cfg.easy_band));
            pool.extend(&reserve_rows);
            Ok(TrainingTuple {
                anchor,
                positive,
                hard_negative,
                pool,
                mined: Vec::new(),
                mined_mask: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TupleSet {
        split,
        exposure,
        k_mine: cfg.k_mine,
        tuples,
        ood_pool,
    })
}

/// Draw the tuple's mined negatives: `k_mine` distinct pool items,
/// uniformly without replacement. Short pools are taken whole and padded
/// with the anchor's own ref under a false mask (any index works — masked
/// slots are inert). The caller passes a seed that already encodes run
/// seed and epoch; the anchor ref is mixed in here, so each tuple draws an
/// independent stream and resampling order cannot matter.
pub fn sample_k_mine(tuple: &TrainingTuple, k_mine: usize, seed: u64) -> TrainingTuple {
    let mut out = tuple.clone();
    let n = tuple.pool.len();
    if n <= k_mine {
        out.mined = tuple.pool.clone();
        out.mined_mask = vec![true; n];
        out.mined.resize(k_mine, tuple.anchor);
        out.mined_mask.resize(k_mine, false);
    } else {
        let mut rng = stream(seed, &[salt::MINE, u64::from(tuple.anchor)]);
        let picks = rand::seq::index::sample(&mut rng, n, k_mine);
        out.mined = picks.iter().map(|i| tuple.pool[i]).collect();
        out.mined_mask = vec![true; k_mine];
    }
    out
}

/// Audit sidecar: one JSON line per tuple with ids instead of row indices.
pub fn write_tuples_jsonl(
    store: &EmbeddingStore,
    set: &TupleSet,
    path: impl AsRef<Path>,
) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        anchor: &'a str,
        positive: &'a str,
        hard_negative: &'a str,
        pool_size: usize,
        mined: Vec<&'a str>,
        mined_mask: &'a [bool],
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in &set.tuples {
        let line = Line {
            anchor: store.id(t.anchor),
            positive: store.id(t.positive),
            hard_negative: store.id(t.hard_negative),
            pool_size: t.pool.len(),
            mined: t.mined.iter().map(|&r| store.id(r)).collect(),
            mined_mask: &t.mined_mask,
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Exhaustively verify the leakage rule on an assembled set: no pool or
/// OOD ref may carry a train/val/test split. Returns the offending ids.
pub fn leakage_violations(store: &EmbeddingStore, set: &TupleSet) -> Vec<String> {
    let mut bad = Vec::new();
    let mut seen = HashSet::new();
    let pool_refs = set
        .tuples
        .iter()
        .flat_map(|t| t.pool.iter().copied())
        .chain(set.ood_pool.iter().copied());
    for r in pool_refs {
        if store.split(r) != Split::Unassigned && seen.insert(r) {
            bad.push(store.id(r).to_owned());
        }
    }
    bad
}
