//! Embedding storage, roles, splits, synthetic corpus generation, and the
//! EMB1 interchange format.
//!
//! A store is an immutable table of unit-norm embedding rows. Each row
//! carries an id, a [`Role`] describing how the row may be used, and a
//! [`Split`] assignment. Raw `f32` data is kept verbatim (it is the
//! serialisation source of truth, so save→load→save round-trips bit-exactly)
//! alongside an `f64` re-normalised working matrix used by all numeric code.
//!
//! # Id linkage
//!
//! Constructed partners are linked through id prefixes: the positive built
//! for anchor `anc-000042` is `pos:anc-000042`, its hard negative is
//! `hn:anc-000042`. The linkage survives serialisation because it lives in
//! the ids themselves; imported corpora that follow the same convention get
//! the same pairing behaviour.

pub mod emb1;
pub mod synth;

pub use emb1::{load_embeddings, save_embeddings};
pub use synth::{synth_corpus, synth_corpus_detailed, SynthGeometry, SynthSpec};

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{salt, stream};

/// How a row may be used by pairing, training, and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// In-domain query; owns a constructed positive and hard negative.
    Anchor,
    /// Candidate pool for reciprocal-nearest-neighbour positive pairing.
    PositivePool,
    /// Near-distribution confusable, paired 1:1 with an anchor.
    HardNegative,
    /// Mid-similarity negatives, band-filtered per anchor at assembly time.
    MidPool,
    /// Well-separated external out-of-domain samples.
    EasyOod,
    /// Uniform in-domain filler for the mined-negative pool.
    Reserve,
}

/// Split membership. `Unassigned` rows are training-time pool material and
/// never appear in validation or test scoring sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

/// One row as it crosses the store boundary (construction and file I/O).
#[derive(Debug, Clone)]
pub struct RowRecord {
    pub id: String,
    pub role: Role,
    pub split: Split,
    pub vector: Vec<f32>,
}

/// Immutable table of unit-norm embeddings. See module docs.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    roles: Vec<Role>,
    splits: Vec<Split>,
    /// Row-major raw data, authoritative for serialisation.
    raw: Vec<f32>,
    /// Row-normalised f64 copy used by all numeric code.
    unit: Array2<f64>,
    index: HashMap<String, u32>,
}

/// Maximum tolerated deviation of an incoming row's norm from 1. Rows
/// inside the band are re-normalised; rows outside are rejected as
/// un-normalised foreign data.
pub const NORM_TOLERANCE: f64 = 1e-3;

impl EmbeddingStore {
    /// Build a store from records, validating dimensions, norms, and id
    /// uniqueness. Every accepted row is re-normalised (in f64) for the
    /// working matrix; the raw `f32` data is kept untouched.
    pub fn from_records(dim: usize, records: Vec<RowRecord>) -> Result<Self> {
        let n = records.len();
        let mut ids = Vec::with_capacity(n);
        let mut roles = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n * dim);
        let mut unit = Array2::<f64>::zeros((n, dim));
        let mut index = HashMap::with_capacity(n);

        for (row, rec) in records.into_iter().enumerate() {
            if rec.vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: rec.vector.len(),
                });
            }
            let norm = rec
                .vector
                .iter()
                .map(|&x| {
                    let x = f64::from(x);
                    x * x
                })
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Norm { id: rec.id, norm });
            }
            if index.insert(rec.id.clone(), row as u32).is_some() {
                return Err(Error::DuplicateId(rec.id));
            }
            for (j, &x) in rec.vector.iter().enumerate() {
                unit[(row, j)] = f64::from(x) / norm;
            }
            raw.extend_from_slice(&rec.vector);
            ids.push(rec.id);
            roles.push(rec.role);
            splits.push(rec.split);
        }

        Ok(Self {
            dim,
            ids,
            roles,
            splits,
            raw,
            unit,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn id(&self, row: u32) -> &str {
        &self.ids[row as usize]
    }

    pub fn role(&self, row: u32) -> Role {
        self.roles[row as usize]
    }

    pub fn split(&self, row: u32) -> Split {
        self.splits[row as usize]
    }

    /// The full row-normalised working matrix (rows × dim).
    pub fn unit_matrix(&self) -> ArrayView2<'_, f64> {
        self.unit.view()
    }

    pub fn unit_row(&self, row: u32) -> ArrayView1<'_, f64> {
        self.unit.row(row as usize)
    }

    pub fn raw_row(&self, row: u32) -> &[f32] {
        let r = row as usize;
        &self.raw[r * self.dim..(r + 1) * self.dim]
    }

    pub fn lookup(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    /// Row indices matching a role/split predicate, in row order.
    pub fn select(&self, mut pred: impl FnMut(Role, Split) -> bool) -> Vec<u32> {
        (0..self.len() as u32)
            .filter(|&r| pred(self.roles[r as usize], self.splits[r as usize]))
            .collect()
    }

    /// The hard negative constructed for this anchor, if present
    /// (id `hn:<anchor-id>`).
    pub fn hard_negative_of(&self, anchor_row: u32) -> Option<u32> {
        self.lookup(&format!("hn:{}", self.id(anchor_row)))
    }

    /// The positive constructed for this anchor, if present
    /// (id `pos:<anchor-id>`).
    pub fn positive_of(&self, anchor_row: u32) -> Option<u32> {
        self.lookup(&format!("pos:{}", self.id(anchor_row)))
    }

    /// Copy the selected unit rows into a contiguous matrix (for batched
    /// similarity/projection GEMMs).
    pub fn gather(&self, rows: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.unit.row(r as usize));
        }
        out
    }

    /// Export every row, in row order, for serialisation.
    pub fn records(&self) -> Vec<RowRecord> {
        (0..self.len() as u32)
            .map(|r| RowRecord {
                id: self.ids[r as usize].clone(),
                role: self.roles[r as usize],
                split: self.splits[r as usize],
                vector: self.raw_row(r).to_vec(),
            })
            .collect()
    }

    fn set_split(&mut self, row: u32, split: Split) {
        self.splits[row as usize] = split;
    }
}

/// Target proportions for split assignment. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!(
                    "split fraction {name} = {f} outside [0, 1]"
                )));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Partition anchors (each moving as one unit with its constructed positive
/// and hard negative) into train/val/test, and carve validation/test
/// subsets out of the easy-OOD pool so scoring sets never overlap training
/// material. Mid-pool and reserve rows stay unassigned — they are mining
/// material only.
///
/// Counts per split are the rounded fractions; a split whose fraction is
/// positive but whose rounded count is zero is an error.
pub fn assign_splits(
    mut store: EmbeddingStore,
    fractions: SplitFractions,
    seed: u64,
) -> Result<EmbeddingStore> {
    fractions.validate()?;
    if (0..store.len() as u32).any(|r| store.split(r) != Split::Unassigned) {
        return Err(Error::SplitsAlreadyAssigned);
    }

    // --- anchors (with partners) ---
    let mut anchors = store.select(|role, _| role == Role::Anchor);
    {
        use rand::seq::SliceRandom;
        anchors.shuffle(&mut stream(seed, &[salt::SPLIT, 0]));
    }
    let n = anchors.len();
    let n_val = (fractions.val * n as f64).round() as usize;
    let n_test = (fractions.test * n as f64).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    for (name, frac, count) in [
        ("train", fractions.train, n_train),
        ("val", fractions.val, n_val),
        ("test", fractions.test, n_test),
    ] {
        if frac > 0.0 && count == 0 {
            return Err(Error::EmptySplit(name));
        }
    }

    let assign_unit = |store: &mut EmbeddingStore, row: u32, split: Split| {
        store.set_split(row, split);
        if let Some(p) = store.positive_of(row) {
            store.set_split(p, split);
        }
        if let Some(h) = store.hard_negative_of(row) {
            store.set_split(h, split);
        }
    };
    for (i, &row) in anchors.iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assign_unit(&mut store, row, split);
    }

    // --- easy-OOD: val/test carve-out; the remainder stays unassigned and
    // forms the training-time external pool ---
    let mut easy = store.select(|role, _| role == Role::EasyOod);
    {
        use rand::seq::SliceRandom;
        easy.shuffle(&mut stream(seed, &[salt::SPLIT, 1]));
    }
    let ne = easy.len();
    let ne_val = (fractions.val * ne as f64).round() as usize;
    let ne_test = (fractions.test * ne as f64).round() as usize;
    for (i, &row) in easy.iter().enumerate() {
        if i < ne_val {
            store.set_split(row, Split::Val);
        } else if i < ne_val + ne_test {
            store.set_split(row, Split::Test);
        }
    }

    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_vec(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0f32; dim];
        v[hot % dim] = 1.0;
        v
    }

    fn tiny_store() -> EmbeddingStore {
        // Two anchors with partners, plus pool rows of each flavour.
        let dim = 8;
        let mut records = Vec::new();
        for i in 0..2 {
            records.push(RowRecord {
                id: format!("anc-{i:06}"),
                role: Role::Anchor,
                split: Split::Unassigned,
                vector: unit_vec(dim, i),
            });
            records.push(RowRecord {
                id: format!("pos:anc-{i:06}"),
                role: Role::PositivePool,
                split: Split::Unassigned,
                vector: unit_vec(dim, i + 2),
            });
            records.push(RowRecord {
                id: format!("hn:anc-{i:06}"),
                role: Role::HardNegative,
                split: Split::Unassigned,
                vector: unit_vec(dim, i + 4),
            });
        }
        records.push(RowRecord {
            id: "ood-000000".into(),
            role: Role::EasyOod,
            split: Split::Unassigned,
            vector: unit_vec(dim, 6),
        });
        records.push(RowRecord {
            id: "res-000000".into(),
            role: Role::Reserve,
            split: Split::Unassigned,
            vector: unit_vec(dim, 7),
        });
        EmbeddingStore::from_records(dim, records).unwrap()
    }

    #[test]
    fn store_lookup_and_linkage() {
        let s = tiny_store();
        let a = s.lookup("anc-000001").unwrap();
        assert_eq!(s.id(s.positive_of(a).unwrap()), "pos:anc-000001");
        assert_eq!(s.id(s.hard_negative_of(a).unwrap()), "hn:anc-000001");
        assert_eq!(s.role(a), Role::Anchor);
    }

    #[test]
    fn store_rejects_duplicate_ids() {
        let dim = 4;
        let rec = |id: &str| RowRecord {
            id: id.into(),
            role: Role::Reserve,
            split: Split::Unassigned,
            vector: unit_vec(dim, 0),
        };
        let err = EmbeddingStore::from_records(dim, vec![rec("x"), rec("x")]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "x"));
    }

    #[test]
    fn store_rejects_bad_norm_and_dim() {
        let dim = 4;
        let bad_norm = RowRecord {
            id: "bad".into(),
            role: Role::Reserve,
            split: Split::Unassigned,
            vector: vec![0.5, 0.0, 0.0, 0.0],
        };
        assert!(matches!(
            EmbeddingStore::from_records(dim, vec![bad_norm]).unwrap_err(),
            Error::Norm { .. }
        ));
        let bad_dim = RowRecord {
            id: "short".into(),
            role: Role::Reserve,
            split: Split::Unassigned,
            vector: vec![1.0, 0.0],
        };
        assert!(matches!(
            EmbeddingStore::from_records(dim, vec![bad_dim]).unwrap_err(),
            Error::DimensionMismatch { expected: 4, got: 2 }
        ));
    }

    #[test]
    fn store_renormalises_within_tolerance() {
        // Norm 1.0005 is inside the acceptance band; the working row must
        // come out exactly unit-norm.
        let v = vec![1.0005f32, 0.0, 0.0, 0.0];
        let s = EmbeddingStore::from_records(
            4,
            vec![RowRecord {
                id: "r".into(),
                role: Role::Reserve,
                split: Split::Unassigned,
                vector: v.clone(),
            }],
        )
        .unwrap();
        let norm: f64 = s.unit_row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // Raw data is untouched.
        assert_eq!(s.raw_row(0), &v[..]);
    }

    #[test]
    fn fractions_one_zero_zero_puts_all_anchors_in_train() {
        let s = assign_splits(
            tiny_store(),
            SplitFractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
            7,
        )
        .unwrap();
        for row in s.select(|role, _| role == Role::Anchor) {
            assert_eq!(s.split(row), Split::Train);
        }
        // Reserve stays unassigned regardless.
        let res = s.lookup("res-000000").unwrap();
        assert_eq!(s.split(res), Split::Unassigned);
    }

    #[test]
    fn units_move_together() {
        let s = assign_splits(
            tiny_store(),
            SplitFractions {
                train: 0.5,
                val: 0.5,
                test: 0.0,
            },
            3,
        )
        .unwrap();
        for a in s.select(|role, _| role == Role::Anchor) {
            let split = s.split(a);
            assert_eq!(s.split(s.positive_of(a).unwrap()), split);
            assert_eq!(s.split(s.hard_negative_of(a).unwrap()), split);
        }
    }

    #[test]
    fn exact_proportions_at_divisible_counts() {
        let dim = 8;
        let mut records = Vec::new();
        for i in 0..1000 {
            let mut v = vec![0.0f32; dim];
            let x = (i as f32) / 1000.0;
            v[0] = (1.0 - x * x).sqrt();
            v[1] = x;
            records.push(RowRecord {
                id: format!("anc-{i:06}"),
                role: Role::Anchor,
                split: Split::Unassigned,
                vector: v,
            });
        }
        let store = EmbeddingStore::from_records(dim, records).unwrap();
        let s = assign_splits(store, SplitFractions::default(), 42).unwrap();
        let count = |sp: Split| s.select(|_, x| x == sp).len();
        assert_eq!(count(Split::Train), 800);
        assert_eq!(count(Split::Val), 100);
        assert_eq!(count(Split::Test), 100);
    }

    #[test]
    fn positive_fraction_with_zero_count_errors() {
        // Two anchors, val fraction 0.05 → rounded count 0 → error.
        let err = assign_splits(
            tiny_store(),
            SplitFractions {
                train: 0.9,
                val: 0.05,
                test: 0.05,
            },
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptySplit(_)));
    }

    #[test]
    fn double_assignment_rejected() {
        let s = assign_splits(
            tiny_store(),
            SplitFractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
            1,
        )
        .unwrap();
        assert!(matches!(
            assign_splits(
                s,
                SplitFractions {
                    train: 1.0,
                    val: 0.0,
                    test: 0.0
                },
                1
            ),
            Err(Error::SplitsAlreadyAssigned)
        ));
    }

    #[test]
    fn bad_fractions_rejected() {
        let err = assign_splits(
            tiny_store(),
            SplitFractions {
                train: 0.5,
                val: 0.2,
                test: 0.2,
            },
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }
}
