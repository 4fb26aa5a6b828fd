//! Training-free k-nearest-neighbour abstention baseline.
//!
//! Operates directly on the raw unit-normalised input embeddings — no
//! projector, no learned head — so its scores are a pure function of the
//! corpus and identical no matter which training configuration sits next
//! to it in a comparison grid. The score is `1 − cos_k(x)` where `cos_k`
//! is the k-th highest cosine between the query and the in-domain
//! reference set: deep inside the domain the k-th neighbour is still
//! close and the score hugs zero; off-domain queries run out of close
//! neighbours and the score grows.

use ndarray::Array2;

use crate::corpus::{EmbeddingStore, Role, Split};
use crate::error::{Error, Result};

use super::{Method, Scorer};

/// Exact-search index over a fixed reference matrix of unit rows.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    reference: Array2<f64>,
    k: usize,
}

/// Neighbour count used throughout the evaluation grid.
pub const DEFAULT_K: usize = 5;

impl KnnIndex {
    /// Index the given store rows as the reference set.
    pub fn build(store: &EmbeddingStore, rows: &[u32], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("k-NN requires k >= 1".into()));
        }
        if rows.len() < k {
            return Err(Error::IndexTooSmall { k, len: rows.len() });
        }
        Ok(Self {
            reference: store.gather(rows),
            k,
        })
    }

    /// Standard reference set: the training split's in-domain material
    /// (anchors and their positives). Validation and test rows stay out
    /// so scoring them measures generalisation, not recall.
    pub fn from_train_id(store: &EmbeddingStore, k: usize) -> Result<Self> {
        let rows = store.select(|role, split| {
            split == Split::Train && matches!(role, Role::Anchor | Role::PositivePool)
        });
        Self::build(store, &rows, k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.reference.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.nrows() == 0
    }

    /// Score unit-row queries directly (both sides already normalised, so
    /// the dot product is the cosine).
    pub fn score_matrix(&self, queries: &Array2<f64>) -> Vec<f64> {
        if queries.nrows() == 0 {
            return Vec::new();
        }
        let sims = queries.dot(&self.reference.t());
        sims.rows()
            .into_iter()
            .map(|row| {
                let mut v = row.to_vec();
                // k-th highest cosine = element at k−1 after a descending
                // partial sort; the selected value is order-independent.
                let (_, kth, _) = v.select_nth_unstable_by(self.k - 1, |a, b| b.total_cmp(a));
                1.0 - *kth
            })
            .collect()
    }
}

impl Scorer for KnnIndex {
    fn method(&self) -> Method {
        Method::Knn
    }

    fn raw_scores(&self, store: &EmbeddingStore, rows: &[u32]) -> Result<Vec<f64>> {
        if store.dim() != self.reference.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.reference.ncols(),
                got: store.dim(),
            });
        }
        Ok(self.score_matrix(&store.gather(rows)))
    }
}
