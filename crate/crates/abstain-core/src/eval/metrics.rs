//! Ranking metrics and threshold calibration over scored sets.
//!
//! Scores are oriented higher-is-abstain; labels mark the out-of-domain
//! class. A query abstains when its score exceeds the threshold strictly.
//! FPR is the fraction of in-domain items above the threshold (false
//! abstentions); FNR is the fraction of out-of-domain items at or below it
//! (missed abstentions); TPR = 1 − FNR is the detection rate.

use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{Error, Result};

use super::ScoredSet;

/// Operating points chosen on the validation split and then frozen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Minimiser of ½(FPR + FNR) over the candidate thresholds.
    pub tau_deterr: f64,
    /// Candidate whose TPR lands closest to 0.95 (ties prefer higher TPR,
    /// then lower FPR).
    pub tau_95: f64,
    /// Split the thresholds were calibrated on — always validation; kept
    /// in the report so a leaky pipeline is visible in its artifacts.
    pub calibrated_on: Split,
}

/// Error rates of the abstain-above-τ rule on one scored set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confusion {
    pub fpr: f64,
    pub fnr: f64,
}

impl Confusion {
    pub fn tpr(&self) -> f64 {
        1.0 - self.fnr
    }

    pub fn det_err(&self) -> f64 {
        0.5 * (self.fpr + self.fnr)
    }
}

fn class_counts(set: &ScoredSet) -> Result<(usize, usize)> {
    let n_ood = set.labels.iter().filter(|&&l| l).count();
    let n_id = set.labels.len() - n_ood;
    if n_id == 0 || n_ood == 0 {
        return Err(Error::SingleClass);
    }
    Ok((n_id, n_ood))
}

/// Evaluate the decision rule `abstain ⇔ score > τ`.
pub fn confusion_at(set: &ScoredSet, tau: f64) -> Result<Confusion> {
    let (n_id, n_ood) = class_counts(set)?;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    for (&s, &ood) in set.scores.iter().zip(&set.labels) {
        if ood {
            if s <= tau {
                fnn += 1;
            }
        } else if s > tau {
            fp += 1;
        }
    }
    Ok(Confusion {
        fpr: fp as f64 / n_id as f64,
        fnr: fnn as f64 / n_ood as f64,
    })
}

/// Area under the ROC curve via the Mann–Whitney rank statistic with
/// average ranks for ties: equals P(score_OOD > score_ID) + ½·P(equal).
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (n_id, n_ood) = class_counts(set)?;
    let n = set.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Average rank per tie block (1-based ranks).
    let mut rank_sum_ood = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if set.labels[idx] {
                rank_sum_ood += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_ood - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Average precision with the out-of-domain class as positive. Equal-score
/// blocks are processed atomically: every positive in a block receives the
/// precision at the block's end.
pub fn aupr(set: &ScoredSet) -> Result<f64> {
    let (_, n_ood) = class_counts(set)?;
    let n = set.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));

    let mut ap = 0.0;
    let mut cum_tp = 0usize;
    let mut cum_n = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut tp_block = 0usize;
        while j < n && set.scores[order[j]] == set.scores[order[i]] {
            if set.labels[order[j]] {
                tp_block += 1;
            }
            j += 1;
        }
        let block = j - i;
        if tp_block > 0 {
            let precision = (cum_tp + tp_block) as f64 / (cum_n + block) as f64;
            ap += tp_block as f64 * precision;
        }
        cum_tp += tp_block;
        cum_n += block;
        i = j;
    }
    Ok(ap / n_ood as f64)
}

/// Candidate thresholds: midpoints between adjacent sorted unique scores,
/// bracketed by ∓∞ sentinels (abstain-on-everything / never-abstain).
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let mut out = Vec::with_capacity(uniq.len() + 1);
    out.push(f64::NEG_INFINITY);
    for w in uniq.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
    }
    out.push(f64::INFINITY);
    out
}

/// Choose both operating points on a validation scored set.
pub fn calibrate(val: &ScoredSet) -> Result<Thresholds> {
    class_counts(val)?;
    let candidates = threshold_candidates(&val.scores);

    let mut tau_deterr = candidates[0];
    let mut best_deterr = f64::INFINITY;
    let mut tau_95 = candidates[0];
    let mut best_gap = f64::INFINITY;
    let mut best_tpr = f64::NEG_INFINITY;
    let mut best_fpr = f64::INFINITY;

    for &tau in &candidates {
        let c = confusion_at(val, tau)?;
        if c.det_err() < best_deterr {
            best_deterr = c.det_err();
            tau_deterr = tau;
        }
        let gap = (c.tpr() - 0.95).abs();
        let better = gap < best_gap
            || (gap == best_gap && c.tpr() > best_tpr)
            || (gap == best_gap && c.tpr() == best_tpr && c.fpr < best_fpr);
        if better {
            best_gap = gap;
            best_tpr = c.tpr();
            best_fpr = c.fpr;
            tau_95 = tau;
        }
    }
    Ok(Thresholds {
        tau_deterr,
        tau_95,
        calibrated_on: Split::Val,
    })
}
