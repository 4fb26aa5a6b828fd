//! The optimization loop: AdamW with decoupled weight decay, a per-step
//! cosine learning-rate schedule, per-epoch negative resampling, and
//! best-validation checkpoint selection.
//!
//! Only the parameter blocks the run's objective actually touches are
//! trainable — the other head stays bit-identical to its initialization
//! (no gradient, no moments, no weight decay), which is what makes
//! head-vs-head comparisons clean: both heads exist in every checkpoint,
//! but each run trains exactly one of them (plus the shared projector).
//!
//! Validation negatives are drawn from dedicated streams that do not
//! depend on the epoch, so the validation loss is computed on the exact
//! same batch every epoch and stays comparable across the run.

use std::collections::HashMap;
use std::ops::Range;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingStore;
use crate::error::{Error, Result};
use crate::loss::{
    ecsctl_total, softmax_ce_batch, softmax_examples, AnchorPlan, BatchPlan, HeadKind, LossConfig,
};
use crate::model::{
    head_backward, head_forward, project_batch, projector_backward, Block, Checkpoint, ModelDims,
    ModelParams, OptimMoments,
};
use crate::pairing::{sample_k_mine, TupleSet};
use crate::rng::{derive, salt, stream};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate. Zero is allowed and freezes the parameters — a
    /// useful control run.
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    /// Global-norm gradient clip, applied before the moment updates.
    pub grad_clip: f64,
    /// External out-of-domain items drawn per batch for the hinge (and for
    /// the baseline's negative class).
    pub ood_batch_size: usize,
    /// Redraw each anchor's mined negatives every epoch. When off, epoch
    /// zero's draw is reused for the whole run.
    pub resample_negatives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 1024,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            grad_clip: 1.0,
            ood_batch_size: 64,
            resample_negatives: true,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.ood_batch_size == 0 {
            return Err(Error::InvalidConfig(
                "ood_batch_size must be at least 1".into(),
            ));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::InvalidConfig(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.eps_adam > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "eps_adam and grad_clip must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` down to `lr_min` over `total_steps`.
pub fn cosine_lr(t: usize, total_steps: usize, lr0: f64, lr_min: f64) -> f64 {
    debug_assert!(t <= total_steps);
    if total_steps == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * t as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

/// Moments plus the flat index ranges the optimizer may touch. Everything
/// outside `trainable` keeps its initial bytes for the entire run.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub moments: OptimMoments,
    pub trainable: Vec<Range<usize>>,
}

impl OptimState {
    pub fn new(params: &ModelParams, trainable: Vec<Range<usize>>) -> Self {
        Self {
            moments: OptimMoments::zeros(params.data().len()),
            trainable,
        }
    }
}

/// Which parameter blocks a loss configuration trains: always the
/// projector, plus the head its objective scores with (the energy head
/// drops out under the similarity-only ablation).
pub fn trainable_ranges(params: &ModelParams, loss: &LossConfig) -> Vec<Range<usize>> {
    let mut ranges = vec![params.block_range(Block::Projector)];
    match loss.head {
        HeadKind::Ebm => {
            if loss.ablation != crate::loss::Ablation::NoEnergy {
                ranges.push(params.block_range(Block::Energy));
            }
        }
        HeadKind::Softmax => ranges.push(params.block_range(Block::Softmax)),
    }
    ranges
}

/// L2 norm of the gradient restricted to the trainable ranges.
pub fn global_grad_norm(grads: &ModelParams, trainable: &[Range<usize>]) -> f64 {
    let mut sq = 0.0;
    for r in trainable {
        for &g in &grads.data()[r.clone()] {
            sq += g * g;
        }
    }
    sq.sqrt()
}

/// One AdamW update: clip the gradient to `grad_clip` by global norm,
/// update biased moments, apply the bias-corrected adaptive step, and
/// apply decoupled decay `θ ← θ − lr·wd·θ` against the pre-step value.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for r in &state.trainable {
        if grads.data()[r.clone()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient("adamw_step"));
        }
    }
    let norm = global_grad_norm(grads, &state.trainable);
    let scale = if norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    state.moments.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.moments.step as i32);
    let bc2 = 1.0 - b2.powi(state.moments.step as i32);
    let data = params.data_mut();
    for r in &state.trainable {
        for i in r.clone() {
            let g = grads.data()[i] * scale;
            let m = &mut state.moments.m[i];
            let v = &mut state.moments.v[i];
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let theta = data[i];
            data[i] = theta - lr * (m_hat / (v_hat.sqrt() + cfg.eps_adam) + cfg.weight_decay * theta);
        }
    }
    Ok(())
}

/// One epoch row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate at the epoch's first optimizer step.
    pub lr: f64,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_loss, h.lr
        ));
    }
    out
}

/// Outcome of a training run: the lowest-validation-loss checkpoint, the
/// end-of-run parameters, and the per-epoch history.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: Checkpoint,
    pub final_params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// A materialised batch: the store rows to project (deduplicated) and the
/// plan indexing into them.
struct Batch {
    rows: Vec<u32>,
    plan: BatchPlan,
}

/// Deduplicate store rows and express tuples as batch-local indices.
/// `use_hard` gates the hard-negative slot; masked mined slots keep their
/// padding ref (the anchor itself), which is in the batch anyway.
fn build_batch(
    tuples: &[crate::pairing::TrainingTuple],
    use_hard: bool,
    ood_rows: &[u32],
) -> Batch {
    let mut rows: Vec<u32> = Vec::new();
    let mut index: HashMap<u32, usize> = HashMap::new();
    let local = |rows: &mut Vec<u32>, index: &mut HashMap<u32, usize>, row: u32| -> usize {
        *index.entry(row).or_insert_with(|| {
            rows.push(row);
            rows.len() - 1
        })
    };
    let mut anchors = Vec::with_capacity(tuples.len());
    for t in tuples {
        let anchor = local(&mut rows, &mut index, t.anchor);
        let positive = local(&mut rows, &mut index, t.positive);
        let hard_negative = use_hard.then(|| local(&mut rows, &mut index, t.hard_negative));
        let mined = t
            .mined
            .iter()
            .map(|&m| local(&mut rows, &mut index, m))
            .collect();
        anchors.push(AnchorPlan {
            anchor,
            positive,
            hard_negative,
            mined,
            mined_mask: t.mined_mask.clone(),
        });
    }
    let ood = ood_rows
        .iter()
        .map(|&o| local(&mut rows, &mut index, o))
        .collect();
    Batch {
        rows,
        plan: BatchPlan { anchors, ood },
    }
}

/// Sample this batch's external out-of-domain rows (without replacement;
/// short pools are taken whole).
fn sample_ood(pool: &[u32], n: usize, seed: u64, tags: &[u64]) -> Vec<u32> {
    if pool.is_empty() {
        return Vec::new();
    }
    if pool.len() <= n {
        return pool.to_vec();
    }
    let mut rng = stream(seed, tags);
    rand::seq::index::sample(&mut rng, pool.len(), n)
        .iter()
        .map(|i| pool[i])
        .collect()
}

/// Forward through projector (+ head) and the objective; optionally chain
/// the backward pass into a gradient buffer.
fn batch_loss(
    params: &ModelParams,
    store: &EmbeddingStore,
    batch: &Batch,
    cfg: &LossConfig,
    grads: Option<&mut ModelParams>,
) -> Result<f64> {
    let x = store.gather(&batch.rows);
    let proj = project_batch(params, x)?;
    let n = batch.rows.len();
    match cfg.head {
        HeadKind::Ebm => {
            let energy_on = cfg.ablation != crate::loss::Ablation::NoEnergy;
            let (energies, head_cache) = if energy_on {
                let cache = head_forward(params, Block::Energy, &proj.z);
                (cache.out().column(0).to_owned(), Some(cache))
            } else {
                (Array1::zeros(n), None)
            };
            let (report, mut dz, de) = ecsctl_total(cfg, &proj.z, &energies, &batch.plan)?;
            if let Some(grads) = grads {
                if let Some(cache) = &head_cache {
                    let d_out = de.insert_axis(ndarray::Axis(1));
                    head_backward(params, Block::Energy, cache, &proj.z, &d_out, grads, &mut dz);
                }
                projector_backward(params, &proj, &dz, grads);
            }
            Ok(report.total)
        }
        HeadKind::Softmax => {
            let cache = head_forward(params, Block::Softmax, &proj.z);
            let examples = softmax_examples(&batch.plan);
            let (loss, d_logits) = softmax_ce_batch(cache.out(), &examples)?;
            if let Some(grads) = grads {
                let mut dz = Array2::zeros(proj.z.dim());
                head_backward(params, Block::Softmax, &cache, &proj.z, &d_logits, grads, &mut dz);
                projector_backward(params, &proj, &dz, grads);
            }
            Ok(loss)
        }
    }
}

/// Train on one tuple set, validating on another, and keep the checkpoint
/// with the lowest validation loss (ties keep the earlier epoch).
///
/// `config_hash` is stamped into every checkpoint for provenance checks.
/// `warm_start` overrides the seeded initialization when resuming.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    store: &EmbeddingStore,
    train_set: &TupleSet,
    val_set: &TupleSet,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    dims: ModelDims,
    config_hash: &str,
    warm_start: Option<ModelParams>,
) -> Result<FitResult> {
    loss_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.tuples.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_set.tuples.is_empty() {
        return Err(Error::EmptySplit("val"));
    }

    let seed = train_cfg.seed;
    let mut params = match warm_start {
        Some(p) => p,
        None => ModelParams::init(dims, seed)?,
    };
    let mut state = OptimState::new(&params, trainable_ranges(&params, loss_cfg));

    let use_hard = train_set.exposure.uses_hard();
    let n_train = train_set.tuples.len();
    let steps_per_epoch = n_train.div_ceil(train_cfg.batch_size);
    let total_steps = train_cfg.epochs * steps_per_epoch;

    // The validation batch is fixed for the whole run: dedicated seeds for
    // its mined negatives and its external sample, independent of epoch.
    let val_batch = {
        let mine_seed = derive(seed, &[salt::VAL_MINE]);
        let tuples: Vec<_> = val_set
            .tuples
            .iter()
            .map(|t| sample_k_mine(t, val_set.k_mine, mine_seed))
            .collect();
        let ood = sample_ood(
            &val_set.ood_pool,
            train_cfg.ood_batch_size,
            seed,
            &[salt::VAL_OOD],
        );
        build_batch(&tuples, val_set.exposure.uses_hard(), &ood)
    };

    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut global_step = 0usize;

    for epoch in 0..train_cfg.epochs {
        let mine_epoch = if train_cfg.resample_negatives { epoch } else { 0 };
        let mine_seed = derive(seed, &[salt::MINE, mine_epoch as u64]);

        let mut order: Vec<usize> = (0..n_train).collect();
        {
            use rand::seq::SliceRandom;
            let mut rng = stream(seed, &[salt::SHUFFLE, epoch as u64]);
            order.shuffle(&mut rng);
        }

        let lr_epoch = cosine_lr(global_step, total_steps, train_cfg.lr0, 0.0);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let tuples: Vec<_> = chunk
                .iter()
                .map(|&i| sample_k_mine(&train_set.tuples[i], train_set.k_mine, mine_seed))
                .collect();
            let ood = sample_ood(
                &train_set.ood_pool,
                train_cfg.ood_batch_size,
                seed,
                &[salt::OOD, epoch as u64, b as u64],
            );
            let batch = build_batch(&tuples, use_hard, &ood);

            let mut grads = ModelParams::zeros(dims);
            let loss = batch_loss(&params, store, &batch, loss_cfg, Some(&mut grads))?;
            if loss.is_nan() {
                return Err(Error::DivergedLoss(epoch));
            }
            let lr = cosine_lr(global_step, total_steps, train_cfg.lr0, 0.0);
            adamw_step(&mut params, &grads, &mut state, lr, train_cfg)?;
            global_step += 1;
            loss_sum += loss;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;

        let val_loss = batch_loss(&params, store, &val_batch, loss_cfg, None)?;
        if val_loss.is_nan() {
            return Err(Error::DivergedLoss(epoch));
        }

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr: lr_epoch,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            best = Some(Checkpoint {
                params: params.clone(),
                moments: state.moments.clone(),
                epoch,
                val_loss,
                config_hash: config_hash.to_string(),
                seed,
            });
        }
    }

    Ok(FitResult {
        best: best.expect("at least one epoch ran"),
        final_params: params,
        history,
    })
}
