//! Plain multi-task SGD: shuffled mini-batches, summed task losses, fixed
//! learning rate, early stop on a validation plateau. Distillation reuses
//! the same batch schedule so a zero-weighted feature term reproduces this
//! loop bit for bit.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{batch, forward_losses, Batch, Model, SyntheticSample};
use crate::rng::seed_stream;
use crate::scalar::Scalar;

/// Improvement below this margin counts as stalling for the plateau stop.
pub const PLATEAU_MIN_DELTA: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub det: f64,
    pub da: f64,
    pub lane: f64,
    /// Feature-distillation term; zero in plain training.
    pub kd: f64,
    pub total: f64,
    pub beta_effective: f64,
    pub lr: f64,
    pub seed: u64,
    /// Task-loss total on the validation split (never includes kd).
    pub val_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLoopSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many epochs without val improvement; None trains the
    /// full epoch budget.
    pub plateau_patience: Option<usize>,
}

impl TrainLoopSettings {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParam {
                name: "epochs",
                detail: "no training performed: epoch budget is 0".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam {
                name: "batch_size",
                detail: "batch size must be at least 1".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParam {
                name: "lr",
                detail: format!("learning rate must be positive and finite, got {}", self.lr),
            });
        }
        Ok(())
    }
}

/// One SGD step over every tensor in `params` at a shared rate.
pub fn sgd_step<S: Scalar>(params: &[Tensor<S>], lr: f64) {
    for p in params {
        p.gradient_step(S::of(lr));
    }
}

/// Shuffled index batches for one epoch. The final batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn gather_batch<S: Scalar>(
    samples: &[SyntheticSample<S>],
    indices: &[usize],
) -> Result<Batch<S>> {
    let subset: Vec<SyntheticSample<S>> = indices.iter().map(|&i| samples[i].clone()).collect();
    batch(&subset)
}

/// Mean per-task validation losses (det, da, lane, total), weighted by batch
/// size. Runs with gradients disabled and restores the requires-grad state.
pub fn validation_losses<S: Scalar>(
    model: &Model<S>,
    data: &[SyntheticSample<S>],
    batch_size: usize,
) -> Result<(f64, f64, f64, f64)> {
    model.set_requires_grad(false);
    let result: Result<(f64, f64, f64, f64)> = (|| {
        let mut sums = [0.0f64; 3];
        let mut seen = 0usize;
        for chunk in data.chunks(batch_size.max(1)) {
            let b = batch(chunk)?;
            let (losses, _) = forward_losses(model, &b, &[])?;
            let w = chunk.len() as f64;
            sums[0] += losses.det.item().as_f64() * w;
            sums[1] += losses.da.item().as_f64() * w;
            sums[2] += losses.lane.item().as_f64() * w;
            seen += chunk.len();
        }
        let n = seen as f64;
        let (det, da, lane) = (sums[0] / n, sums[1] / n, sums[2] / n);
        Ok((det, da, lane, det + da + lane))
    })();
    model.set_requires_grad(true);
    let v = result?;
    if !v.3.is_finite() {
        return Err(Error::Divergence("validation loss is not finite".into()));
    }
    Ok(v)
}

/// Train `model` in place on summed task losses. Returns one log entry per
/// completed epoch.
pub fn train_multitask<S: Scalar>(
    model: &Model<S>,
    train_data: &[SyntheticSample<S>],
    val_data: &[SyntheticSample<S>],
    cfg: &TrainLoopSettings,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::InvalidParam {
            name: "dataset",
            detail: "training and validation splits must be non-empty".into(),
        });
    }
    model.set_requires_grad(true);
    let params = model.parameters();
    let mut shuffle = seed_stream(cfg.seed, "train/shuffle");

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for indices in epoch_batches(train_data.len(), cfg.batch_size, &mut shuffle) {
            let b = gather_batch(train_data, &indices)?;
            model.zero_param_grads();
            let (losses, _) = forward_losses(model, &b, &[])?;
            let total = losses.sum()?;
            total.backward()?;
            sgd_step(&params, cfg.lr);
            sums[0] += losses.det.item().as_f64();
            sums[1] += losses.da.item().as_f64();
            sums[2] += losses.lane.item().as_f64();
            batches += 1;
        }
        let n = batches as f64;
        let (det, da, lane) = (sums[0] / n, sums[1] / n, sums[2] / n);
        let (_, _, _, val_total) = validation_losses(model, val_data, cfg.batch_size)?;
        logs.push(EpochLog {
            epoch,
            det,
            da,
            lane,
            kd: 0.0,
            total: det + da + lane,
            beta_effective: 0.0,
            lr: cfg.lr,
            seed: cfg.seed,
            val_total,
        });

        if val_total < best_val - PLATEAU_MIN_DELTA {
            best_val = val_total;
            stale = 0;
        } else {
            stale += 1;
            if cfg.plateau_patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    Ok(logs)
}
