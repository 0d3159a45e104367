//! Per-task channel importance: running |activation × gradient| means
//! accumulated over calibration batches, min-max normalized per task, then
//! fused across tasks with a softmin so a channel scores low only when every
//! task can spare it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Det,
    Da,
    Lane,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Det, Task::Da, Task::Lane];

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Da => "da",
            Task::Lane => "lane",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        match name {
            "det" => Ok(Task::Det),
            "da" => Ok(Task::Da),
            "lane" => Ok(Task::Lane),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-layer accumulator. Means are kept in f64 whatever the tensor scalar
/// type, weighted by the number of (batch, spatial) positions seen, so
/// accumulation order cannot drift the result at working precision.
#[derive(Debug, Clone)]
pub struct ChannelStatistics {
    pub layer_id: String,
    channels: usize,
    per_task_importance: BTreeMap<Task, Vec<f64>>,
    per_task_avg_grad: BTreeMap<Task, Vec<f64>>,
    per_task_positions: BTreeMap<Task, u64>,
    per_task_batches: BTreeMap<Task, u64>,
}

impl ChannelStatistics {
    pub fn new(layer_id: impl Into<String>, channels: usize) -> Self {
        let zeroes = || Task::ALL.iter().map(|&t| (t, vec![0.0; channels])).collect();
        let counts = || Task::ALL.iter().map(|&t| (t, 0u64)).collect();
        ChannelStatistics {
            layer_id: layer_id.into(),
            channels,
            per_task_importance: zeroes(),
            per_task_avg_grad: zeroes(),
            per_task_positions: counts(),
            per_task_batches: counts(),
        }
    }

    /// Restore an accumulator from previously exported running means.
    pub fn from_parts(
        layer_id: impl Into<String>,
        channels: usize,
        importance: BTreeMap<Task, Vec<f64>>,
        avg_grad: BTreeMap<Task, Vec<f64>>,
        batches: BTreeMap<Task, u64>,
    ) -> Result<Self> {
        for map in [&importance, &avg_grad] {
            for task in Task::ALL {
                let arr = map
                    .get(&task)
                    .ok_or_else(|| Error::Dependency(format!("missing task {task} in stats")))?;
                if arr.len() != channels {
                    return Err(Error::shape(
                        "channel statistics",
                        format!("{channels} channels but {} values for {task}", arr.len()),
                    ));
                }
            }
        }
        Ok(ChannelStatistics {
            layer_id: layer_id.into(),
            channels,
            per_task_importance: importance,
            per_task_avg_grad: avg_grad,
            per_task_positions: batches.clone(),
            per_task_batches: batches,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Batches accumulated for every task (the minimum across tasks).
    pub fn sample_count(&self) -> u64 {
        self.per_task_batches.values().copied().min().unwrap_or(0)
    }

    pub fn batches(&self, task: Task) -> u64 {
        self.per_task_batches[&task]
    }

    /// Running mean of |a·g| per channel.
    pub fn importance(&self, task: Task) -> &[f64] {
        &self.per_task_importance[&task]
    }

    /// Running mean of signed g per channel.
    pub fn avg_grad(&self, task: Task) -> &[f64] {
        &self.per_task_avg_grad[&task]
    }

    /// Fold one batch of tap activations and their task gradients into the
    /// running means. Both tensors are [N, C, H, W] with C matching this
    /// accumulator.
    pub fn accumulate<S: Scalar>(
        &mut self,
        task: Task,
        activations: &Tensor<S>,
        gradients: &Tensor<S>,
    ) -> Result<()> {
        let a_shape = activations.shape();
        let g_shape = gradients.shape();
        if a_shape != g_shape {
            return Err(Error::shape(
                "accumulate",
                format!("activations {a_shape:?} vs gradients {g_shape:?}"),
            ));
        }
        if a_shape.len() != 4 || a_shape[1] != self.channels {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "expected [N,{},H,W] for layer '{}', got {a_shape:?}",
                    self.channels, self.layer_id
                ),
            ));
        }
        let (n, c, h, w) = (a_shape[0], a_shape[1], a_shape[2], a_shape[3]);
        let plane = h * w;
        let batch_positions = (n * plane) as u64;

        let a = activations.value();
        let g = gradients.value();
        let mut sum_abs = vec![0.0f64; c];
        let mut sum_signed = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let mut abs_acc = 0.0;
                let mut signed_acc = 0.0;
                for i in 0..plane {
                    let av = a[base + i].as_f64();
                    let gv = g[base + i].as_f64();
                    abs_acc += (av * gv).abs();
                    signed_acc += gv;
                }
                sum_abs[ci] += abs_acc;
                sum_signed[ci] += signed_acc;
            }
        }

        let seen = self.per_task_positions.get_mut(&task).expect("all tasks present");
        let total = *seen + batch_positions;
        let blend = batch_positions as f64 / total as f64;
        let importance = self.per_task_importance.get_mut(&task).expect("all tasks present");
        let avg_grad = self.per_task_avg_grad.get_mut(&task).expect("all tasks present");
        for ci in 0..c {
            let batch_mean_abs = sum_abs[ci] / batch_positions as f64;
            let batch_mean_signed = sum_signed[ci] / batch_positions as f64;
            importance[ci] += (batch_mean_abs - importance[ci]) * blend;
            avg_grad[ci] += (batch_mean_signed - avg_grad[ci]) * blend;
        }
        *seen = total;
        *self.per_task_batches.get_mut(&task).expect("all tasks present") += 1;
        Ok(())
    }
}

/// Min-max normalize each task's importances to [0,1] over ALL prunable
/// channels of ALL layers jointly, so scores stay comparable across layers.
/// A task whose scores are all equal maps to 0.5 everywhere rather than 0,
/// which would otherwise mark a uniform layer entirely prunable.
///
/// Returns, per task, one normalized array per input layer (same order).
pub fn normalize_per_task(
    stats: &[ChannelStatistics],
) -> Result<BTreeMap<Task, Vec<Vec<f64>>>> {
    if stats.is_empty() {
        return Err(Error::Dependency("no channel statistics to normalize".into()));
    }
    for s in stats {
        if s.sample_count() == 0 {
            return Err(Error::Dependency(format!(
                "layer '{}' has tasks with no accumulated batches",
                s.layer_id
            )));
        }
    }
    let mut result = BTreeMap::new();
    for task in Task::ALL {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in stats {
            for &v in s.importance(task) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = hi - lo;
        let normalized = stats
            .iter()
            .map(|s| {
                s.importance(task)
                    .iter()
                    .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.5 })
                    .collect()
            })
            .collect();
        result.insert(task, normalized);
    }
    Ok(result)
}

/// Smooth minimum −τ·ln Σ_t exp(−x_t/τ), evaluated with the values shifted
/// by their minimum so the exponentials stay in (0, 1]. The exponentials are
/// summed in sorted order, which makes the result exactly invariant under
/// permutations of `values`.
pub fn softmin(values: &[f64], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidParam {
            name: "tau",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    if values.is_empty() {
        return Err(Error::InvalidParam {
            name: "softmin",
            detail: "needs at least one value".into(),
        });
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut terms: Vec<f64> = values.iter().map(|&v| (-(v - min) / tau).exp()).collect();
    terms.sort_by(|a, b| a.total_cmp(b));
    let sum: f64 = terms.iter().sum();
    Ok(min - tau * sum.ln())
}

/// Per-layer fusion of normalized per-task importances.
#[derive(Debug, Clone)]
pub struct AggregatedImportance {
    pub layer_id: String,
    pub normalized: BTreeMap<Task, Vec<f64>>,
    /// Softmin across tasks; not re-normalized, so values may be negative.
    pub unified: Vec<f64>,
    pub i_max: Vec<f64>,
    pub i_avg: Vec<f64>,
}

pub fn aggregate_importance(
    stats: &[ChannelStatistics],
    tau: f64,
) -> Result<Vec<AggregatedImportance>> {
    let normalized_all = normalize_per_task(stats)?;
    let mut out = Vec::with_capacity(stats.len());
    for (li, s) in stats.iter().enumerate() {
        let c = s.channels();
        let mut unified = Vec::with_capacity(c);
        let mut i_max = Vec::with_capacity(c);
        let mut i_avg = Vec::with_capacity(c);
        for ci in 0..c {
            let per_task: Vec<f64> = Task::ALL
                .iter()
                .map(|t| normalized_all[t][li][ci])
                .collect();
            unified.push(softmin(&per_task, tau)?);
            i_max.push(per_task.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            i_avg.push(per_task.iter().sum::<f64>() / per_task.len() as f64);
        }
        let normalized = Task::ALL
            .iter()
            .map(|&t| (t, normalized_all[&t][li].clone()))
            .collect();
        out.push(AggregatedImportance {
            layer_id: s.layer_id.clone(),
            normalized,
            unified,
            i_max,
            i_avg,
        });
    }
    Ok(out)
}
