//! Per-task losses: box regression + classification for detection, per-pixel
//! binary cross-entropy for the two segmentation tasks.

use std::collections::BTreeMap;

use crate::autodiff::{bce_with_logits, cross_entropy, mse, Tensor};
use crate::error::{Error, Result};
use crate::importance::Task;
use crate::scalar::Scalar;

use super::dataset::Batch;
use super::net::{HeadOutputs, Model};

pub struct TaskLosses<S: Scalar> {
    pub det: Tensor<S>,
    pub da: Tensor<S>,
    pub lane: Tensor<S>,
}

impl<S: Scalar> TaskLosses<S> {
    pub fn get(&self, task: Task) -> &Tensor<S> {
        match task {
            Task::Det => &self.det,
            Task::Da => &self.da,
            Task::Lane => &self.lane,
        }
    }

    /// Σ_t L_t as a graph node.
    pub fn sum(&self) -> Result<Tensor<S>> {
        self.det.add(&self.da)?.add(&self.lane)
    }

    pub fn total_value(&self) -> f64 {
        self.det.item().as_f64() + self.da.item().as_f64() + self.lane.item().as_f64()
    }
}

/// Losses from head outputs. Detection is mean-squared error on the box plus
/// cross-entropy on the class; da and lane are logit BCE against their masks.
/// Any non-finite loss is reported as divergence, naming the task.
pub fn task_losses<S: Scalar>(outputs: &HeadOutputs<S>, batch: &Batch<S>) -> Result<TaskLosses<S>> {
    let boxes = outputs.det.slice_cols(0, 4)?;
    let class_logits = outputs.det.slice_cols(4, 2)?;
    let det = mse(&boxes, &batch.det_boxes)?
        .add(&cross_entropy(&class_logits, &batch.det_classes)?)?;
    let da = bce_with_logits(&outputs.da, &batch.da_masks)?;
    let lane = bce_with_logits(&outputs.lane, &batch.lane_masks)?;
    for (name, loss) in [("det", &det), ("da", &da), ("lane", &lane)] {
        if !loss.item().is_finite() {
            return Err(Error::Divergence(format!("{name} loss is not finite")));
        }
    }
    Ok(TaskLosses { det, da, lane })
}

/// Forward plus losses in one call, exposing any requested tap features.
pub fn forward_losses<S: Scalar>(
    model: &Model<S>,
    batch: &Batch<S>,
    taps: &[&str],
) -> Result<(TaskLosses<S>, BTreeMap<String, Tensor<S>>)> {
    let (outputs, tap_map) = model.forward_with_taps(&batch.images, taps)?;
    Ok((task_losses(&outputs, batch)?, tap_map))
}
