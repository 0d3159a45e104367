//! Validation-set metrics: per-task losses, toy pixel accuracies for the
//! segmentation heads, box regression error, parameter count, and a latency
//! proxy. Latency is wall time, so it is excluded from the delta comparison
//! between two reports.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch, forward_losses, Model, SyntheticSample};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub det_loss: f64,
    pub da_loss: f64,
    pub lane_loss: f64,
    pub total_loss: f64,
    /// Fraction of pixels where (logit > 0) agrees with the binary mask.
    pub da_pixel_accuracy: f64,
    pub lane_pixel_accuracy: f64,
    /// Mean squared error of the 4 box coordinates alone.
    pub box_mse: f64,
    pub parameter_count: usize,
    /// Median wall time of a single-image forward pass, in milliseconds.
    /// A proxy only: single-threaded, unoptimized kernels. Zero when
    /// latency_runs is 0.
    pub latency_ms_median: f64,
}

/// Student-minus-reference gaps on the deterministic metrics. Latency is
/// deliberately absent: wall time varies between runs even for identical
/// models.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricDeltas {
    pub det_loss: f64,
    pub da_loss: f64,
    pub lane_loss: f64,
    pub total_loss: f64,
    pub da_pixel_accuracy: f64,
    pub lane_pixel_accuracy: f64,
    pub box_mse: f64,
    pub parameter_count: i64,
}

pub fn metric_deltas(model: &EvalReport, reference: &EvalReport) -> MetricDeltas {
    MetricDeltas {
        det_loss: model.det_loss - reference.det_loss,
        da_loss: model.da_loss - reference.da_loss,
        lane_loss: model.lane_loss - reference.lane_loss,
        total_loss: model.total_loss - reference.total_loss,
        da_pixel_accuracy: model.da_pixel_accuracy - reference.da_pixel_accuracy,
        lane_pixel_accuracy: model.lane_pixel_accuracy - reference.lane_pixel_accuracy,
        box_mse: model.box_mse - reference.box_mse,
        parameter_count: model.parameter_count as i64 - reference.parameter_count as i64,
    }
}

fn pixel_agreement<S: Scalar>(logits: &[S], mask: &[S]) -> usize {
    logits
        .iter()
        .zip(mask)
        .filter(|(l, m)| (l.as_f64() > 0.0) == (m.as_f64() > 0.5))
        .count()
}

/// Evaluate on `data` with gradients disabled. `latency_runs` extra forward
/// passes of the first sample measure the latency proxy.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &[SyntheticSample<S>],
    batch_size: usize,
    latency_runs: usize,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidParam {
            name: "dataset",
            detail: "evaluation needs at least one sample".into(),
        });
    }
    model.set_requires_grad(false);
    let result: Result<EvalReport> = (|| {
        let mut loss_sums = [0.0f64; 3];
        let mut pixel_hits = [0usize; 2];
        let mut pixels = 0usize;
        let mut box_sq = 0.0f64;
        let mut boxes = 0usize;
        for chunk in data.chunks(batch_size.max(1)) {
            let b = batch(chunk)?;
            let (losses, _) = forward_losses(model, &b, &[])?;
            let w = chunk.len() as f64;
            loss_sums[0] += losses.det.item().as_f64() * w;
            loss_sums[1] += losses.da.item().as_f64() * w;
            loss_sums[2] += losses.lane.item().as_f64() * w;

            let outputs = model.forward(&b.images)?;
            let da = outputs.da.value();
            let lane = outputs.lane.value();
            pixel_hits[0] += pixel_agreement(&da, &b.da_masks.value());
            pixel_hits[1] += pixel_agreement(&lane, &b.lane_masks.value());
            pixels += da.len();

            let det = outputs.det.value();
            let target = b.det_boxes.value();
            for n in 0..chunk.len() {
                for k in 0..4 {
                    let d = det[n * 6 + k].as_f64() - target[n * 4 + k].as_f64();
                    box_sq += d * d;
                }
            }
            boxes += chunk.len();
        }
        let n = data.len() as f64;
        let (det_loss, da_loss, lane_loss) =
            (loss_sums[0] / n, loss_sums[1] / n, loss_sums[2] / n);

        let latency_ms_median = if latency_runs > 0 {
            let image = data[0].image.value();
            let single = crate::autodiff::Tensor::new(
                &[1, model.graph.image_channels, model.graph.image_size, model.graph.image_size],
                image,
            )?;
            let mut times: Vec<f64> = Vec::with_capacity(latency_runs);
            for _ in 0..latency_runs {
                let start = Instant::now();
                let _ = model.forward(&single)?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(|a, b| a.total_cmp(b));
            let mid = times.len() / 2;
            if times.len() % 2 == 1 {
                times[mid]
            } else {
                0.5 * (times[mid - 1] + times[mid])
            }
        } else {
            0.0
        };

        Ok(EvalReport {
            det_loss,
            da_loss,
            lane_loss,
            total_loss: det_loss + da_loss + lane_loss,
            da_pixel_accuracy: pixel_hits[0] as f64 / pixels as f64,
            lane_pixel_accuracy: pixel_hits[1] as f64 / pixels as f64,
            box_mse: box_sq / (boxes as f64 * 4.0),
            parameter_count: model.parameter_count(),
            latency_ms_median,
        })
    })();
    model.set_requires_grad(true);
    result
}
