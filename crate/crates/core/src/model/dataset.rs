//! Synthetic three-task scenes: a class-colored rectangle hidden among
//! colorless distractor rectangles (detection), a road-like bottom trapezoid
//! (drivable area), and thin near-vertical lines (lanes), all rendered into
//! 64x64 RGB images.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const IMAGE_SIZE: usize = 64;

#[derive(Clone)]
pub struct SyntheticSample<S: Scalar> {
    /// [3, 64, 64], values in [0, 1].
    pub image: Tensor<S>,
    /// (cx, cy, w, h) normalized to [0, 1]; the rectangle lies fully inside
    /// the image.
    pub det_box: [S; 4],
    /// Class index in {0, 1} (red-ish vs blue-ish rectangle).
    pub det_class: usize,
    /// [1, 64, 64] binary.
    pub da_mask: Tensor<S>,
    /// [1, 64, 64] binary.
    pub lane_mask: Tensor<S>,
}

/// Column-major batch of samples, ready for the model and the losses.
pub struct Batch<S: Scalar> {
    /// [N, 3, 64, 64]
    pub images: Tensor<S>,
    /// [N, 4]
    pub det_boxes: Tensor<S>,
    pub det_classes: Vec<usize>,
    /// [N, 1, 64, 64]
    pub da_masks: Tensor<S>,
    /// [N, 1, 64, 64]
    pub lane_masks: Tensor<S>,
}

/// Deterministic sample list for a seed. All randomness is drawn as f64 from
/// one ChaCha8 stream, so every scalar instantiation sees the same scenes.
pub fn generate_dataset<S: Scalar>(seed: u64, n: usize) -> Result<Vec<SyntheticSample<S>>> {
    if n == 0 {
        return Err(Error::InvalidParam {
            name: "n",
            detail: "dataset size must be at least 1".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| generate_sample(&mut rng)).collect())
}

fn generate_sample<S: Scalar>(rng: &mut ChaCha8Rng) -> SyntheticSample<S> {
    const SZ: usize = IMAGE_SIZE;
    let mut image = vec![0.0f64; 3 * SZ * SZ];
    let mut da = vec![0.0f64; SZ * SZ];
    let mut lane = vec![0.0f64; SZ * SZ];

    // Background noise keeps the tasks from being solvable by thresholding.
    for v in image.iter_mut() {
        *v = rng.random_range(0.0..0.3);
    }

    // Colorless distractor rectangles: bright, target-shaped, but with equal
    // channels, so localization has to key on color contrast rather than
    // brightness. The class-colored target is drawn afterwards and stays on
    // top wherever they overlap.
    for _ in 0..3 {
        let w = rng.random_range(6..=16usize);
        let h = rng.random_range(6..=16usize);
        let x0 = rng.random_range(0..=SZ - w);
        let y0 = rng.random_range(0..=SZ - h);
        let g = rng.random_range(0.55..0.95);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for ch in 0..3 {
                    image[(ch * SZ + y) * SZ + x] = g;
                }
            }
        }
    }

    // Detection rectangle: filled, class-colored, fully inside the image.
    let det_class = rng.random_range(0..2usize);
    let rect_w = rng.random_range(6..=14usize);
    let rect_h = rng.random_range(6..=14usize);
    let rect_x = rng.random_range(0..=SZ - rect_w);
    let rect_y = rng.random_range(0..=SZ - rect_h);
    let color = if det_class == 0 {
        [1.0, 0.2, 0.2]
    } else {
        [0.2, 0.2, 1.0]
    };
    for y in rect_y..rect_y + rect_h {
        for x in rect_x..rect_x + rect_w {
            for (ch, &v) in color.iter().enumerate() {
                image[(ch * SZ + y) * SZ + x] = v;
            }
        }
    }
    let det_box = [
        (rect_x as f64 + rect_w as f64 / 2.0) / SZ as f64,
        (rect_y as f64 + rect_h as f64 / 2.0) / SZ as f64,
        rect_w as f64 / SZ as f64,
        rect_h as f64 / SZ as f64,
    ];

    // Drivable area: a trapezoid widening toward the bottom edge, brightened
    // in the image.
    let horizon = rng.random_range(28..=40usize);
    let top_cx = 32.0 + rng.random_range(-6.0..6.0);
    let top_half = rng.random_range(6.0..12.0);
    let bottom_left = rng.random_range(0.0..6.0);
    let bottom_right = SZ as f64 - rng.random_range(0.0..6.0);
    let bottom_cx = (bottom_left + bottom_right) / 2.0;
    let bottom_half = (bottom_right - bottom_left) / 2.0;
    for y in horizon..SZ {
        let t = (y - horizon) as f64 / (SZ - 1 - horizon) as f64;
        let cx = top_cx + t * (bottom_cx - top_cx);
        let half = top_half + t * (bottom_half - top_half);
        let x0 = (cx - half).max(0.0) as usize;
        let x1 = ((cx + half) as usize).min(SZ - 1);
        for x in x0..=x1 {
            da[y * SZ + x] = 1.0;
            for ch in 0..3 {
                let px = &mut image[(ch * SZ + y) * SZ + x];
                *px = (*px + 0.25).min(1.0);
            }
        }
    }

    // Lanes: 1-3 single-pixel-wide near-vertical polylines inside the road
    // rows, painted bright.
    let n_lanes = rng.random_range(1..=3usize);
    for _ in 0..n_lanes {
        let x_bottom = rng.random_range(bottom_left..bottom_right);
        let x_top = (x_bottom + rng.random_range(-8.0..8.0)).clamp(0.0, (SZ - 1) as f64);
        for y in horizon + 2..SZ {
            let t = (y - horizon - 2) as f64 / (SZ - horizon - 3) as f64;
            let x = (x_top + t * (x_bottom - x_top)).round() as usize;
            let x = x.min(SZ - 1);
            lane[y * SZ + x] = 1.0;
            for ch in 0..3 {
                image[(ch * SZ + y) * SZ + x] = 0.9;
            }
        }
    }

    let to_s = |v: &[f64]| -> Vec<S> { v.iter().map(|&x| S::of(x)).collect() };
    SyntheticSample {
        image: Tensor::new(&[3, SZ, SZ], to_s(&image)).expect("image shape"),
        det_box: [
            S::of(det_box[0]),
            S::of(det_box[1]),
            S::of(det_box[2]),
            S::of(det_box[3]),
        ],
        det_class,
        da_mask: Tensor::new(&[1, SZ, SZ], to_s(&da)).expect("mask shape"),
        lane_mask: Tensor::new(&[1, SZ, SZ], to_s(&lane)).expect("mask shape"),
    }
}

/// Pack samples into batch tensors.
pub fn batch<S: Scalar>(samples: &[SyntheticSample<S>]) -> Result<Batch<S>> {
    if samples.is_empty() {
        return Err(Error::InvalidParam {
            name: "batch",
            detail: "batch must contain at least one sample".into(),
        });
    }
    let n = samples.len();
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut images = Vec::with_capacity(n * 3 * px);
    let mut boxes = Vec::with_capacity(n * 4);
    let mut classes = Vec::with_capacity(n);
    let mut da = Vec::with_capacity(n * px);
    let mut lanes = Vec::with_capacity(n * px);
    for s in samples {
        images.extend(s.image.value());
        boxes.extend(s.det_box);
        classes.push(s.det_class);
        da.extend(s.da_mask.value());
        lanes.extend(s.lane_mask.value());
    }
    Ok(Batch {
        images: Tensor::new(&[n, 3, IMAGE_SIZE, IMAGE_SIZE], images)?,
        det_boxes: Tensor::new(&[n, 4], boxes)?,
        det_classes: classes,
        da_masks: Tensor::new(&[n, 1, IMAGE_SIZE, IMAGE_SIZE], da)?,
        lane_masks: Tensor::new(&[n, 1, IMAGE_SIZE, IMAGE_SIZE], lanes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_fraction(t: &Tensor<f64>) -> f64 {
        let v = t.value();
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset::<f64>(7, 5).unwrap();
        let b = generate_dataset::<f64>(7, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.value(), y.image.value());
            assert_eq!(x.det_box.map(|v| v), y.det_box.map(|v| v));
            assert_eq!(x.det_class, y.det_class);
            assert_eq!(x.da_mask.value(), y.da_mask.value());
            assert_eq!(x.lane_mask.value(), y.lane_mask.value());
        }
    }

    #[test]
    fn masks_are_binary_and_nondegenerate() {
        for s in generate_dataset::<f64>(42, 100).unwrap() {
            for v in s.da_mask.value().into_iter().chain(s.lane_mask.value()) {
                assert!(v == 0.0 || v == 1.0);
            }
            let da = mask_fraction(&s.da_mask);
            assert!(da > 0.0 && da < 1.0, "da fraction {da}");
        }
    }

    #[test]
    fn lane_coverage_is_sparser_than_drivable_area() {
        for s in generate_dataset::<f64>(9, 100).unwrap() {
            assert!(mask_fraction(&s.lane_mask) < mask_fraction(&s.da_mask));
        }
    }

    #[test]
    fn rectangles_stay_inside_the_image() {
        for s in generate_dataset::<f64>(3, 100).unwrap() {
            let [cx, cy, w, h] = s.det_box;
            assert!(cx - w / 2.0 >= 0.0 && cx + w / 2.0 <= 1.0);
            assert!(cy - h / 2.0 >= 0.0 && cy + h / 2.0 <= 1.0);
            assert!(s.det_class < 2);
        }
    }

    #[test]
    fn target_color_dominates_inside_its_box() {
        for s in generate_dataset::<f64>(11, 100).unwrap() {
            let [cx, cy, w, h] = s.det_box;
            let sz = IMAGE_SIZE as f64;
            let x0 = ((cx - w / 2.0) * sz).round() as usize;
            let x1 = ((cx + w / 2.0) * sz).round() as usize;
            let y0 = ((cy - h / 2.0) * sz).round() as usize;
            let y1 = ((cy + h / 2.0) * sz).round() as usize;
            let img = s.image.value();
            let mean = |ch: usize| {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += img[(ch * IMAGE_SIZE + y) * IMAGE_SIZE + x];
                    }
                }
                acc / ((x1 - x0) * (y1 - y0)) as f64
            };
            let (r, b) = (mean(0), mean(2));
            if s.det_class == 0 {
                assert!(r > b, "class 0 box must stay red-dominant: r={r} b={b}");
            } else {
                assert!(b > r, "class 1 box must stay blue-dominant: r={r} b={b}");
            }
        }
    }

    #[test]
    fn images_stay_in_unit_range() {
        for s in generate_dataset::<f64>(5, 20).unwrap() {
            assert!(s.image.value().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn batching_concatenates_in_order() {
        let samples = generate_dataset::<f64>(1, 3).unwrap();
        let b = batch(&samples).unwrap();
        assert_eq!(b.images.shape(), vec![3, 3, 64, 64]);
        assert_eq!(b.det_boxes.shape(), vec![3, 4]);
        assert_eq!(b.da_masks.shape(), vec![3, 1, 64, 64]);
        assert_eq!(b.images.value()[..3 * 64 * 64], samples[0].image.value());
        assert_eq!(b.det_classes.len(), 3);
    }
}
