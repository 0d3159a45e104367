//! Feature distillation: a frozen teacher's intermediate maps are resized to
//! the student's spatial size, both sides pass through trainable 1x1
//! projections into a common width, and their mean-squared gap joins the
//! task losses with a warm-up-gated weight.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mse, Tensor};
use crate::error::{Error, Result};
use crate::model::{forward_losses, Batch, Model, SyntheticSample};
use crate::rng::seed_stream;
use crate::scalar::Scalar;
use crate::train::{
    epoch_batches, gather_batch, sgd_step, validation_losses, EpochLog, PLATEAU_MIN_DELTA,
};

/// One feature-matching edge: a student tap layer paired with a teacher tap
/// layer. Both name layer ids whose outputs are compared.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DistillPair {
    pub student: String,
    pub teacher: String,
}

/// Trainable 1x1 conv pair projecting both feature maps to `dim` channels.
/// These participate in the student's optimizer and are discarded after
/// distillation; the deployed student never runs them.
#[derive(Debug, Clone)]
pub struct PairProjection<S: Scalar> {
    pub student_weight: Tensor<S>,
    pub student_bias: Tensor<S>,
    pub teacher_weight: Tensor<S>,
    pub teacher_bias: Tensor<S>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct Projections<S: Scalar> {
    pub per_pair: Vec<PairProjection<S>>,
}

impl<S: Scalar> Projections<S> {
    pub fn parameters(&self) -> Vec<Tensor<S>> {
        self.per_pair
            .iter()
            .flat_map(|p| {
                [
                    p.student_weight.clone(),
                    p.student_bias.clone(),
                    p.teacher_weight.clone(),
                    p.teacher_bias.clone(),
                ]
            })
            .collect()
    }
}

/// Both projections start damped by this factor, so the feature term opens
/// as a gentle anchor (its value and its gradient into the student scale
/// with the square of the factor) instead of an impulse the moment the
/// warm-up gate lifts. The 1x1s are trainable and can grow the coupling
/// back whenever that lowers the combined objective.
const PROJECTION_INIT_SCALE: f64 = 1.0;

/// A projection starts as a damped partial identity when `slots` maps each
/// input channel to a distinct output row (channel j contributes only to
/// row slots[j]), as the damped full identity when the input width already
/// equals `dim`, and as a damped uniform(-1/sqrt(fan_in), +) draw otherwise.
/// The first two forms consume no randomness.
fn projection_weights<S: Scalar>(
    in_channels: usize,
    dim: usize,
    slots: Option<&[usize]>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut data = vec![S::zero(); dim * in_channels];
    let diag = S::of(PROJECTION_INIT_SCALE);
    if let Some(slots) = slots {
        for (j, &slot) in slots.iter().enumerate() {
            data[slot * in_channels + j] = diag;
        }
    } else if in_channels == dim {
        for d in 0..dim {
            data[d * in_channels + d] = diag;
        }
    } else {
        let bound = PROJECTION_INIT_SCALE / (in_channels as f64).sqrt();
        for v in data.iter_mut() {
            *v = S::of(rng.random_range(-bound..bound));
        }
    }
    let weight = Tensor::parameter(&[dim, in_channels, 1, 1], data)?;
    let bias = Tensor::parameter(&[dim], vec![S::zero(); dim])?;
    Ok((weight, bias))
}

/// Build projections for every pair. `projection_dim` overrides the default
/// common width, which is the teacher tap's channel count.
///
/// `student_channel_maps` records, per student tap layer, which teacher
/// channel each surviving student channel came from. When a tap has a map
/// that the common width can address, the student projection starts as the
/// partial identity scattering each channel into its original slot, so the
/// initial feature gap measures exactly what pruning removed and the first
/// gradients push the student to repair it.
pub fn init_projections<S: Scalar>(
    student: &Model<S>,
    teacher: &Model<S>,
    pairs: &[DistillPair],
    projection_dim: Option<usize>,
    student_channel_maps: &BTreeMap<String, Vec<usize>>,
    rng: &mut ChaCha8Rng,
) -> Result<Projections<S>> {
    if pairs.is_empty() {
        return Err(Error::InvalidParam {
            name: "pairs",
            detail: "distillation needs at least one feature pair".into(),
        });
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let c_s = student.graph.layer(&pair.student)?.spec.out_channels;
        let c_t = teacher.graph.layer(&pair.teacher)?.spec.out_channels;
        let dim = projection_dim.unwrap_or(c_t);
        if dim == 0 {
            return Err(Error::InvalidParam {
                name: "projection_dim",
                detail: "projection width must be at least 1".into(),
            });
        }
        let slots = match student_channel_maps.get(&pair.student) {
            Some(map) => {
                if map.len() != c_s {
                    return Err(Error::InvalidParam {
                        name: "student_channel_maps",
                        detail: format!(
                            "layer '{}' maps {} channels but the student has {c_s}",
                            pair.student,
                            map.len()
                        ),
                    });
                }
                // A narrow projection_dim override cannot address every
                // original slot; fall back to the width rules.
                map.iter().all(|&s| s < dim).then_some(map.as_slice())
            }
            None => None,
        };
        let (student_weight, student_bias) = projection_weights(c_s, dim, slots, rng)?;
        let (teacher_weight, teacher_bias) = projection_weights(c_t, dim, None, rng)?;
        per_pair.push(PairProjection {
            student_weight,
            student_bias,
            teacher_weight,
            teacher_bias,
            dim,
        });
    }
    Ok(Projections { per_pair })
}

/// Interpolate a teacher feature map onto the student's spatial grid.
pub fn align_teacher_feature<S: Scalar>(
    teacher_feature: &Tensor<S>,
    student_h: usize,
    student_w: usize,
) -> Result<Tensor<S>> {
    teacher_feature.bilinear_resize(student_h, student_w)
}

/// Mean over pairs of MSE(project(student tap), project(resize(teacher
/// tap))). Teacher features arrive as constants; gradients reach the student
/// taps and both projections.
pub fn kd_loss<S: Scalar>(
    student_taps: &BTreeMap<String, Tensor<S>>,
    teacher_taps: &BTreeMap<String, Tensor<S>>,
    pairs: &[DistillPair],
    projections: &Projections<S>,
) -> Result<Tensor<S>> {
    assert_eq!(pairs.len(), projections.per_pair.len(), "projections built for these pairs");
    let mut acc: Option<Tensor<S>> = None;
    for (pair, proj) in pairs.iter().zip(&projections.per_pair) {
        let s = student_taps
            .get(&pair.student)
            .ok_or_else(|| Error::UnknownLayer(pair.student.clone()))?;
        let t = teacher_taps
            .get(&pair.teacher)
            .ok_or_else(|| Error::UnknownLayer(pair.teacher.clone()))?;
        let s_shape = s.shape();
        let t_shape = t.shape();
        if s_shape[0] != t_shape[0] {
            return Err(Error::shape(
                "kd_loss",
                format!("student batch {} vs teacher batch {}", s_shape[0], t_shape[0]),
            ));
        }
        let aligned = align_teacher_feature(t, s_shape[2], s_shape[3])?;
        let ps = s.conv2d(&proj.student_weight, &proj.student_bias, 1, 0)?;
        let pt = aligned.conv2d(&proj.teacher_weight, &proj.teacher_bias, 1, 0)?;
        let term = mse(&ps, &pt)?;
        acc = Some(match acc {
            Some(prev) => prev.add(&term)?,
            None => term,
        });
    }
    Ok(acc.expect("pairs is non-empty").scale(S::of(1.0 / pairs.len() as f64)))
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub det: f64,
    pub da: f64,
    pub lane: f64,
    pub kd: f64,
    pub total: f64,
}

/// One combined objective evaluation: student task losses plus
/// `beta_effective` times the feature term. With a zero weight the teacher
/// is not even run and the returned graph is exactly the plain multi-task
/// loss, which keeps warm-up epochs bit-identical to ordinary fine-tuning.
pub fn distill_step<S: Scalar>(
    student: &Model<S>,
    teacher: &Model<S>,
    batch: &Batch<S>,
    pairs: &[DistillPair],
    projections: &Projections<S>,
    beta_effective: f64,
    teacher_half_precision: bool,
) -> Result<(Tensor<S>, StepLosses)> {
    let student_tap_ids: Vec<&str> = if beta_effective > 0.0 {
        pairs.iter().map(|p| p.student.as_str()).collect()
    } else {
        Vec::new()
    };
    let (losses, student_taps) = forward_losses(student, batch, &student_tap_ids)?;
    let task_total = losses.sum()?;

    let (total, kd_value) = if beta_effective > 0.0 {
        let teacher_tap_ids: Vec<&str> = pairs.iter().map(|p| p.teacher.as_str()).collect();
        let (_, teacher_taps_raw) = teacher.forward_with_taps(&batch.images, &teacher_tap_ids)?;
        let teacher_taps: BTreeMap<String, Tensor<S>> = teacher_taps_raw
            .into_iter()
            .map(|(k, v)| {
                let v = if teacher_half_precision { v.to_half_precision() } else { v };
                (k, v)
            })
            .collect();
        let kd = kd_loss(&student_taps, &teacher_taps, pairs, projections)?;
        let kd_value = kd.item().as_f64();
        (task_total.add(&kd.scale(S::of(beta_effective)))?, kd_value)
    } else {
        (task_total, 0.0)
    };

    let step = StepLosses {
        det: losses.det.item().as_f64(),
        da: losses.da.item().as_f64(),
        lane: losses.lane.item().as_f64(),
        kd: kd_value,
        total: total.item().as_f64(),
    };
    if !step.total.is_finite() {
        return Err(Error::Divergence("distillation loss is not finite".into()));
    }
    Ok((total, step))
}

#[derive(Debug, Clone)]
pub struct DistillRunSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    /// Epochs at the start trained with the feature term weighted to zero.
    pub warmup_epochs: usize,
    pub teacher_half_precision: bool,
    pub seed: u64,
    pub plateau_patience: Option<usize>,
}

impl DistillRunSettings {
    fn validate(&self) -> Result<()> {
        crate::train::TrainLoopSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            plateau_patience: self.plateau_patience,
        }
        .validate()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParam {
                name: "beta",
                detail: format!("distillation weight must be finite and >= 0, got {}", self.beta),
            });
        }
        Ok(())
    }
}

/// Train the student against task losses plus the teacher's features.
/// The teacher is frozen for the whole run; projection parameters ride in
/// the student's optimizer. Returns the per-epoch logs and the final
/// projections (for inspection; they are not part of the student).
pub fn run_distillation<S: Scalar>(
    student: &Model<S>,
    teacher: &Model<S>,
    pairs: &[DistillPair],
    projection_dim: Option<usize>,
    student_channel_maps: &BTreeMap<String, Vec<usize>>,
    train_data: &[SyntheticSample<S>],
    val_data: &[SyntheticSample<S>],
    cfg: &DistillRunSettings,
) -> Result<(Vec<EpochLog>, Projections<S>)> {
    cfg.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::InvalidParam {
            name: "dataset",
            detail: "training and validation splits must be non-empty".into(),
        });
    }
    teacher.set_requires_grad(false);
    student.set_requires_grad(true);

    let mut init_rng = seed_stream(cfg.seed, "init/projections");
    let projections = init_projections(
        student,
        teacher,
        pairs,
        projection_dim,
        student_channel_maps,
        &mut init_rng,
    )?;

    let mut step_params = student.parameters();
    step_params.extend(projections.parameters());
    let mut shuffle = seed_stream(cfg.seed, "train/shuffle");

    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let beta_effective = if epoch <= cfg.warmup_epochs { 0.0 } else { cfg.beta };
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for indices in epoch_batches(train_data.len(), cfg.batch_size, &mut shuffle) {
            let b = gather_batch(train_data, &indices)?;
            for p in &step_params {
                p.clear_grad();
            }
            let (total, step) = distill_step(
                student,
                teacher,
                &b,
                pairs,
                &projections,
                beta_effective,
                cfg.teacher_half_precision,
            )?;
            total.backward()?;
            sgd_step(&step_params, cfg.lr);
            sums[0] += step.det;
            sums[1] += step.da;
            sums[2] += step.lane;
            sums[3] += step.kd;
            batches += 1;
        }
        let n = batches as f64;
        let (det, da, lane, kd) = (sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n);
        let (_, _, _, val_total) = validation_losses(student, val_data, cfg.batch_size)?;
        logs.push(EpochLog {
            epoch,
            det,
            da,
            lane,
            kd,
            total: det + da + lane + beta_effective * kd,
            beta_effective,
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
    Ok((logs, projections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{batch, generate_dataset, ArchOverrides, ModelGraph};
    use crate::pruner::surgery::apply_plan;
    use crate::pruner::{build_plan, PruneSettings};
    use crate::train::{train_multitask, TrainLoopSettings};

    fn toy_model(seed: u64) -> Model<f32> {
        let graph = ModelGraph::reference(&ArchOverrides::default()).unwrap();
        let mut rng = seed_stream(seed, "init/teacher");
        Model::init(graph, &mut rng).unwrap()
    }

    fn default_pairs() -> Vec<DistillPair> {
        vec![
            DistillPair { student: "backbone.c3".into(), teacher: "backbone.c3".into() },
            DistillPair { student: "encoder.c1".into(), teacher: "encoder.c1".into() },
        ]
    }

    /// Prune by a synthetic plan so the student is structurally smaller.
    /// `spare` layers are given unsafe statistics, which keeps them intact.
    fn pruned_with_plan(
        teacher: &Model<f32>,
        spare: &[&str],
    ) -> (Model<f32>, crate::pruner::PruningPlan) {
        use crate::conflict::ConflictReport;
        use crate::importance::{AggregatedImportance, Task};
        let settings = PruneSettings {
            tau: 0.25,
            epsilon: 1e-12,
            theta_max: 0.2,
            theta_avg: 0.2,
            theta_pen: 0.3,
            lambda: 0.2,
            rate: 0.4,
            granularity: 8,
            use_conflict_penalty: true,
        };
        let agg: Vec<AggregatedImportance> = teacher
            .graph
            .prunable_layers()
            .iter()
            .map(|n| {
                let c = n.spec.out_channels;
                let unified: Vec<f64> = (0..c).map(|i| i as f64 / c as f64 * 0.15).collect();
                let peak = if spare.contains(&n.id.as_str()) { 0.5 } else { 0.1 };
                AggregatedImportance {
                    layer_id: n.id.clone(),
                    normalized: Task::ALL.iter().map(|&t| (t, unified.clone())).collect(),
                    unified: unified.clone(),
                    i_max: vec![peak; c],
                    i_avg: vec![0.1; c],
                }
            })
            .collect();
        let conflicts: Vec<ConflictReport> = agg
            .iter()
            .map(|a| ConflictReport {
                layer_id: a.layer_id.clone(),
                pairwise: vec![],
                penalty: vec![0.0; a.unified.len()],
            })
            .collect();
        let plan = build_plan(&agg, &conflicts, &settings, "test").unwrap();
        (apply_plan(teacher, &plan).unwrap(), plan)
    }

    fn pruned_student(teacher: &Model<f32>) -> Model<f32> {
        pruned_with_plan(teacher, &[]).0
    }

    #[test]
    fn self_distillation_with_identity_projections_has_zero_gap() {
        let teacher = toy_model(1);
        let student = teacher.deep_clone();
        let mut rng = seed_stream(1, "init/projections");
        let projections =
            init_projections(&student, &teacher, &default_pairs(), None, &BTreeMap::new(), &mut rng).unwrap();
        let data = generate_dataset::<f32>(5, 4).unwrap();
        let b = batch(&data).unwrap();
        teacher.set_requires_grad(false);
        let (_, step) = distill_step(
            &student,
            &teacher,
            &b,
            &default_pairs(),
            &projections,
            1.0,
            false,
        )
        .unwrap();
        assert_eq!(step.kd, 0.0, "identical taps through identity projections");
    }

    #[test]
    fn projections_identity_only_when_widths_match() {
        let teacher = toy_model(2);
        let student = pruned_student(&teacher);
        assert_eq!(student.graph.layer("backbone.c3").unwrap().spec.out_channels, 40);
        let mut rng = seed_stream(2, "init/projections");
        let projections =
            init_projections(&student, &teacher, &default_pairs(), None, &BTreeMap::new(), &mut rng).unwrap();
        // Pair 0: student 40 -> 64 is a random projection, teacher 64 -> 64
        // stays identity.
        let p0 = &projections.per_pair[0];
        assert_eq!(p0.dim, 64);
        assert_eq!(p0.student_weight.shape(), &[64, 40, 1, 1]);
        let diag = PROJECTION_INIT_SCALE as f32;
        let tw = p0.teacher_weight.value();
        assert_eq!(tw[0], diag);
        assert_eq!(tw[1], 0.0);
        let sw = p0.student_weight.value();
        assert!(sw.iter().any(|&v| v != 0.0 && v != diag));
    }

    #[test]
    fn channel_maps_seed_partial_identity_student_projections() {
        // Prune only backbone.c3: its surviving channels then compute the
        // same activations as the teacher's kept channels, so the initial
        // scatter-projected gap is exactly the mean squared energy of the
        // removed channels.
        let teacher = toy_model(8);
        teacher.set_requires_grad(false);
        let (student, plan) = pruned_with_plan(&teacher, &["backbone.c1", "backbone.c2"]);
        assert_eq!(student.graph.layer("backbone.c2").unwrap().spec.out_channels, 32);
        assert_eq!(student.graph.layer("backbone.c3").unwrap().spec.out_channels, 40);

        let maps: BTreeMap<String, Vec<usize>> = plan
            .per_layer()
            .iter()
            .map(|(id, lp)| (id.clone(), lp.kept_indices()))
            .collect();
        let kept = maps["backbone.c3"].clone();
        let pairs = vec![DistillPair { student: "backbone.c3".into(), teacher: "backbone.c3".into() }];
        let mut rng = seed_stream(8, "init/projections");
        let projections =
            init_projections(&student, &teacher, &pairs, None, &maps, &mut rng).unwrap();

        let diag = PROJECTION_INIT_SCALE as f32;
        let sw = projections.per_pair[0].student_weight.value();
        assert_eq!(sw.iter().filter(|&&v| v == diag).count(), 40);
        assert_eq!(sw.iter().filter(|&&v| v == 0.0).count(), 64 * 40 - 40);
        for (j, &slot) in kept.iter().enumerate() {
            assert_eq!(sw[slot * 40 + j], diag);
        }

        let data = generate_dataset::<f32>(9, 4).unwrap();
        let b = batch(&data).unwrap();
        let tap = ["backbone.c3"];
        let (_, teacher_taps) = teacher.forward_with_taps(&b.images, &tap).unwrap();
        let (_, student_taps) = student.forward_with_taps(&b.images, &tap).unwrap();
        let kd = kd_loss(&student_taps, &teacher_taps, &pairs, &projections).unwrap();

        let t = &teacher_taps["backbone.c3"];
        let shape = t.shape().to_vec();
        let plane = shape[2] * shape[3];
        let tv = t.value();
        let mut pruned_energy = 0.0f64;
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                if kept.binary_search(&c).is_err() {
                    let base = (n * shape[1] + c) * plane;
                    pruned_energy +=
                        tv[base..base + plane].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                }
            }
        }
        let damp = PROJECTION_INIT_SCALE * PROJECTION_INIT_SCALE;
        let expected = damp * pruned_energy / (shape.iter().product::<usize>() as f64);
        let got = kd.item() as f64;
        assert!(
            (got - expected).abs() <= 1e-4 * expected.max(1e-6),
            "scatter-projected gap {got} vs removed-channel energy {expected}"
        );
    }

    #[test]
    fn zero_beta_matches_plain_fine_tuning_bit_for_bit() {
        let teacher = toy_model(3);
        let train: Vec<_> = generate_dataset::<f32>(20, 16).unwrap();
        let val: Vec<_> = generate_dataset::<f32>(21, 8).unwrap();

        let plain = pruned_student(&teacher);
        train_multitask(
            &plain,
            &train,
            &val,
            &TrainLoopSettings {
                epochs: 2,
                batch_size: 8,
                lr: 0.05,
                seed: 9,
                plateau_patience: None,
            },
        )
        .unwrap();

        let distilled = pruned_student(&teacher);
        let (logs, _) = run_distillation(
            &distilled,
            &teacher,
            &default_pairs(),
            None,
            &BTreeMap::new(),
            &train,
            &val,
            &DistillRunSettings {
                epochs: 2,
                batch_size: 8,
                lr: 0.05,
                beta: 0.0,
                warmup_epochs: 0,
                teacher_half_precision: true,
                seed: 9,
                plateau_patience: None,
            },
        )
        .unwrap();
        assert_eq!(plain.param_checksum(), distilled.param_checksum());
        for log in &logs {
            assert_eq!(log.kd, 0.0);
            assert_eq!(log.beta_effective, 0.0);
        }
    }

    #[test]
    fn warmup_freezes_teacher_and_gates_the_feature_term() {
        let teacher = toy_model(4);
        let student = pruned_student(&teacher);
        let teacher_before = teacher.param_checksum();
        let train: Vec<_> = generate_dataset::<f32>(30, 16).unwrap();
        let val: Vec<_> = generate_dataset::<f32>(31, 8).unwrap();
        let (logs, _) = run_distillation(
            &student,
            &teacher,
            &default_pairs(),
            None,
            &BTreeMap::new(),
            &train,
            &val,
            &DistillRunSettings {
                epochs: 3,
                batch_size: 8,
                lr: 0.05,
                beta: 1.0,
                warmup_epochs: 1,
                teacher_half_precision: true,
                seed: 10,
                plateau_patience: None,
            },
        )
        .unwrap();
        assert_eq!(teacher.param_checksum(), teacher_before, "teacher must stay frozen");
        assert_eq!(logs[0].beta_effective, 0.0, "warm-up epoch");
        assert_eq!(logs[0].kd, 0.0);
        assert!(logs[1].beta_effective == 1.0 && logs[1].kd > 0.0);
    }

    #[test]
    fn kd_objective_alone_descends_under_sgd() {
        let teacher = toy_model(12);
        teacher.set_requires_grad(false);
        let student = pruned_student(&teacher);
        let pairs = default_pairs();
        let mut rng = seed_stream(12, "init/projections");
        let projections = init_projections(&student, &teacher, &pairs, None, &BTreeMap::new(), &mut rng).unwrap();
        let data = generate_dataset::<f32>(13, 4).unwrap();
        let b = batch(&data).unwrap();

        let teacher_tap_ids: Vec<&str> = pairs.iter().map(|p| p.teacher.as_str()).collect();
        let (_, teacher_taps) = teacher.forward_with_taps(&b.images, &teacher_tap_ids).unwrap();
        let student_tap_ids: Vec<&str> = pairs.iter().map(|p| p.student.as_str()).collect();

        let mut params = student.parameters();
        params.extend(projections.parameters());
        let kd_value = || {
            let (_, taps) = student.forward_with_taps(&b.images, &student_tap_ids).unwrap();
            kd_loss(&taps, &teacher_taps, &pairs, &projections).unwrap()
        };
        let initial = kd_value().item() as f64;
        assert!(initial > 0.0);
        for _ in 0..40 {
            for p in &params {
                p.clear_grad();
            }
            let kd = kd_value();
            kd.backward().unwrap();
            sgd_step(&params, 2.0);
        }
        let after = kd_value().item() as f64;
        assert!(
            after < 0.5 * initial,
            "pure feature objective should descend: {initial} -> {after}"
        );
    }

    #[test]
    fn half_precision_taps_change_the_objective() {
        let teacher = toy_model(5);
        let student = pruned_student(&teacher);
        teacher.set_requires_grad(false);
        let mut rng = seed_stream(5, "init/projections");
        let projections =
            init_projections(&student, &teacher, &default_pairs(), None, &BTreeMap::new(), &mut rng).unwrap();
        let data = generate_dataset::<f32>(6, 4).unwrap();
        let b = batch(&data).unwrap();
        let kd_at = |half: bool| {
            let (_, step) = distill_step(
                &student,
                &teacher,
                &b,
                &default_pairs(),
                &projections,
                1.0,
                half,
            )
            .unwrap();
            step.kd
        };
        let (full, half) = (kd_at(false), kd_at(true));
        assert!(full > 0.0 && half > 0.0);
        assert_ne!(full, half, "quantized teacher taps must perturb the gap");
        assert!((full - half).abs() / full < 0.05, "but only slightly");
    }

    #[test]
    fn distillation_is_deterministic() {
        let teacher = toy_model(6);
        let train: Vec<_> = generate_dataset::<f32>(40, 8).unwrap();
        let val: Vec<_> = generate_dataset::<f32>(41, 8).unwrap();
        let run = || {
            let student = pruned_student(&teacher);
            let (logs, _) = run_distillation(
                &student,
                &teacher,
                &default_pairs(),
                None,
                &BTreeMap::new(),
                &train,
                &val,
                &DistillRunSettings {
                    epochs: 2,
                    batch_size: 8,
                    lr: 0.05,
                    beta: 1.0,
                    warmup_epochs: 0,
                    teacher_half_precision: true,
                    seed: 11,
                    plateau_patience: None,
                },
            )
            .unwrap();
            (student.param_checksum(), serde_json::to_string(&logs).unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_tap_layer_is_rejected() {
        let teacher = toy_model(7);
        let student = teacher.deep_clone();
        let mut rng = seed_stream(7, "init/projections");
        let pairs = vec![DistillPair { student: "backbone.c9".into(), teacher: "backbone.c3".into() }];
        assert!(init_projections(&student, &teacher, &pairs, None, &BTreeMap::new(), &mut rng).is_err());
        assert!(init_projections(&student, &teacher, &[], None, &BTreeMap::new(), &mut rng).is_err());
    }
}
