//! Stage runners behind the CLI: train the teacher, collect calibration
//! statistics, plan, prune, distill, evaluate, and the four-row ablation
//! ladder. Every stage is a pure function of (config, input files), so
//! reruns rewrite identical artifacts; checkpoint and plan hashes chain
//! provenance from teacher to plan to pruned to distilled model.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::PipelineConfig;
use crate::conflict::{conflict_report, ConflictReport};
use crate::distill::{run_distillation, DistillRunSettings};
use crate::error::{Error, Result};
use crate::eval::{evaluate, metric_deltas, EvalReport, MetricDeltas};
use crate::importance::{aggregate_importance, ChannelStatistics, Task};
use crate::model::{
    batch, file_sha256, forward_losses, generate_dataset, load_checkpoint, save_checkpoint,
    CheckpointMeta, Model, ModelGraph, SyntheticSample,
};
use crate::pruner::surgery::apply_plan;
use crate::pruner::{build_plan, PruningPlan};
use crate::rng::{seed_stream, subseed};
use crate::stats_file::{read_records, to_records, write_records};
use crate::train::{train_multitask, EpochLog, TrainLoopSettings};
use crate::PipelineScalar as P;

/// Forward passes behind the latency figure in a written eval report.
pub const LATENCY_RUNS: usize = 100;

/// Every written report carries this caveat: the metrics come from the toy
/// synthetic task and say nothing about full-scale benchmark numbers.
pub const METRIC_NOTE: &str = "toy synthetic-data metrics at desk scale; \
     not comparable to published full-scale benchmark results";

fn require_file(path: &Path, what: &str, stage: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "missing {what} at {}: run the {stage} stage first",
            path.display()
        )))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_epoch_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_splits(cfg: &PipelineConfig) -> Result<(Vec<SyntheticSample<P>>, Vec<SyntheticSample<P>>)> {
    Ok((
        generate_dataset(subseed(cfg.seed, "data/train"), cfg.dataset.n_train)?,
        generate_dataset(subseed(cfg.seed, "data/val"), cfg.dataset.n_val)?,
    ))
}

fn load_teacher(cfg: &PipelineConfig) -> Result<(Model<P>, CheckpointMeta)> {
    let path = cfg.paths.teacher_checkpoint();
    require_file(&path, "teacher checkpoint", "train")?;
    load_checkpoint(&path)
}

fn read_plan(path: &Path) -> Result<PruningPlan> {
    require_file(path, "pruning plan", "plan")?;
    let text = fs::read_to_string(path)?;
    let plan: PruningPlan = serde_json::from_str(&text).map_err(|e| {
        Error::Dependency(format!("unreadable pruning plan {}: {e}", path.display()))
    })?;
    plan.verify_hash()?;
    Ok(plan)
}

/// Reject a teacher checkpoint that is not the one the plan was built from.
fn check_plan_provenance(plan: &PruningPlan, teacher_path: &Path) -> Result<()> {
    let actual = file_sha256(teacher_path)?;
    let recorded = &plan.body.teacher_checkpoint_sha256;
    if actual != *recorded {
        return Err(Error::Dependency(format!(
            "teacher checkpoint {} (sha256 {}...) is not the one the plan was built from \
             ({}...); re-run the plan stage",
            teacher_path.display(),
            &actual[..12],
            &recorded[..recorded.len().min(12)],
        )));
    }
    Ok(())
}

fn percent_reduction(before: usize, after: usize) -> f64 {
    100.0 * (1.0 - after as f64 / before as f64)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub first_val_total: f64,
    pub final_val_total: f64,
    pub parameter_count: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "trained teacher: {} epochs, val task loss {:.4} -> {:.4}",
            self.epochs_run, self.first_val_total, self.final_val_total
        )?;
        writeln!(f, "parameters: {}", self.parameter_count)?;
        writeln!(f, "checkpoint: {}", self.checkpoint.display())?;
        write!(f, "epoch log: {}", self.log.display())
    }
}

pub fn run_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_data, val_data) = load_splits(cfg)?;
    let graph = ModelGraph::reference(&cfg.model)?;
    let mut init = seed_stream(cfg.seed, "init/teacher");
    let model = Model::<P>::init(graph, &mut init)?;
    let settings = TrainLoopSettings {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: cfg.seed,
        plateau_patience: cfg.train.plateau_patience,
    };
    let logs = train_multitask(&model, &train_data, &val_data, &settings)?;

    let checkpoint = cfg.paths.teacher_checkpoint();
    ensure_parent(&checkpoint)?;
    save_checkpoint(
        &checkpoint,
        &model,
        &CheckpointMeta { training_step: logs.len() as u64, seed: cfg.seed, plan_hash: None },
    )?;
    let log = cfg.paths.train_log();
    write_epoch_logs(&log, &logs)?;

    Ok(TrainSummary {
        epochs_run: logs.len(),
        first_val_total: logs.first().map_or(f64::NAN, |l| l.val_total),
        final_val_total: logs.last().map_or(f64::NAN, |l| l.val_total),
        parameter_count: model.parameter_count(),
        checkpoint,
        log,
    })
}

// -------------------------------------------------------------- collect

#[derive(Debug, Clone)]
pub struct CollectSummary {
    /// (layer id, channel count) for every prunable layer, graph order.
    pub layers: Vec<(String, usize)>,
    pub batches: usize,
    pub record_count: usize,
    pub stats_path: PathBuf,
}

impl fmt::Display for CollectSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "collected statistics over {} calibration batches", self.batches)?;
        for (id, channels) in &self.layers {
            writeln!(f, "  {id}: {channels} channels")?;
        }
        write!(f, "{} records -> {}", self.record_count, self.stats_path.display())
    }
}

/// One forward plus three per-task backward passes per batch, so every
/// gradient read at a tap is attributable to a single task.
pub fn collect_statistics(
    model: &Model<P>,
    calib: &[SyntheticSample<P>],
    batch_size: usize,
    epsilon: f64,
) -> Result<(Vec<ChannelStatistics>, Vec<ConflictReport>)> {
    let layers: Vec<(String, usize)> = model
        .graph
        .prunable_layers()
        .iter()
        .map(|n| (n.id.clone(), n.spec.out_channels))
        .collect();
    if layers.is_empty() {
        return Err(Error::Dependency("model has no prunable layers".into()));
    }
    if calib.is_empty() || batch_size == 0 {
        return Err(Error::InvalidParam {
            name: "calibration",
            detail: "needs at least one batch of at least one sample".into(),
        });
    }

    model.set_requires_grad(true);
    let tap_ids: Vec<&str> = layers.iter().map(|(id, _)| id.as_str()).collect();
    let mut stats: Vec<ChannelStatistics> = layers
        .iter()
        .map(|(id, channels)| ChannelStatistics::new(id.clone(), *channels))
        .collect();

    for chunk in calib.chunks(batch_size) {
        let b = batch(chunk)?;
        let (losses, taps) = forward_losses(model, &b, &tap_ids)?;
        for &task in &Task::ALL {
            Tensor::zero_gradients(&[
                losses.det.clone(),
                losses.da.clone(),
                losses.lane.clone(),
            ]);
            losses.get(task).backward()?;
            for ((id, _), stat) in layers.iter().zip(stats.iter_mut()) {
                let act = &taps[id.as_str()];
                let grad = act.grad().ok_or_else(|| {
                    Error::shape("collect", format!("no gradient reached tap '{id}'"))
                })?;
                let grad_t = Tensor::new(&act.shape(), grad)?;
                stat.accumulate(task, act, &grad_t)?;
            }
        }
    }

    let mut conflicts = Vec::with_capacity(stats.len());
    for s in &stats {
        let grads: BTreeMap<Task, Vec<f64>> =
            Task::ALL.iter().map(|&t| (t, s.avg_grad(t).to_vec())).collect();
        conflicts.push(conflict_report(s.layer_id.clone(), &grads, epsilon)?);
    }
    Ok((stats, conflicts))
}

pub fn run_collect(cfg: &PipelineConfig) -> Result<CollectSummary> {
    cfg.validate()?;
    let (model, _meta) = load_teacher(cfg)?;
    let n = cfg.pruning.calibration_batches * cfg.train.batch_size;
    let calib = generate_dataset::<P>(subseed(cfg.seed, "data/calib"), n)?;
    let (stats, conflicts) =
        collect_statistics(&model, &calib, cfg.train.batch_size, cfg.pruning.epsilon)?;
    let records = to_records(&stats, &conflicts);
    write_records(&cfg.paths.stats, &records)?;
    Ok(CollectSummary {
        layers: stats.iter().map(|s| (s.layer_id.clone(), s.channels())).collect(),
        batches: cfg.pruning.calibration_batches,
        record_count: records.len(),
        stats_path: cfg.paths.stats.clone(),
    })
}

// ----------------------------------------------------------------- plan

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRow {
    pub layer: String,
    pub channels: usize,
    pub kept: usize,
    pub pruned: usize,
    pub unsafe_channels: usize,
    pub shortfall: bool,
}

#[derive(Debug, Clone)]
pub struct PlanSummary {
    pub rows: Vec<PlanRow>,
    pub plan_hash: String,
    pub path: PathBuf,
}

impl fmt::Display for PlanSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>8} {:>6} {:>7} {:>7} {:>10}",
            "layer", "channels", "kept", "pruned", "unsafe", "shortfall"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<14} {:>8} {:>6} {:>7} {:>7} {:>10}",
                r.layer,
                r.channels,
                r.kept,
                r.pruned,
                r.unsafe_channels,
                if r.shortfall { "yes" } else { "no" },
            )?;
        }
        writeln!(f, "plan hash: {}", self.plan_hash)?;
        write!(f, "plan file: {}", self.path.display())
    }
}

fn plan_rows(plan: &PruningPlan) -> Vec<PlanRow> {
    plan.per_layer()
        .iter()
        .map(|(id, lp)| PlanRow {
            layer: id.clone(),
            channels: lp.channels,
            kept: lp.kept_count,
            pruned: lp.pruned_indices.len(),
            unsafe_channels: lp.safe.iter().filter(|s| !**s).count(),
            shortfall: lp.shortfall,
        })
        .collect()
}

pub fn run_plan(cfg: &PipelineConfig) -> Result<PlanSummary> {
    cfg.validate()?;
    let teacher_path = cfg.paths.teacher_checkpoint();
    require_file(&teacher_path, "teacher checkpoint", "train")?;
    require_file(&cfg.paths.stats, "statistics file", "collect")?;

    let records = read_records(&cfg.paths.stats)?;
    let (stats, conflicts) = crate::stats_file::from_records(&records)?;
    let aggregated = aggregate_importance(&stats, cfg.pruning.tau)?;
    let plan = build_plan(
        &aggregated,
        &conflicts,
        &cfg.pruning.settings(true),
        file_sha256(&teacher_path)?,
    )?;
    write_json(&cfg.paths.plan, &plan)?;
    Ok(PlanSummary {
        rows: plan_rows(&plan),
        plan_hash: plan.plan_hash.clone(),
        path: cfg.paths.plan.clone(),
    })
}

// ---------------------------------------------------------------- prune

#[derive(Debug, Clone)]
pub struct PruneSummary {
    /// (layer id, channels before, channels after) for every planned layer.
    pub rows: Vec<(String, usize, usize)>,
    pub params_before: usize,
    pub params_after: usize,
    pub reduction_pct: f64,
    pub checkpoint: PathBuf,
}

impl fmt::Display for PruneSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>8}", "layer", "before", "after")?;
        for (id, before, after) in &self.rows {
            writeln!(f, "{id:<14} {before:>8} {after:>8}")?;
        }
        writeln!(
            f,
            "parameters: {} -> {} ({:.1}% reduction)",
            self.params_before, self.params_after, self.reduction_pct
        )?;
        write!(f, "checkpoint: {}", self.checkpoint.display())
    }
}

pub fn run_prune(cfg: &PipelineConfig) -> Result<PruneSummary> {
    cfg.validate()?;
    let (teacher, meta) = load_teacher(cfg)?;
    let plan = read_plan(&cfg.paths.plan)?;
    check_plan_provenance(&plan, &cfg.paths.teacher_checkpoint())?;

    let pruned = apply_plan(&teacher, &plan)?;
    let params_before = teacher.parameter_count();
    let params_after = pruned.parameter_count();

    let checkpoint = cfg.paths.pruned_checkpoint();
    ensure_parent(&checkpoint)?;
    save_checkpoint(
        &checkpoint,
        &pruned,
        &CheckpointMeta {
            training_step: meta.training_step,
            seed: cfg.seed,
            plan_hash: Some(plan.plan_hash.clone()),
        },
    )?;

    Ok(PruneSummary {
        rows: plan
            .per_layer()
            .iter()
            .map(|(id, lp)| (id.clone(), lp.channels, lp.kept_count))
            .collect(),
        params_before,
        params_after,
        reduction_pct: percent_reduction(params_before, params_after),
        checkpoint,
    })
}

// -------------------------------------------------------------- distill

#[derive(Debug, Clone)]
pub struct DistillSummary {
    pub epochs_run: usize,
    pub warmup_epochs: usize,
    /// Mean feature loss of the first and last epochs with the feature term
    /// active; None when the whole run stayed in warm-up.
    pub kd_first: Option<f64>,
    pub kd_last: Option<f64>,
    pub final_val_total: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl fmt::Display for DistillSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "distilled student: {} epochs ({} warm-up)",
            self.epochs_run, self.warmup_epochs
        )?;
        if let (Some(first), Some(last)) = (self.kd_first, self.kd_last) {
            writeln!(f, "feature loss after warm-up: {first:.6} -> {last:.6}")?;
        }
        writeln!(f, "final val task loss: {:.4}", self.final_val_total)?;
        writeln!(f, "checkpoint: {}", self.checkpoint.display())?;
        write!(f, "epoch log: {}", self.log.display())
    }
}

/// Which teacher channel each surviving student channel came from, per
/// planned layer. Seeds the student-side projections as partial identities.
fn kept_channel_maps(plan: &PruningPlan) -> BTreeMap<String, Vec<usize>> {
    plan.per_layer()
        .iter()
        .map(|(id, lp)| (id.clone(), lp.kept_indices()))
        .collect()
}

pub fn run_distill(cfg: &PipelineConfig) -> Result<DistillSummary> {
    cfg.validate()?;
    let (teacher, _teacher_meta) = load_teacher(cfg)?;
    let plan = read_plan(&cfg.paths.plan)?;
    check_plan_provenance(&plan, &cfg.paths.teacher_checkpoint())?;

    let pruned_path = cfg.paths.pruned_checkpoint();
    require_file(&pruned_path, "pruned checkpoint", "prune")?;
    let (student, student_meta) = load_checkpoint::<P>(&pruned_path)?;
    if student_meta.plan_hash.as_deref() != Some(plan.plan_hash.as_str()) {
        return Err(Error::Dependency(format!(
            "pruned checkpoint {} was not produced by the current plan; re-run the prune stage",
            pruned_path.display()
        )));
    }

    let (train_data, val_data) = load_splits(cfg)?;
    let settings = DistillRunSettings {
        epochs: cfg.distill.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.distill.lr,
        beta: cfg.distill.beta,
        warmup_epochs: cfg.distill.resolved_warmup(),
        teacher_half_precision: cfg.distill.teacher_half_precision,
        seed: cfg.seed,
        plateau_patience: cfg.train.plateau_patience,
    };
    let (logs, _projections) = run_distillation(
        &student,
        &teacher,
        &cfg.distill.pairs,
        cfg.distill.projection_dim,
        &kept_channel_maps(&plan),
        &train_data,
        &val_data,
        &settings,
    )?;

    let checkpoint = cfg.paths.distilled_checkpoint();
    ensure_parent(&checkpoint)?;
    save_checkpoint(
        &checkpoint,
        &student,
        &CheckpointMeta {
            training_step: student_meta.training_step + logs.len() as u64,
            seed: cfg.seed,
            plan_hash: student_meta.plan_hash.clone(),
        },
    )?;
    let log = cfg.paths.distill_log();
    write_epoch_logs(&log, &logs)?;

    Ok(DistillSummary {
        epochs_run: logs.len(),
        warmup_epochs: settings.warmup_epochs,
        kd_first: logs.iter().find(|l| l.beta_effective > 0.0).map(|l| l.kd),
        kd_last: logs.iter().rev().find(|l| l.beta_effective > 0.0).map(|l| l.kd),
        final_val_total: logs.last().map_or(f64::NAN, |l| l.val_total),
        checkpoint,
        log,
    })
}

// ----------------------------------------------------------------- eval

/// Written eval report: the target checkpoint's metrics next to the teacher
/// baseline and the differences (latency excluded — it is a wall-time proxy).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalFile {
    pub note: String,
    pub checkpoint: String,
    pub model: EvalReport,
    pub teacher: EvalReport,
    pub deltas: MetricDeltas,
    pub config_echo: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub file: EvalFile,
    pub path: PathBuf,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.file.model;
        let d = &self.file.deltas;
        writeln!(f, "evaluation of {}", self.file.checkpoint)?;
        writeln!(f, "note: {}", self.file.note)?;
        writeln!(
            f,
            "task losses: det {:.4} | da {:.4} | lane {:.4} | total {:.4}",
            m.det_loss, m.da_loss, m.lane_loss, m.total_loss
        )?;
        writeln!(
            f,
            "pixel accuracy: da {:.4} | lane {:.4} | box mse {:.5}",
            m.da_pixel_accuracy, m.lane_pixel_accuracy, m.box_mse
        )?;
        writeln!(
            f,
            "parameters: {} | latency: {:.3} ms median of {} runs",
            m.parameter_count, m.latency_ms_median, LATENCY_RUNS
        )?;
        writeln!(
            f,
            "vs teacher: total {:+.4} | da acc {:+.4} | lane acc {:+.4} | box mse {:+.5} | params {:+}",
            d.total_loss, d.da_pixel_accuracy, d.lane_pixel_accuracy, d.box_mse, d.parameter_count
        )?;
        write!(f, "report: {}", self.path.display())
    }
}

pub fn run_eval(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    cfg.validate()?;
    let teacher_path = cfg.paths.teacher_checkpoint();
    require_file(&teacher_path, "teacher checkpoint", "train")?;
    let target_path = checkpoint.map_or_else(|| teacher_path.clone(), Path::to_path_buf);
    if !target_path.is_file() {
        return Err(Error::Dependency(format!(
            "missing checkpoint {}",
            target_path.display()
        )));
    }

    let val_data = generate_dataset::<P>(subseed(cfg.seed, "data/val"), cfg.dataset.n_val)?;
    let (teacher, _) = load_checkpoint::<P>(&teacher_path)?;
    let teacher_report = evaluate(&teacher, &val_data, cfg.train.batch_size, LATENCY_RUNS)?;

    let same_as_teacher = match (fs::canonicalize(&target_path), fs::canonicalize(&teacher_path))
    {
        (Ok(a), Ok(b)) => a == b,
        _ => target_path == teacher_path,
    };
    let model_report = if same_as_teacher {
        teacher_report.clone()
    } else {
        let (model, _) = load_checkpoint::<P>(&target_path)?;
        evaluate(&model, &val_data, cfg.train.batch_size, LATENCY_RUNS)?
    };

    let file = EvalFile {
        note: METRIC_NOTE.into(),
        checkpoint: target_path.display().to_string(),
        deltas: metric_deltas(&model_report, &teacher_report),
        model: model_report,
        teacher: teacher_report,
        config_echo: cfg.clone(),
    };
    let path = cfg.paths.eval_report();
    write_json(&path, &file)?;
    Ok(EvalSummary { file, path })
}

// ------------------------------------------------------------- ablation

/// One rung of the ladder. Latency is deliberately absent: rows must be
/// bit-identical across reruns, and wall time is not.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub parameter_count: usize,
    pub param_reduction_pct: f64,
    pub det_loss: f64,
    pub da_loss: f64,
    pub lane_loss: f64,
    pub total_loss: f64,
    pub da_pixel_accuracy: f64,
    pub lane_pixel_accuracy: f64,
    pub box_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub note: String,
    pub rows: Vec<AblationRow>,
    pub config_echo: PipelineConfig,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>8} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
            "row", "params", "params-%", "det", "da", "lane", "total", "da-acc", "lane-acc",
            "box-mse"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>8} {:>9.1} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.5}\n",
                r.name,
                r.parameter_count,
                r.param_reduction_pct,
                r.det_loss,
                r.da_loss,
                r.lane_loss,
                r.total_loss,
                r.da_pixel_accuracy,
                r.lane_pixel_accuracy,
                r.box_mse,
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub report: AblationReport,
    pub path: PathBuf,
}

impl fmt::Display for AblationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.report.table())?;
        writeln!(f, "note: {}", self.report.note)?;
        write!(f, "report: {}", self.path.display())
    }
}

/// Four-row ladder over the same teacher: (1) the teacher, (2) pruned on
/// importance alone then fine-tuned, (3) pruned with the conflict penalty
/// then fine-tuned, (4) pruned with the conflict penalty then distilled.
/// Rows 2-4 share the epoch budget, learning rate, and batch schedule, so
/// the penalty and the feature term are the only things that vary.
pub fn run_ablation(cfg: &PipelineConfig) -> Result<AblationSummary> {
    cfg.validate()?;
    let (train_data, val_data) = load_splits(cfg)?;

    // A trained teacher checkpoint is reused when present; otherwise the
    // ladder trains one in memory with exactly the streams run_train uses,
    // which yields the identical model.
    let teacher_path = cfg.paths.teacher_checkpoint();
    let teacher: Model<P> = if teacher_path.is_file() {
        load_checkpoint::<P>(&teacher_path)?.0
    } else {
        let graph = ModelGraph::reference(&cfg.model)?;
        let mut init = seed_stream(cfg.seed, "init/teacher");
        let model = Model::<P>::init(graph, &mut init)?;
        let settings = TrainLoopSettings {
            epochs: cfg.train.epochs,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            seed: cfg.seed,
            plateau_patience: cfg.train.plateau_patience,
        };
        train_multitask(&model, &train_data, &val_data, &settings)?;
        model
    };

    let calib = generate_dataset::<P>(
        subseed(cfg.seed, "data/calib"),
        cfg.pruning.calibration_batches * cfg.train.batch_size,
    )?;
    let (stats, conflicts) =
        collect_statistics(&teacher, &calib, cfg.train.batch_size, cfg.pruning.epsilon)?;
    let aggregated = aggregate_importance(&stats, cfg.pruning.tau)?;
    // In-memory provenance: the plan records the parameter digest rather
    // than a file hash, since the ladder never needs to persist its plans.
    let provenance = teacher.param_checksum();
    let plan_plain = build_plan(&aggregated, &conflicts, &cfg.pruning.settings(false), &*provenance)?;
    let plan_conflict =
        build_plan(&aggregated, &conflicts, &cfg.pruning.settings(true), &*provenance)?;

    let teacher_params = teacher.parameter_count();
    let row = |name: &str, report: &EvalReport| AblationRow {
        name: name.into(),
        parameter_count: report.parameter_count,
        param_reduction_pct: percent_reduction(teacher_params, report.parameter_count),
        det_loss: report.det_loss,
        da_loss: report.da_loss,
        lane_loss: report.lane_loss,
        total_loss: report.total_loss,
        da_pixel_accuracy: report.da_pixel_accuracy,
        lane_pixel_accuracy: report.lane_pixel_accuracy,
        box_mse: report.box_mse,
    };
    let eval_row = |model: &Model<P>| evaluate(model, &val_data, cfg.train.batch_size, 0);

    let mut rows = Vec::with_capacity(4);
    rows.push(row("teacher", &eval_row(&teacher)?));

    // No plateau stop in the ladder: every rung gets the full budget so the
    // rows stay comparable.
    let finetune = TrainLoopSettings {
        epochs: cfg.distill.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.distill.lr,
        seed: cfg.seed,
        plateau_patience: None,
    };

    let student = apply_plan(&teacher, &plan_plain)?;
    train_multitask(&student, &train_data, &val_data, &finetune)?;
    rows.push(row("prune", &eval_row(&student)?));

    let student = apply_plan(&teacher, &plan_conflict)?;
    train_multitask(&student, &train_data, &val_data, &finetune)?;
    rows.push(row("prune+conflict", &eval_row(&student)?));

    let student = apply_plan(&teacher, &plan_conflict)?;
    let distill = DistillRunSettings {
        epochs: cfg.distill.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.distill.lr,
        beta: cfg.distill.beta,
        warmup_epochs: cfg.distill.resolved_warmup(),
        teacher_half_precision: cfg.distill.teacher_half_precision,
        seed: cfg.seed,
        plateau_patience: None,
    };
    run_distillation(
        &student,
        &teacher,
        &cfg.distill.pairs,
        cfg.distill.projection_dim,
        &kept_channel_maps(&plan_conflict),
        &train_data,
        &val_data,
        &distill,
    )?;
    rows.push(row("prune+conflict+distill", &eval_row(&student)?));

    let report = AblationReport { note: METRIC_NOTE.into(), rows, config_echo: cfg.clone() };
    let path = cfg.paths.ablation_report();
    write_json(&path, &report)?;
    Ok(AblationSummary { report, path })
}
