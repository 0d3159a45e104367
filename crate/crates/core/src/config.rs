//! Pipeline configuration: strict JSON (unknown keys are errors), with every
//! field defaulted so an empty object is the reference setup. Numeric
//! defaults follow the method's published operating point; sizes default to
//! the toy scale this crate trains at.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillPair;
use crate::error::{Error, Result};
use crate::model::ArchOverrides;
use crate::pruner::PruneSettings;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ArchOverrides,
    pub pruning: PruningConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ArchOverrides::default(),
            pruning: PruningConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_train: 64, n_val: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    /// Softmin temperature for cross-task fusion.
    pub tau: f64,
    /// Guard term in the gradient-similarity denominator.
    pub epsilon: f64,
    pub theta_max: f64,
    pub theta_avg: f64,
    pub theta_pen: f64,
    /// Conflict discount weight in the pruning score.
    pub lambda: f64,
    /// Fraction of channels targeted for removal per prunable layer.
    pub rate: f64,
    /// Kept channel counts are aligned up to a multiple of this.
    pub granularity: usize,
    /// Calibration batches accumulated per task during collect.
    pub calibration_batches: usize,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            tau: 0.25,
            epsilon: 1e-12,
            theta_max: 0.2,
            theta_avg: 0.2,
            theta_pen: 0.3,
            lambda: 0.2,
            rate: 0.4,
            granularity: 8,
            calibration_batches: 32,
        }
    }
}

impl PruningConfig {
    pub fn settings(&self, use_conflict_penalty: bool) -> PruneSettings {
        PruneSettings {
            tau: self.tau,
            epsilon: self.epsilon,
            theta_max: self.theta_max,
            theta_avg: self.theta_avg,
            theta_pen: self.theta_pen,
            lambda: self.lambda,
            rate: self.rate,
            granularity: self.granularity,
            use_conflict_penalty,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Feature-matching edges (student tap, teacher tap).
    pub pairs: Vec<DistillPair>,
    /// Weight of the feature term in the total loss.
    pub beta: f64,
    /// Fraction of epochs trained with the feature term off, rounded to the
    /// nearest epoch; `warmup_epochs` overrides it when set.
    pub warmup_ratio: f64,
    pub warmup_epochs: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Quantize teacher tap activations to binary16 before matching.
    pub teacher_half_precision: bool,
    /// Common projection width per pair; defaults to the teacher tap width.
    pub projection_dim: Option<usize>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            pairs: vec![
                DistillPair { student: "backbone.c2".into(), teacher: "backbone.c2".into() },
                DistillPair { student: "backbone.c3".into(), teacher: "backbone.c3".into() },
                DistillPair { student: "encoder.c1".into(), teacher: "encoder.c1".into() },
            ],
            beta: 1.0,
            warmup_ratio: 0.04,
            warmup_epochs: None,
            epochs: 40,
            lr: 0.01,
            teacher_half_precision: true,
            projection_dim: None,
        }
    }
}

impl DistillConfig {
    /// Warm-up epochs resolved against the epoch budget.
    pub fn resolved_warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| (self.warmup_ratio * self.epochs as f64).round() as usize)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop teacher training after this many epochs without validation
    /// improvement; null trains the full budget.
    pub plateau_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 8, lr: 0.05, plateau_patience: Some(5) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory for model checkpoints.
    pub checkpoints: PathBuf,
    /// Calibration statistics file (JSON lines).
    pub stats: PathBuf,
    /// Pruning plan file (JSON).
    pub plan: PathBuf,
    /// Directory for epoch logs and reports.
    pub logs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            checkpoints: "artifacts/checkpoints".into(),
            stats: "artifacts/stats.jsonl".into(),
            plan: "artifacts/plan.json".into(),
            logs: "artifacts/logs".into(),
        }
    }
}

impl PathsConfig {
    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("teacher.ckpt")
    }
    pub fn pruned_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("pruned.ckpt")
    }
    pub fn distilled_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("distilled.ckpt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.logs.join("train.jsonl")
    }
    pub fn distill_log(&self) -> PathBuf {
        self.logs.join("distill.jsonl")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.logs.join("eval.json")
    }
    pub fn ablation_report(&self) -> PathBuf {
        self.logs.join("ablation.json")
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pruning;
        let checks: [(&str, bool, String); 12] = [
            ("tau", p.tau > 0.0, format!("must be positive, got {}", p.tau)),
            ("epsilon", p.epsilon > 0.0, format!("must be positive, got {}", p.epsilon)),
            (
                "rate",
                p.rate > 0.0 && p.rate < 1.0,
                format!("must be inside (0, 1), got {}", p.rate),
            ),
            ("granularity", p.granularity >= 1, "must be at least 1".into()),
            (
                "calibration_batches",
                p.calibration_batches >= 1,
                "must be at least 1".into(),
            ),
            ("lambda", p.lambda >= 0.0, format!("must be >= 0, got {}", p.lambda)),
            (
                "theta_max",
                p.theta_max >= 0.0 && p.theta_avg >= 0.0 && p.theta_pen >= 0.0,
                "gate thresholds must be >= 0".into(),
            ),
            ("n_train", self.dataset.n_train >= 1, "must be at least 1".into()),
            ("n_val", self.dataset.n_val >= 1, "must be at least 1".into()),
            (
                "beta",
                self.distill.beta >= 0.0 && self.distill.beta.is_finite(),
                format!("must be finite and >= 0, got {}", self.distill.beta),
            ),
            (
                "warmup_ratio",
                (0.0..=1.0).contains(&self.distill.warmup_ratio),
                format!("must be in [0, 1], got {}", self.distill.warmup_ratio),
            ),
            (
                "pairs",
                self.distill.beta == 0.0 || !self.distill.pairs.is_empty(),
                "distillation with beta > 0 needs at least one feature pair".into(),
            ),
        ];
        for (name, ok, detail) in checks {
            if !ok {
                return Err(Error::Config(format!("{name}: {detail}")));
            }
        }
        if self.train.epochs == 0 || self.distill.epochs == 0 {
            return Err(Error::Config(
                "epochs: no training performed with a zero epoch budget".into(),
            ));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size: must be at least 1".into()));
        }
        for (name, lr) in [("train.lr", self.train.lr), ("distill.lr", self.distill.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name}: must be positive and finite, got {lr}"
                )));
            }
        }
        Ok(())
    }
}
