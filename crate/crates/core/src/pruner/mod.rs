//! Channel selection: a safety gate keeps task-critical channels out of the
//! candidate pool, survivors are ranked by unified importance minus a
//! conflict discount, and the kept count is aligned up to a hardware-friendly
//! multiple before structural surgery.

pub mod surgery;

use std::collections::BTreeMap;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::conflict::ConflictReport;
use crate::error::{Error, Result};
use crate::importance::AggregatedImportance;

/// Channel score. Finite for prunable candidates; +inf marks a channel the
/// gate refused, which no selection can ever pick. Serialized as a JSON
/// number when finite and as the string "inf" otherwise, because JSON has no
/// infinity literal.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub const NEVER_PRUNE: Score = Score(f64::INFINITY);

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl Serialize for Score {
    fn serialize<Se: Serializer>(&self, serializer: Se) -> std::result::Result<Se::Ok, Se::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct ScoreVisitor;
        impl<'de> Visitor<'de> for ScoreVisitor {
            type Value = Score;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Score, E> {
                Ok(Score(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Score, E> {
                Ok(Score(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Score, E> {
                Ok(Score(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Score, E> {
                if v == "inf" {
                    Ok(Score::NEVER_PRUNE)
                } else {
                    Err(E::custom(format!("unexpected score string {v:?}")))
                }
            }
        }
        deserializer.deserialize_any(ScoreVisitor)
    }
}

/// Thresholds and weights driving the gate and selection; echoed verbatim
/// into every plan so artifacts are self-describing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PruneSettings {
    pub tau: f64,
    pub epsilon: f64,
    pub theta_max: f64,
    pub theta_avg: f64,
    pub theta_pen: f64,
    pub lambda: f64,
    pub rate: f64,
    pub granularity: usize,
    pub use_conflict_penalty: bool,
}

/// A channel may be pruned only if no task leans on it hard (i_max below
/// threshold) and it is either broadly unimportant (i_avg below threshold)
/// or actively fought over (penalty above threshold, meaning tasks pull its
/// weights in opposite directions and removal relieves interference).
pub fn safe_gate(i_max: f64, i_avg: f64, penalty: f64, settings: &PruneSettings) -> bool {
    i_max < settings.theta_max && (i_avg < settings.theta_avg || penalty > settings.theta_pen)
}

/// Rank for ascending-order pruning: low unified importance and high
/// conflict both push a safe channel toward removal. Unsafe channels get the
/// +inf sentinel.
pub fn pruning_score(unified: f64, penalty: f64, safe: bool, lambda: f64) -> Score {
    if safe {
        Score(unified - lambda * penalty)
    } else {
        Score::NEVER_PRUNE
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Ascending original channel indices to remove.
    pub pruned_indices: Vec<usize>,
    pub kept_count: usize,
    /// True when fewer safe channels existed than the rate asked to remove;
    /// only safe ones were pruned and alignment was waived.
    pub shortfall: bool,
}

/// Pick channels to prune from per-channel scores.
///
/// kept = ceil(C * (1 - rate)) rounded UP to the next multiple of
/// `granularity` (capped at C), so pruning never exceeds the requested rate
/// and surviving widths stay aligned. Candidates are the finite-score
/// channels, lowest score first, ties broken toward the lower index.
pub fn select_channels(scores: &[Score], rate: f64, granularity: usize) -> Result<Selection> {
    let channels = scores.len();
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidParam {
            name: "rate",
            detail: format!("pruning rate must be inside (0, 1), got {rate}"),
        });
    }
    if granularity == 0 {
        return Err(Error::InvalidParam {
            name: "granularity",
            detail: "alignment granularity must be at least 1".into(),
        });
    }
    if channels < granularity {
        return Err(Error::InvalidParam {
            name: "granularity",
            detail: format!("layer has {channels} channels, fewer than granularity {granularity}"),
        });
    }

    let raw_kept = (channels as f64 * (1.0 - rate)).ceil() as usize;
    let aligned_kept = (raw_kept.div_ceil(granularity) * granularity).min(channels);
    let target = channels - aligned_kept;

    let mut candidates: Vec<usize> = (0..channels).filter(|&i| scores[i].is_finite()).collect();
    candidates.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores are totally ordered")
            .then(a.cmp(&b))
    });

    if candidates.len() < target {
        let mut pruned = candidates;
        pruned.sort_unstable();
        let kept_count = channels - pruned.len();
        return Ok(Selection { pruned_indices: pruned, kept_count, shortfall: true });
    }

    let mut pruned: Vec<usize> = candidates[..target].to_vec();
    pruned.sort_unstable();
    Ok(Selection { pruned_indices: pruned, kept_count: aligned_kept, shortfall: false })
}

/// Per-layer slice of a pruning plan, in original channel coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerPlan {
    pub channels: usize,
    pub scores: Vec<Score>,
    pub safe: Vec<bool>,
    pub pruned_indices: Vec<usize>,
    pub kept_count: usize,
    pub shortfall: bool,
}

impl LayerPlan {
    pub fn kept_indices(&self) -> Vec<usize> {
        let mut kept = Vec::with_capacity(self.kept_count);
        let mut pruned = self.pruned_indices.iter().peekable();
        for c in 0..self.channels {
            if pruned.peek() == Some(&&c) {
                pruned.next();
            } else {
                kept.push(c);
            }
        }
        kept
    }
}

/// Everything hashed into plan_hash: the decisions, the settings that
/// produced them, and the identity of the network they were computed for.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanBody {
    pub per_layer: BTreeMap<String, LayerPlan>,
    pub config_echo: PruneSettings,
    pub teacher_checkpoint_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PruningPlan {
    #[serde(flatten)]
    pub body: PlanBody,
    pub plan_hash: String,
}

impl PruningPlan {
    pub fn per_layer(&self) -> &BTreeMap<String, LayerPlan> {
        &self.body.per_layer
    }

    /// Recompute the hash over the body and compare with the stored one.
    pub fn verify_hash(&self) -> Result<()> {
        let expected = hash_body(&self.body)?;
        if expected != self.plan_hash {
            return Err(Error::Dependency(format!(
                "plan hash mismatch: stored {} but body hashes to {expected}",
                self.plan_hash
            )));
        }
        Ok(())
    }
}

fn hash_body(body: &PlanBody) -> Result<String> {
    let bytes = serde_json::to_vec(body)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Gate, score and select for every prunable layer, producing the complete
/// plan. `conflicts` must carry a report for each layer in `aggregated`;
/// when `use_conflict_penalty` is off the penalty is treated as zero in both
/// the gate and the score, and the reports are only consulted for their
/// channel counts.
pub fn build_plan(
    aggregated: &[AggregatedImportance],
    conflicts: &[ConflictReport],
    settings: &PruneSettings,
    teacher_checkpoint_sha256: impl Into<String>,
) -> Result<PruningPlan> {
    let conflict_by_layer: BTreeMap<&str, &ConflictReport> =
        conflicts.iter().map(|c| (c.layer_id.as_str(), c)).collect();

    let mut per_layer = BTreeMap::new();
    for agg in aggregated {
        let channels = agg.unified.len();
        let conflict = conflict_by_layer.get(agg.layer_id.as_str()).ok_or_else(|| {
            Error::Dependency(format!("no conflict report for layer '{}'", agg.layer_id))
        })?;
        if conflict.channels() != channels {
            return Err(Error::shape(
                "build_plan",
                format!(
                    "layer '{}': {channels} importance channels vs {} conflict channels",
                    agg.layer_id,
                    conflict.channels()
                ),
            ));
        }

        let mut scores = Vec::with_capacity(channels);
        let mut safe = Vec::with_capacity(channels);
        for c in 0..channels {
            let penalty = if settings.use_conflict_penalty { conflict.penalty[c] } else { 0.0 };
            let is_safe = safe_gate(agg.i_max[c], agg.i_avg[c], penalty, settings);
            safe.push(is_safe);
            scores.push(pruning_score(agg.unified[c], penalty, is_safe, settings.lambda));
        }

        let selection = select_channels(&scores, settings.rate, settings.granularity)?;
        for &c in &selection.pruned_indices {
            assert!(safe[c], "selection must never touch a gated channel");
        }
        per_layer.insert(
            agg.layer_id.clone(),
            LayerPlan {
                channels,
                scores,
                safe,
                pruned_indices: selection.pruned_indices,
                kept_count: selection.kept_count,
                shortfall: selection.shortfall,
            },
        );
    }

    let body = PlanBody {
        per_layer,
        config_echo: settings.clone(),
        teacher_checkpoint_sha256: teacher_checkpoint_sha256.into(),
    };
    let plan_hash = hash_body(&body)?;
    Ok(PruningPlan { body, plan_hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Task;
    use rand::Rng;

    fn settings() -> PruneSettings {
        PruneSettings {
            tau: 0.25,
            epsilon: 1e-12,
            theta_max: 0.2,
            theta_avg: 0.2,
            theta_pen: 0.3,
            lambda: 0.2,
            rate: 0.4,
            granularity: 8,
            use_conflict_penalty: true,
        }
    }

    #[test]
    fn gate_branches() {
        let s = settings();
        // Broadly unimportant: prunable.
        assert!(safe_gate(0.1, 0.1, 0.0, &s));
        // Critical somewhere: never prunable, whatever the rest says.
        assert!(!safe_gate(0.25, 0.1, 0.9, &s));
        // Middling average importance rescued only by high conflict.
        assert!(!safe_gate(0.15, 0.3, 0.1, &s));
        assert!(safe_gate(0.15, 0.3, 0.5, &s));
        // Boundary values are exclusive.
        assert!(!safe_gate(0.2, 0.1, 0.0, &s));
        assert!(!safe_gate(0.1, 0.2, 0.3, &s));
    }

    #[test]
    fn score_discounts_conflict_and_walls_off_unsafe() {
        assert_eq!(pruning_score(0.5, 0.5, true, 0.2), Score(0.4));
        assert_eq!(pruning_score(0.0, 0.0, false, 0.2), Score::NEVER_PRUNE);
        assert!(!pruning_score(0.0, 0.0, false, 0.2).is_finite());
    }

    #[test]
    fn score_serde_round_trips_inf_as_string() {
        let v = vec![Score(0.25), Score::NEVER_PRUNE, Score(-1.5)];
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, "[0.25,\"inf\",-1.5]");
        let back: Vec<Score> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Score>("\"nan\"").is_err());
    }

    fn all_safe(scores: Vec<f64>) -> Vec<Score> {
        scores.into_iter().map(Score).collect()
    }

    #[test]
    fn selection_aligns_kept_count_up() {
        // 32 channels at rate 0.4: raw kept 20, aligned 24, prune 8.
        let scores = all_safe((0..32).map(|i| i as f64).collect());
        let sel = select_channels(&scores, 0.4, 8).unwrap();
        assert_eq!(sel.kept_count, 24);
        assert_eq!(sel.pruned_indices, (0..8).collect::<Vec<_>>());
        assert!(!sel.shortfall);

        // 64 channels: raw kept 39, aligned 40, prune 24.
        let scores = all_safe((0..64).map(|i| i as f64).collect());
        let sel = select_channels(&scores, 0.4, 8).unwrap();
        assert_eq!(sel.kept_count, 40);
        assert_eq!(sel.pruned_indices.len(), 24);

        // 16 channels: raw kept 10, aligned 16 = everything; nothing pruned.
        let scores = all_safe((0..16).map(|i| i as f64).collect());
        let sel = select_channels(&scores, 0.4, 8).unwrap();
        assert_eq!(sel.kept_count, 16);
        assert!(sel.pruned_indices.is_empty());
    }

    #[test]
    fn selection_prefers_lowest_scores_with_index_tiebreak() {
        let mut scores = all_safe(vec![5.0; 32]);
        scores[7] = Score(1.0);
        scores[3] = Score(1.0);
        scores[20] = Score(0.5);
        let sel = select_channels(&scores, 0.4, 8).unwrap();
        // Prune 8: 20 (lowest), then ties 3 before 7, then 5.0-ties by index.
        assert!(sel.pruned_indices.contains(&20));
        assert!(sel.pruned_indices.contains(&3));
        assert!(sel.pruned_indices.contains(&7));
        assert_eq!(sel.pruned_indices, vec![0, 1, 2, 3, 4, 5, 7, 20]);
    }

    #[test]
    fn shortfall_prunes_only_safe_and_waives_alignment() {
        // 32 channels, target prune 8, but only 5 are safe.
        let mut scores = vec![Score::NEVER_PRUNE; 32];
        for i in 0..5 {
            scores[i] = Score(i as f64);
        }
        let sel = select_channels(&scores, 0.4, 8).unwrap();
        assert!(sel.shortfall);
        assert_eq!(sel.pruned_indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(sel.kept_count, 27, "alignment waived under shortfall");
    }

    #[test]
    fn tiny_rate_prunes_nothing() {
        let scores = all_safe((0..32).map(|i| i as f64).collect());
        let sel = select_channels(&scores, 0.01, 8).unwrap();
        assert!(sel.pruned_indices.is_empty());
        assert_eq!(sel.kept_count, 32);
    }

    #[test]
    fn invalid_rate_and_granularity_rejected() {
        let scores = all_safe(vec![1.0; 16]);
        assert!(select_channels(&scores, 0.0, 8).is_err());
        assert!(select_channels(&scores, 1.0, 8).is_err());
        assert!(select_channels(&scores, -0.1, 8).is_err());
        assert!(select_channels(&scores, 0.4, 0).is_err());
        // Fewer channels than the alignment unit.
        assert!(select_channels(&all_safe(vec![1.0; 4]), 0.4, 8).is_err());
    }

    #[test]
    fn growing_rate_prunes_supersets() {
        let mut rng = crate::rng::seed_stream(7, "test/monotone");
        let scores = all_safe((0..64).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut previous: Vec<usize> = Vec::new();
        for rate in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
            let sel = select_channels(&scores, rate, 8).unwrap();
            for idx in &previous {
                assert!(
                    sel.pruned_indices.contains(idx),
                    "rate {rate} lost channel {idx} pruned at a lower rate"
                );
            }
            previous = sel.pruned_indices;
        }
    }

    fn toy_aggregated(layer: &str, i_max: Vec<f64>, i_avg: Vec<f64>, unified: Vec<f64>) -> AggregatedImportance {
        let normalized = Task::ALL.iter().map(|&t| (t, unified.clone())).collect();
        AggregatedImportance { layer_id: layer.into(), normalized, unified, i_max, i_avg }
    }

    fn toy_conflict(layer: &str, penalty: Vec<f64>) -> ConflictReport {
        ConflictReport { layer_id: layer.into(), pairwise: vec![], penalty }
    }

    #[test]
    fn build_plan_is_deterministic_and_hash_verifies() {
        let agg = vec![toy_aggregated(
            "backbone.c1",
            vec![0.1; 16],
            vec![0.1; 16],
            (0..16).map(|i| i as f64 / 16.0).collect(),
        )];
        let conf = vec![toy_conflict("backbone.c1", vec![0.0; 16])];
        let a = build_plan(&agg, &conf, &settings(), "abc").unwrap();
        let b = build_plan(&agg, &conf, &settings(), "abc").unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        a.verify_hash().unwrap();

        let mut tampered = a.clone();
        tampered.body.per_layer.get_mut("backbone.c1").unwrap().kept_count = 8;
        assert!(tampered.verify_hash().is_err());
    }

    #[test]
    fn build_plan_penalty_toggle_changes_gate_and_score() {
        // i_avg too high for the plain branch; only the conflict branch can
        // open the gate.
        let agg = vec![toy_aggregated(
            "l",
            vec![0.1; 16],
            vec![0.3; 16],
            vec![0.5; 16],
        )];
        let conf = vec![toy_conflict("l", vec![0.9; 16])];
        let mut s = settings();
        s.rate = 0.5;
        let with = build_plan(&agg, &conf, &s, "h").unwrap();
        assert_eq!(with.per_layer()["l"].safe, vec![true; 16]);
        assert!((with.per_layer()["l"].scores[0].0 - (0.5 - 0.2 * 0.9)).abs() < 1e-15);
        assert_eq!(with.per_layer()["l"].pruned_indices.len(), 8);

        s.use_conflict_penalty = false;
        let without = build_plan(&agg, &conf, &s, "h").unwrap();
        assert_eq!(without.per_layer()["l"].safe, vec![false; 16]);
        assert!(without.per_layer()["l"].pruned_indices.is_empty());
        assert!(without.per_layer()["l"].shortfall);
        assert_ne!(with.plan_hash, without.plan_hash);
    }

    #[test]
    fn build_plan_requires_matching_conflict_reports() {
        let agg = vec![toy_aggregated("l", vec![0.1; 8], vec![0.1; 8], vec![0.0; 8])];
        assert!(build_plan(&agg, &[], &settings(), "h").is_err());
        let conf = vec![toy_conflict("l", vec![0.0; 4])];
        assert!(build_plan(&agg, &conf, &settings(), "h").is_err());
    }

    #[test]
    fn kept_indices_complement_pruned() {
        let plan = LayerPlan {
            channels: 6,
            scores: all_safe(vec![0.0; 6]),
            safe: vec![true; 6],
            pruned_indices: vec![1, 4],
            kept_count: 4,
            shortfall: false,
        };
        assert_eq!(plan.kept_indices(), vec![0, 2, 3, 5]);
    }

    #[test]
    fn gate_never_prunes_unsafe_across_random_inputs() {
        let mut rng = crate::rng::seed_stream(11, "test/gate-random");
        let s = settings();
        for _ in 0..200 {
            let c = 16;
            let agg = toy_aggregated(
                "l",
                (0..c).map(|_| rng.random_range(0.0..0.4)).collect(),
                (0..c).map(|_| rng.random_range(0.0..0.4)).collect(),
                (0..c).map(|_| rng.random_range(-0.3..1.0)).collect(),
            );
            let conf = toy_conflict("l", (0..c).map(|_| rng.random_range(0.0..1.0)).collect());
            let plan = build_plan(
                std::slice::from_ref(&agg),
                std::slice::from_ref(&conf),
                &s,
                "h",
            )
            .unwrap();
            let lp = &plan.per_layer()["l"];
            for &idx in &lp.pruned_indices {
                assert!(lp.safe[idx]);
                assert!(safe_gate(agg.i_max[idx], agg.i_avg[idx], conf.penalty[idx], &s));
            }
            assert_eq!(lp.kept_count + lp.pruned_indices.len(), c);
        }
    }
}
