//! JSON-lines persistence for calibration statistics: three importance
//! records per prunable layer (one per task) followed by one conflict record
//! per layer. Field order is fixed by the structs, so identical inputs
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conflict::{ConflictReport, PairSimilarity};
use crate::error::{Error, Result};
use crate::importance::{ChannelStatistics, Task};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StatsRecord {
    Importance {
        layer_id: String,
        task: Task,
        channels: usize,
        importance: Vec<f64>,
        avg_grad: Vec<f64>,
        batches: u64,
    },
    Conflict {
        layer_id: String,
        channels: usize,
        pairwise: Vec<PairSimilarity>,
        penalty: Vec<f64>,
    },
}

/// Flatten accumulators and conflict reports into the record stream:
/// per layer in input order, det/da/lane importance records, then all
/// conflict records in input order.
pub fn to_records(stats: &[ChannelStatistics], conflicts: &[ConflictReport]) -> Vec<StatsRecord> {
    let mut records = Vec::with_capacity(stats.len() * Task::ALL.len() + conflicts.len());
    for s in stats {
        for task in Task::ALL {
            records.push(StatsRecord::Importance {
                layer_id: s.layer_id.clone(),
                task,
                channels: s.channels(),
                importance: s.importance(task).to_vec(),
                avg_grad: s.avg_grad(task).to_vec(),
                batches: s.batches(task),
            });
        }
    }
    for c in conflicts {
        records.push(StatsRecord::Conflict {
            layer_id: c.layer_id.clone(),
            channels: c.channels(),
            pairwise: c.pairwise.clone(),
            penalty: c.penalty.clone(),
        });
    }
    records
}

pub fn write_records(path: &Path, records: &[StatsRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<StatsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Dependency(format!("cannot open stats file {}: {e}", path.display()))
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StatsRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dependency(format!("stats file line {}: {e}", i + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Regroup a record stream into per-layer accumulators and conflict reports,
/// preserving first-appearance layer order. Every layer must carry all three
/// task records with consistent channel counts, plus one conflict record.
pub fn from_records(
    records: &[StatsRecord],
) -> Result<(Vec<ChannelStatistics>, Vec<ConflictReport>)> {
    struct Partial {
        channels: usize,
        importance: BTreeMap<Task, Vec<f64>>,
        avg_grad: BTreeMap<Task, Vec<f64>>,
        batches: BTreeMap<Task, u64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partials: BTreeMap<String, Partial> = BTreeMap::new();
    let mut conflicts: Vec<ConflictReport> = Vec::new();

    for record in records {
        match record {
            StatsRecord::Importance { layer_id, task, channels, importance, avg_grad, batches } => {
                if importance.len() != *channels || avg_grad.len() != *channels {
                    return Err(Error::Dependency(format!(
                        "stats for layer '{layer_id}' task {task}: array length != channels"
                    )));
                }
                let entry = partials.entry(layer_id.clone()).or_insert_with(|| {
                    order.push(layer_id.clone());
                    Partial {
                        channels: *channels,
                        importance: BTreeMap::new(),
                        avg_grad: BTreeMap::new(),
                        batches: BTreeMap::new(),
                    }
                });
                if entry.channels != *channels {
                    return Err(Error::Dependency(format!(
                        "stats for layer '{layer_id}' disagree on channel count"
                    )));
                }
                if entry.importance.insert(*task, importance.clone()).is_some() {
                    return Err(Error::Dependency(format!(
                        "duplicate importance record for layer '{layer_id}' task {task}"
                    )));
                }
                entry.avg_grad.insert(*task, avg_grad.clone());
                entry.batches.insert(*task, *batches);
            }
            StatsRecord::Conflict { layer_id, channels, pairwise, penalty } => {
                if penalty.len() != *channels {
                    return Err(Error::Dependency(format!(
                        "conflict record for layer '{layer_id}': penalty length != channels"
                    )));
                }
                conflicts.push(ConflictReport {
                    layer_id: layer_id.clone(),
                    pairwise: pairwise.clone(),
                    penalty: penalty.clone(),
                });
            }
        }
    }

    let mut stats = Vec::with_capacity(order.len());
    for layer_id in &order {
        let p = partials.remove(layer_id).expect("collected above");
        for task in Task::ALL {
            if !p.importance.contains_key(&task) {
                return Err(Error::Dependency(format!(
                    "stats file lacks task {task} for layer '{layer_id}'"
                )));
            }
        }
        stats.push(ChannelStatistics::from_parts(
            layer_id.clone(),
            p.channels,
            p.importance,
            p.avg_grad,
            p.batches,
        )?);
    }

    for layer_id in &order {
        if !conflicts.iter().any(|c| &c.layer_id == layer_id) {
            return Err(Error::Dependency(format!(
                "stats file lacks a conflict record for layer '{layer_id}'"
            )));
        }
    }
    Ok((stats, conflicts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_inputs() -> (Vec<ChannelStatistics>, Vec<ConflictReport>) {
        let mk = |layer: &str, c: usize, base: f64| {
            let importance = Task::ALL
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, (0..c).map(|k| base + i as f64 + k as f64 * 0.1).collect()))
                .collect();
            let grads = Task::ALL
                .iter()
                .enumerate()
                .map(|(i, &t)| (t, (0..c).map(|k| (k as f64 - i as f64) * 0.01).collect()))
                .collect();
            let batches = Task::ALL.iter().map(|&t| (t, 4u64)).collect();
            ChannelStatistics::from_parts(layer, c, importance, grads, batches).unwrap()
        };
        let stats = vec![mk("backbone.c1", 4, 0.0), mk("backbone.c2", 8, 1.0)];
        let conflicts = stats
            .iter()
            .map(|s| {
                let grads: BTreeMap<Task, Vec<f64>> = Task::ALL
                    .iter()
                    .map(|&t| (t, s.avg_grad(t).to_vec()))
                    .collect();
                crate::conflict::conflict_report(&s.layer_id, &grads, 1e-12).unwrap()
            })
            .collect();
        (stats, conflicts)
    }

    #[test]
    fn record_count_is_three_importance_plus_one_conflict_per_layer() {
        let (stats, conflicts) = sample_inputs();
        let records = to_records(&stats, &conflicts);
        assert_eq!(records.len(), stats.len() * 3 + conflicts.len());
        let importance = records
            .iter()
            .filter(|r| matches!(r, StatsRecord::Importance { .. }))
            .count();
        assert_eq!(importance, stats.len() * 3);
    }

    #[test]
    fn file_round_trip_preserves_everything() {
        let (stats, conflicts) = sample_inputs();
        let records = to_records(&stats, &conflicts);
        let dir = tempdir().unwrap();
        let path = dir.path().join("stats.jsonl");
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, records);

        let (stats2, conflicts2) = from_records(&back).unwrap();
        assert_eq!(stats2.len(), stats.len());
        for (a, b) in stats.iter().zip(&stats2) {
            assert_eq!(a.layer_id, b.layer_id);
            for t in Task::ALL {
                assert_eq!(a.importance(t), b.importance(t));
                assert_eq!(a.avg_grad(t), b.avg_grad(t));
                assert_eq!(a.batches(t), b.batches(t));
            }
        }
        assert_eq!(conflicts2, conflicts);
    }

    #[test]
    fn writes_are_byte_identical_across_runs() {
        let (stats, conflicts) = sample_inputs();
        let records = to_records(&stats, &conflicts);
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_records(&p1, &records).unwrap();
        write_records(&p2, &records).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_task_or_conflict_detected() {
        let (stats, conflicts) = sample_inputs();
        let mut records = to_records(&stats, &conflicts);
        // Drop one importance record.
        let dropped = records.remove(1);
        assert!(matches!(dropped, StatsRecord::Importance { .. }));
        assert!(from_records(&records).is_err());

        let mut records = to_records(&stats, &conflicts);
        records.retain(|r| !matches!(r, StatsRecord::Conflict { .. }));
        assert!(from_records(&records).is_err());
    }

    #[test]
    fn missing_file_is_a_dependency_error() {
        let err = read_records(Path::new("/nonexistent/stats.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Dependency(_)));
    }

    #[test]
    fn record_json_has_kind_tag_and_task_names() {
        let (stats, conflicts) = sample_inputs();
        let records = to_records(&stats, &conflicts);
        let first = serde_json::to_string(&records[0]).unwrap();
        assert!(first.starts_with("{\"kind\":\"importance\",\"layer_id\":\"backbone.c1\",\"task\":\"det\""));
        let last = serde_json::to_string(records.last().unwrap()).unwrap();
        assert!(last.starts_with("{\"kind\":\"conflict\""));
    }
}
