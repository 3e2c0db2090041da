use std::collections::BTreeMap;
use std::path::Path;

use cpl_core::counterfactual::GateRecord;
use cpl_core::objective::{EpochSummary, Prediction};
use cpl_core::prompt::TaskKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub count: usize,
    pub accuracy: f64,
    /// Fraction whose ground truth ranks first among the candidates.
    pub recall_at_1: f64,
    pub per_class: BTreeMap<u32, ClassMetrics>,
}

/// Mean gate weights of the final epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub count: usize,
    pub mean: f64,
    /// Present when the dataset marks spurious dims.
    pub spurious_mean: Option<f64>,
    pub prototype_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub task: TaskKind,
    pub config_hash: String,
    pub epochs: usize,
    pub final_epoch: Option<EpochSummary>,
    pub splits: Vec<SplitMetrics>,
    pub gates: Option<GateSummary>,
    /// Excluded from `hash`.
    pub wall_time_secs: f64,
    /// SHA-256 over every other field.
    pub hash: String,
}

/// One persisted prediction row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub split: String,
    pub id: u64,
    pub target: u32,
    pub predicted: u32,
    pub score: f64,
}

impl PredictionRow {
    pub fn from_prediction(split: &str, id: u64, p: &Prediction) -> Self {
        Self {
            split: split.to_string(),
            id,
            target: p.target,
            predicted: p.predicted,
            score: p.score,
        }
    }
}

pub fn split_metrics(split: &str, rows: &[PredictionRow]) -> SplitMetrics {
    let mut per_class: BTreeMap<u32, ClassMetrics> = BTreeMap::new();
    let mut correct = 0;
    for r in rows {
        let e = per_class.entry(r.target).or_insert(ClassMetrics {
            count: 0,
            correct: 0,
            accuracy: 0.0,
        });
        e.count += 1;
        if r.predicted == r.target {
            e.correct += 1;
            correct += 1;
        }
    }
    for m in per_class.values_mut() {
        m.accuracy = m.correct as f64 / m.count as f64;
    }
    let accuracy = if rows.is_empty() { 0.0 } else { correct as f64 / rows.len() as f64 };
    SplitMetrics {
        split: split.to_string(),
        count: rows.len(),
        accuracy,
        recall_at_1: accuracy,
        per_class,
    }
}

/// Splits present in `rows`, in order of first appearance.
pub fn metrics_from_rows(rows: &[PredictionRow]) -> Vec<SplitMetrics> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.split.as_str()) {
            names.push(&r.split);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let sub: Vec<PredictionRow> = rows.iter().filter(|r| r.split == n).cloned().collect();
            split_metrics(n, &sub)
        })
        .collect()
}

pub fn gate_summary(gates: &[GateRecord], spurious_dims: Option<usize>) -> Option<GateSummary> {
    let d = gates.first()?.u.len();
    let mut all = 0.0;
    let (mut sp, mut pr) = (0.0, 0.0);
    let s = spurious_dims.unwrap_or(0).min(d);
    for g in gates {
        for (j, &u) in g.u.iter().enumerate() {
            all += u as f64;
            if j >= d - s {
                sp += u as f64;
            } else {
                pr += u as f64;
            }
        }
    }
    let n = gates.len() as f64;
    let with_sp = spurious_dims.is_some() && s > 0 && s < d;
    Some(GateSummary {
        count: gates.len(),
        mean: all / (n * d as f64),
        spurious_mean: with_sp.then(|| sp / (n * s as f64)),
        prototype_mean: with_sp.then(|| pr / (n * (d - s) as f64)),
    })
}

impl MetricsReport {
    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn compute_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("report json");
        let obj = value.as_object_mut().expect("report object");
        obj.remove("wall_time_secs");
        obj.remove("hash");
        hex::encode(Sha256::digest(serde_json::to_string(&value).expect("report json")))
    }

    pub fn seal(mut self) -> Self {
        self.hash = self.compute_hash();
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report json");
        std::fs::write(path, text + "\n").map_err(|e| crate::error::io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| crate::error::io_err(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}
