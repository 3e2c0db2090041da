use std::path::Path;

use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::experiment::{read_gates, GATES_FILE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub query_id: u64,
    pub negative_id: u64,
    pub dim: usize,
    pub u_value: f32,
}

/// One row per gate dimension of the last recorded epoch.
///
/// A run without gate snapshots yields no rows and a warning.
pub fn heatmap_rows(run: &Path) -> Result<(Vec<HeatmapRow>, Option<String>)> {
    let path = run.join(GATES_FILE);
    if !path.exists() {
        return Ok((Vec::new(), Some(format!("no gate snapshots in {}", run.display()))));
    }
    let gates = read_gates(&path)?;
    let warning = gates
        .is_empty()
        .then(|| format!("{} is empty (run without counterfactuals?)", path.display()));
    let rows = gates
        .iter()
        .flat_map(|g| {
            g.u.iter().enumerate().map(move |(dim, &u)| HeatmapRow {
                query_id: g.query_id,
                negative_id: g.negative_id,
                dim,
                u_value: u,
            })
        })
        .collect();
    Ok((rows, warning))
}

pub fn write_heatmap(rows: &[HeatmapRow], out: &Path) -> Result<()> {
    let err = |e: csv::Error| HarnessError::Data(format!("{}: {e}", out.display()));
    let mut w = csv::Writer::from_path(out).map_err(err)?;
    if rows.is_empty() {
        w.write_record(["query_id", "negative_id", "dim", "u_value"]).map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| crate::error::io_err(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_snapshots_warn() {
        let dir = tempfile::tempdir().unwrap();
        let (rows, warn) = heatmap_rows(dir.path()).unwrap();
        assert!(rows.is_empty());
        assert!(warn.is_some());
        let out = dir.path().join("h.csv");
        write_heatmap(&rows, &out).unwrap();
        assert_eq!(std::fs::read_to_string(out).unwrap(), "query_id,negative_id,dim,u_value\n");
    }

    #[test]
    fn one_row_per_dim() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(GATES_FILE),
            "{\"query_id\":1,\"negative_id\":2,\"u\":[0.1,0.2,0.3]}\n{\"query_id\":3,\"negative_id\":1,\"u\":[0.4,0.5,0.6]}\n",
        )
        .unwrap();
        let (rows, warn) = heatmap_rows(dir.path()).unwrap();
        assert!(warn.is_none());
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[4], HeatmapRow { query_id: 3, negative_id: 1, dim: 1, u_value: 0.5 });
    }
}
