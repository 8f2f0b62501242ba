use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance: String,
    pub size: String,
    pub policy: String,
    pub makespan: i64,
    pub seconds: f64,
    pub reference: Option<f64>,
    /// `oracle`, `oracle-unproven` or `best-known`.
    pub reference_kind: Option<String>,
    pub gap: Option<f64>,
}

impl EvalRow {
    pub fn with_reference(mut self, reference: Option<(f64, String)>) -> Self {
        if let Some((r, kind)) = reference {
            self.gap = Some((self.makespan as f64 - r) / r);
            self.reference = Some(r);
            self.reference_kind = Some(kind);
        }
        self
    }
}

/// Mean objective, gap and time of one policy on one instance size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub policy: String,
    pub size: String,
    pub instances: usize,
    pub mean_makespan: f64,
    /// Over rows that have a reference; absent when none do.
    pub mean_gap: Option<f64>,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub config_sha256: Option<String>,
    /// `(path, sha256)` of every checkpoint used.
    pub checkpoints: Vec<(String, String)>,
    /// `(instance, sha256 of its file)` in evaluation order.
    pub instances: Vec<(String, String)>,
    pub manifest: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

/// Groups rows by `(policy, size)`, keeping first-seen order.
pub fn aggregate(rows: &[EvalRow]) -> Vec<Aggregate> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&EvalRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.policy.clone(), r.size.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let n = g.len() as f64;
            let gaps: Vec<f64> = g.iter().filter_map(|r| r.gap).collect();
            Aggregate {
                policy: key.0.clone(),
                size: key.1.clone(),
                instances: g.len(),
                mean_makespan: g.iter().map(|r| r.makespan as f64).sum::<f64>() / n,
                mean_gap: (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64),
                mean_seconds: g.iter().map(|r| r.seconds).sum::<f64>() / n,
            }
        })
        .collect()
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, warnings: Vec<String>, provenance: Provenance) -> Self {
        EvalReport {
            aggregates: aggregate(&rows),
            rows,
            warnings,
            provenance,
        }
    }

    /// Writes `rows.csv`, `summary.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("rows.csv"))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        for a in &self.aggregates {
            w.serialize(a)?;
        }
        w.flush()?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Fixed-width table: one line per policy and size.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>7} {:>5} {:>12} {:>9} {:>10}\n",
            "policy", "size", "n", "objective", "gap", "time (s)"
        );
        for a in &self.aggregates {
            let gap = a.mean_gap.map_or("-".to_string(), |g| format!("{:.2}%", 100.0 * g));
            out += &format!(
                "{:<28} {:>7} {:>5} {:>12.2} {:>9} {:>10.4}\n",
                a.policy, a.size, a.instances, a.mean_makespan, gap, a.mean_seconds
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(policy: &str, makespan: i64, reference: Option<f64>) -> EvalRow {
        EvalRow {
            instance: format!("i{makespan}"),
            size: "3x2".into(),
            policy: policy.into(),
            makespan,
            seconds: 0.5,
            reference: None,
            reference_kind: None,
            gap: None,
        }
        .with_reference(reference.map(|r| (r, "oracle".to_string())))
    }

    #[test]
    fn gap_and_aggregates_are_consistent() {
        let rows = vec![
            row("spt", 110, Some(100.0)),
            row("spt", 90, Some(90.0)),
            row("mwkr", 120, None),
        ];
        assert!((rows[0].gap.unwrap() - 0.1).abs() < 1e-15);
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].policy, "spt");
        assert_eq!(agg[0].mean_makespan, 100.0);
        assert!((agg[0].mean_gap.unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(agg[1].mean_gap, None);
    }

    #[test]
    fn single_row_report() {
        let p = Provenance {
            command: vec![],
            seed: None,
            config_sha256: None,
            checkpoints: vec![],
            instances: vec![],
            manifest: None,
        };
        let r = EvalReport::new(vec![row("fifo", 7, Some(7.0))], vec![], p);
        assert_eq!(r.aggregates.len(), 1);
        assert_eq!(r.table().lines().count(), 2);
    }
}
