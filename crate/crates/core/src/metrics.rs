//! Round records on disk: JSON lines for metrics and timings, CSV for
//! accuracy curves, and the per-round region audit log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{PhaseTimings, RoundPlan, RoundRecord, METRICS_SCHEMA_VERSION};
use crate::error::{ActuneError, Result};
use crate::regions::RegionScore;

/// One JSON line per record. Timings are left out so that repeated runs
/// produce identical files.
pub fn metrics_jsonl(records: &[RoundRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| ActuneError::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    std::fs::write(path, metrics_jsonl(records)?).map_err(|e| ActuneError::io(path, e))
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<RoundRecord>> {
    let f = File::open(path).map_err(|e| ActuneError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| ActuneError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ActuneError::Format(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TimingLine<'a> {
    t: usize,
    #[serde(flatten)]
    timings: &'a PhaseTimings,
}

pub fn write_timings_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| ActuneError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = TimingLine {
            t: r.t,
            timings: &r.timings,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| ActuneError::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| ActuneError::io(path, e))?;
    }
    w.flush().map_err(|e| ActuneError::io(path, e))
}

/// `t,test_accuracy,labeled_total,selftrain_size,pseudo_label_accuracy`;
/// missing values are empty cells.
pub fn accuracy_csv<W: Write>(writer: W, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| ActuneError::Format(e.to_string());
    w.write_record([
        "t",
        "test_accuracy",
        "labeled_total",
        "selftrain_size",
        "pseudo_label_accuracy",
    ])
    .map_err(err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.t.to_string(),
            opt(r.test_accuracy),
            r.labeled_total.to_string(),
            r.selftrain_size.to_string(),
            opt(r.pseudo_label_accuracy),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| ActuneError::Format(e.to_string()))
}

/// One line of the region audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub schema_version: u32,
    pub t: usize,
    pub region_scores: Vec<RegionScore>,
    pub query_regions: Vec<usize>,
    pub st_regions: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl AuditRecord {
    pub fn from_plan(plan: &RoundPlan) -> Self {
        AuditRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            t: plan.round,
            region_scores: plan.region_scores.clone(),
            query_regions: plan.query_regions.clone(),
            st_regions: plan.st_regions.clone(),
            query_indices: plan.query_batch.clone(),
        }
    }
}

/// `id,size,U,I,u_k,queried` per nonempty region of a plan.
pub fn region_report<W: Write>(writer: W, plan: &RoundPlan) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| ActuneError::Format(e.to_string());
    w.write_record(["id", "size", "U", "I", "u_k", "queried"])
        .map_err(err)?;
    let queried = plan.queried_per_region();
    for r in &plan.region_scores {
        w.write_record([
            r.cluster_id.to_string(),
            r.size.to_string(),
            r.avg_uncertainty.to_string(),
            r.class_diversity.to_string(),
            r.total.to_string(),
            queried.get(&r.cluster_id).copied().unwrap_or(0).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| ActuneError::Format(e.to_string()))
}

/// `index,cluster,weight` for every clustered sample of a plan.
pub fn cluster_assignments<W: Write>(writer: W, plan: &RoundPlan) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| ActuneError::Format(e.to_string());
    w.write_record(["index", "cluster", "weight"])
        .map_err(err)?;
    for ((i, c), wt) in plan
        .clustered
        .iter()
        .zip(&plan.assignment)
        .zip(&plan.weights)
    {
        w.write_record([i.to_string(), c.to_string(), wt.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| ActuneError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::TrainReport;

    fn record(t: usize) -> RoundRecord {
        RoundRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            t,
            strategy: "random".into(),
            test_accuracy: Some(0.1 + t as f64 / 3.0),
            labeled_total: 10 + t,
            query_indices: vec![t],
            selftrain_size: 0,
            pseudo_label_accuracy: None,
            momentum: None,
            region_count: 0,
            empty_regions: 0,
            query_regions: vec![],
            st_regions: vec![],
            train: TrainReport {
                final_loss: 0.5,
                epochs_run: 1,
                labeled_count: 10 + t,
                pseudo_used_count: 0,
                pseudo_filtered_count: 0,
            },
            timings: PhaseTimings {
                fit: 1.5,
                ..PhaseTimings::default()
            },
        }
    }

    #[test]
    fn jsonl_round_trip_without_timings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records: Vec<_> = (0..3).map(record).collect();
        write_metrics_jsonl(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(!text.contains("timings"));
        let back = read_metrics_jsonl(&path).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].timings, PhaseTimings::default());
    }

    #[test]
    fn accuracy_csv_layout() {
        let mut buf = Vec::new();
        accuracy_csv(&mut buf, &[record(0)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "t,test_accuracy,labeled_total,selftrain_size,pseudo_label_accuracy"
        );
        assert_eq!(lines[1], "0,0.1,10,0,");
    }
}
