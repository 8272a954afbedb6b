//! Run outputs: report JSON, checkpoints, routing and ablation CSVs.
//!
//! A `train` run directory holds
//!
//! | file              | content                                             |
//! |-------------------|-----------------------------------------------------|
//! | `report.json`     | [`RunReport`], schema version in `schema_version`   |
//! | `checkpoint.json` | parameters after the last step                      |
//! | `best.json`       | parameters at the best CTCVR GAUC evaluation        |
//! | `routing.csv`     | `layer,scenario,token,expert,weight` per active pool expert |
//! | `assignment.json` | feature ids and scores per token group              |
//!
//! The ablation CSV header is `variant,ctr_auc,ctr_gauc,ctcvr_auc,ctcvr_gauc,params`;
//! undefined metrics are empty cells.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mtmixatt_core::data::Dataset;
use mtmixatt_core::moe::RoutingTrace;
use mtmixatt_core::train::{AblationRow, RunReport, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const BEST_FILE: &str = "best.json";
pub const ROUTING_FILE: &str = "routing.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.json";

/// Eval samples whose routing is exported.
pub const ROUTING_SAMPLES: usize = 512;

pub fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub layer: usize,
    pub scenario: usize,
    pub token: usize,
    pub expert: usize,
    pub weight: f64,
}

pub fn routing_rows(traces: &[RoutingTrace]) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for t in traces {
        for &e in &t.active {
            rows.push(RoutingRow { layer: t.layer, scenario: t.scenario, token: t.token, expert: e, weight: t.beta[e] });
        }
    }
    rows
}

pub fn write_routing_csv<W: Write>(traces: &[RoutingTrace], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in routing_rows(traces) {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if rows.is_empty() {
        out.write_record(["variant", "ctr_auc", "ctr_gauc", "ctcvr_auc", "ctcvr_gauc", "params"])?;
    }
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ablation_csv<R: Read>(r: R) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Write every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, outcome: &TrainOutcome, eval: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let report = &outcome.report;
    fs::write(dir.join(REPORT_FILE), to_pretty_json(report)?)?;
    let last_step = report.evals.last().map_or(0, |e| e.step);
    Checkpoint::new(&report.model, report.seed, last_step, &outcome.model.store).save(&dir.join(CHECKPOINT_FILE))?;
    Checkpoint::new(&report.model, report.seed, report.best_step, &outcome.best).save(&dir.join(BEST_FILE))?;
    let samples = &eval.samples[..eval.len().min(ROUTING_SAMPLES)];
    let traces = outcome.model.routing_traces(samples, ROUTING_SAMPLES)?;
    write_routing_csv(&traces, fs::File::create(dir.join(ROUTING_FILE))?)?;
    fs::write(dir.join(ASSIGNMENT_FILE), to_pretty_json(&report.assignment)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_csv_round_trips_with_empty_cells() {
        let rows = vec![
            AblationRow { variant: "G1".into(), ctr_auc: Some(0.75), ctr_gauc: None, ctcvr_auc: Some(0.1 + 0.2), ctcvr_gauc: Some(1.0), params: 42 },
            AblationRow { variant: "PostNorm_R".into(), ctr_auc: None, ctr_gauc: None, ctcvr_auc: None, ctcvr_gauc: None, params: 7 },
        ];
        let mut buf = Vec::new();
        write_ablation_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("variant,ctr_auc,ctr_gauc,ctcvr_auc,ctcvr_gauc,params\n"), "{text}");
        assert!(text.contains("G1,0.75,,"));
        assert_eq!(read_ablation_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn routing_rows_follow_active_sets() {
        let trace = RoutingTrace {
            layer: 1,
            scenario: 2,
            token: 5,
            routed: true,
            designated: Some(1),
            active: vec![3, 1],
            beta: vec![0.0, 0.9, 0.0, 0.6],
            alpha: vec![0.5],
            shared_gate: vec![0.4],
        };
        let rows = routing_rows(&[trace]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], RoutingRow { layer: 1, scenario: 2, token: 5, expert: 3, weight: 0.6 });
        let mut buf = Vec::new();
        write_routing_csv(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
    }
}
