//! On-disk artifact formats shared by the library and the CLI.
//!
//! Everything written here round-trips through its own reader, and float
//! columns use Rust's shortest round-trip formatting, so repeated runs with
//! identical inputs produce byte-identical files.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::{PathFlowEntry, PathFlowTable};
use crate::delay::LinkFlow;
use crate::network::{Demand, Direction, FlowNetwork};
use crate::solver::{SolveTrace, TraceRow};

#[derive(Debug, Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed {file}: {msg}")]
    Malformed { file: &'static str, msg: String },
}

fn malformed(file: &'static str, msg: impl Into<String>) -> FileError {
    FileError::Malformed { file, msg: msg.into() }
}

/// Write a solution as `arc_id,tail,head,kind,flow_fwd,flow_bwd`.
pub fn write_solution_csv(network: &FlowNetwork, flow: &LinkFlow, w: impl io::Write) -> Result<(), FileError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["arc_id", "tail", "head", "kind", "flow_fwd", "flow_bwd"])?;
    for (i, arc) in network.arcs.iter().enumerate() {
        wtr.write_record([
            i.to_string(),
            network.node_name(arc.tail),
            network.node_name(arc.head),
            format!("{:?}", arc.kind),
            flow.forward[i].to_string(),
            flow.backward[i].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a solution back, checking ids and endpoints against the network.
pub fn read_solution_csv(network: &FlowNetwork, r: impl io::Read) -> Result<LinkFlow, FileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut flow = LinkFlow::zeros(network.arcs.len());
    let mut seen = 0usize;
    for record in rdr.records() {
        let record = record?;
        let arc_id: usize = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("solution", "bad arc_id"))?;
        if arc_id >= network.arcs.len() {
            return Err(malformed("solution", format!("arc_id {arc_id} out of range")));
        }
        let tail = record.get(1).unwrap_or_default();
        let head = record.get(2).unwrap_or_default();
        if network.parse_node_name(tail) != Some(network.arcs[arc_id].tail)
            || network.parse_node_name(head) != Some(network.arcs[arc_id].head)
        {
            return Err(malformed("solution", format!("arc {arc_id} endpoints do not match the network")));
        }
        flow.forward[arc_id] = record
            .get(4)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("solution", "bad flow_fwd"))?;
        flow.backward[arc_id] = record
            .get(5)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("solution", "bad flow_bwd"))?;
        seen += 1;
    }
    if seen != network.arcs.len() {
        return Err(malformed(
            "solution",
            format!("expected {} arcs, found {}", network.arcs.len(), seen),
        ));
    }
    Ok(flow)
}

/// Write the per-iteration solver trace.
pub fn write_trace_csv(trace: &SolveTrace, w: impl io::Write) -> Result<(), FileError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["iteration", "total_cost", "linearized_cost", "alpha", "max_residual"])?;
    for row in &trace.rows {
        wtr.write_record([
            row.iteration.to_string(),
            row.total_cost.to_string(),
            row.linearized_cost.to_string(),
            row.alpha.to_string(),
            row.max_residual.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trace_csv(r: impl io::Read) -> Result<Vec<TraceRow>, FileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64, FileError> {
            record.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| malformed("trace", "bad field"))
        };
        rows.push(TraceRow {
            iteration: record
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("trace", "bad iteration"))?,
            total_cost: field(1)?,
            linearized_cost: field(2)?,
            alpha: field(3)?,
            max_residual: field(4)?,
        });
    }
    Ok(rows)
}

/// Write recovered paths as
/// `direction,dropoff,workstation,intensity,path` with the path as a
/// space-separated node-name list (quoted by the CSV layer as needed).
pub fn write_pathflow_csv(network: &FlowNetwork, table: &PathFlowTable, w: impl io::Write) -> Result<(), FileError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["direction", "dropoff", "workstation", "intensity", "path"])?;
    for entry in &table.entries {
        let path = entry
            .nodes
            .iter()
            .map(|&n| network.node_name(n))
            .collect::<Vec<_>>()
            .join(" ");
        wtr.write_record([
            entry.direction.to_string(),
            entry.dropoff.to_string(),
            entry.workstation.to_string(),
            entry.intensity.to_string(),
            path,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a path-flow table back. Decomposition diagnostics (push counts) are
/// not stored, so they come back zeroed.
pub fn read_pathflow_csv(network: &FlowNetwork, r: impl io::Read) -> Result<PathFlowTable, FileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut table = PathFlowTable::default();
    for record in rdr.records() {
        let record = record?;
        let direction = match record.get(0) {
            Some("forward") => Direction::Forward,
            Some("backward") => Direction::Backward,
            other => return Err(malformed("pathflow", format!("bad direction {other:?}"))),
        };
        let dropoff: u32 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("pathflow", "bad dropoff"))?;
        let workstation: u32 = record
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("pathflow", "bad workstation"))?;
        let intensity: f64 = record
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("pathflow", "bad intensity"))?;
        let nodes = record
            .get(4)
            .ok_or_else(|| malformed("pathflow", "missing path"))?
            .split_whitespace()
            .map(|name| {
                network
                    .parse_node_name(name)
                    .ok_or_else(|| malformed("pathflow", format!("unknown node `{name}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        table.entries.push(PathFlowEntry { direction, nodes, intensity, dropoff, workstation });
    }
    Ok(table)
}

/// Write per-drop-off demand as `dropoff_id,demand`.
pub fn write_demand_csv(demand: &Demand, w: impl io::Write) -> Result<(), FileError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["dropoff_id", "demand"])?;
    for (i, d) in demand.per_dropoff.iter().enumerate() {
        wtr.write_record([(i + 1).to_string(), d.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_demand_csv(r: impl io::Read) -> Result<Demand, FileError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut pairs: Vec<(u32, f64)> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let id: u32 = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("demand", "bad dropoff_id"))?;
        let d: f64 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("demand", "bad demand"))?;
        pairs.push((id, d));
    }
    pairs.sort_by_key(|(id, _)| *id);
    for (i, (id, _)) in pairs.iter().enumerate() {
        if *id != i as u32 + 1 {
            return Err(malformed("demand", "dropoff ids must be 1..n"));
        }
    }
    Ok(Demand { per_dropoff: pairs.into_iter().map(|(_, d)| d).collect() })
}

/// One simulation trial's result record, stored as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config_hash: String,
    pub policy: String,
    /// Demand estimate used by the flow-guided policy, when applicable.
    pub lambda: Option<f64>,
    pub robots: u32,
    pub trial: u32,
    pub seed: u64,
    pub ticks: u64,
    pub warmup_ticks: u64,
    pub throughput: f64,
    pub drops: u64,
    pub mean_trip_time: f64,
    pub deadlock_events: u64,
    pub unresolved_deadlocks: u64,
    pub flagged: bool,
}

pub fn write_trial_records(records: &[TrialRecord], mut w: impl io::Write) -> Result<(), FileError> {
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trial_records(r: impl io::Read) -> Result<Vec<TrialRecord>, FileError> {
    let mut out = Vec::new();
    for line in io::BufRead::lines(io::BufReader::new(r)) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Write a rows-by-cols count matrix (heatmaps of turning or traversal).
pub fn write_heatmap_csv(matrix: &[Vec<u64>], w: impl io::Write) -> Result<(), FileError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for row in matrix {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_heatmap_csv(r: impl io::Read) -> Result<Vec<Vec<u64>>, FileError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record
            .iter()
            .map(|s| s.parse().map_err(|_| malformed("heatmap", format!("bad count `{s}`"))))
            .collect::<Result<Vec<u64>, _>>()?;
        out.push(row);
    }
    Ok(out)
}
