//! Pipeline orchestration: solve, decompose, simulate, with content-hash
//! caching so a sweep re-solves only when the offline inputs change.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use sortflow_core::decompose::{build_split_table, decompose_flow, PathFlowTable, SplitTable};
use sortflow_core::delay::{LinkFlow, TimingParams};
use sortflow_core::files;
use sortflow_core::network::{build_flow_network, Demand, FlowNetwork, Layout};
use sortflow_core::sim::{simulate, Metrics, Policy};
use sortflow_core::solver::{frank_wolfe, SolveTrace, SolverConfig};

use crate::config::ExperimentConfig;

/// Offline problem instance: everything the solver consumes, plus its
/// content hash.
pub struct Instance {
    pub layout: Layout,
    pub layout_text: String,
    pub demand: Demand,
    pub timing: TimingParams,
    pub solver: SolverConfig,
    pub decompose_seed: u64,
    pub hash: String,
}

impl Instance {
    pub fn new(config: &ExperimentConfig, lambda_override: Option<f64>) -> Result<Instance> {
        let (layout, layout_text) = config.resolve_layout()?;
        let demand = config.resolve_demand(&layout, lambda_override)?;
        let timing = config.timing.to_params();
        let solver = config.solver.to_config();
        let hash = content_hash(&layout_text, &demand, &timing, &solver, config.decompose.seed);
        Ok(Instance {
            layout,
            layout_text,
            demand,
            timing,
            solver,
            decompose_seed: config.decompose.seed,
            hash,
        })
    }

    pub fn network(&self) -> Result<FlowNetwork> {
        Ok(build_flow_network(&self.layout, &self.demand)?)
    }

    pub fn solution_path(&self, out: &Path) -> PathBuf {
        out.join(format!("solution-{}.csv", self.hash))
    }

    pub fn trace_path(&self, out: &Path) -> PathBuf {
        out.join(format!("trace-{}.csv", self.hash))
    }

    pub fn pathflow_path(&self, out: &Path) -> PathBuf {
        out.join(format!("pathflow-{}.csv", self.hash))
    }
}

/// Hash of every input that determines the offline solution and paths.
fn content_hash(
    layout_text: &str,
    demand: &Demand,
    timing: &TimingParams,
    solver: &SolverConfig,
    decompose_seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(layout_text.as_bytes());
    for d in &demand.per_dropoff {
        hasher.update(d.to_le_bytes());
    }
    for v in [
        timing.t1,
        timing.t2,
        timing.t_load_mean,
        timing.t_load_sq,
        timing.t_drop_mean,
        timing.t_drop_sq,
        solver.epsilon,
    ] {
        hasher.update(v.to_le_bytes());
    }
    hasher.update((solver.max_iters as u64).to_le_bytes());
    hasher.update((solver.line_search_iters as u64).to_le_bytes());
    hasher.update(solver.seed.to_le_bytes());
    hasher.update(decompose_seed.to_le_bytes());
    let digest = hasher.finalize();
    hex16(&digest)
}

fn hex16(digest: &[u8]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Solve (or load the cached solution) and write the artifacts.
pub fn ensure_solution(
    instance: &Instance,
    network: &FlowNetwork,
    out: &Path,
) -> Result<(LinkFlow, Option<SolveTrace>)> {
    fs::create_dir_all(out)?;
    let path = instance.solution_path(out);
    if path.exists() {
        let file = fs::File::open(&path)?;
        let flow = files::read_solution_csv(network, file)
            .with_context(|| format!("cached solution {}", path.display()))?;
        return Ok((flow, None));
    }
    let (flow, trace) = frank_wolfe(network, &instance.timing, &instance.solver)?;
    let file = fs::File::create(&path)?;
    files::write_solution_csv(network, &flow, file)?;
    let file = fs::File::create(instance.trace_path(out))?;
    files::write_trace_csv(&trace, file)?;
    Ok((flow, Some(trace)))
}

/// Decompose (or load cached paths) and build the split table.
pub fn ensure_paths(
    instance: &Instance,
    network: &FlowNetwork,
    flow: &LinkFlow,
    out: &Path,
) -> Result<(PathFlowTable, SplitTable)> {
    let path = instance.pathflow_path(out);
    let table = if path.exists() {
        let file = fs::File::open(&path)?;
        files::read_pathflow_csv(network, file)
            .with_context(|| format!("cached path flows {}", path.display()))?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(instance.decompose_seed);
        let table = decompose_flow(network, flow, &mut rng)?;
        if table.cycle_cancellations > 0 {
            eprintln!(
                "warning: decomposition canceled {} residual cycle(s) totaling {:.3e} flow",
                table.cycle_cancellations, table.canceled_flow
            );
        }
        let file = fs::File::create(&path)?;
        files::write_pathflow_csv(network, &table, file)?;
        table
    };
    let split = build_split_table(&table)?;
    Ok((table, split))
}

/// One simulation job of the battery.
#[derive(Debug, Clone)]
pub struct TrialJob {
    pub policy: String,
    pub lambda: Option<f64>,
    pub robots: u32,
    pub trial: u32,
    pub seed: u64,
}

pub struct BatteryResult {
    pub records: Vec<files::TrialRecord>,
    /// Heatmaps per (policy, robots): summed turn counts and cell entries.
    pub heatmaps: Vec<HeatmapSet>,
}

pub struct HeatmapSet {
    pub policy: String,
    pub robots: u32,
    pub turns: Vec<Vec<u64>>,
    pub visits: Vec<Vec<u64>>,
}

/// Run the (policy x robots x trial) battery on a worker pool. Results are
/// collected in job order, so output files are reproducible byte for byte.
#[allow(clippy::too_many_arguments)]
pub fn run_battery(
    config: &ExperimentConfig,
    instance: &Instance,
    network: &FlowNetwork,
    flow_tables: Option<&(PathFlowTable, SplitTable)>,
    policies: &[String],
    robots: &[u32],
    trials: u32,
    ticks: u64,
    seed_base: u64,
) -> Result<BatteryResult> {
    let lambda = instance.demand.total();
    let mut jobs = Vec::new();
    for policy in policies {
        for &r in robots {
            for trial in 0..trials {
                jobs.push(TrialJob {
                    policy: policy.clone(),
                    lambda: if policy == "flow" { Some(lambda) } else { None },
                    robots: r,
                    trial,
                    // Distinct per trial; shared across policies and fleets
                    // so comparisons are paired on the same random stream.
                    seed: seed_base + trial as u64,
                });
            }
        }
    }

    let outcomes: Result<Vec<(usize, files::TrialRecord, Metrics)>> = jobs
        .par_iter()
        .enumerate()
        .map(|(index, job)| {
            let policy = match job.policy.as_str() {
                "flow" => {
                    let (paths, split) =
                        flow_tables.expect("flow policy requires solved path tables");
                    Policy::FlowGuided { paths, split }
                }
                "random" => Policy::Random,
                "zoning" => Policy::Zoning,
                other => unreachable!("validated policy {other}"),
            };
            let metrics = simulate(
                network,
                policy,
                &instance.timing,
                job.robots as usize,
                ticks,
                job.seed,
                config.sim.assertions,
            )?;
            let record = files::TrialRecord {
                config_hash: instance.hash.clone(),
                policy: job.policy.clone(),
                lambda: job.lambda,
                robots: job.robots,
                trial: job.trial,
                seed: job.seed,
                ticks: metrics.ticks,
                warmup_ticks: metrics.warmup_ticks,
                throughput: metrics.throughput,
                drops: metrics.drops,
                mean_trip_time: metrics.mean_trip_time,
                deadlock_events: metrics.deadlock_events,
                unresolved_deadlocks: metrics.unresolved_deadlocks,
                flagged: metrics.flagged,
            };
            Ok((index, record, metrics))
        })
        .collect();
    let mut outcomes = outcomes?;
    outcomes.sort_by_key(|(index, _, _)| *index);

    let rows = network.rows;
    let cols = network.cols;
    let mut heatmaps: Vec<HeatmapSet> = Vec::new();
    let mut records = Vec::with_capacity(outcomes.len());
    for (index, record, metrics) in outcomes {
        let job = &jobs[index];
        let set = match heatmaps
            .iter_mut()
            .find(|h| h.policy == job.policy && h.robots == job.robots)
        {
            Some(set) => set,
            None => {
                heatmaps.push(HeatmapSet {
                    policy: job.policy.clone(),
                    robots: job.robots,
                    turns: vec![vec![0; cols]; rows],
                    visits: vec![vec![0; cols]; rows],
                });
                heatmaps.last_mut().unwrap()
            }
        };
        for (cell, &count) in metrics.cell_turn_counts.iter().enumerate() {
            set.turns[cell / cols][cell % cols] += count;
        }
        for (cell, &count) in metrics.cell_entry_counts.iter().enumerate() {
            set.visits[cell / cols][cell % cols] += count;
        }
        records.push(record);
    }
    Ok(BatteryResult { records, heatmaps })
}

/// Deterministic metrics-file name for one simulate invocation.
pub fn metrics_file_name(
    instance_hash: &str,
    policies: &[String],
    robots: &[u32],
    trials: u32,
    ticks: u64,
    seed_base: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(instance_hash.as_bytes());
    for p in policies {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    for &r in robots {
        hasher.update(r.to_le_bytes());
    }
    hasher.update(trials.to_le_bytes());
    hasher.update(ticks.to_le_bytes());
    hasher.update(seed_base.to_le_bytes());
    format!("metrics-{}.jsonl", hex16(&hasher.finalize()))
}
