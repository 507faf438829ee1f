//! `sortflow`: solve system-optimal flows for a grid sorting floor, recover
//! executable paths, simulate dispatch policies, and summarize the results.

mod config;
mod pipeline;
mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sortflow_core::delay::DelayError;
use sortflow_core::files;
use sortflow_core::network::{parse_layout, NetworkError};
use sortflow_core::solver::SolverError;

use config::ExperimentConfig;
use pipeline::Instance;

#[derive(Parser)]
#[command(name = "sortflow", version, about = "Flow-guided dispatch for grid sorting robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Uniform demand estimate (overrides the config).
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the min-cost flow problem and write solution and trace CSVs.
    Solve(CommonArgs),
    /// Recover path flows from the solution (solving first if needed).
    Decompose(CommonArgs),
    /// Run the simulation battery and write metrics and heatmaps.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Fleet sizes to sweep (overrides the config).
        #[arg(long, value_delimiter = ',')]
        robots: Option<Vec<u32>>,
        /// Policies to run: flow, random, zoning (overrides the config).
        #[arg(long, value_delimiter = ',')]
        policies: Option<Vec<String>>,
        /// Trials per configuration (overrides the config).
        #[arg(long)]
        trials: Option<u32>,
        /// Ticks per trial (overrides the config).
        #[arg(long)]
        ticks: Option<u64>,
        /// Base seed; trial t uses seed_base + t.
        #[arg(long)]
        seed_base: Option<u64>,
    },
    /// Summarize metrics files into statistics and paired improvements.
    Report {
        /// Metrics files (JSON lines). Defaults to every metrics-*.jsonl in
        /// the output directory of --config.
        #[arg(long, value_delimiter = ',')]
        metrics: Option<Vec<PathBuf>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include outlier-flagged trials in the statistics.
        #[arg(long)]
        include_flagged: bool,
        /// Seed for the random baseline pairing.
        #[arg(long, default_value_t = 1000)]
        seed_base: u64,
    },
    /// Parse and validate a layout file, printing a summary.
    ValidateLayout {
        /// Layout file path.
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Exit codes: 1 configuration or input error, 2 infeasible problem,
/// 3 internal failure.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SolverError>() {
            return match e {
                SolverError::InfeasibleDemand { .. } | SolverError::DisconnectedCommodity { .. } => 2,
                SolverError::Delay(DelayError::SaturatedWorkstation { .. }) => 2,
                _ => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<NetworkError>() {
            return match e {
                NetworkError::DisconnectedCommodity { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<DelayError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<sortflow_core::network::LayoutError>().is_some()
            || cause.downcast_ref::<toml::de::Error>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<sortflow_core::files::FileError>().is_some()
        {
            return 1;
        }
        if cause.downcast_ref::<sortflow_core::sim::SimError>().is_some() {
            return 1;
        }
        let msg = cause.to_string();
        if msg.contains("layout") || msg.contains("config") || msg.contains("demand") {
            return 1;
        }
    }
    3
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve(common) => cmd_solve(&common),
        Command::Decompose(common) => cmd_decompose(&common),
        Command::Simulate { common, robots, policies, trials, ticks, seed_base } => {
            cmd_simulate(&common, robots, policies, trials, ticks, seed_base)
        }
        Command::Report { metrics, config, out, include_flagged, seed_base } => {
            cmd_report(metrics, config, out, include_flagged, seed_base)
        }
        Command::ValidateLayout { path } => cmd_validate_layout(&path),
    }
}

fn load(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let config = ExperimentConfig::load(&common.config)?;
    let out = common.out.clone().unwrap_or_else(|| config.output.dir.clone());
    Ok((config, out))
}

fn cmd_solve(common: &CommonArgs) -> Result<()> {
    let (config, out) = load(common)?;
    let instance = Instance::new(&config, common.lambda)?;
    let network = instance.network()?;
    fs::create_dir_all(&out)?;
    // Persist the resolved inputs next to the solution.
    fs::write(out.join(format!("layout-{}.txt", instance.hash)), &instance.layout_text)?;
    let demand_file = fs::File::create(out.join(format!("demand-{}.csv", instance.hash)))?;
    files::write_demand_csv(&instance.demand, demand_file)?;
    let (flow, trace) = pipeline::ensure_solution(&instance, &network, &out)?;
    match trace {
        Some(trace) => {
            let last = trace.rows.last().expect("at least one iteration");
            println!(
                "solved {}: {} iterations, total cost {:.6}, residual {:.2e}, converged: {}",
                instance.hash,
                trace.rows.len(),
                last.total_cost,
                last.max_residual,
                trace.converged
            );
            if trace.clamped_negative_gradients > 0 {
                eprintln!(
                    "warning: clamped {} negative gradient component(s)",
                    trace.clamped_negative_gradients
                );
            }
        }
        None => println!("solution {} already cached", instance.hash),
    }
    println!("solution: {}", instance.solution_path(&out).display());
    let _ = flow;
    Ok(())
}

fn cmd_decompose(common: &CommonArgs) -> Result<()> {
    let (config, out) = load(common)?;
    let instance = Instance::new(&config, common.lambda)?;
    let network = instance.network()?;
    let (flow, _) = pipeline::ensure_solution(&instance, &network, &out)?;
    let (table, split) = pipeline::ensure_paths(&instance, &network, &flow, &out)?;
    println!(
        "paths: {} entries ({} pushes), split table covers {} drop-offs",
        table.entries.len(),
        table.pushes,
        split.dropoffs().collect::<std::collections::BTreeSet<_>>().len()
    );
    println!("pathflow: {}", instance.pathflow_path(&out).display());
    Ok(())
}

fn cmd_simulate(
    common: &CommonArgs,
    robots: Option<Vec<u32>>,
    policies: Option<Vec<String>>,
    trials: Option<u32>,
    ticks: Option<u64>,
    seed_base: Option<u64>,
) -> Result<()> {
    let (mut config, out) = load(common)?;
    if let Some(r) = robots {
        config.sim.robots = r;
    }
    if let Some(p) = policies {
        config.sim.policies = p;
    }
    if let Some(t) = trials {
        config.sim.trials = t;
    }
    if let Some(t) = ticks {
        config.sim.ticks = t;
    }
    if let Some(s) = seed_base {
        config.output.seed_base = s;
    }
    config.validate()?;

    let instance = Instance::new(&config, common.lambda)?;
    let network = instance.network()?;
    fs::create_dir_all(&out)?;

    let flow_tables = if config.sim.policies.iter().any(|p| p == "flow") {
        let (flow, _) = pipeline::ensure_solution(&instance, &network, &out)?;
        Some(pipeline::ensure_paths(&instance, &network, &flow, &out)?)
    } else {
        None
    };

    let battery = pipeline::run_battery(
        &config,
        &instance,
        &network,
        flow_tables.as_ref(),
        &config.sim.policies,
        &config.sim.robots,
        config.sim.trials,
        config.sim.ticks,
        config.output.seed_base,
    )?;

    let metrics_name = pipeline::metrics_file_name(
        &instance.hash,
        &config.sim.policies,
        &config.sim.robots,
        config.sim.trials,
        config.sim.ticks,
        config.output.seed_base,
    );
    let metrics_path = out.join(&metrics_name);
    let file = fs::File::create(&metrics_path)?;
    files::write_trial_records(&battery.records, file)?;
    for set in &battery.heatmaps {
        let turns = out.join(format!("heatmap-{}-{}-r{}-turns.csv", instance.hash, set.policy, set.robots));
        files::write_heatmap_csv(&set.turns, fs::File::create(turns)?)?;
        let visits =
            out.join(format!("heatmap-{}-{}-r{}-visits.csv", instance.hash, set.policy, set.robots));
        files::write_heatmap_csv(&set.visits, fs::File::create(visits)?)?;
    }
    let flagged = battery.records.iter().filter(|r| r.flagged).count();
    println!(
        "simulated {} trials ({} flagged) -> {}",
        battery.records.len(),
        flagged,
        metrics_path.display()
    );
    Ok(())
}

fn cmd_report(
    metrics: Option<Vec<PathBuf>>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    include_flagged: bool,
    seed_base: u64,
) -> Result<()> {
    let out_dir = match (&out, &config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => ExperimentConfig::load(c)?.output.dir,
        (None, None) => PathBuf::from("out"),
    };
    let paths: Vec<PathBuf> = match metrics {
        Some(list) => list,
        None => {
            let mut found = Vec::new();
            for entry in fs::read_dir(&out_dir)
                .with_context(|| format!("listing {}", out_dir.display()))?
            {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with("metrics-") && name.ends_with(".jsonl") {
                    found.push(path);
                }
            }
            found.sort();
            found
        }
    };
    if paths.is_empty() {
        anyhow::bail!("no metrics files found");
    }
    let mut records = Vec::new();
    for path in &paths {
        let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
        records.extend(files::read_trial_records(file)?);
    }
    let stats = report::group_stats(&records, include_flagged);
    let improvements = report::paired_improvements(&records, "random", include_flagged, seed_base);
    report::print_tables(&stats, &improvements);
    fs::create_dir_all(&out_dir)?;
    report::write_stats_csv(&stats, fs::File::create(out_dir.join("report.csv"))?)?;
    report::write_improvements_csv(
        &improvements,
        fs::File::create(out_dir.join("improvements.csv"))?,
    )?;
    Ok(())
}

fn cmd_validate_layout(path: &PathBuf) -> Result<()> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading layout {}", path.display()))?;
    let layout = parse_layout(&text)?;
    // A nominal demand exercises the full connectivity check.
    let demand = sortflow_core::network::Demand::uniform(
        layout.dropoff_count() as f64 * 0.01,
        layout.dropoff_count(),
    );
    let network = sortflow_core::network::build_flow_network(&layout, &demand)?;
    println!(
        "valid: {}x{} grid, {} cells, {} workstations, {} drop-offs, {} nodes, {} arcs",
        layout.rows,
        layout.cols,
        layout.ordinary_count(),
        layout.workstation_count(),
        layout.dropoff_count(),
        network.nodes.len(),
        network.arcs.len()
    );
    Ok(())
}
