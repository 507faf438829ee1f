//! Discrete-time multi-robot simulator.
//!
//! Time advances in ticks of length T1. Robots cycle through: queue at a
//! workstation, load, exit onto the grid, carry to the drop cell, release,
//! return, re-queue. Movement is gated by a one-cell-lookahead controller: a
//! robot advances only if its requested cell is empty at the start of the
//! tick, simultaneous requests are settled by a fair coin, and everyone else
//! waits in place. Blocked-by relations feed a wait-for graph; cycles are
//! deadlocks, resolved by rerouting one member around the contested cell.
//! Unresolvable deadlocks are logged and flag the trial.
//!
//! Two execution styles share this machinery. Flow-guided robots follow
//! static paths drawn from a split table. Planner-driven robots (the random
//! and zoning baselines) follow timed paths from the prioritized
//! time-expanded search in [`reservation`], and a robot knocked off its
//! schedule releases its claims and replans.

mod plan;
mod policy;
mod reservation;

pub use plan::{compile_path, static_shortest_path, Action};
pub use policy::{
    policy_flow_guided, policy_random, policy_zoning_parcel, policy_zoning_robot, ZoneMap,
};
pub use reservation::{
    ca_star_plan, derive_claims, HeuristicCache, ParkedOverlay, PlanGoal, PlanStart,
    PlannerContext, ReservationTable, TimedPlan,
};

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::decompose::{DecomposeError, PathFlowTable, SplitTable};
use crate::delay::TimingParams;
use crate::network::{Direction, FlowNetwork, Heading};

pub type RobotId = usize;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] DecomposeError),
}

/// Action durations in ticks. The tick is T1; every other duration must be
/// an integer multiple of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingTicks {
    pub t2: u64,
    pub t_load: u64,
    pub t_drop: u64,
}

impl TimingTicks {
    pub fn from_params(timing: &TimingParams) -> Result<TimingTicks, SimError> {
        let to_ticks = |name: &str, v: f64| -> Result<u64, SimError> {
            let ticks = v / timing.t1;
            let rounded = ticks.round();
            if (ticks - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(SimError::Config(format!(
                    "{name} = {v} is not a positive integer multiple of T1 = {}",
                    timing.t1
                )));
            }
            Ok(rounded as u64)
        };
        Ok(TimingTicks {
            t2: to_ticks("T2", timing.t2)?,
            t_load: to_ticks("T_load", timing.t_load_mean)?,
            t_drop: to_ticks("T_drop", timing.t_drop_mean)?,
        })
    }
}

/// Assignment policy driving one trial.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Draw (workstation, path) from the optimal split tables; robots follow
    /// the drawn static paths.
    FlowGuided { paths: &'a PathFlowTable, split: &'a SplitTable },
    /// Uniform workstation assignment, prioritized time-expanded planning.
    Random,
    /// Drop-offs zoned by nearest workstation, fleet split evenly,
    /// prioritized time-expanded planning.
    Zoning,
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::FlowGuided { .. } => "flow",
            Policy::Random => "random",
            Policy::Zoning => "zoning",
        }
    }

    fn uses_planner(&self) -> bool {
        !matches!(self, Policy::FlowGuided { .. })
    }
}

/// Counters for the safety properties checked every tick when assertions are
/// enabled. All must stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SafetyCounters {
    pub occupancy_violations: u64,
    pub nonadjacent_moves: u64,
    pub duration_violations: u64,
    pub reservation_violations: u64,
}

/// Per-trial results.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub ticks: u64,
    pub warmup_ticks: u64,
    /// Parcels dropped inside the measurement window.
    pub drops: u64,
    pub total_drops: u64,
    /// drops / (ticks - warmup_ticks).
    pub throughput: f64,
    /// Mean load-completion to drop-completion time over window trips.
    pub mean_trip_time: f64,
    pub deadlock_events: u64,
    pub unresolved_deadlocks: u64,
    /// Set when any deadlock could not be resolved; the paper treats such
    /// trials as outliers.
    pub flagged: bool,
    /// Executed traversals per network arc (window only).
    pub arc_traversals: Vec<u64>,
    /// Completed turns per layout cell (window only).
    pub cell_turn_counts: Vec<u64>,
    /// Cell entries per layout cell (window only).
    pub cell_entry_counts: Vec<u64>,
    pub safety: SafetyCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    Queue(u32),
    Cell(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Queued,
    Loading,
    AwaitExit,
    Travel,
    Turning { pending: Heading },
    Dropping { dropoff: u32 },
    TimedWait,
}

#[derive(Debug, Clone)]
struct Robot {
    id: RobotId,
    zone: u32,
    loc: Loc,
    heading: Heading,
    plan: VecDeque<Action>,
    phase: Phase,
    timer: u64,
    phase_started: u64,
    trip_started: Option<u64>,
    carrying: Option<u32>,
    return_to: Option<u32>,
    /// Set when a planner-driven robot needs a (re)plan.
    pending_goal: Option<PlanGoal>,
    /// Tick the robot last lost its route (parked or began waiting).
    park_since: u64,
    starvation_flagged: bool,
}

#[derive(Debug, Clone)]
struct Parcel {
    dropoff: u32,
    /// Path-table entry for flow-guided trials.
    path_entry: Option<usize>,
}

#[derive(Debug, Default)]
struct WorkstationState {
    queue: VecDeque<RobotId>,
    loading: Option<RobotId>,
    exit_buffer: VecDeque<RobotId>,
    parcels: VecDeque<Parcel>,
}

struct Sim<'a> {
    network: &'a FlowNetwork,
    policy: Policy<'a>,
    ticks_cfg: TimingTicks,
    horizon: u64,
    assertions: bool,
    now: u64,
    warmup: u64,
    total_ticks: u64,
    robots: Vec<Robot>,
    occupancy: Vec<Option<RobotId>>,
    workstations: Vec<WorkstationState>,
    /// Workstations the policy can never route a parcel to.
    starved: Vec<bool>,
    zones: Option<ZoneMap>,
    rng: ChaCha8Rng,
    reservations: ReservationTable,
    parked: ParkedOverlay,
    heuristics: HeuristicCache,
    metrics: Metrics,
    trip_time_sum: u64,
    trip_count: u64,
    unresolved_seen: HashSet<Vec<RobotId>>,
    /// Memoized executable return plans keyed by (drop node, path entry).
    return_plans: HashMap<(usize, usize), VecDeque<Action>>,
}

/// Run one trial. Deterministic for fixed inputs and seed.
pub fn simulate(
    network: &FlowNetwork,
    policy: Policy<'_>,
    timing: &TimingParams,
    robots: usize,
    ticks: u64,
    seed: u64,
    assertions: bool,
) -> Result<Metrics, SimError> {
    let mut sim = Sim::new(network, policy, timing, robots, ticks, seed, assertions)?;
    for _ in 0..ticks {
        sim.step()?;
    }
    sim.finalize();
    Ok(sim.metrics)
}

impl<'a> Sim<'a> {
    fn new(
        network: &'a FlowNetwork,
        policy: Policy<'a>,
        timing: &TimingParams,
        robots: usize,
        ticks: u64,
        seed: u64,
        assertions: bool,
    ) -> Result<Sim<'a>, SimError> {
        let ticks_cfg = TimingTicks::from_params(timing)?;
        if network.n_workstations == 0 {
            return Err(SimError::Config("layout has no workstations".into()));
        }
        if ticks == 0 {
            return Err(SimError::Config("tick budget must be positive".into()));
        }
        let n_cells = network.cells.len();
        if robots > n_cells {
            return Err(SimError::Config(format!(
                "{robots} robots exceed the {n_cells} available cells"
            )));
        }
        let zones = match policy {
            Policy::Zoning => Some(ZoneMap::build(network, ticks_cfg.t2)?),
            _ => None,
        };
        let starved = match policy {
            Policy::FlowGuided { paths, .. } => {
                let mut served = vec![false; network.n_workstations];
                for entry in &paths.entries {
                    if entry.direction == Direction::Forward {
                        served[entry.workstation as usize - 1] = true;
                    }
                }
                served.into_iter().map(|s| !s).collect()
            }
            _ => vec![false; network.n_workstations],
        };

        let mut sim = Sim {
            network,
            policy,
            ticks_cfg,
            horizon: 0,
            assertions,
            now: 0,
            warmup: ticks / 10,
            total_ticks: ticks,
            robots: Vec::new(),
            occupancy: vec![None; network.rows * network.cols],
            workstations: (0..network.n_workstations).map(|_| WorkstationState::default()).collect(),
            starved,
            zones,
            rng: ChaCha8Rng::seed_from_u64(seed),
            reservations: ReservationTable::new(),
            parked: ParkedOverlay::default(),
            heuristics: HeuristicCache::default(),
            metrics: Metrics {
                ticks,
                warmup_ticks: ticks / 10,
                drops: 0,
                total_drops: 0,
                throughput: 0.0,
                mean_trip_time: 0.0,
                deadlock_events: 0,
                unresolved_deadlocks: 0,
                flagged: false,
                arc_traversals: vec![0; network.arcs.len()],
                cell_turn_counts: vec![0; network.rows * network.cols],
                cell_entry_counts: vec![0; network.rows * network.cols],
                safety: SafetyCounters::default(),
            },
            trip_time_sum: 0,
            trip_count: 0,
            unresolved_seen: HashSet::new(),
            return_plans: HashMap::new(),
        };
        sim.horizon = sim.compute_horizon();
        sim.place_initial_robots(robots)?;
        Ok(sim)
    }
}

impl<'a> Sim<'a> {
    /// Planner horizon: four times the longest free-flow leg.
    fn compute_horizon(&mut self) -> u64 {
        let mut longest = 0u64;
        for d in 1..=self.network.n_dropoffs as u32 {
            let table = self.heuristics.table_for(self.network, self.ticks_cfg.t2, PlanGoal::DropAt(d));
            longest = longest.max(max_finite(table));
        }
        for w in 1..=self.network.n_workstations as u32 {
            let table =
                self.heuristics.table_for(self.network, self.ticks_cfg.t2, PlanGoal::Workstation(w));
            longest = longest.max(max_finite(table));
        }
        (4 * (longest + self.ticks_cfg.t_drop + 1)).max(64)
    }

    fn place_initial_robots(&mut self, count: usize) -> Result<(), SimError> {
        // Flow-guided fleets start where the forward flow needs them;
        // otherwise round-robin (zoning's round-robin IS the even fleet
        // split, zone = home workstation).
        let n_w = self.network.n_workstations;
        let shares: Vec<f64> = match self.policy {
            Policy::FlowGuided { paths, .. } => {
                let mut by_w = vec![0.0f64; n_w];
                for entry in &paths.entries {
                    if entry.direction == Direction::Forward {
                        by_w[entry.workstation as usize - 1] += entry.intensity;
                    }
                }
                let total: f64 = by_w.iter().sum();
                if total <= 0.0 {
                    vec![1.0 / n_w as f64; n_w]
                } else {
                    by_w.iter().map(|v| v / total).collect()
                }
            }
            _ => vec![1.0 / n_w as f64; n_w],
        };
        // Largest-remainder apportionment of `count` robots to shares.
        let mut alloc: Vec<usize> = shares.iter().map(|s| (s * count as f64).floor() as usize).collect();
        let mut assigned: usize = alloc.iter().sum();
        let mut remainders: Vec<(f64, usize)> = shares
            .iter()
            .enumerate()
            .map(|(i, s)| (s * count as f64 - alloc[i] as f64, i))
            .collect();
        remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut k = 0;
        while assigned < count {
            alloc[remainders[k % n_w].1] += 1;
            assigned += 1;
            k += 1;
        }

        let mut id = 0usize;
        for (w_idx, &n) in alloc.iter().enumerate() {
            for _ in 0..n {
                let zone = match (&self.policy, &self.zones) {
                    (Policy::Zoning, Some(z)) => z.robot_zone(id),
                    _ => w_idx as u32 + 1,
                };
                let home = if matches!(self.policy, Policy::Zoning) { zone } else { w_idx as u32 + 1 };
                self.robots.push(Robot {
                    id,
                    zone,
                    loc: Loc::Queue(home),
                    heading: Heading::North,
                    plan: VecDeque::new(),
                    phase: Phase::Queued,
                    timer: 0,
                    phase_started: 0,
                    trip_started: None,
                    carrying: None,
                    return_to: None,
                    pending_goal: None,
                    park_since: 0,
                    starvation_flagged: false,
                });
                self.workstations[home as usize - 1].queue.push_back(id);
                id += 1;
            }
        }
        Ok(())
    }

    fn in_window(&self) -> bool {
        self.now >= self.warmup
    }

    fn step(&mut self) -> Result<(), SimError> {
        self.reservations.advance(self.now);
        self.tick_timers()?;
        self.service_workstations()?;
        let denials = self.movement_phase()?;
        self.resolve_deadlocks(&denials)?;
        if self.assertions {
            self.verify_invariants();
        }
        self.now += 1;
        Ok(())
    }

    /// Timed-action countdowns and their completions.
    fn tick_timers(&mut self) -> Result<(), SimError> {
        for id in 0..self.robots.len() {
            match self.robots[id].phase {
                Phase::Turning { pending } => {
                    self.robots[id].timer -= 1;
                    if self.robots[id].timer == 0 {
                        let elapsed = self.now - self.robots[id].phase_started;
                        if self.assertions && elapsed != self.ticks_cfg.t2 {
                            self.metrics.safety.duration_violations += 1;
                        }
                        let cell = match self.robots[id].loc {
                            Loc::Cell(c) => c,
                            Loc::Queue(_) => unreachable!("turning happens on a cell"),
                        };
                        let from = self.robots[id].heading;
                        self.robots[id].heading = pending;
                        self.robots[id].phase = Phase::Travel;
                        if self.in_window() {
                            self.metrics.cell_turn_counts[cell] += 1;
                            if let (Some(a), Some(b)) = (
                                self.network.cell_heading_node(cell, from),
                                self.network.cell_heading_node(cell, pending),
                            ) {
                                if let Some(arc) = self.network.arc_id(a, b) {
                                    self.metrics.arc_traversals[arc] += 1;
                                }
                            }
                        }
                    }
                }
                Phase::Dropping { dropoff } => {
                    self.robots[id].timer -= 1;
                    if self.robots[id].timer == 0 {
                        let elapsed = self.now - self.robots[id].phase_started;
                        if self.assertions && elapsed != self.ticks_cfg.t_drop {
                            self.metrics.safety.duration_violations += 1;
                        }
                        self.complete_drop(id, dropoff)?;
                    }
                }
                Phase::TimedWait => {
                    self.robots[id].timer -= 1;
                    if self.robots[id].timer == 0 {
                        self.robots[id].phase = match self.robots[id].loc {
                            Loc::Cell(_) => Phase::Travel,
                            Loc::Queue(_) => Phase::AwaitExit,
                        };
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn complete_drop(&mut self, id: RobotId, dropoff: u32) -> Result<(), SimError> {
        let cell = match self.robots[id].loc {
            Loc::Cell(c) => c,
            Loc::Queue(_) => unreachable!("dropping happens on a cell"),
        };
        self.metrics.total_drops += 1;
        if self.in_window() {
            self.metrics.drops += 1;
            if let Some(start) = self.robots[id].trip_started {
                self.trip_time_sum += self.now - start;
                self.trip_count += 1;
            }
            if let Some(node) = self.network.cell_heading_node(cell, self.robots[id].heading) {
                let d_node = self.network.dropoff_node(dropoff);
                if let Some(arc) = self.network.arc_id(node, d_node) {
                    self.metrics.arc_traversals[arc] += 1;
                }
            }
        }
        self.robots[id].carrying = None;
        self.robots[id].trip_started = None;
        self.robots[id].phase = Phase::Travel;
        if self.policy.uses_planner() {
            self.reservations.release(id);
        }
        // Robot freed: assign the return workstation and plan the leg.
        let workstation = match self.policy {
            Policy::FlowGuided { .. } => self.assign_flow_backward_plan(id, dropoff)?,
            Policy::Random => {
                let w = policy_random(self.network.n_workstations, &mut self.rng)?;
                self.request_planned_leg(id, PlanGoal::Workstation(w));
                w
            }
            Policy::Zoning => {
                let w = policy_zoning_robot(self.robots[id].zone);
                self.request_planned_leg(id, PlanGoal::Workstation(w));
                w
            }
        };
        self.robots[id].return_to = Some(workstation);
        Ok(())
    }

    /// Pick and compile the return route for a freed flow-guided robot.
    ///
    /// The workstation is drawn exactly per the split table's backward
    /// marginal for this drop-off. The optimizer, however, is free to resume
    /// empty robots on any cell adjacent to the drop-off, while the physical
    /// robot stands on the one cell it dropped from; within the drawn
    /// (drop-off, workstation) group we therefore take the path whose
    /// connector-plus-body is cheapest to execute from here, prepending the
    /// turns or moves needed to reach its first node.
    fn assign_flow_backward_plan(&mut self, id: RobotId, dropoff: u32) -> Result<u32, SimError> {
        let (paths, split) = match self.policy {
            Policy::FlowGuided { paths, split } => (paths, split),
            _ => unreachable!(),
        };
        let (cell, heading) = match self.robots[id].loc {
            Loc::Cell(c) => (c, self.robots[id].heading),
            Loc::Queue(_) => unreachable!("freed robots stand on a cell"),
        };
        let current = self.network.cell_heading_node(cell, heading).ok_or_else(|| {
            SimError::Config(format!("robot stands on unknown node {cell}:{heading}"))
        })?;
        // Workstation marginal.
        let probs = split
            .probabilities(dropoff, Direction::Backward)
            .ok_or(DecomposeError::MissingDirection { dropoff, direction: Direction::Backward })?;
        let mut by_workstation: BTreeMap<u32, f64> = BTreeMap::new();
        for (_, w, p) in &probs {
            *by_workstation.entry(*w).or_default() += p;
        }
        let draw: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut workstation = *by_workstation.keys().next_back().expect("nonempty");
        for (&w, &p) in &by_workstation {
            acc += p;
            if draw < acc {
                workstation = w;
                break;
            }
        }

        // Within the drawn workstation's group, paths keep their optimal
        // proportions; each carries the connector needed from this node.
        let group: Vec<(usize, f64)> = paths
            .entries_for(Direction::Backward, dropoff)
            .filter(|(_, e)| e.workstation == workstation && e.nodes.len() >= 3)
            .map(|(i, e)| (i, e.intensity))
            .collect();
        let total: f64 = group.iter().map(|(_, f)| f).sum();
        let mut draw = self.rng.gen::<f64>() * total;
        let mut entry_idx = group.last().map(|(i, _)| *i).ok_or_else(|| {
            SimError::Config(format!(
                "no backward paths from drop-off {dropoff} to workstation {workstation}"
            ))
        })?;
        for &(i, f) in &group {
            draw -= f;
            if draw <= 0.0 {
                entry_idx = i;
                break;
            }
        }

        if let Some(plan) = self.return_plans.get(&(current, entry_idx)) {
            self.robots[id].plan = plan.clone();
            return Ok(workstation);
        }
        let first_physical = paths.entries[entry_idx].nodes[2];
        let mut actions = VecDeque::new();
        if first_physical != current {
            let prefix = static_shortest_path(
                self.network,
                self.ticks_cfg.t2,
                current,
                |n| n == first_physical,
                None,
            )
            .ok_or_else(|| {
                SimError::Config("no connector from drop cell to backward path start".into())
            })?;
            actions.extend(compile_path(self.network, &prefix)?);
        }
        actions.extend(compile_path(self.network, &paths.entries[entry_idx].nodes)?);
        self.return_plans.insert((current, entry_idx), actions.clone());
        self.robots[id].plan = actions;
        Ok(workstation)
    }

    /// Free-flow execution ticks of a node path: 1 per move, T2 per turn.
    fn path_ticks(&self, nodes: &[usize]) -> u64 {
        let mut ticks = 0;
        for pair in nodes.windows(2) {
            match (self.network.nodes[pair[0]], self.network.nodes[pair[1]]) {
                (
                    crate::network::NodeKind::CellHeading { cell: a, .. },
                    crate::network::NodeKind::CellHeading { cell: b, .. },
                ) => ticks += if a == b { self.ticks_cfg.t2 } else { 1 },
                (crate::network::NodeKind::Workstation(_), crate::network::NodeKind::CellHeading { .. }) => {
                    ticks += 1
                }
                (crate::network::NodeKind::CellHeading { .. }, crate::network::NodeKind::Workstation(_)) => {
                    ticks += 1
                }
                (crate::network::NodeKind::CellHeading { .. }, crate::network::NodeKind::DropOff(_)) => {
                    ticks += self.ticks_cfg.t_drop
                }
                _ => {}
            }
        }
        ticks
    }

    /// Queue a planner-driven leg; the plan attempt happens in the movement
    /// phase (and retries there every tick until it succeeds).
    fn request_planned_leg(&mut self, id: RobotId, goal: PlanGoal) {
        self.robots[id].pending_goal = Some(goal);
        self.robots[id].plan.clear();
        self.robots[id].park_since = self.now;
        if let Loc::Cell(cell) = self.robots[id].loc {
            self.parked.park(id, cell, self.now);
        }
    }

    /// Loading countdowns, completions, and new loading starts.
    fn service_workstations(&mut self) -> Result<(), SimError> {
        for w_idx in 0..self.workstations.len() {
            if let Some(id) = self.workstations[w_idx].loading {
                self.robots[id].timer -= 1;
                if self.robots[id].timer == 0 {
                    let elapsed = self.now - self.robots[id].phase_started;
                    if self.assertions && elapsed != self.ticks_cfg.t_load {
                        self.metrics.safety.duration_violations += 1;
                    }
                    self.workstations[w_idx].loading = None;
                    self.robots[id].phase = Phase::AwaitExit;
                    self.robots[id].trip_started = Some(self.now);
                    self.workstations[w_idx].exit_buffer.push_back(id);
                    let dropoff = self.robots[id].carrying.expect("loading robot has a parcel");
                    if self.policy.uses_planner() {
                        self.request_planned_leg(id, PlanGoal::DropAt(dropoff));
                    }
                }
            }
        }
        // Start new loads after completions so the worker serves back to back.
        for w_idx in 0..self.workstations.len() {
            if self.workstations[w_idx].loading.is_some()
                || self.workstations[w_idx].queue.is_empty()
                || self.starved[w_idx]
            {
                continue;
            }
            self.ensure_parcel(w_idx)?;
            let id = self.workstations[w_idx].queue.pop_front().expect("queue nonempty");
            let parcel = self.workstations[w_idx].parcels.pop_front().expect("parcel ensured");
            self.robots[id].carrying = Some(parcel.dropoff);
            self.robots[id].phase = Phase::Loading;
            self.robots[id].timer = self.ticks_cfg.t_load;
            self.robots[id].phase_started = self.now;
            self.workstations[w_idx].loading = Some(id);
            if let Some(entry) = parcel.path_entry {
                let paths = match self.policy {
                    Policy::FlowGuided { paths, .. } => paths,
                    _ => unreachable!("path entries only exist under the flow policy"),
                };
                self.robots[id].plan = compile_path(self.network, &paths.entries[entry].nodes)?;
            }
        }
        Ok(())
    }

    /// Generate stream parcels until workstation `w_idx` has one. Parcels are
    /// drawn in a fixed global order (drop-off uniform, workstation by
    /// policy) independent of system state.
    fn ensure_parcel(&mut self, w_idx: usize) -> Result<(), SimError> {
        let mut pulls = 0u64;
        while self.workstations[w_idx].parcels.is_empty() {
            let dropoff = self.rng.gen_range(1..=self.network.n_dropoffs as u32);
            let (workstation, path_entry) = match self.policy {
                Policy::FlowGuided { split, .. } => {
                    let (w, entry) =
                        policy_flow_guided(split, Direction::Forward, dropoff, &mut self.rng)?;
                    (w, Some(entry))
                }
                Policy::Random => (policy_random(self.network.n_workstations, &mut self.rng)?, None),
                Policy::Zoning => {
                    let z = self.zones.as_ref().expect("zoning policy carries a zone map");
                    (policy_zoning_parcel(z, dropoff), None)
                }
            };
            self.workstations[workstation as usize - 1]
                .parcels
                .push_back(Parcel { dropoff, path_entry });
            pulls += 1;
            if pulls > 100_000 {
                return Err(SimError::Config(format!(
                    "workstation {} never receives parcels under this policy",
                    w_idx + 1
                )));
            }
        }
        Ok(())
    }

    /// Start timed actions, collect move requests, resolve them, apply
    /// grants. Returns the wait-for edges of denied robots.
    fn movement_phase(&mut self) -> Result<BTreeMap<RobotId, RobotId>, SimError> {
        // Planner retries for robots awaiting a route.
        for id in 0..self.robots.len() {
            if self.robots[id].pending_goal.is_some() && self.robots[id].plan.is_empty() {
                self.try_plan(id, None);
            }
        }
        // Start timed actions and gather move intents.
        let mut requests: BTreeMap<usize, Vec<RobotId>> = BTreeMap::new();
        for id in 0..self.robots.len() {
            if !matches!(self.robots[id].phase, Phase::Travel | Phase::AwaitExit) {
                continue;
            }
            if matches!(self.robots[id].phase, Phase::AwaitExit) && !self.may_exit(id) {
                continue;
            }
            match self.robots[id].plan.front().copied() {
                Some(Action::Move { cell, .. }) => {
                    requests.entry(cell).or_default().push(id);
                }
                Some(Action::Turn { to }) => {
                    self.robots[id].phase = Phase::Turning { pending: to };
                    self.robots[id].timer = self.ticks_cfg.t2;
                    self.robots[id].phase_started = self.now;
                    self.robots[id].plan.pop_front();
                }
                Some(Action::Drop { dropoff }) => {
                    self.robots[id].phase = Phase::Dropping { dropoff };
                    self.robots[id].timer = self.ticks_cfg.t_drop;
                    self.robots[id].phase_started = self.now;
                    self.robots[id].plan.pop_front();
                }
                Some(Action::Wait { ticks }) => {
                    self.robots[id].phase = Phase::TimedWait;
                    self.robots[id].timer = ticks;
                    self.robots[id].phase_started = self.now;
                    self.robots[id].plan.pop_front();
                }
                Some(Action::Enter { workstation }) => {
                    self.apply_enter(id, workstation);
                }
                None => {}
            }
        }

        let occupancy = &self.occupancy;
        let resolution = resolve_cell_requests(&requests, |cell| occupancy[cell], &mut self.rng);
        for (id, cell) in resolution.grants {
            self.apply_move(id, cell)?;
        }
        let mut edges = BTreeMap::new();
        for (id, blocker) in resolution.blocked {
            edges.insert(id, blocker);
            if self.policy.uses_planner() {
                // Knocked off schedule: drop the stale timetable and replan
                // next tick from wherever the robot stands.
                let goal = self.current_goal(id);
                if let Some(goal) = goal {
                    self.reservations.release(id);
                    self.request_planned_leg(id, goal);
                }
            }
        }
        Ok(edges)
    }

    /// Flow-guided exits leave in load-completion order; planner exits run on
    /// their own timetables.
    fn may_exit(&self, id: RobotId) -> bool {
        let w = match self.robots[id].loc {
            Loc::Queue(w) => w,
            Loc::Cell(_) => return true,
        };
        match self.policy {
            Policy::FlowGuided { .. } => {
                self.workstations[w as usize - 1].exit_buffer.front() == Some(&id)
            }
            _ => true,
        }
    }

    fn current_goal(&self, id: RobotId) -> Option<PlanGoal> {
        if let Some(d) = self.robots[id].carrying {
            Some(PlanGoal::DropAt(d))
        } else {
            self.robots[id].return_to.map(PlanGoal::Workstation)
        }
    }

    fn try_plan(&mut self, id: RobotId, excluded_cell: Option<usize>) -> bool {
        let goal = match self.robots[id].pending_goal {
            Some(g) => g,
            None => return false,
        };
        let start = match self.robots[id].loc {
            Loc::Cell(cell) => PlanStart::OnCell { cell, heading: self.robots[id].heading },
            Loc::Queue(w) => PlanStart::AtWorkstation(w),
        };
        let ctx = PlannerContext {
            network: self.network,
            turn_ticks: self.ticks_cfg.t2,
            drop_ticks: self.ticks_cfg.t_drop,
            horizon: self.horizon,
        };
        match ca_star_plan(
            &ctx,
            &self.reservations,
            &self.parked,
            &mut self.heuristics,
            id,
            start,
            goal,
            self.now,
            excluded_cell,
        ) {
            Some(plan) => {
                if let Loc::Cell(cell) = self.robots[id].loc {
                    self.parked.unpark(cell, id);
                }
                self.reservations.reserve(id, plan.claims);
                self.robots[id].plan = plan.actions.into();
                self.robots[id].pending_goal = None;
                self.robots[id].starvation_flagged = false;
                true
            }
            None => {
                // A robot that cannot find any route for longer than the
                // planning horizon is wedged for good; count it once.
                if self.now - self.robots[id].park_since > self.horizon
                    && !self.robots[id].starvation_flagged
                {
                    self.robots[id].starvation_flagged = true;
                    self.metrics.unresolved_deadlocks += 1;
                    self.metrics.flagged = true;
                }
                false
            }
        }
    }

    fn apply_move(&mut self, id: RobotId, cell: usize) -> Result<(), SimError> {
        let (heading, from_node) = match self.robots[id].plan.front() {
            Some(&Action::Move { heading, .. }) => {
                let from = match self.robots[id].loc {
                    Loc::Cell(c) => self.network.cell_heading_node(c, self.robots[id].heading),
                    Loc::Queue(w) => Some(self.network.workstation_node(w)),
                };
                (heading, from)
            }
            _ => unreachable!("grant applies to a move intent"),
        };
        if self.assertions {
            if let Loc::Cell(old) = self.robots[id].loc {
                let (r1, c1) = (old / self.network.cols, old % self.network.cols);
                let (r2, c2) = (cell / self.network.cols, cell % self.network.cols);
                if r1.abs_diff(r2) + c1.abs_diff(c2) != 1 {
                    self.metrics.safety.nonadjacent_moves += 1;
                }
            }
            if self.policy.uses_planner() {
                let sound = self.reservations.holder(cell, self.now) == Some(id)
                    && self.reservations.holder(cell, self.now + 1) == Some(id);
                if !sound {
                    self.metrics.safety.reservation_violations += 1;
                }
            }
        }
        match self.robots[id].loc {
            Loc::Cell(old) => {
                self.occupancy[old] = None;
            }
            Loc::Queue(w) => {
                let buffer = &mut self.workstations[w as usize - 1].exit_buffer;
                if let Some(pos) = buffer.iter().position(|&r| r == id) {
                    buffer.remove(pos);
                }
            }
        }
        if self.in_window() {
            if let (Some(from), Some(to)) =
                (from_node, self.network.cell_heading_node(cell, heading))
            {
                if let Some(arc) = self.network.arc_id(from, to) {
                    self.metrics.arc_traversals[arc] += 1;
                }
            }
            self.metrics.cell_entry_counts[cell] += 1;
        }
        self.occupancy[cell] = Some(id);
        self.robots[id].loc = Loc::Cell(cell);
        self.robots[id].heading = heading;
        self.robots[id].phase = Phase::Travel;
        self.robots[id].plan.pop_front();
        Ok(())
    }

    fn apply_enter(&mut self, id: RobotId, workstation: u32) {
        if let Loc::Cell(cell) = self.robots[id].loc {
            if self.in_window() {
                if let Some(node) = self.network.cell_heading_node(cell, self.robots[id].heading) {
                    let w_node = self.network.workstation_node(workstation);
                    if let Some(arc) = self.network.arc_id(node, w_node) {
                        self.metrics.arc_traversals[arc] += 1;
                    }
                }
            }
            self.occupancy[cell] = None;
            self.parked.unpark(cell, id);
        }
        if self.policy.uses_planner() {
            self.reservations.release(id);
        }
        self.robots[id].loc = Loc::Queue(workstation);
        self.robots[id].phase = Phase::Queued;
        self.robots[id].plan.pop_front();
        self.robots[id].return_to = None;
        self.workstations[workstation as usize - 1].queue.push_back(id);
    }

    fn resolve_deadlocks(&mut self, edges: &BTreeMap<RobotId, RobotId>) -> Result<(), SimError> {
        let cycles = find_blocking_cycles(edges);
        for cycle in cycles {
            let mut key = cycle.clone();
            key.sort_unstable();
            if self.unresolved_seen.contains(&key) {
                continue; // already known unresolvable; do not recount
            }
            self.metrics.deadlock_events += 1;
            // Reroute the first member (by id) with a usable detour around
            // its contested cell.
            let mut members: Vec<RobotId> = cycle.clone();
            members.sort_unstable();
            let mut resolved = false;
            for victim in members {
                let blocked_cell = match self.robots[victim].plan.front() {
                    Some(&Action::Move { cell, .. }) => cell,
                    // Planner robots already dropped their plan on denial;
                    // their next plan routes around the parked blockers.
                    _ => continue,
                };
                if self.reroute(victim, blocked_cell)? {
                    resolved = true;
                    break;
                }
            }
            if resolved {
                continue;
            }
            if std::env::var_os("SORTFLOW_DEBUG_DEADLOCK").is_some() {
                eprintln!("tick {}: UNRESOLVED cycle {:?}", self.now, cycle);
                for &r in &cycle {
                    let robot = &self.robots[r];
                    eprintln!(
                        "  robot {r}: loc {:?} heading {:?} carrying {:?} return {:?} next {:?}",
                        robot.loc, robot.heading, robot.carrying, robot.return_to,
                        robot.plan.front()
                    );
                }
            }
            self.unresolved_seen.insert(key);
            self.metrics.unresolved_deadlocks += 1;
            self.metrics.flagged = true;
        }
        Ok(())
    }

    /// Reroute one robot around the contested cell. Flow-guided robots take a
    /// free-flow shortest path to their goal; planner robots replan with the
    /// cell excluded.
    fn reroute(&mut self, id: RobotId, blocked_cell: usize) -> Result<bool, SimError> {
        let goal = match self.current_goal(id) {
            Some(g) => g,
            None => return Ok(false),
        };
        if self.policy.uses_planner() {
            self.reservations.release(id);
            self.robots[id].pending_goal = Some(goal);
            self.robots[id].plan.clear();
            if let Loc::Cell(cell) = self.robots[id].loc {
                self.parked.park(id, cell, self.now);
            }
            return Ok(self.try_plan(id, Some(blocked_cell)));
        }
        let (cell, heading) = match self.robots[id].loc {
            Loc::Cell(c) => (c, self.robots[id].heading),
            Loc::Queue(_) => return Ok(false),
        };
        let from = match self.network.cell_heading_node(cell, heading) {
            Some(n) => n,
            None => return Ok(false),
        };
        let goal_node = match goal {
            PlanGoal::DropAt(d) => self.network.dropoff_node(d),
            PlanGoal::Workstation(w) => self.network.workstation_node(w),
        };
        match static_shortest_path(self.network, self.ticks_cfg.t2, from, |n| n == goal_node, Some(blocked_cell)) {
            Some(path) => {
                self.robots[id].plan = compile_path(self.network, &path)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn verify_invariants(&mut self) {
        let mut seen = vec![false; self.occupancy.len()];
        for robot in &self.robots {
            if let Loc::Cell(c) = robot.loc {
                if seen[c] {
                    self.metrics.safety.occupancy_violations += 1;
                }
                seen[c] = true;
                if self.occupancy[c] != Some(robot.id) {
                    self.metrics.safety.occupancy_violations += 1;
                }
            }
        }
        for (c, &occ) in self.occupancy.iter().enumerate() {
            if occ.is_some() && !seen[c] {
                self.metrics.safety.occupancy_violations += 1;
            }
        }
    }

    fn finalize(&mut self) {
        let window = (self.total_ticks - self.warmup).max(1);
        self.metrics.throughput = self.metrics.drops as f64 / window as f64;
        self.metrics.mean_trip_time = if self.trip_count > 0 {
            self.trip_time_sum as f64 / self.trip_count as f64
        } else {
            0.0
        };
    }
}

fn max_finite(table: &[u64]) -> u64 {
    table.iter().copied().filter(|&v| v != u64::MAX).max().unwrap_or(0)
}

/// Outcome of one tick's cell-request resolution.
#[derive(Debug, Clone, Default)]
pub struct RequestResolution {
    pub grants: Vec<(RobotId, usize)>,
    /// (denied robot, robot blocking it).
    pub blocked: Vec<(RobotId, RobotId)>,
}

/// One-cell-lookahead arbitration: a request is granted only if the target
/// cell is empty this tick; simultaneous requests for one free cell are
/// settled uniformly at random; losers and robots behind an occupant wait.
pub fn resolve_cell_requests(
    requests: &BTreeMap<usize, Vec<RobotId>>,
    occupant: impl Fn(usize) -> Option<RobotId>,
    rng: &mut impl Rng,
) -> RequestResolution {
    let mut out = RequestResolution::default();
    for (&cell, requesters) in requests {
        if let Some(holder) = occupant(cell) {
            for &r in requesters {
                out.blocked.push((r, holder));
            }
            continue;
        }
        let winner_idx = if requesters.len() == 1 { 0 } else { rng.gen_range(0..requesters.len()) };
        let winner = requesters[winner_idx];
        out.grants.push((winner, cell));
        for &r in requesters {
            if r != winner {
                out.blocked.push((r, winner));
            }
        }
    }
    out
}

/// Cycles in the wait-for graph. Each blocked robot waits on exactly one
/// other, so the graph is functional and every cycle is node-disjoint.
pub fn find_blocking_cycles(edges: &BTreeMap<RobotId, RobotId>) -> Vec<Vec<RobotId>> {
    let mut state: BTreeMap<RobotId, u8> = BTreeMap::new(); // 1 visiting, 2 done
    let mut cycles = Vec::new();
    for &start in edges.keys() {
        if state.contains_key(&start) {
            continue;
        }
        let mut trail = Vec::new();
        let mut cur = start;
        loop {
            match state.get(&cur) {
                Some(1) => {
                    // Found a cycle: the suffix of the trail from cur.
                    let pos = trail.iter().position(|&r| r == cur).expect("on trail");
                    cycles.push(trail[pos..].to_vec());
                    break;
                }
                Some(_) => break,
                None => {
                    state.insert(cur, 1);
                    trail.push(cur);
                    match edges.get(&cur) {
                        Some(&next) => cur = next,
                        None => break,
                    }
                }
            }
        }
        for r in trail {
            state.insert(r, 2);
        }
    }
    cycles
}
