//! Link-cost model: cell blocking delay, workstation queueing delay, and the
//! total-cost objective with its analytic gradient.
//!
//! A robot entering cell j waits for the residual service of whoever holds j
//! plus, with probability one half, for a competitor arriving from the other
//! approach. Under the empty-downstream approximation the per-visit service
//! time G_j is categorical: 2*T1 for passing straight through, 2*T1 + T2 when
//! turning in place, 2*T1 + T_drop when releasing a parcel. The expected wait
//! on an arc into j is then
//!
//! ```text
//! E[S_ij] = v_j/2 * E[G_j^2] + v_kj/2 * E[G_k] * E[G_j]
//! ```
//!
//! with v_j the total flow through j and v_kj the competing approach flow.
//! Workstations are M/G/1 queues costed by the Pollaczek-Khinchin mean
//! formula. All delay terms are flow-weighted polynomial or rational forms,
//! so the gradient of the total cost is assembled exactly by the chain rule
//! over the per-cell aggregates; no numeric differentiation is involved.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{ApproachTail, ArcKind, Direction, FlowNetwork, NodeKind};

/// Utilizations at or above `1 - SATURATION_EPS` are treated as saturated.
pub const SATURATION_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DelayError {
    #[error("workstation {id} is saturated (utilization {utilization:.6})")]
    SaturatedWorkstation { id: u32, utilization: f64 },
    #[error("invalid timing parameters: {0}")]
    InvalidTiming(String),
}

/// Robot action timings, in time-step units. Loading and dropping may be
/// random; the model only needs their first two moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    /// Time to move one cell length.
    pub t1: f64,
    /// Time for a 90-degree in-place turn.
    pub t2: f64,
    /// Mean parcel loading time and its second moment.
    pub t_load_mean: f64,
    pub t_load_sq: f64,
    /// Mean parcel release time and its second moment.
    pub t_drop_mean: f64,
    pub t_drop_sq: f64,
}

impl TimingParams {
    /// All action times deterministic; second moments are the squared means.
    pub fn deterministic(t1: f64, t2: f64, t_load: f64, t_drop: f64) -> TimingParams {
        TimingParams {
            t1,
            t2,
            t_load_mean: t_load,
            t_load_sq: t_load * t_load,
            t_drop_mean: t_drop,
            t_drop_sq: t_drop * t_drop,
        }
    }

    /// The paper-scale experiment timings: T1=1, T2=4, T_load=3, T_drop=1.
    pub fn standard() -> TimingParams {
        TimingParams::deterministic(1.0, 4.0, 3.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), DelayError> {
        let positive = [
            ("t1", self.t1),
            ("t2", self.t2),
            ("t_load_mean", self.t_load_mean),
            ("t_load_sq", self.t_load_sq),
            ("t_drop_mean", self.t_drop_mean),
            ("t_drop_sq", self.t_drop_sq),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(DelayError::InvalidTiming(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.t_load_sq < self.t_load_mean * self.t_load_mean - 1e-12 {
            return Err(DelayError::InvalidTiming("E[T_load^2] < E[T_load]^2".into()));
        }
        if self.t_drop_sq < self.t_drop_mean * self.t_drop_mean - 1e-12 {
            return Err(DelayError::InvalidTiming("E[T_drop^2] < E[T_drop]^2".into()));
        }
        Ok(())
    }

    /// Worst-case single-robot cell occupancy, max(T2+2*T1, T_drop+2*T1).
    pub fn worst_cell_occupancy(&self) -> f64 {
        (self.t2 + 2.0 * self.t1).max(self.t_drop_mean + 2.0 * self.t1)
    }

    /// First and second moments of the through-service time 2*T1.
    fn g_through(&self) -> (f64, f64) {
        let m = 2.0 * self.t1;
        (m, m * m)
    }

    /// Moments of the turning-service time 2*T1 + T2 (T2 deterministic).
    fn g_turn(&self) -> (f64, f64) {
        let m = 2.0 * self.t1 + self.t2;
        (m, m * m)
    }

    /// Moments of the dropping-service time 2*T1 + T_drop.
    fn g_drop(&self) -> (f64, f64) {
        let m = 2.0 * self.t1 + self.t_drop_mean;
        let sq = 4.0 * self.t1 * self.t1 + 4.0 * self.t1 * self.t_drop_mean + self.t_drop_sq;
        (m, sq)
    }
}

/// Nonnegative flow per arc, split by direction class. Forward and backward
/// flow on the same arc add when costing (they contend for the same cells).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFlow {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

impl LinkFlow {
    pub fn zeros(arc_count: usize) -> LinkFlow {
        LinkFlow { forward: vec![0.0; arc_count], backward: vec![0.0; arc_count] }
    }

    pub fn arc_count(&self) -> usize {
        self.forward.len()
    }

    pub fn total(&self, arc: usize) -> f64 {
        self.forward[arc] + self.backward[arc]
    }

    pub fn class(&self, direction: Direction) -> &[f64] {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    pub fn class_mut(&mut self, direction: Direction) -> &mut Vec<f64> {
        match direction {
            Direction::Forward => &mut self.forward,
            Direction::Backward => &mut self.backward,
        }
    }

    /// Convex combination `(1-alpha)*self + alpha*other`, both classes.
    pub fn interpolate(&self, other: &LinkFlow, alpha: f64) -> LinkFlow {
        let mix = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
        };
        LinkFlow {
            forward: mix(&self.forward, &other.forward),
            backward: mix(&self.backward, &other.backward),
        }
    }

    pub fn min_value(&self) -> f64 {
        self.forward
            .iter()
            .chain(self.backward.iter())
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// Worst violation of per-class conservation and per-drop-off demand,
    /// measured against the network's commodity list.
    pub fn max_constraint_residual(&self, network: &FlowNetwork) -> f64 {
        let mut worst: f64 = 0.0;
        for direction in [Direction::Forward, Direction::Backward] {
            let flows = self.class(direction);
            let total_demand: f64 = network
                .commodities
                .iter()
                .filter(|c| c.direction == direction)
                .map(|c| c.demand)
                .sum();
            let mut imbalance = vec![0.0f64; network.nodes.len()];
            for (i, arc) in network.arcs.iter().enumerate() {
                imbalance[arc.tail] += flows[i];
                imbalance[arc.head] -= flows[i];
            }
            let (origin, dest) = match direction {
                Direction::Forward => (network.source(), network.sink()),
                Direction::Backward => (network.sink(), network.source()),
            };
            for (node, imb) in imbalance.iter().enumerate() {
                let expected = if node == origin {
                    total_demand
                } else if node == dest {
                    -total_demand
                } else {
                    0.0
                };
                worst = worst.max((imb - expected).abs());
            }
        }
        // Demand satisfaction per drop-off, read off the exit arcs.
        for commodity in &network.commodities {
            let d_node = network.dropoff_node(commodity.dropoff);
            let arc = match commodity.direction {
                Direction::Forward => network.arc_id(d_node, network.sink()),
                Direction::Backward => network.arc_id(network.sink(), d_node),
            };
            if let Some(arc) = arc {
                let got = self.class(commodity.direction)[arc];
                worst = worst.max((got - commodity.demand).abs());
            }
        }
        worst
    }
}

/// Arc costs at a given flow, plus the gradient of the total cost.
#[derive(Debug, Clone)]
pub struct CostVector {
    /// Expected traversal cost per arc at the evaluated flow.
    pub cost: Vec<f64>,
    /// d(TC)/d(v_a) per arc.
    pub gradient: Vec<f64>,
}

/// Flow composition of one cell: the Eq.-(9)-style partition of everything
/// passing through it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellComposition {
    pub through: f64,
    pub turning: f64,
    pub dropping: f64,
    pub total: f64,
    /// Arriving Move arcs with their flows, one entry per approach.
    pub approach_flows: Vec<(usize, f64)>,
}

/// Per-cell aggregate moments shared by cost and gradient evaluation.
#[derive(Debug, Clone, Copy, Default)]
struct CellAggregates {
    /// Total cell flow v_j (arrivals plus drop-off resumptions).
    v: f64,
    /// Arrival flow only (sum of approach flows).
    arrivals: f64,
    /// Flow-weighted second service moment, v*E[G^2].
    m2: f64,
    /// E[G] (zero when the cell carries no flow).
    g_mean: f64,
}

fn cell_aggregates(network: &FlowNetwork, flow: &LinkFlow, timing: &TimingParams) -> Vec<CellAggregates> {
    let (g1m, g1sq) = timing.g_through();
    let (g2m, g2sq) = timing.g_turn();
    let (g3m, g3sq) = timing.g_drop();
    network
        .cells
        .iter()
        .map(|cell| {
            let v: f64 = cell.inflow_arcs.iter().map(|&a| flow.total(a)).sum();
            let arrivals: f64 = cell.approaches.iter().map(|ap| flow.total(ap.arc)).sum();
            let turning: f64 = cell.turn_arcs.iter().map(|&a| flow.total(a)).sum();
            let dropping: f64 = cell.drop_arcs.iter().map(|&a| flow.total(a)).sum();
            let through = v - turning - dropping;
            let m1 = g1m * through + g2m * turning + g3m * dropping;
            let m2 = g1sq * through + g2sq * turning + g3sq * dropping;
            let g_mean = if v > 0.0 { m1 / v } else { 0.0 };
            CellAggregates { v, arrivals, m2, g_mean }
        })
        .collect()
}

/// Split one cell's flow into through, turning, and dropping components. The
/// three always sum to the cell total; a zero-flow cell yields all zeros.
pub fn cell_composition(network: &FlowNetwork, flow: &LinkFlow, cell: usize) -> CellComposition {
    let table = &network.cells[cell];
    let total: f64 = table.inflow_arcs.iter().map(|&a| flow.total(a)).sum();
    let turning: f64 = table.turn_arcs.iter().map(|&a| flow.total(a)).sum();
    let dropping: f64 = table.drop_arcs.iter().map(|&a| flow.total(a)).sum();
    CellComposition {
        through: total - turning - dropping,
        turning,
        dropping,
        total,
        approach_flows: table.approaches.iter().map(|ap| (ap.arc, flow.total(ap.arc))).collect(),
    }
}

fn approach_tail_g_mean(aggregates: &[CellAggregates], tail: ApproachTail, timing: &TimingParams) -> f64 {
    match tail {
        ApproachTail::Cell(ord) => aggregates[ord].g_mean,
        // A workstation exit behaves like a through cell: the doorway is held
        // for the in-move and the out-move.
        ApproachTail::Workstation(_) => timing.g_through().0,
    }
}

/// Expected blocking wait on a Move arc into a cell. Returns 0 for arcs that
/// do not end on a cell.
pub fn expected_cell_delay(
    network: &FlowNetwork,
    flow: &LinkFlow,
    timing: &TimingParams,
    arc: usize,
) -> f64 {
    let head_cell = match network.nodes[network.arcs[arc].head] {
        NodeKind::CellHeading { cell, .. } => cell,
        _ => return 0.0,
    };
    let ord = match network.cell_ordinal(head_cell) {
        Some(o) => o,
        None => return 0.0,
    };
    let aggregates = cell_aggregates(network, flow, timing);
    expected_cell_delay_with(network, flow, timing, &aggregates, arc, ord)
}

fn expected_cell_delay_with(
    network: &FlowNetwork,
    flow: &LinkFlow,
    timing: &TimingParams,
    aggregates: &[CellAggregates],
    arc: usize,
    cell_ord: usize,
) -> f64 {
    let agg = &aggregates[cell_ord];
    let mut delay = agg.m2 / 2.0;
    let table = &network.cells[cell_ord];
    for other in &table.approaches {
        if other.arc == arc {
            continue;
        }
        let u_other = flow.total(other.arc);
        delay += u_other / 2.0 * approach_tail_g_mean(aggregates, other.tail, timing) * agg.g_mean;
    }
    delay
}

/// Mean source-to-workstation time: loading plus the M/G/1 queue wait.
/// Errors when the load-arc utilization reaches saturation.
pub fn workstation_delay(
    network: &FlowNetwork,
    flow: &LinkFlow,
    workstation: u32,
    timing: &TimingParams,
) -> Result<f64, DelayError> {
    let arc = network
        .arc_id(network.source(), network.workstation_node(workstation))
        .expect("load arc exists for every workstation");
    load_arc_cost(flow.total(arc), workstation, timing)
}

fn load_arc_cost(v: f64, workstation: u32, timing: &TimingParams) -> Result<f64, DelayError> {
    let rho = v * timing.t_load_mean;
    if rho >= 1.0 - SATURATION_EPS {
        return Err(DelayError::SaturatedWorkstation { id: workstation, utilization: rho });
    }
    Ok(timing.t_load_mean + v * timing.t_load_sq / (2.0 * (1.0 - rho)))
}

/// d/dv of v * load_arc_cost(v).
fn load_arc_total_cost_derivative(v: f64, timing: &TimingParams) -> f64 {
    let rho = v * timing.t_load_mean;
    let c = timing.t_load_mean + v * timing.t_load_sq / (2.0 * (1.0 - rho));
    let c_prime = timing.t_load_sq / (2.0 * (1.0 - rho) * (1.0 - rho));
    c + v * c_prime
}

/// Free-flow (zero-flow) cost of one arc.
pub fn free_flow_cost(network: &FlowNetwork, arc: usize, timing: &TimingParams) -> f64 {
    let a = &network.arcs[arc];
    match a.kind {
        ArcKind::Move => timing.t1,
        ArcKind::Turn => timing.t2,
        ArcKind::Load => timing.t_load_mean,
        ArcKind::Sorter | ArcKind::Exit => 0.0,
        ArcKind::Drop => match network.nodes[a.tail] {
            // Releasing costs E[T_drop]; resuming from the drop-off is free,
            // the robot is already standing on the cell.
            NodeKind::CellHeading { .. } => timing.t_drop_mean,
            _ => 0.0,
        },
    }
}

fn arc_costs(
    network: &FlowNetwork,
    flow: &LinkFlow,
    timing: &TimingParams,
    aggregates: &[CellAggregates],
) -> Result<Vec<f64>, DelayError> {
    let mut costs = vec![0.0; network.arcs.len()];
    for (i, arc) in network.arcs.iter().enumerate() {
        costs[i] = match arc.kind {
            ArcKind::Load => {
                let id = match network.nodes[arc.head] {
                    NodeKind::Workstation(id) => id,
                    _ => unreachable!("load arcs end at workstations"),
                };
                load_arc_cost(flow.total(i), id, timing)?
            }
            ArcKind::Move => {
                let base = timing.t1;
                match network.nodes[arc.head] {
                    NodeKind::CellHeading { cell, .. } => {
                        let ord = network.cell_ordinal(cell).expect("cell table exists");
                        base + expected_cell_delay_with(network, flow, timing, aggregates, i, ord)
                    }
                    _ => base,
                }
            }
            _ => free_flow_cost(network, i, timing),
        };
    }
    Ok(costs)
}

/// Total system cost: sum over arcs of flow times expected arc cost.
pub fn total_cost(
    network: &FlowNetwork,
    flow: &LinkFlow,
    timing: &TimingParams,
) -> Result<f64, DelayError> {
    let aggregates = cell_aggregates(network, flow, timing);
    let costs = arc_costs(network, flow, timing, &aggregates)?;
    Ok(costs.iter().zip(0..).map(|(c, i)| c * flow.total(i)).sum())
}

/// Arc costs and the exact gradient of the total cost at `flow`.
pub fn cost_gradient(
    network: &FlowNetwork,
    flow: &LinkFlow,
    timing: &TimingParams,
) -> Result<CostVector, DelayError> {
    let (g1m, g1sq) = timing.g_through();
    let (g2m, g2sq) = timing.g_turn();
    let (g3m, g3sq) = timing.g_drop();
    let aggregates = cell_aggregates(network, flow, timing);
    let costs = arc_costs(network, flow, timing, &aggregates)?;

    // Sensitivities of the delay sum D = sum_a v_a * E[S_a] to each cell's
    // second-moment mass m2 and mean service time E[G].
    let n_cells = network.cells.len();
    let mut sens_m2 = vec![0.0f64; n_cells];
    let mut sens_g = vec![0.0f64; n_cells];
    for (ord, table) in network.cells.iter().enumerate() {
        let agg = &aggregates[ord];
        sens_m2[ord] += agg.arrivals / 2.0;
        if table.approaches.len() == 2 {
            let u0 = flow.total(table.approaches[0].arc);
            let u1 = flow.total(table.approaches[1].arc);
            let cross = u0 * u1 / 2.0;
            // Own mean appears in the cross term ...
            let tail_g_sum = approach_tail_g_mean(&aggregates, table.approaches[0].tail, timing)
                + approach_tail_g_mean(&aggregates, table.approaches[1].tail, timing);
            sens_g[ord] += cross * tail_g_sum;
            // ... and each approach tail's mean does too.
            for ap in &table.approaches {
                if let ApproachTail::Cell(tail_ord) = ap.tail {
                    sens_g[tail_ord] += cross * agg.g_mean;
                }
            }
        }
    }

    let mut gradient = vec![0.0f64; network.arcs.len()];
    // Chain-rule contributions of each arc to the cell aggregates it drives.
    let add_cell_terms = |gradient: &mut [f64], arc: usize, ord: usize, dm1: f64, dm2: f64, is_inflow: bool| {
        let agg = &aggregates[ord];
        gradient[arc] += sens_m2[ord] * dm2;
        if agg.v > 0.0 {
            // dE[G]/dv_arc: inflow arcs shift the mean toward g1 and raise v;
            // turn and drop arcs reclassify flow without changing v.
            let dg = if is_inflow { (dm1 - agg.g_mean) / agg.v } else { dm1 / agg.v };
            gradient[arc] += sens_g[ord] * dg;
        }
    };

    for (ord, table) in network.cells.iter().enumerate() {
        let agg = &aggregates[ord];
        for (slot, ap) in table.approaches.iter().enumerate() {
            // Arrival arcs: base move cost, the A_c channel, the v1 channel,
            // and the direct competitor term.
            gradient[ap.arc] += agg.m2 / 2.0;
            add_cell_terms(&mut gradient, ap.arc, ord, g1m, g1sq, true);
            if table.approaches.len() == 2 {
                let other = &table.approaches[1 - slot];
                let u_other = flow.total(other.arc);
                let tail_g_sum = approach_tail_g_mean(&aggregates, ap.tail, timing)
                    + approach_tail_g_mean(&aggregates, other.tail, timing);
                gradient[ap.arc] += u_other / 2.0 * agg.g_mean * tail_g_sum;
            }
        }
        for &arc in &table.inflow_arcs {
            if table.approaches.iter().any(|ap| ap.arc == arc) {
                continue; // handled above
            }
            // Drop-off resumption: feeds v and the through class.
            add_cell_terms(&mut gradient, arc, ord, g1m, g1sq, true);
        }
        for &arc in &table.turn_arcs {
            add_cell_terms(&mut gradient, arc, ord, g2m - g1m, g2sq - g1sq, false);
        }
        for &arc in &table.drop_arcs {
            add_cell_terms(&mut gradient, arc, ord, g3m - g1m, g3sq - g1sq, false);
        }
    }

    for (i, arc) in network.arcs.iter().enumerate() {
        match arc.kind {
            ArcKind::Load => gradient[i] += load_arc_total_cost_derivative(flow.total(i), timing),
            _ => gradient[i] += free_flow_cost(network, i, timing),
        }
    }

    Ok(CostVector { cost: costs, gradient })
}

/// Per-arc additive error bound on the cell-delay approximation for a fleet
/// of `robots`: max downstream cell flow times R^2 times the squared
/// worst-case occupancy. Non-Move arcs and arcs not entering a cell get 0.
pub fn approximation_error_bound(
    network: &FlowNetwork,
    flow: &LinkFlow,
    timing: &TimingParams,
    robots: u32,
) -> Vec<f64> {
    let aggregates = cell_aggregates(network, flow, timing);
    let c_g = timing.worst_cell_occupancy();
    let scale = (robots as f64) * (robots as f64) * c_g * c_g;
    let mut bounds = vec![0.0; network.arcs.len()];
    for (i, arc) in network.arcs.iter().enumerate() {
        if arc.kind != ArcKind::Move {
            continue;
        }
        if let NodeKind::CellHeading { cell, .. } = network.nodes[arc.head] {
            if let Some(ord) = network.cell_ordinal(cell) {
                let worst_downstream = network.cells[ord]
                    .downstream_cells
                    .iter()
                    .map(|&d| aggregates[d].v)
                    .fold(0.0f64, f64::max);
                bounds[i] = worst_downstream * scale;
            }
        }
    }
    bounds
}
