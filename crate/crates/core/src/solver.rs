//! Frank-Wolfe solver for the min-cost multi-commodity flow problem.
//!
//! Every iteration linearizes the total cost at the current flow, solves the
//! linear subproblem exactly with per-commodity shortest paths (the
//! constraint set decomposes into one path polytope per commodity, so
//! routing each commodity's whole demand on its cheapest path is optimal),
//! then takes a golden-section step toward the all-or-nothing point.
//! Iterations stop when successive linearized objectives agree to tolerance,
//! when the duality gap closes, or at the iteration cap.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::{cost_gradient, free_flow_cost, total_cost, DelayError, LinkFlow, TimingParams, SATURATION_EPS};
use crate::network::{ArcKind, Direction, FlowNetwork};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error("infeasible demand: offered load {load:.6} >= workstation capacity {capacity:.6}")]
    InfeasibleDemand { load: f64, capacity: f64 },
    #[error("{direction} commodity for drop-off {dropoff} has no route under the given costs")]
    DisconnectedCommodity { direction: Direction, dropoff: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative convergence tolerance: iteration stops when successive
    /// linearized objectives differ by less than `epsilon * TC(f0)`.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Golden-section refinement steps per line search.
    pub line_search_iters: usize,
    /// Reserved for stochastic tie-breaking. The current shortest-path tie
    /// rule is deterministic (smallest arc index), so the seed does not
    /// influence results; it is kept so configurations round-trip.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { epsilon: 1e-6, max_iters: 200, line_search_iters: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Total cost after this iteration's step.
    pub total_cost: f64,
    /// Linearized objective at this iteration's all-or-nothing point.
    pub linearized_cost: f64,
    pub alpha: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub hit_max_iters: bool,
    /// Gradient components clamped to zero before the shortest-path step.
    /// The delay model yields nonnegative gradients, so anything here is
    /// numerical noise worth surfacing.
    pub clamped_negative_gradients: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap via reverse; ties broken by node index for determinism.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Shortest-path tree over one direction class's admissible arcs.
///
/// With `reversed` the search walks arcs head-to-tail, producing distances
/// *to* `start`; `pred[n]` is then the first arc of n's path toward `start`.
/// Equal-distance predecessors resolve to the smallest arc index, so trees
/// are independent of heap pop order.
fn dijkstra(
    network: &FlowNetwork,
    costs: &[f64],
    direction: Direction,
    reversed: bool,
    start: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = network.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[start] = 0.0;
    heap.push(HeapEntry { dist: 0.0, node: start });
    while let Some(HeapEntry { dist: d, node }) = heap.pop() {
        if settled[node] {
            continue;
        }
        settled[node] = true;
        let arcs = if reversed { network.in_arcs(node) } else { network.out_arcs(node) };
        for &a in arcs {
            if !network.admissible(direction, a) {
                continue;
            }
            let next = if reversed { network.arcs[a].tail } else { network.arcs[a].head };
            let nd = d + costs[a];
            if nd < dist[next] {
                dist[next] = nd;
                pred[next] = Some(a);
                heap.push(HeapEntry { dist: nd, node: next });
            } else if nd == dist[next] {
                if let Some(p) = pred[next] {
                    if a < p {
                        pred[next] = Some(a);
                    }
                }
            }
        }
    }
    (dist, pred)
}

/// Route every commodity's whole demand on its cheapest admissible path
/// under the given arc costs. This solves the linearized subproblem exactly.
pub fn all_or_nothing(network: &FlowNetwork, arc_costs: &[f64]) -> Result<LinkFlow, SolverError> {
    debug_assert!(arc_costs.iter().all(|&c| c >= 0.0), "negative arc cost");
    let mut flow = LinkFlow::zeros(network.arcs.len());
    // One forward tree from the source covers all forward commodities; one
    // reversed backward tree covers all returns.
    let (fwd_dist, fwd_pred) = dijkstra(network, arc_costs, Direction::Forward, false, network.source());
    let (bwd_dist, bwd_succ) = dijkstra(network, arc_costs, Direction::Backward, true, network.source());
    for commodity in &network.commodities {
        if commodity.demand <= 0.0 {
            continue;
        }
        let d_node = network.dropoff_node(commodity.dropoff);
        match commodity.direction {
            Direction::Forward => {
                if !fwd_dist[d_node].is_finite() {
                    return Err(SolverError::DisconnectedCommodity {
                        direction: commodity.direction,
                        dropoff: commodity.dropoff,
                    });
                }
                let mut node = d_node;
                while node != network.source() {
                    let arc = fwd_pred[node].expect("finite distance implies predecessor");
                    flow.forward[arc] += commodity.demand;
                    node = network.arcs[arc].tail;
                }
                let exit = network.arc_id(d_node, network.sink()).expect("exit arc");
                flow.forward[exit] += commodity.demand;
            }
            Direction::Backward => {
                if !bwd_dist[d_node].is_finite() {
                    return Err(SolverError::DisconnectedCommodity {
                        direction: commodity.direction,
                        dropoff: commodity.dropoff,
                    });
                }
                let entry = network.arc_id(network.sink(), d_node).expect("exit arc");
                flow.backward[entry] += commodity.demand;
                let mut node = d_node;
                while node != network.source() {
                    let arc = bwd_succ[node].expect("finite distance implies successor");
                    flow.backward[arc] += commodity.demand;
                    node = network.arcs[arc].head;
                }
            }
        }
    }
    Ok(flow)
}

/// Largest step toward `target` that keeps every workstation strictly below
/// saturation.
fn saturation_alpha_max(network: &FlowNetwork, current: &LinkFlow, target: &LinkFlow, timing: &TimingParams) -> f64 {
    let cap = (1.0 - SATURATION_EPS) / timing.t_load_mean;
    let mut alpha_max = 1.0f64;
    for (i, arc) in network.arcs.iter().enumerate() {
        if arc.kind != ArcKind::Load {
            continue;
        }
        let v0 = current.total(i);
        let v1 = target.total(i);
        if v1 >= cap && v1 > v0 {
            // Stop a hair short of the cap so the endpoint stays evaluable.
            let bound = (cap - v0) / (v1 - v0) * (1.0 - 1e-9);
            alpha_max = alpha_max.min(bound.max(0.0));
        }
    }
    alpha_max
}

/// Golden-section search for the best step size from `current` toward
/// `target`. Returns `(alpha, total_cost)` with cost no worse than either
/// endpoint. The interval shrinks below saturation automatically.
pub fn line_search(
    network: &FlowNetwork,
    current: &LinkFlow,
    target: &LinkFlow,
    timing: &TimingParams,
    iters: usize,
) -> Result<(f64, f64), SolverError> {
    let alpha_max = saturation_alpha_max(network, current, target, timing);
    let phi = |alpha: f64| -> Result<f64, SolverError> {
        Ok(total_cost(network, &current.interpolate(target, alpha), timing)?)
    };
    let mut best = (0.0, phi(0.0)?);
    let consider = |cand: (f64, f64), best: &mut (f64, f64)| {
        if cand.1 < best.1 {
            *best = cand;
        }
    };
    if alpha_max > 0.0 {
        consider((alpha_max, phi(alpha_max)?), &mut best);
        let inv_phi = 0.618_033_988_749_894_9_f64;
        let (mut lo, mut hi) = (0.0f64, alpha_max);
        let mut c = hi - inv_phi * (hi - lo);
        let mut d = lo + inv_phi * (hi - lo);
        let mut fc = phi(c)?;
        let mut fd = phi(d)?;
        consider((c, fc), &mut best);
        consider((d, fd), &mut best);
        for _ in 0..iters {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = phi(c)?;
                consider((c, fc), &mut best);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = phi(d)?;
                consider((d, fd), &mut best);
            }
        }
    }
    Ok(best)
}

/// Offered load must fit strictly under the aggregate workstation capacity.
fn check_feasibility(network: &FlowNetwork, timing: &TimingParams) -> Result<f64, SolverError> {
    let total_forward: f64 = network
        .commodities
        .iter()
        .filter(|c| c.direction == Direction::Forward)
        .map(|c| c.demand)
        .sum();
    let load = total_forward * timing.t_load_mean;
    let capacity = network.n_workstations as f64 * (1.0 - SATURATION_EPS);
    if load >= capacity {
        return Err(SolverError::InfeasibleDemand { load, capacity });
    }
    Ok(total_forward)
}

fn any_load_arc_saturated(network: &FlowNetwork, flow: &LinkFlow, timing: &TimingParams) -> bool {
    network.arcs.iter().enumerate().any(|(i, a)| {
        a.kind == ArcKind::Load && flow.total(i) * timing.t_load_mean >= 1.0 - SATURATION_EPS
    })
}

/// Initial flow that splits every commodity evenly across the workstations
/// that can serve it. Used when the plain free-flow assignment would pile
/// all demand on one saturated workstation.
fn even_split_initial(
    network: &FlowNetwork,
    costs: &[f64],
) -> Result<LinkFlow, SolverError> {
    let mut flow = LinkFlow::zeros(network.arcs.len());
    let n_w = network.n_workstations as u32;
    // Per-workstation shortest-path trees: forward from each workstation
    // node, backward (reversed) toward each workstation node.
    let mut fwd_trees = Vec::new();
    let mut bwd_trees = Vec::new();
    for w in 1..=n_w {
        let w_node = network.workstation_node(w);
        fwd_trees.push(dijkstra(network, costs, Direction::Forward, false, w_node));
        bwd_trees.push(dijkstra(network, costs, Direction::Backward, true, w_node));
    }
    for commodity in &network.commodities {
        if commodity.demand <= 0.0 {
            continue;
        }
        let d_node = network.dropoff_node(commodity.dropoff);
        match commodity.direction {
            Direction::Forward => {
                let reachable: Vec<u32> =
                    (1..=n_w).filter(|&w| fwd_trees[w as usize - 1].0[d_node].is_finite()).collect();
                if reachable.is_empty() {
                    return Err(SolverError::DisconnectedCommodity {
                        direction: commodity.direction,
                        dropoff: commodity.dropoff,
                    });
                }
                let share = commodity.demand / reachable.len() as f64;
                for w in reachable {
                    let (_, pred) = &fwd_trees[w as usize - 1];
                    let w_node = network.workstation_node(w);
                    let mut node = d_node;
                    while node != w_node {
                        let arc = pred[node].expect("finite distance implies predecessor");
                        flow.forward[arc] += share;
                        node = network.arcs[arc].tail;
                    }
                    let load = network.arc_id(network.source(), w_node).expect("load arc");
                    flow.forward[load] += share;
                    let exit = network.arc_id(d_node, network.sink()).expect("exit arc");
                    flow.forward[exit] += share;
                }
            }
            Direction::Backward => {
                let reachable: Vec<u32> =
                    (1..=n_w).filter(|&w| bwd_trees[w as usize - 1].0[d_node].is_finite()).collect();
                if reachable.is_empty() {
                    return Err(SolverError::DisconnectedCommodity {
                        direction: commodity.direction,
                        dropoff: commodity.dropoff,
                    });
                }
                let share = commodity.demand / reachable.len() as f64;
                for w in reachable {
                    let (_, succ) = &bwd_trees[w as usize - 1];
                    let w_node = network.workstation_node(w);
                    let entry = network.arc_id(network.sink(), d_node).expect("exit arc");
                    flow.backward[entry] += share;
                    let mut node = d_node;
                    while node != w_node {
                        let arc = succ[node].expect("finite distance implies successor");
                        flow.backward[arc] += share;
                        node = network.arcs[arc].head;
                    }
                    let sorter = network.arc_id(w_node, network.source()).expect("sorter arc");
                    flow.backward[sorter] += share;
                }
            }
        }
    }
    Ok(flow)
}

/// Run Frank-Wolfe to a stationary flow. Demands come from the network's
/// commodity list. Returns the final flow and the per-iteration trace.
pub fn frank_wolfe(
    network: &FlowNetwork,
    timing: &TimingParams,
    config: &SolverConfig,
) -> Result<(LinkFlow, SolveTrace), SolverError> {
    timing.validate()?;
    let total_forward = check_feasibility(network, timing)?;
    let mut trace = SolveTrace::default();

    if total_forward <= 0.0
        && network.commodities.iter().all(|c| c.demand <= 0.0)
    {
        let flow = LinkFlow::zeros(network.arcs.len());
        trace.rows.push(TraceRow {
            iteration: 1,
            total_cost: 0.0,
            linearized_cost: 0.0,
            alpha: 0.0,
            max_residual: 0.0,
        });
        trace.converged = true;
        return Ok((flow, trace));
    }

    let free_flow: Vec<f64> =
        (0..network.arcs.len()).map(|a| free_flow_cost(network, a, timing)).collect();
    let mut flow = all_or_nothing(network, &free_flow)?;
    if any_load_arc_saturated(network, &flow, timing) {
        flow = even_split_initial(network, &free_flow)?;
    }
    let tc0 = total_cost(network, &flow, timing)?;
    let eps_abs = config.epsilon * tc0.max(f64::MIN_POSITIVE);
    let mut tc = tc0;
    let mut prev_linearized: Option<f64> = None;

    for iteration in 1..=config.max_iters {
        let cv = cost_gradient(network, &flow, timing)?;
        let mut clamped = cv.gradient.clone();
        for g in &mut clamped {
            if *g < 0.0 {
                trace.clamped_negative_gradients += 1;
                *g = 0.0;
            }
        }
        let target = all_or_nothing(network, &clamped)?;
        let directional: f64 = (0..network.arcs.len())
            .map(|a| {
                cv.gradient[a]
                    * (target.forward[a] + target.backward[a] - flow.forward[a] - flow.backward[a])
            })
            .sum();
        let linearized = tc + directional;
        let gap = -directional; // >= 0 when the gradient is exact

        let (alpha, new_tc) = line_search(network, &flow, &target, timing, config.line_search_iters)?;
        flow = flow.interpolate(&target, alpha);
        tc = new_tc;
        let residual = flow.max_constraint_residual(network);
        trace.rows.push(TraceRow {
            iteration,
            total_cost: tc,
            linearized_cost: linearized,
            alpha,
            max_residual: residual,
        });

        let linear_step_small =
            prev_linearized.map_or(false, |prev| (linearized - prev).abs() < eps_abs);
        if gap.abs() < eps_abs || linear_step_small {
            trace.converged = true;
            break;
        }
        prev_linearized = Some(linearized);
    }
    if !trace.converged {
        trace.hit_max_iters = true;
    }
    Ok((flow, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_flow_network, parse_layout, Arc, Commodity, Demand, NodeKind};

    const CORRIDOR: &str = "3 5\n. . D1 . .\nW1 E E E ES\nNW W W W SW\n";

    /// Hand network: two parallel one-arc routes between a workstation and a
    /// drop-off, with a return lane so the backward commodity also routes.
    fn parallel_fixture() -> FlowNetwork {
        use crate::network::Heading::East;
        let mut nodes = vec![
            NodeKind::Source,
            NodeKind::Sink,
            NodeKind::Workstation(1),
            NodeKind::DropOff(1),
        ];
        let cell_a = NodeKind::CellHeading { cell: 0, heading: East };
        let cell_b = NodeKind::CellHeading { cell: 1, heading: East };
        let cell_r = NodeKind::CellHeading { cell: 2, heading: East };
        nodes.extend([cell_a, cell_b, cell_r]);
        let arcs = vec![
            Arc { tail: 0, head: 2, kind: ArcKind::Load },   // 0
            Arc { tail: 3, head: 1, kind: ArcKind::Exit },   // 1: D -> T
            Arc { tail: 1, head: 3, kind: ArcKind::Exit },   // 2: T -> D
            Arc { tail: 2, head: 4, kind: ArcKind::Move },   // 3: W -> a
            Arc { tail: 2, head: 5, kind: ArcKind::Move },   // 4: W -> b
            Arc { tail: 4, head: 3, kind: ArcKind::Drop },   // 5: a -> D
            Arc { tail: 5, head: 3, kind: ArcKind::Drop },   // 6: b -> D
            Arc { tail: 3, head: 6, kind: ArcKind::Drop },   // 7: D -> r (resume)
            Arc { tail: 6, head: 2, kind: ArcKind::Move },   // 8: r -> W (entrance)
            Arc { tail: 2, head: 0, kind: ArcKind::Sorter }, // 9: W -> S
        ];
        let commodities = vec![
            Commodity { direction: Direction::Forward, dropoff: 1, demand: 1.0 },
            Commodity { direction: Direction::Backward, dropoff: 1, demand: 1.0 },
        ];
        FlowNetwork::from_parts(1, 3, nodes, arcs, commodities)
    }

    #[test]
    fn all_or_nothing_picks_cheaper_parallel_path() {
        let network = parallel_fixture();
        let mut costs = vec![0.0; network.arcs.len()];
        costs[3] = 5.0;
        costs[4] = 7.0;
        let flow = all_or_nothing(&network, &costs).unwrap();
        assert_eq!(flow.forward[3], 1.0);
        assert_eq!(flow.forward[4], 0.0);
        assert_eq!(flow.forward[5], 1.0);
        assert_eq!(flow.forward[1], 1.0);
    }

    #[test]
    fn all_or_nothing_tie_breaks_by_smallest_arc_index() {
        let network = parallel_fixture();
        let mut costs = vec![0.0; network.arcs.len()];
        costs[3] = 5.0;
        costs[4] = 5.0;
        let flow = all_or_nothing(&network, &costs).unwrap();
        assert_eq!(flow.forward[3], 1.0, "equal costs resolve to the lower arc index");
        assert_eq!(flow.forward[4], 0.0);
    }

    #[test]
    fn corridor_unique_path_carries_all_demand() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        let timing = TimingParams::standard();
        let free_flow: Vec<f64> =
            (0..network.arcs.len()).map(|a| free_flow_cost(&network, a, &timing)).collect();
        let flow = all_or_nothing(&network, &free_flow).unwrap();
        assert!(flow.max_constraint_residual(&network) < 1e-12);
        // Every arc on the unique forward route carries exactly the demand.
        let load = network.arc_id(network.source(), network.workstation_node(1)).unwrap();
        assert!((flow.forward[load] - 0.1).abs() < 1e-15);
        for (i, &v) in flow.forward.iter().enumerate() {
            assert!(v == 0.0 || (v - 0.1).abs() < 1e-15, "arc {i} carries {v}");
        }
        let nonzero_fwd = flow.forward.iter().filter(|&&v| v > 0.0).count();
        assert_eq!(nonzero_fwd, 5, "load, exit move, one lane move, drop, exit");
    }

    #[test]
    fn line_search_zero_direction_returns_current_cost() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        let timing = TimingParams::standard();
        let (flow, _) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
        let tc = total_cost(&network, &flow, &timing).unwrap();
        let (_, tc_ls) = line_search(&network, &flow, &flow, &timing, 32).unwrap();
        assert!((tc_ls - tc).abs() < 1e-12);
    }

    #[test]
    fn frank_wolfe_zero_demand_is_one_iteration() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.0, 1)).unwrap();
        let (flow, trace) = frank_wolfe(&network, &TimingParams::standard(), &SolverConfig::default()).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert!(trace.converged);
        assert!(flow.forward.iter().chain(flow.backward.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn frank_wolfe_single_path_converges_first_iteration() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        let (flow, trace) = frank_wolfe(&network, &TimingParams::standard(), &SolverConfig::default()).unwrap();
        assert_eq!(trace.rows.len(), 1, "feasible set is a single point");
        assert!(trace.converged);
        assert!(flow.max_constraint_residual(&network) < 1e-12);
    }

    #[test]
    fn frank_wolfe_rejects_infeasible_demand() {
        let layout = parse_layout(CORRIDOR).unwrap();
        // Capacity is n_W / E[T_load] = 1/3; ask for more.
        let network = build_flow_network(&layout, &Demand::uniform(0.4, 1)).unwrap();
        assert!(matches!(
            frank_wolfe(&network, &TimingParams::standard(), &SolverConfig::default()),
            Err(SolverError::InfeasibleDemand { .. })
        ));
    }

    #[test]
    fn frank_wolfe_descent_and_feasibility_on_generated_layout() {
        let layout = crate::network::generate_standard_layout(8, 9, 2, 4, 3).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 4)).unwrap();
        let timing = TimingParams::standard();
        let (flow, trace) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
        assert!(!trace.rows.is_empty());
        for pair in trace.rows.windows(2) {
            assert!(
                pair[1].total_cost <= pair[0].total_cost + 1e-9,
                "descent violated: {} -> {}",
                pair[0].total_cost,
                pair[1].total_cost
            );
        }
        for row in &trace.rows {
            assert!(row.max_residual <= 1e-9);
        }
        assert!(flow.min_value() >= 0.0);
    }

    #[test]
    fn frank_wolfe_is_deterministic() {
        let layout = crate::network::generate_standard_layout(8, 9, 2, 4, 3).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 4)).unwrap();
        let timing = TimingParams::standard();
        let (flow_a, trace_a) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
        let (flow_b, trace_b) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
        assert_eq!(flow_a, flow_b);
        assert_eq!(trace_a.rows.len(), trace_b.rows.len());
        for (a, b) in trace_a.rows.iter().zip(&trace_b.rows) {
            assert_eq!(a.total_cost.to_bits(), b.total_cost.to_bits());
        }
    }
}
