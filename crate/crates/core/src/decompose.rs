//! Recover path flows from an optimal link flow, and build the per-drop-off
//! split tables the online policy samples from.
//!
//! Decomposition runs one pass per direction class. Starting from each node
//! with positive net outflow, a random walk follows positive-flow arcs
//! (branching with probability proportional to arc flow) until it reaches a
//! node with negative net outflow, then the bottleneck amount is pushed along
//! the walked path and removed from the residual. Every push either zeroes an
//! arc or balances a node, so at most `2|V| + |A|` pushes happen. Leftover
//! balanced circulation (possible when the input flow is not exactly optimal)
//! is canceled cycle by cycle and surfaced as a warning count.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delay::LinkFlow;
use crate::network::{Direction, FlowNetwork, NodeKind};

/// Arc flows below this are treated as zero to stop float residue from
/// spawning micro-pushes.
pub const FLOW_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("walk stranded at node {node} before reaching any sink node")]
    StrandedWalk { node: usize },
    #[error("push budget exceeded ({pushes} > {bound}); input flow likely violates conservation")]
    PushBudgetExceeded { pushes: usize, bound: usize },
    #[error("recovered path has unexpected shape: {0}")]
    UnexpectedPathShape(String),
    #[error("no {direction} paths cover drop-off {dropoff}")]
    MissingDirection { dropoff: u32, direction: Direction },
}

/// One direction class's working copy of the flow during decomposition.
#[derive(Debug, Clone)]
pub struct ResidualGraph {
    /// Remaining flow per arc.
    pub flows: Vec<f64>,
    /// Net outflow per node (outgoing minus incoming flow).
    pub imbalance: Vec<f64>,
}

impl ResidualGraph {
    pub fn new(network: &FlowNetwork, flows: Vec<f64>) -> ResidualGraph {
        let mut imbalance = vec![0.0; network.nodes.len()];
        for (i, arc) in network.arcs.iter().enumerate() {
            imbalance[arc.tail] += flows[i];
            imbalance[arc.head] -= flows[i];
        }
        ResidualGraph { flows, imbalance }
    }
}

/// Walk positive-flow arcs from `start` until a negative-imbalance node is
/// reached, branching with probability proportional to remaining arc flow.
/// Revisited nodes have their loop sliced out, so the returned path is
/// simple. Errors if the walk dead-ends or no sink is ever reached.
pub fn follow_path(
    network: &FlowNetwork,
    residual: &ResidualGraph,
    start: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, usize), DecomposeError> {
    let mut path = vec![start];
    let mut current = start;
    let step_budget = 10 * (network.nodes.len() + network.arcs.len());
    for _ in 0..step_budget {
        if residual.imbalance[current] < -FLOW_FLOOR {
            return Ok((path, current));
        }
        let candidates: Vec<usize> = network
            .out_arcs(current)
            .iter()
            .copied()
            .filter(|&a| residual.flows[a] > FLOW_FLOOR)
            .collect();
        if candidates.is_empty() {
            return Err(DecomposeError::StrandedWalk { node: current });
        }
        let total: f64 = candidates.iter().map(|&a| residual.flows[a]).sum();
        let mut draw = rng.gen::<f64>() * total;
        let mut chosen = *candidates.last().unwrap();
        for &a in &candidates {
            draw -= residual.flows[a];
            if draw <= 0.0 {
                chosen = a;
                break;
            }
        }
        let next = network.arcs[chosen].head;
        if let Some(pos) = path.iter().position(|&n| n == next) {
            // Slice the loop out and keep walking from the first visit.
            path.truncate(pos + 1);
        } else {
            path.push(next);
        }
        current = next;
    }
    Err(DecomposeError::StrandedWalk { node: current })
}

/// One recovered path with its flow intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFlowEntry {
    pub direction: Direction,
    /// Node ids from origin to destination, endpoints included. Forward
    /// entries run (S, W, ..., D, T); backward entries (T, D, ..., W, S).
    pub nodes: Vec<usize>,
    pub intensity: f64,
    pub dropoff: u32,
    pub workstation: u32,
}

/// All recovered paths plus decomposition diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PathFlowTable {
    pub entries: Vec<PathFlowEntry>,
    /// Total pushes performed; bounded by 2|V| + |A|.
    pub pushes: usize,
    /// Balanced circulation removed after all imbalances cleared. Nonzero
    /// values mean the recomposed flow will not exactly match the input.
    pub cycle_cancellations: usize,
    pub canceled_flow: f64,
}

impl PathFlowTable {
    pub fn entries_for(
        &self,
        direction: Direction,
        dropoff: u32,
    ) -> impl Iterator<Item = (usize, &PathFlowEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.direction == direction && e.dropoff == dropoff)
    }

    /// Rebuild the link flow this table represents.
    pub fn recompose(&self, network: &FlowNetwork) -> LinkFlow {
        let mut flow = LinkFlow::zeros(network.arcs.len());
        for entry in &self.entries {
            let class = flow.class_mut(entry.direction);
            for pair in entry.nodes.windows(2) {
                let arc = network
                    .arc_id(pair[0], pair[1])
                    .expect("path arcs exist in the network");
                class[arc] += entry.intensity;
            }
        }
        flow
    }
}

fn classify_path(
    network: &FlowNetwork,
    direction: Direction,
    nodes: &[usize],
) -> Result<(u32, u32), DecomposeError> {
    if nodes.len() < 4 {
        return Err(DecomposeError::UnexpectedPathShape(format!(
            "path of {} nodes cannot hold both stations",
            nodes.len()
        )));
    }
    let second = network.nodes[nodes[1]];
    let penultimate = network.nodes[nodes[nodes.len() - 2]];
    match direction {
        Direction::Forward => match (second, penultimate) {
            (NodeKind::Workstation(w), NodeKind::DropOff(d)) => Ok((d, w)),
            _ => Err(DecomposeError::UnexpectedPathShape(
                "forward path must run (S, W, ..., D, T)".into(),
            )),
        },
        Direction::Backward => match (second, penultimate) {
            (NodeKind::DropOff(d), NodeKind::Workstation(w)) => Ok((d, w)),
            _ => Err(DecomposeError::UnexpectedPathShape(
                "backward path must run (T, D, ..., W, S)".into(),
            )),
        },
    }
}

/// Decompose a conserving link flow into a path-flow table. Both direction
/// classes are handled independently. The result recomposes to the input
/// exactly, minus any canceled circulation.
pub fn decompose_flow(
    network: &FlowNetwork,
    flow: &LinkFlow,
    rng: &mut impl Rng,
) -> Result<PathFlowTable, DecomposeError> {
    let bound = 2 * network.nodes.len() + network.arcs.len();
    let mut table = PathFlowTable::default();
    let mut merged: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for direction in [Direction::Forward, Direction::Backward] {
        let mut residual = ResidualGraph::new(network, flow.class(direction).to_vec());
        let origins: Vec<usize> = (0..network.nodes.len())
            .filter(|&n| residual.imbalance[n] > FLOW_FLOOR)
            .collect();
        for origin in origins {
            while residual.imbalance[origin] > FLOW_FLOOR {
                let (nodes, dest) = follow_path(network, &residual, origin, rng)?;
                let mut amount = residual.imbalance[origin].min(-residual.imbalance[dest]);
                for pair in nodes.windows(2) {
                    let arc = network.arc_id(pair[0], pair[1]).expect("walked arc exists");
                    amount = amount.min(residual.flows[arc]);
                }
                for pair in nodes.windows(2) {
                    let arc = network.arc_id(pair[0], pair[1]).expect("walked arc exists");
                    residual.flows[arc] -= amount;
                }
                residual.imbalance[origin] -= amount;
                residual.imbalance[dest] += amount;
                table.pushes += 1;
                if table.pushes > bound {
                    return Err(DecomposeError::PushBudgetExceeded { pushes: table.pushes, bound });
                }
                if amount <= FLOW_FLOOR {
                    continue;
                }
                match merged.get(&nodes) {
                    Some(&idx) => table.entries[idx].intensity += amount,
                    None => {
                        let (dropoff, workstation) = classify_path(network, direction, &nodes)?;
                        merged.insert(nodes.clone(), table.entries.len());
                        table.entries.push(PathFlowEntry {
                            direction,
                            nodes,
                            intensity: amount,
                            dropoff,
                            workstation,
                        });
                    }
                }
            }
        }
        // All nodes balanced; any remaining positive flow is circulation.
        cancel_cycles(network, &mut residual, &mut table, bound)?;
        merged.clear();
    }
    Ok(table)
}

fn cancel_cycles(
    network: &FlowNetwork,
    residual: &mut ResidualGraph,
    table: &mut PathFlowTable,
    bound: usize,
) -> Result<(), DecomposeError> {
    loop {
        let seed_arc = match residual.flows.iter().position(|&f| f > FLOW_FLOOR) {
            Some(a) => a,
            None => return Ok(()),
        };
        // Walk highest-flow arcs until a node repeats, then cut the cycle.
        let mut trail = vec![network.arcs[seed_arc].tail];
        let mut current = network.arcs[seed_arc].tail;
        let step_budget = network.nodes.len() + 1;
        let mut cycle: Option<Vec<usize>> = None;
        for _ in 0..=step_budget {
            let next_arc = network
                .out_arcs(current)
                .iter()
                .copied()
                .filter(|&a| residual.flows[a] > FLOW_FLOOR)
                .max_by(|&a, &b| residual.flows[a].total_cmp(&residual.flows[b]));
            let next_arc = match next_arc {
                Some(a) => a,
                // Dead end: conservation says this cannot happen in a
                // balanced residual; treat remaining dust as zero.
                None => {
                    residual.flows.iter_mut().for_each(|f| {
                        if *f <= FLOW_FLOOR * 10.0 {
                            *f = 0.0
                        }
                    });
                    return Ok(());
                }
            };
            let next = network.arcs[next_arc].head;
            if let Some(pos) = trail.iter().position(|&n| n == next) {
                let mut cyc = trail[pos..].to_vec();
                cyc.push(next);
                cycle = Some(cyc);
                break;
            }
            trail.push(next);
            current = next;
        }
        let cycle = cycle.expect("finite graph walk must repeat a node");
        let mut amount = f64::INFINITY;
        for pair in cycle.windows(2) {
            let arc = network.arc_id(pair[0], pair[1]).expect("cycle arc exists");
            amount = amount.min(residual.flows[arc]);
        }
        for pair in cycle.windows(2) {
            let arc = network.arc_id(pair[0], pair[1]).expect("cycle arc exists");
            residual.flows[arc] -= amount;
        }
        table.pushes += 1;
        table.cycle_cancellations += 1;
        table.canceled_flow += amount;
        if table.pushes > bound {
            return Err(DecomposeError::PushBudgetExceeded { pushes: table.pushes, bound });
        }
    }
}

/// Discrete distribution over (workstation, path) per drop-off and direction.
/// Derived from a [`PathFlowTable`] on load, never stored on disk.
#[derive(Debug, Clone, Default)]
pub struct SplitTable {
    groups: BTreeMap<(u32, Direction), SplitGroup>,
}

#[derive(Debug, Clone)]
struct SplitGroup {
    /// (path table index, workstation, probability).
    entries: Vec<(usize, u32, f64)>,
    cumulative: Vec<f64>,
}

impl SplitTable {
    pub fn dropoffs(&self) -> impl Iterator<Item = u32> + '_ {
        self.groups.keys().map(|(d, _)| *d)
    }

    pub fn contains(&self, dropoff: u32, direction: Direction) -> bool {
        self.groups.contains_key(&(dropoff, direction))
    }

    /// Probabilities for one drop-off and direction, in table order.
    pub fn probabilities(&self, dropoff: u32, direction: Direction) -> Option<Vec<(usize, u32, f64)>> {
        self.groups.get(&(dropoff, direction)).map(|g| g.entries.clone())
    }

    /// Draw a (workstation, path index) pair for a drop-off.
    pub fn sample(
        &self,
        dropoff: u32,
        direction: Direction,
        rng: &mut impl Rng,
    ) -> Result<(u32, usize), DecomposeError> {
        let group = self
            .groups
            .get(&(dropoff, direction))
            .ok_or(DecomposeError::MissingDirection { dropoff, direction })?;
        let u: f64 = rng.gen();
        let idx = group.cumulative.partition_point(|&c| c < u).min(group.entries.len() - 1);
        let (entry, workstation, _) = group.entries[idx];
        Ok((workstation, entry))
    }
}

/// Normalize path intensities into per-drop-off split probabilities. Every
/// drop-off present in one direction must be present in the other.
pub fn build_split_table(table: &PathFlowTable) -> Result<SplitTable, DecomposeError> {
    let mut dropoffs: Vec<u32> = table.entries.iter().map(|e| e.dropoff).collect();
    dropoffs.sort_unstable();
    dropoffs.dedup();
    let mut split = SplitTable::default();
    for dropoff in dropoffs {
        for direction in [Direction::Forward, Direction::Backward] {
            let mut entries: Vec<(usize, u32, f64)> = table
                .entries_for(direction, dropoff)
                .map(|(i, e)| (i, e.workstation, e.intensity))
                .collect();
            let total: f64 = entries.iter().map(|(_, _, f)| f).sum();
            if total <= 0.0 {
                return Err(DecomposeError::MissingDirection { dropoff, direction });
            }
            for e in &mut entries {
                e.2 /= total;
            }
            let mut acc = 0.0;
            let cumulative = entries
                .iter()
                .map(|(_, _, p)| {
                    acc += p;
                    acc
                })
                .collect();
            split.groups.insert((dropoff, direction), SplitGroup { entries, cumulative });
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_flow_network, parse_layout, Arc, ArcKind, Demand, Heading};
    use crate::solver::{frank_wolfe, SolverConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CORRIDOR: &str = "3 5\n. . D1 . .\nW1 E E E ES\nNW W W W SW\n";

    fn diamond() -> FlowNetwork {
        let nodes = vec![
            NodeKind::Source,
            NodeKind::Sink,
            NodeKind::CellHeading { cell: 0, heading: Heading::East },
            NodeKind::CellHeading { cell: 1, heading: Heading::East },
        ];
        let arcs = vec![
            Arc { tail: 0, head: 2, kind: ArcKind::Move },
            Arc { tail: 0, head: 3, kind: ArcKind::Move },
            Arc { tail: 2, head: 1, kind: ArcKind::Move },
            Arc { tail: 3, head: 1, kind: ArcKind::Move },
        ];
        FlowNetwork::from_parts(1, 2, nodes, arcs, vec![])
    }

    #[test]
    fn follow_path_single_arc() {
        let nodes = vec![NodeKind::Source, NodeKind::Sink];
        let arcs = vec![Arc { tail: 0, head: 1, kind: ArcKind::Move }];
        let network = FlowNetwork::from_parts(1, 1, nodes, arcs, vec![]);
        let residual = ResidualGraph::new(&network, vec![1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (path, dest) = follow_path(&network, &residual, 0, &mut rng).unwrap();
        assert_eq!(path, vec![0, 1]);
        assert_eq!(dest, 1);
    }

    #[test]
    fn follow_path_branches_proportionally() {
        let network = diamond();
        let residual = ResidualGraph::new(&network, vec![0.7, 0.3, 0.7, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut via_a = 0usize;
        let samples = 10_000;
        for _ in 0..samples {
            let (path, _) = follow_path(&network, &residual, 0, &mut rng).unwrap();
            if path[1] == 2 {
                via_a += 1;
            }
        }
        let freq = via_a as f64 / samples as f64;
        assert!((freq - 0.7).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn follow_path_stranded_on_balanced_graph() {
        // Pure two-node circulation: positive outflux everywhere, no sink.
        let nodes = vec![
            NodeKind::CellHeading { cell: 0, heading: Heading::East },
            NodeKind::CellHeading { cell: 1, heading: Heading::East },
        ];
        let arcs = vec![
            Arc { tail: 0, head: 1, kind: ArcKind::Move },
            Arc { tail: 1, head: 0, kind: ArcKind::Move },
        ];
        let network = FlowNetwork::from_parts(1, 2, nodes, arcs, vec![]);
        let residual = ResidualGraph::new(&network, vec![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            follow_path(&network, &residual, 0, &mut rng),
            Err(DecomposeError::StrandedWalk { .. })
        ));
    }

    #[test]
    fn zero_flow_decomposes_to_empty_table() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.0, 1)).unwrap();
        let flow = LinkFlow::zeros(network.arcs.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = decompose_flow(&network, &flow, &mut rng).unwrap();
        assert!(table.entries.is_empty());
        assert_eq!(table.pushes, 0);
    }

    #[test]
    fn corridor_decomposes_to_one_path_each_way() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        let timing = crate::delay::TimingParams::standard();
        let (flow, _) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = decompose_flow(&network, &flow, &mut rng).unwrap();
        let fwd: Vec<_> = table.entries_for(Direction::Forward, 1).collect();
        let bwd: Vec<_> = table.entries_for(Direction::Backward, 1).collect();
        assert_eq!(fwd.len(), 1);
        assert_eq!(bwd.len(), 1);
        assert!((fwd[0].1.intensity - 0.1).abs() < 1e-12);
        assert!((bwd[0].1.intensity - 0.1).abs() < 1e-12);
        assert_eq!(fwd[0].1.workstation, 1);
        // Path shape: (S, W, ..., D, T) and (T, D, ..., W, S).
        assert_eq!(network.nodes[fwd[0].1.nodes[0]], NodeKind::Source);
        assert_eq!(*fwd[0].1.nodes.last().unwrap(), network.sink());
        assert_eq!(network.nodes[bwd[0].1.nodes[0]], NodeKind::Sink);
        assert_eq!(*bwd[0].1.nodes.last().unwrap(), network.source());
        // Round trip.
        let recomposed = table.recompose(&network);
        for a in 0..network.arcs.len() {
            assert!((recomposed.forward[a] - flow.forward[a]).abs() < 1e-12);
            assert!((recomposed.backward[a] - flow.backward[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn split_table_probabilities_and_sampling() {
        // Two forward paths 0.06 / 0.04 for one drop-off.
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        let nodes_a = vec![network.source(), network.workstation_node(1), network.sink()];
        let table = PathFlowTable {
            entries: vec![
                PathFlowEntry {
                    direction: Direction::Forward,
                    nodes: nodes_a.clone(),
                    intensity: 0.06,
                    dropoff: 1,
                    workstation: 1,
                },
                PathFlowEntry {
                    direction: Direction::Forward,
                    nodes: nodes_a.clone(),
                    intensity: 0.04,
                    dropoff: 1,
                    workstation: 1,
                },
                PathFlowEntry {
                    direction: Direction::Backward,
                    nodes: nodes_a,
                    intensity: 0.1,
                    dropoff: 1,
                    workstation: 1,
                },
            ],
            ..Default::default()
        };
        let split = build_split_table(&table).unwrap();
        let probs = split.probabilities(1, Direction::Forward).unwrap();
        assert!((probs[0].2 - 0.6).abs() < 1e-12);
        assert!((probs[1].2 - 0.4).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut first = 0usize;
        for _ in 0..10_000 {
            let (_, entry) = split.sample(1, Direction::Forward, &mut rng).unwrap();
            if entry == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / 10_000.0;
        assert!((freq - 0.6).abs() < 0.02, "frequency {freq}");
    }

    #[test]
    fn missing_direction_is_reported() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        let table = PathFlowTable {
            entries: vec![PathFlowEntry {
                direction: Direction::Forward,
                nodes: vec![network.source(), network.workstation_node(1), network.sink()],
                intensity: 0.1,
                dropoff: 1,
                workstation: 1,
            }],
            ..Default::default()
        };
        assert!(matches!(
            build_split_table(&table),
            Err(DecomposeError::MissingDirection { dropoff: 1, direction: Direction::Backward })
        ));
        let split = build_split_table(&PathFlowTable::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            split.sample(9, Direction::Forward, &mut rng),
            Err(DecomposeError::MissingDirection { dropoff: 9, .. })
        ));
    }
}
