//! Robot plans: executable action sequences compiled from flow-network paths
//! or produced by the time-expanded planner.

use std::collections::{BinaryHeap, VecDeque};

use crate::network::{ArcKind, FlowNetwork, Heading, NodeKind};

use super::SimError;

/// One executable robot step. Moves take one tick (the tick is T1); timed
/// actions carry their duration in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Step onto `cell`, arriving with `heading`.
    Move { cell: usize, heading: Heading },
    /// Rotate in place to `to`.
    Turn { to: Heading },
    /// Stand still for `ticks` (timed plans only).
    Wait { ticks: u64 },
    /// Release the parcel into `dropoff` from the current cell.
    Drop { dropoff: u32 },
    /// Step off the grid into a workstation queue.
    Enter { workstation: u32 },
}

/// Compile a flow-network node path into actions. Non-physical prefix nodes
/// (source, sink, the initial drop-off of a backward path) emit nothing; the
/// robot must already stand at the first physical node of a backward path.
pub fn compile_path(network: &FlowNetwork, nodes: &[usize]) -> Result<VecDeque<Action>, SimError> {
    let mut actions = VecDeque::new();
    for pair in nodes.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        match (network.nodes[a], network.nodes[b]) {
            (NodeKind::Source, NodeKind::Workstation(_)) => {}
            (NodeKind::Sink, NodeKind::DropOff(_)) => {}
            (NodeKind::DropOff(_), NodeKind::Sink) => {}
            (NodeKind::Workstation(_), NodeKind::Source) => {}
            (NodeKind::DropOff(_), NodeKind::CellHeading { .. }) => {
                // Backward resumption: the robot is already on this cell.
            }
            (NodeKind::Workstation(_), NodeKind::CellHeading { cell, heading }) => {
                actions.push_back(Action::Move { cell, heading });
            }
            (NodeKind::CellHeading { cell: c1, heading: h1 }, NodeKind::CellHeading { cell: c2, heading: h2 }) => {
                if c1 == c2 {
                    actions.push_back(Action::Turn { to: h2 });
                } else if h1 == h2 {
                    actions.push_back(Action::Move { cell: c2, heading: h2 });
                } else {
                    return Err(SimError::Config(format!(
                        "path step {c1}:{h1} -> {c2}:{h2} is neither a move nor a turn"
                    )));
                }
            }
            (NodeKind::CellHeading { .. }, NodeKind::DropOff(id)) => {
                actions.push_back(Action::Drop { dropoff: id });
            }
            (NodeKind::CellHeading { .. }, NodeKind::Workstation(id)) => {
                actions.push_back(Action::Enter { workstation: id });
            }
            (a_kind, b_kind) => {
                return Err(SimError::Config(format!(
                    "unsupported path step {a_kind:?} -> {b_kind:?}"
                )));
            }
        }
    }
    Ok(actions)
}

#[derive(Debug, Clone, Copy)]
struct StaticHeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for StaticHeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for StaticHeapEntry {}
impl PartialOrd for StaticHeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for StaticHeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

/// Free-flow shortest node path over Move/Turn arcs (plus the terminal Drop
/// or Enter arc when the goal is a station node). `excluded_cell` removes
/// every heading node of one cell, used for rerouting around a blockage.
///
/// Arc costs are T1 per move and T2 per turn, in ticks.
pub fn static_shortest_path(
    network: &FlowNetwork,
    turn_ticks: u64,
    from: usize,
    goal: impl Fn(usize) -> bool,
    excluded_cell: Option<usize>,
) -> Option<Vec<usize>> {
    let blocked = |node: usize| -> bool {
        match (network.nodes[node], excluded_cell) {
            (NodeKind::CellHeading { cell, .. }, Some(ex)) => cell == ex,
            _ => false,
        }
    };
    if blocked(from) {
        return None;
    }
    let n = network.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[from] = 0.0;
    heap.push(StaticHeapEntry { dist: 0.0, node: from });
    while let Some(StaticHeapEntry { dist: d, node }) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        if goal(node) {
            let mut path = vec![node];
            let mut cur = node;
            while let Some(arc) = pred[cur] {
                cur = network.arcs[arc].tail;
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        // Station nodes terminate paths; never walk out of one mid-route.
        // The start node is exempt so plans can leave a workstation.
        if node != from
            && matches!(
                network.nodes[node],
                NodeKind::DropOff(_) | NodeKind::Workstation(_) | NodeKind::Source | NodeKind::Sink
            )
        {
            continue;
        }
        for &a in network.out_arcs(node) {
            let arc = &network.arcs[a];
            let cost = match arc.kind {
                ArcKind::Move => 1.0,
                ArcKind::Turn => turn_ticks as f64,
                // Station arcs are usable only when they terminate the path.
                ArcKind::Drop | ArcKind::Exit | ArcKind::Load | ArcKind::Sorter => {
                    match network.nodes[arc.head] {
                        NodeKind::DropOff(_) | NodeKind::Workstation(_) => 0.0,
                        _ => continue,
                    }
                }
            };
            if blocked(arc.head) {
                continue;
            }
            let nd = d + cost;
            if nd < dist[arc.head] {
                dist[arc.head] = nd;
                pred[arc.head] = Some(a);
                heap.push(StaticHeapEntry { dist: nd, node: arc.head });
            } else if nd == dist[arc.head] {
                if let Some(p) = pred[arc.head] {
                    if a < p {
                        pred[arc.head] = Some(a);
                    }
                }
            }
        }
    }
    None
}
