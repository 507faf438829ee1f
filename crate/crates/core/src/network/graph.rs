//! Directed flow network built from a layout.
//!
//! Every ordinary cell expands into one node per allowed heading, so a
//! 90-degree turn is an ordinary in-cell arc and a route's turn count is just
//! the number of Turn arcs it traverses. A source node feeds workstations
//! (Load arcs carry the queueing delay) and a sink node collects drop-offs.
//! Forward flow (parcels) runs source to sink; backward flow (empty robots)
//! runs sink to source over the same Move and Turn arcs, so arc flows add.
//!
//! Node and arc orderings are deterministic: nodes are source, sink,
//! workstations by id, drop-offs by id, then cells row-major with headings in
//! N,E,S,W order; arcs follow a fixed scan documented in `build_flow_network`.
//! Identical inputs therefore produce bit-identical flow vector layouts.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::layout::{CellSpec, Heading, Layout, LayoutError, HEADING_ORDER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Source,
    Sink,
    Workstation(u32),
    DropOff(u32),
    /// `cell` is the row-major layout index.
    CellHeading { cell: usize, heading: Heading },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArcKind {
    /// Cell-to-cell, workstation-exit, or workstation-entrance movement.
    Move,
    /// In-cell 90-degree turn between two heading nodes.
    Turn,
    /// Source to workstation; carries the loading-queue delay.
    Load,
    /// Workstation back to source (empty robot rejoins the pool). Zero cost.
    Sorter,
    /// Cell to drop-off (release, costed) or drop-off back to cell (resume,
    /// free: the robot is already standing on the cell).
    Drop,
    /// Drop-off to sink and sink to drop-off. Zero cost.
    Exit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arc {
    pub tail: usize,
    pub head: usize,
    pub kind: ArcKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Forward => f.write_str("forward"),
            Direction::Backward => f.write_str("backward"),
        }
    }
}

/// One demand stream: all parcels (or returning robots) for one drop-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Commodity {
    pub direction: Direction,
    pub dropoff: u32,
    pub demand: f64,
}

/// Per-drop-off demand in flow units (parcels) per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demand {
    /// Indexed by drop-off id minus one.
    pub per_dropoff: Vec<f64>,
}

impl Demand {
    pub fn uniform(total: f64, n_dropoffs: usize) -> Demand {
        Demand { per_dropoff: vec![total / n_dropoffs as f64; n_dropoffs] }
    }

    pub fn total(&self) -> f64 {
        self.per_dropoff.iter().sum()
    }

    pub fn of(&self, dropoff: u32) -> f64 {
        self.per_dropoff[dropoff as usize - 1]
    }
}

/// Which physical entity feeds an arrival approach of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproachTail {
    /// Ordinal into `FlowNetwork::cells`.
    Cell(usize),
    Workstation(u32),
}

/// One arrival stream into a cell: a single Move arc plus its tail entity.
/// A cell has at most two (one per allowed heading).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Approach {
    pub arc: usize,
    pub tail: ApproachTail,
}

/// Precomputed per-cell arc groups used by the delay model.
#[derive(Debug, Clone)]
pub struct CellTable {
    /// Row-major layout index of this cell.
    pub cell_index: usize,
    /// All external arcs into this cell's heading nodes: arriving Move arcs
    /// plus drop-off resumption arcs. Their total flow is the cell flow v_j.
    pub inflow_arcs: Vec<usize>,
    /// Arriving Move arcs grouped by tail entity; at most two entries.
    pub approaches: Vec<Approach>,
    /// In-cell Turn arcs (both orientations).
    pub turn_arcs: Vec<usize>,
    /// Cell-to-drop-off Drop arcs out of this cell.
    pub drop_arcs: Vec<usize>,
    /// Cells reachable from here by a single Move arc (ordinals).
    pub downstream_cells: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("demand must list {expected} drop-offs, found {found}")]
    DemandMismatch { expected: usize, found: usize },
    #[error("demand for drop-off {0} is negative")]
    NegativeDemand(u32),
    #[error("{direction} commodity for drop-off {dropoff} cannot reach its destination")]
    DisconnectedCommodity { direction: Direction, dropoff: u32 },
}

/// The directed flow network. Immutable after construction; safe to share
/// read-only across concurrent solver and simulator runs.
#[derive(Debug, Clone)]
pub struct FlowNetwork {
    pub rows: usize,
    pub cols: usize,
    pub nodes: Vec<NodeKind>,
    pub arcs: Vec<Arc>,
    pub commodities: Vec<Commodity>,
    pub n_workstations: usize,
    pub n_dropoffs: usize,
    /// Per-cell tables, one per ordinary cell, row-major.
    pub cells: Vec<CellTable>,
    out_arcs: Vec<Vec<usize>>,
    in_arcs: Vec<Vec<usize>>,
    node_lookup: HashMap<NodeKind, usize>,
    arc_lookup: HashMap<(usize, usize), usize>,
    cell_ordinal: HashMap<usize, usize>,
    forward_ok: Vec<bool>,
    backward_ok: Vec<bool>,
}

impl FlowNetwork {
    /// Assemble a network from raw parts, computing all lookup tables. No
    /// geometric checks are performed; `build_flow_network` is the validated
    /// path and this exists for hand-built fixtures.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        nodes: Vec<NodeKind>,
        arcs: Vec<Arc>,
        commodities: Vec<Commodity>,
    ) -> FlowNetwork {
        let node_lookup: HashMap<NodeKind, usize> =
            nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut out_arcs = vec![Vec::new(); nodes.len()];
        let mut in_arcs = vec![Vec::new(); nodes.len()];
        let mut arc_lookup = HashMap::new();
        for (i, arc) in arcs.iter().enumerate() {
            out_arcs[arc.tail].push(i);
            in_arcs[arc.head].push(i);
            arc_lookup.insert((arc.tail, arc.head), i);
        }
        let n_workstations = nodes.iter().filter(|n| matches!(n, NodeKind::Workstation(_))).count();
        let n_dropoffs = nodes.iter().filter(|n| matches!(n, NodeKind::DropOff(_))).count();

        // Ordinary cells present in the node list, row-major order.
        let mut cell_indexes: Vec<usize> = nodes
            .iter()
            .filter_map(|n| match n {
                NodeKind::CellHeading { cell, .. } => Some(*cell),
                _ => None,
            })
            .collect();
        cell_indexes.sort_unstable();
        cell_indexes.dedup();
        let cell_ordinal: HashMap<usize, usize> =
            cell_indexes.iter().enumerate().map(|(ord, idx)| (*idx, ord)).collect();

        let cell_of_node = |node: usize| -> Option<usize> {
            match nodes[node] {
                NodeKind::CellHeading { cell, .. } => Some(cell),
                _ => None,
            }
        };

        let mut cells: Vec<CellTable> = cell_indexes
            .iter()
            .map(|&cell_index| CellTable {
                cell_index,
                inflow_arcs: Vec::new(),
                approaches: Vec::new(),
                turn_arcs: Vec::new(),
                drop_arcs: Vec::new(),
                downstream_cells: Vec::new(),
            })
            .collect();

        for (i, arc) in arcs.iter().enumerate() {
            let tail_cell = cell_of_node(arc.tail);
            let head_cell = cell_of_node(arc.head);
            match arc.kind {
                ArcKind::Move => {
                    if let Some(hc) = head_cell {
                        let ord = cell_ordinal[&hc];
                        cells[ord].inflow_arcs.push(i);
                        let tail = match nodes[arc.tail] {
                            NodeKind::CellHeading { cell, .. } => ApproachTail::Cell(cell_ordinal[&cell]),
                            NodeKind::Workstation(id) => ApproachTail::Workstation(id),
                            _ => continue,
                        };
                        cells[ord].approaches.push(Approach { arc: i, tail });
                    }
                    if let (Some(tc), Some(hc)) = (tail_cell, head_cell) {
                        if tc != hc {
                            let t_ord = cell_ordinal[&tc];
                            let h_ord = cell_ordinal[&hc];
                            if !cells[t_ord].downstream_cells.contains(&h_ord) {
                                cells[t_ord].downstream_cells.push(h_ord);
                            }
                        }
                    }
                }
                ArcKind::Turn => {
                    if let Some(tc) = tail_cell {
                        cells[cell_ordinal[&tc]].turn_arcs.push(i);
                    }
                }
                ArcKind::Drop => {
                    if let Some(tc) = tail_cell {
                        cells[cell_ordinal[&tc]].drop_arcs.push(i);
                    } else if let Some(hc) = head_cell {
                        // Resumption: counts in the cell flow, not an approach.
                        cells[cell_ordinal[&hc]].inflow_arcs.push(i);
                    }
                }
                _ => {}
            }
        }

        let forward_ok = arcs
            .iter()
            .map(|a| match a.kind {
                ArcKind::Load => true,
                ArcKind::Sorter => false,
                ArcKind::Exit => matches!(nodes[a.tail], NodeKind::DropOff(_)),
                ArcKind::Drop => matches!(nodes[a.tail], NodeKind::CellHeading { .. }),
                ArcKind::Turn => true,
                ArcKind::Move => !matches!(nodes[a.head], NodeKind::Workstation(_)),
            })
            .collect();
        let backward_ok = arcs
            .iter()
            .map(|a| match a.kind {
                ArcKind::Load => false,
                ArcKind::Sorter => true,
                ArcKind::Exit => matches!(nodes[a.tail], NodeKind::Sink),
                ArcKind::Drop => matches!(nodes[a.tail], NodeKind::DropOff(_)),
                ArcKind::Turn => true,
                ArcKind::Move => !matches!(nodes[a.tail], NodeKind::Workstation(_)),
            })
            .collect();

        FlowNetwork {
            rows,
            cols,
            nodes,
            arcs,
            commodities,
            n_workstations,
            n_dropoffs,
            cells,
            out_arcs,
            in_arcs,
            node_lookup,
            arc_lookup,
            cell_ordinal,
            forward_ok,
            backward_ok,
        }
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn sink(&self) -> usize {
        1
    }

    pub fn node_id(&self, kind: &NodeKind) -> Option<usize> {
        self.node_lookup.get(kind).copied()
    }

    pub fn workstation_node(&self, id: u32) -> usize {
        self.node_lookup[&NodeKind::Workstation(id)]
    }

    pub fn dropoff_node(&self, id: u32) -> usize {
        self.node_lookup[&NodeKind::DropOff(id)]
    }

    pub fn cell_heading_node(&self, cell: usize, heading: Heading) -> Option<usize> {
        self.node_lookup.get(&NodeKind::CellHeading { cell, heading }).copied()
    }

    pub fn arc_id(&self, tail: usize, head: usize) -> Option<usize> {
        self.arc_lookup.get(&(tail, head)).copied()
    }

    pub fn out_arcs(&self, node: usize) -> &[usize] {
        &self.out_arcs[node]
    }

    pub fn in_arcs(&self, node: usize) -> &[usize] {
        &self.in_arcs[node]
    }

    /// Ordinal into `cells` for a layout cell index.
    pub fn cell_ordinal(&self, cell_index: usize) -> Option<usize> {
        self.cell_ordinal.get(&cell_index).copied()
    }

    /// May forward (parcel) flow use this arc?
    pub fn forward_admissible(&self, arc: usize) -> bool {
        self.forward_ok[arc]
    }

    /// May backward (empty robot) flow use this arc?
    pub fn backward_admissible(&self, arc: usize) -> bool {
        self.backward_ok[arc]
    }

    pub fn admissible(&self, direction: Direction, arc: usize) -> bool {
        match direction {
            Direction::Forward => self.forward_ok[arc],
            Direction::Backward => self.backward_ok[arc],
        }
    }

    /// Stable display name: `S`, `T`, `W3`, `D12`, or `C<row>_<col>:<H>`.
    pub fn node_name(&self, node: usize) -> String {
        match self.nodes[node] {
            NodeKind::Source => "S".to_string(),
            NodeKind::Sink => "T".to_string(),
            NodeKind::Workstation(id) => format!("W{id}"),
            NodeKind::DropOff(id) => format!("D{id}"),
            NodeKind::CellHeading { cell, heading } => {
                format!("C{}_{}:{}", cell / self.cols, cell % self.cols, heading.letter())
            }
        }
    }

    /// Inverse of [`node_name`](Self::node_name).
    pub fn parse_node_name(&self, name: &str) -> Option<usize> {
        let kind = match name {
            "S" => NodeKind::Source,
            "T" => NodeKind::Sink,
            _ => {
                if let Some(rest) = name.strip_prefix('W') {
                    NodeKind::Workstation(rest.parse().ok()?)
                } else if let Some(rest) = name.strip_prefix('D') {
                    NodeKind::DropOff(rest.parse().ok()?)
                } else if let Some(rest) = name.strip_prefix('C') {
                    let (pos, h) = rest.split_once(':')?;
                    let (r, c) = pos.split_once('_')?;
                    let row: usize = r.parse().ok()?;
                    let col: usize = c.parse().ok()?;
                    let heading = Heading::from_letter(h.chars().next()?)?;
                    NodeKind::CellHeading { cell: row * self.cols + col, heading }
                } else {
                    return None;
                }
            }
        };
        self.node_id(&kind)
    }
}

/// Build the flow network for a validated layout.
///
/// Arc emission order (normative for reproducible flow vectors):
/// Load arcs by workstation id, Sorter arcs by id, forward Exit arcs by
/// drop-off id, backward Exit arcs by id, workstation exit Moves (id, then
/// N,E,S,W neighbor order), then one row-major pass over cells emitting
/// outgoing Moves, workstation entrances, Turns, Drops, and resumptions,
/// each with headings in N,E,S,W order.
pub fn build_flow_network(layout: &Layout, demand: &Demand) -> Result<FlowNetwork, NetworkError> {
    layout.validate()?;
    let n_w = layout.workstation_count();
    let n_d = layout.dropoff_count();
    if demand.per_dropoff.len() != n_d {
        return Err(NetworkError::DemandMismatch { expected: n_d, found: demand.per_dropoff.len() });
    }
    for (i, &d) in demand.per_dropoff.iter().enumerate() {
        if d < 0.0 {
            return Err(NetworkError::NegativeDemand(i as u32 + 1));
        }
    }

    let mut nodes = vec![NodeKind::Source, NodeKind::Sink];
    for id in 1..=n_w as u32 {
        nodes.push(NodeKind::Workstation(id));
    }
    for id in 1..=n_d as u32 {
        nodes.push(NodeKind::DropOff(id));
    }
    for idx in 0..layout.cells.len() {
        if let CellSpec::Ordinary(set) = layout.cells[idx] {
            for h in set.iter() {
                nodes.push(NodeKind::CellHeading { cell: idx, heading: h });
            }
        }
    }
    let node_lookup: HashMap<NodeKind, usize> =
        nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let node_of = |kind: NodeKind| node_lookup[&kind];

    let mut arcs: Vec<Arc> = Vec::new();
    for id in 1..=n_w as u32 {
        arcs.push(Arc { tail: 0, head: node_of(NodeKind::Workstation(id)), kind: ArcKind::Load });
    }
    for id in 1..=n_w as u32 {
        arcs.push(Arc { tail: node_of(NodeKind::Workstation(id)), head: 0, kind: ArcKind::Sorter });
    }
    for id in 1..=n_d as u32 {
        arcs.push(Arc { tail: node_of(NodeKind::DropOff(id)), head: 1, kind: ArcKind::Exit });
    }
    for id in 1..=n_d as u32 {
        arcs.push(Arc { tail: 1, head: node_of(NodeKind::DropOff(id)), kind: ArcKind::Exit });
    }
    // Workstation exits: robot steps onto an adjacent cell, arriving with the
    // heading that points away from the workstation.
    for id in 1..=n_w as u32 {
        let (wr, wc) = layout.workstation_position(id).unwrap();
        for h in HEADING_ORDER {
            if let Some((nr, nc)) = layout.neighbor(wr, wc, h) {
                if let CellSpec::Ordinary(set) = layout.cell(nr, nc) {
                    if set.contains(h) {
                        arcs.push(Arc {
                            tail: node_of(NodeKind::Workstation(id)),
                            head: node_of(NodeKind::CellHeading {
                                cell: layout.index(nr, nc),
                                heading: h,
                            }),
                            kind: ArcKind::Move,
                        });
                    }
                }
            }
        }
    }
    // Row-major cell pass.
    for idx in 0..layout.cells.len() {
        let set = match layout.cells[idx] {
            CellSpec::Ordinary(set) => set,
            _ => continue,
        };
        let (row, col) = layout.position(idx);
        // Outgoing moves and workstation entrances, per heading.
        for h in set.iter() {
            if let Some((nr, nc)) = layout.neighbor(row, col, h) {
                match layout.cell(nr, nc) {
                    CellSpec::Ordinary(nset) if nset.contains(h) => {
                        arcs.push(Arc {
                            tail: node_of(NodeKind::CellHeading { cell: idx, heading: h }),
                            head: node_of(NodeKind::CellHeading {
                                cell: layout.index(nr, nc),
                                heading: h,
                            }),
                            kind: ArcKind::Move,
                        });
                    }
                    CellSpec::Workstation(id) => {
                        arcs.push(Arc {
                            tail: node_of(NodeKind::CellHeading { cell: idx, heading: h }),
                            head: node_of(NodeKind::Workstation(id)),
                            kind: ArcKind::Move,
                        });
                    }
                    _ => {}
                }
            }
        }
        // Turns: ordered heading pairs. Allowed pairs are perpendicular by the
        // no-opposites invariant.
        for a in set.iter() {
            for b in set.iter() {
                if a != b {
                    arcs.push(Arc {
                        tail: node_of(NodeKind::CellHeading { cell: idx, heading: a }),
                        head: node_of(NodeKind::CellHeading { cell: idx, heading: b }),
                        kind: ArcKind::Turn,
                    });
                }
            }
        }
        // Drops: a robot on any heading of this cell can release into an
        // adjacent drop-off, and an empty robot resumes on any heading.
        for h in set.iter() {
            for d in HEADING_ORDER {
                if let Some((nr, nc)) = layout.neighbor(row, col, d) {
                    if let CellSpec::DropOff(id) = layout.cell(nr, nc) {
                        arcs.push(Arc {
                            tail: node_of(NodeKind::CellHeading { cell: idx, heading: h }),
                            head: node_of(NodeKind::DropOff(id)),
                            kind: ArcKind::Drop,
                        });
                    }
                }
            }
        }
        for h in set.iter() {
            for d in HEADING_ORDER {
                if let Some((nr, nc)) = layout.neighbor(row, col, d) {
                    if let CellSpec::DropOff(id) = layout.cell(nr, nc) {
                        arcs.push(Arc {
                            tail: node_of(NodeKind::DropOff(id)),
                            head: node_of(NodeKind::CellHeading { cell: idx, heading: h }),
                            kind: ArcKind::Drop,
                        });
                    }
                }
            }
        }
    }

    let mut commodities = Vec::with_capacity(2 * n_d);
    for id in 1..=n_d as u32 {
        commodities.push(Commodity {
            direction: Direction::Forward,
            dropoff: id,
            demand: demand.of(id),
        });
    }
    for id in 1..=n_d as u32 {
        commodities.push(Commodity {
            direction: Direction::Backward,
            dropoff: id,
            demand: demand.of(id),
        });
    }

    let network = FlowNetwork::from_parts(layout.rows, layout.cols, nodes, arcs, commodities);

    // Connectivity: every positive-demand commodity must be routable.
    let fwd_reach = reachable_from(&network, network.source(), Direction::Forward, false);
    let bwd_reach = reachable_from(&network, network.source(), Direction::Backward, true);
    for commodity in &network.commodities {
        if commodity.demand <= 0.0 {
            continue;
        }
        let d_node = network.dropoff_node(commodity.dropoff);
        let ok = match commodity.direction {
            Direction::Forward => fwd_reach[d_node],
            Direction::Backward => bwd_reach[d_node],
        };
        if !ok {
            return Err(NetworkError::DisconnectedCommodity {
                direction: commodity.direction,
                dropoff: commodity.dropoff,
            });
        }
    }
    Ok(network)
}

/// BFS over one direction class's admissible arcs. With `reversed` the search
/// walks arcs head-to-tail, so the result marks nodes that can reach `start`.
pub(crate) fn reachable_from(
    network: &FlowNetwork,
    start: usize,
    direction: Direction,
    reversed: bool,
) -> Vec<bool> {
    let mut seen = vec![false; network.nodes.len()];
    let mut queue = std::collections::VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    while let Some(node) = queue.pop_front() {
        let arcs = if reversed { network.in_arcs(node) } else { network.out_arcs(node) };
        for &a in arcs {
            if !network.admissible(direction, a) {
                continue;
            }
            let next = if reversed { network.arcs[a].tail } else { network.arcs[a].head };
            if !seen[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    seen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layout::parse_layout;

    /// Two-lane corridor: eastbound carry lane on row 1 with the drop-off
    /// above its single-heading drop cell, westbound return on row 2.
    const CORRIDOR: &str = "3 5\n. . D1 . .\nW1 E E E ES\nNW W W W SW\n";

    #[test]
    fn corridor_builds_and_connects() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let demand = Demand::uniform(0.1, 1);
        let network = build_flow_network(&layout, &demand).unwrap();
        assert_eq!(network.n_workstations, 1);
        assert_eq!(network.n_dropoffs, 1);
        // 2 + S/T, 1 workstation, 1 drop-off, heading nodes.
        let heading_nodes: usize = network
            .nodes
            .iter()
            .filter(|n| matches!(n, NodeKind::CellHeading { .. }))
            .count();
        assert_eq!(network.nodes.len(), 2 + 1 + 1 + heading_nodes);
    }

    #[test]
    fn corridor_has_unique_forward_route() {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        // Walk from the source taking every admissible branch; the forward
        // route to the drop-off must be unique.
        let mut routes = 0usize;
        let mut stack = vec![vec![network.source()]];
        while let Some(path) = stack.pop() {
            let node = *path.last().unwrap();
            if network.nodes[node] == NodeKind::DropOff(1) {
                routes += 1;
                continue;
            }
            for &a in network.out_arcs(node) {
                if !network.forward_admissible(a) {
                    continue;
                }
                let next = network.arcs[a].head;
                if !path.contains(&next) {
                    let mut p = path.clone();
                    p.push(next);
                    stack.push(p);
                }
            }
        }
        assert_eq!(routes, 1);
    }

    #[test]
    fn two_heading_cell_expands_to_two_nodes_with_turns() {
        let layout = parse_layout("2 2\nNE NE\nNE NE\n").unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.0, 0)).unwrap();
        let cell = layout.index(1, 0);
        let n = network.cell_heading_node(cell, Heading::North);
        let e = network.cell_heading_node(cell, Heading::East);
        assert!(n.is_some() && e.is_some());
        assert!(network.cell_heading_node(cell, Heading::South).is_none());
        let ord = network.cell_ordinal(cell).unwrap();
        assert_eq!(network.cells[ord].turn_arcs.len(), 2);
    }

    #[test]
    fn move_arcs_match_geometry() {
        let layout = generate();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 30)).unwrap();
        for arc in &network.arcs {
            if arc.kind != ArcKind::Move {
                continue;
            }
            if let (
                NodeKind::CellHeading { cell: tc, heading: th },
                NodeKind::CellHeading { cell: hc, heading: hh },
            ) = (network.nodes[arc.tail], network.nodes[arc.head])
            {
                assert_eq!(th, hh, "moves keep their heading");
                let (tr, tcol) = layout.position(tc);
                let (nr, ncol) = layout.neighbor(tr, tcol, th).unwrap();
                assert_eq!(layout.index(nr, ncol), hc, "move heads to the geometric neighbor");
            }
        }
    }

    #[test]
    fn source_feeds_only_workstations_and_sink_collects_only_dropoffs() {
        let layout = generate();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 30)).unwrap();
        for &a in network.out_arcs(network.source()) {
            assert!(matches!(network.nodes[network.arcs[a].head], NodeKind::Workstation(_)));
        }
        for &a in network.in_arcs(network.sink()) {
            assert!(matches!(network.nodes[network.arcs[a].tail], NodeKind::DropOff(_)));
        }
    }

    #[test]
    fn build_is_deterministic() {
        let layout = generate();
        let demand = Demand::uniform(0.1, 30);
        let a = build_flow_network(&layout, &demand).unwrap();
        let b = build_flow_network(&layout, &demand).unwrap();
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.arcs, b.arcs);
    }

    #[test]
    fn paper_scale_counts_match_enumeration() {
        let layout = generate();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 30)).unwrap();
        // Independent node count: S, T, stations, plus one node per allowed
        // heading of each ordinary cell.
        let mut expected_nodes = 2 + 2 + 30;
        for idx in 0..layout.cells.len() {
            if let CellSpec::Ordinary(set) = layout.cells[idx] {
                expected_nodes += set.len();
            }
        }
        assert_eq!(network.nodes.len(), expected_nodes);
        // Independent arc count by scanning the layout geometry.
        let mut expected_arcs = 2 * 2 + 2 * 30; // load+sorter, exits both ways
        for id in 1..=2u32 {
            let (wr, wc) = layout.workstation_position(id).unwrap();
            expected_arcs += layout.exit_neighbors(wr, wc).len();
            expected_arcs += layout.entrance_neighbors(wr, wc).len();
        }
        for idx in 0..layout.cells.len() {
            if let CellSpec::Ordinary(set) = layout.cells[idx] {
                let (r, c) = layout.position(idx);
                for h in set.iter() {
                    if let Some((nr, nc)) = layout.neighbor(r, c, h) {
                        if let CellSpec::Ordinary(nset) = layout.cell(nr, nc) {
                            if nset.contains(h) {
                                expected_arcs += 1;
                            }
                        }
                    }
                }
                expected_arcs += set.len() * (set.len() - 1); // turns
                let adjacent_drops = HEADING_ORDER
                    .into_iter()
                    .filter(|&d| {
                        layout
                            .neighbor(r, c, d)
                            .map_or(false, |(nr, nc)| matches!(layout.cell(nr, nc), CellSpec::DropOff(_)))
                    })
                    .count();
                expected_arcs += 2 * set.len() * adjacent_drops;
            }
        }
        assert_eq!(network.arcs.len(), expected_arcs);
    }

    fn generate() -> Layout {
        crate::network::layout::generate_standard_layout(19, 20, 2, 30, 7).unwrap()
    }
}
