//! Reservation table and the prioritized time-expanded planner.
//!
//! A plan claims (cell, tick) pairs for every tick the robot will stand on or
//! is entering a cell. New plans search the time-expanded grid avoiding all
//! existing claims, so a robot that executes on schedule never conflicts with
//! other on-schedule robots. A robot knocked off schedule releases its claims
//! and replans, which keeps the table a true picture of intentions.

use std::collections::{BinaryHeap, HashMap};

use crate::network::{ArcKind, FlowNetwork, Heading, NodeKind};

use super::plan::Action;
use super::RobotId;

/// Mapping (cell, tick) -> robot over a rolling horizon.
#[derive(Debug, Default)]
pub struct ReservationTable {
    claims: HashMap<(usize, u64), RobotId>,
    by_robot: HashMap<RobotId, Vec<(usize, u64)>>,
}

impl ReservationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn holder(&self, cell: usize, tick: u64) -> Option<RobotId> {
        self.claims.get(&(cell, tick)).copied()
    }

    pub fn is_free_for(&self, cell: usize, tick: u64, me: RobotId) -> bool {
        match self.holder(cell, tick) {
            None => true,
            Some(r) => r == me,
        }
    }

    /// Install a robot's claims, replacing anything it held before.
    pub fn reserve(&mut self, robot: RobotId, claims: Vec<(usize, u64)>) {
        self.release(robot);
        for &(cell, tick) in &claims {
            let prev = self.claims.insert((cell, tick), robot);
            debug_assert!(prev.is_none(), "double-booked cell {cell} at tick {tick}");
        }
        self.by_robot.insert(robot, claims);
    }

    pub fn release(&mut self, robot: RobotId) {
        if let Some(old) = self.by_robot.remove(&robot) {
            for key in old {
                if self.claims.get(&key) == Some(&robot) {
                    self.claims.remove(&key);
                }
            }
        }
    }

    /// Drop claims strictly before `tick`.
    pub fn advance(&mut self, tick: u64) {
        self.claims.retain(|&(_, t), _| t >= tick);
        for list in self.by_robot.values_mut() {
            list.retain(|&(_, t)| t >= tick);
        }
    }

    pub fn len(&self) -> usize {
        self.claims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.claims.is_empty()
    }
}

/// Cells blocked indefinitely by robots standing without a plan.
#[derive(Debug, Default)]
pub struct ParkedOverlay {
    parked: HashMap<usize, (RobotId, u64)>,
}

impl ParkedOverlay {
    pub fn park(&mut self, robot: RobotId, cell: usize, since: u64) {
        self.parked.insert(cell, (robot, since));
    }

    pub fn unpark(&mut self, cell: usize, robot: RobotId) {
        if let Some(&(r, _)) = self.parked.get(&cell) {
            if r == robot {
                self.parked.remove(&cell);
            }
        }
    }

    pub fn blocks(&self, cell: usize, tick: u64, me: RobotId) -> bool {
        match self.parked.get(&cell) {
            Some(&(r, since)) => r != me && tick >= since,
            None => false,
        }
    }
}

/// Where a plan starts: standing on a cell, or inside a workstation about to
/// step out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStart {
    OnCell { cell: usize, heading: Heading },
    AtWorkstation(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanGoal {
    /// Reach a cell adjacent to this drop-off and release there.
    DropAt(u32),
    /// Reach an entrance cell of this workstation and step inside.
    Workstation(u32),
}

/// A conflict-checked timed plan plus the claims that back it.
#[derive(Debug, Clone)]
pub struct TimedPlan {
    pub actions: Vec<Action>,
    pub claims: Vec<(usize, u64)>,
    /// Tick at which the final action completes.
    pub arrival: u64,
}

/// Per-goal lower bounds (free-flow ticks to goal from every node), used as
/// the planner's heuristic. Computed lazily, one reverse Dijkstra per goal.
#[derive(Debug, Default)]
pub struct HeuristicCache {
    per_goal: HashMap<PlanGoalKey, Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum PlanGoalKey {
    Drop(u32),
    Workstation(u32),
}

fn goal_key(goal: PlanGoal) -> PlanGoalKey {
    match goal {
        PlanGoal::DropAt(d) => PlanGoalKey::Drop(d),
        PlanGoal::Workstation(w) => PlanGoalKey::Workstation(w),
    }
}

impl HeuristicCache {
    /// Free-flow tick distances to `goal` from every node, built on first use.
    pub fn table_for(&mut self, network: &FlowNetwork, turn_ticks: u64, goal: PlanGoal) -> &Vec<u64> {
        self.per_goal
            .entry(goal_key(goal))
            .or_insert_with(|| reverse_free_flow_ticks(network, turn_ticks, goal))
    }
}

/// Dijkstra over reversed Move/Turn arcs from the goal's terminal node set.
fn reverse_free_flow_ticks(network: &FlowNetwork, turn_ticks: u64, goal: PlanGoal) -> Vec<u64> {
    let station_node = match goal {
        PlanGoal::DropAt(d) => network.dropoff_node(d),
        PlanGoal::Workstation(w) => network.workstation_node(w),
    };
    let mut dist = vec![u64::MAX; network.nodes.len()];
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, usize)>> = BinaryHeap::new();
    // Seeds: cell-heading nodes with a terminal arc into the station (a drop
    // arc, or a workstation entrance move).
    for &a in network.in_arcs(station_node) {
        let arc = &network.arcs[a];
        if let NodeKind::CellHeading { .. } = network.nodes[arc.tail] {
            let ok = match goal {
                PlanGoal::DropAt(_) => arc.kind == ArcKind::Drop,
                PlanGoal::Workstation(_) => arc.kind == ArcKind::Move,
            };
            if ok && dist[arc.tail] != 0 {
                dist[arc.tail] = 0;
                heap.push(std::cmp::Reverse((0, arc.tail)));
            }
        }
    }
    while let Some(std::cmp::Reverse((d, node))) = heap.pop() {
        if d > dist[node] {
            continue;
        }
        for &a in network.in_arcs(node) {
            let arc = &network.arcs[a];
            if !matches!(network.nodes[arc.tail], NodeKind::CellHeading { .. }) {
                continue;
            }
            let cost = match arc.kind {
                ArcKind::Move => 1,
                ArcKind::Turn => turn_ticks,
                _ => continue,
            };
            let nd = d.saturating_add(cost);
            if nd < dist[arc.tail] {
                dist[arc.tail] = nd;
                heap.push(std::cmp::Reverse((nd, arc.tail)));
            }
        }
    }
    dist
}

/// Everything the planner needs besides the mutable tables.
pub struct PlannerContext<'a> {
    pub network: &'a FlowNetwork,
    pub turn_ticks: u64,
    pub drop_ticks: u64,
    pub horizon: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SearchPos {
    OffGrid,
    Node(usize),
}

#[derive(Debug, Clone, Copy)]
struct SearchEntry {
    f: u64,
    g: u64,
    state: (SearchPos, u64),
}

impl PartialEq for SearchEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for SearchEntry {}
impl PartialOrd for SearchEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for SearchEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on (f, g, state) with a fully deterministic order.
        let key = |e: &SearchEntry| {
            let (pos, t) = e.state;
            let p = match pos {
                SearchPos::OffGrid => usize::MAX,
                SearchPos::Node(n) => n,
            };
            (e.f, e.g, p, t)
        };
        key(other).cmp(&key(self))
    }
}

/// Plan a conflict-free timed route on the reservation-expanded grid.
///
/// Returns the action list (with explicit waits), the claims backing it, and
/// the completion tick. The caller is responsible for inserting the claims
/// via [`ReservationTable::reserve`]. Fails with `None` when no conflict-free
/// route exists within the horizon.
#[allow(clippy::too_many_arguments)]
pub fn ca_star_plan(
    ctx: &PlannerContext<'_>,
    reservations: &ReservationTable,
    parked: &ParkedOverlay,
    heuristics: &mut HeuristicCache,
    me: RobotId,
    start: PlanStart,
    goal: PlanGoal,
    t0: u64,
    excluded_cell: Option<usize>,
) -> Option<TimedPlan> {
    let network = ctx.network;
    let h_table = heuristics.table_for(network, ctx.turn_ticks, goal).clone();
    let free = |cell: usize, tick: u64| -> bool {
        reservations.is_free_for(cell, tick, me) && !parked.blocks(cell, tick, me)
    };
    let cell_of = |node: usize| match network.nodes[node] {
        NodeKind::CellHeading { cell, .. } => cell,
        _ => unreachable!("search nodes are cell headings"),
    };

    let start_state = match start {
        PlanStart::OnCell { cell, heading } => {
            let node = network.cell_heading_node(cell, heading)?;
            (SearchPos::Node(node), t0)
        }
        PlanStart::AtWorkstation(_) => (SearchPos::OffGrid, t0),
    };
    let h_of = |pos: SearchPos| -> u64 {
        match pos {
            SearchPos::OffGrid => 0,
            SearchPos::Node(n) => h_table[n],
        }
    };
    if h_of(start_state.0) == u64::MAX {
        return None;
    }

    let mut open = BinaryHeap::new();
    let mut best_g: HashMap<(SearchPos, u64), u64> = HashMap::new();
    let mut parent: HashMap<(SearchPos, u64), ((SearchPos, u64), Action)> = HashMap::new();
    best_g.insert(start_state, 0);
    open.push(SearchEntry { f: h_of(start_state.0), g: 0, state: start_state });

    let mut terminal: Option<(SearchPos, u64)> = None;
    while let Some(SearchEntry { g, state, .. }) = open.pop() {
        if best_g.get(&state) != Some(&g) {
            continue;
        }
        let (pos, t) = state;
        // Terminal test: the closing action must itself be conflict-free.
        if let SearchPos::Node(node) = pos {
            let cell = cell_of(node);
            match goal {
                PlanGoal::DropAt(d) => {
                    let d_node = network.dropoff_node(d);
                    if network.arc_id(node, d_node).is_some()
                        && (1..=ctx.drop_ticks).all(|k| free(cell, t + k))
                    {
                        terminal = Some(state);
                        break;
                    }
                }
                PlanGoal::Workstation(w) => {
                    let w_node = network.workstation_node(w);
                    if network.arc_id(node, w_node).is_some() {
                        terminal = Some(state);
                        break;
                    }
                }
            }
        }
        if t.saturating_sub(t0) >= ctx.horizon {
            continue;
        }
        let push = |state_new: (SearchPos, u64), g_new: u64, action: Action,
                        from: (SearchPos, u64),
                        open: &mut BinaryHeap<SearchEntry>,
                        best_g: &mut HashMap<(SearchPos, u64), u64>,
                        parent: &mut HashMap<(SearchPos, u64), ((SearchPos, u64), Action)>| {
            let h = h_of(state_new.0);
            if h == u64::MAX {
                return;
            }
            if best_g.get(&state_new).map_or(true, |&old| g_new < old) {
                best_g.insert(state_new, g_new);
                parent.insert(state_new, (from, action));
                open.push(SearchEntry { f: g_new + h, g: g_new, state: state_new });
            }
        };
        match pos {
            SearchPos::OffGrid => {
                // Wait inside the workstation, or step out onto an exit cell.
                push((SearchPos::OffGrid, t + 1), g + 1, Action::Wait { ticks: 1 }, state, &mut open, &mut best_g, &mut parent);
                if let PlanStart::AtWorkstation(w) = start {
                    let w_node = network.workstation_node(w);
                    for &a in network.out_arcs(w_node) {
                        let arc = &network.arcs[a];
                        if arc.kind != ArcKind::Move {
                            continue;
                        }
                        if let NodeKind::CellHeading { cell, heading } = network.nodes[arc.head] {
                            if excluded_cell == Some(cell) {
                                continue;
                            }
                            if free(cell, t) && free(cell, t + 1) {
                                push(
                                    (SearchPos::Node(arc.head), t + 1),
                                    g + 1,
                                    Action::Move { cell, heading },
                                    state,
                                    &mut open,
                                    &mut best_g,
                                    &mut parent,
                                );
                            }
                        }
                    }
                }
            }
            SearchPos::Node(node) => {
                let cell = cell_of(node);
                if free(cell, t + 1) {
                    push((SearchPos::Node(node), t + 1), g + 1, Action::Wait { ticks: 1 }, state, &mut open, &mut best_g, &mut parent);
                }
                for &a in network.out_arcs(node) {
                    let arc = &network.arcs[a];
                    match arc.kind {
                        ArcKind::Move => {
                            if let NodeKind::CellHeading { cell: to_cell, heading } = network.nodes[arc.head] {
                                if excluded_cell == Some(to_cell) {
                                    continue;
                                }
                                if free(to_cell, t) && free(to_cell, t + 1) {
                                    push(
                                        (SearchPos::Node(arc.head), t + 1),
                                        g + 1,
                                        Action::Move { cell: to_cell, heading },
                                        state,
                                        &mut open,
                                        &mut best_g,
                                        &mut parent,
                                    );
                                }
                            }
                        }
                        ArcKind::Turn => {
                            if let NodeKind::CellHeading { heading, .. } = network.nodes[arc.head] {
                                if (1..=ctx.turn_ticks).all(|k| free(cell, t + k)) {
                                    push(
                                        (SearchPos::Node(arc.head), t + ctx.turn_ticks),
                                        g + ctx.turn_ticks,
                                        Action::Turn { to: heading },
                                        state,
                                        &mut open,
                                        &mut best_g,
                                        &mut parent,
                                    );
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    let terminal = terminal?;
    // Reconstruct actions, then derive claims by replaying them.
    let mut actions_rev: Vec<Action> = Vec::new();
    let mut cursor = terminal;
    while cursor != start_state {
        let (prev, action) = parent[&cursor];
        actions_rev.push(action);
        cursor = prev;
    }
    let mut actions: Vec<Action> = actions_rev.into_iter().rev().collect();
    // Coalesce unit waits.
    let mut coalesced: Vec<Action> = Vec::new();
    for action in actions.drain(..) {
        match (coalesced.last_mut(), action) {
            (Some(Action::Wait { ticks }), Action::Wait { ticks: one }) => *ticks += one,
            _ => coalesced.push(action),
        }
    }
    let (terminal_action, arrival) = match goal {
        PlanGoal::DropAt(d) => (Action::Drop { dropoff: d }, terminal.1 + ctx.drop_ticks),
        PlanGoal::Workstation(w) => (Action::Enter { workstation: w }, terminal.1 + 1),
    };
    coalesced.push(terminal_action);

    let claims = derive_claims(ctx, start, t0, &coalesced);
    Some(TimedPlan { actions: coalesced, claims, arrival })
}

/// Replay a timed action list and collect every (cell, tick) the robot will
/// hold: the grant tick and every standing tick on each visited cell.
pub fn derive_claims(
    ctx: &PlannerContext<'_>,
    start: PlanStart,
    t0: u64,
    actions: &[Action],
) -> Vec<(usize, u64)> {
    let mut claims = Vec::new();
    let mut t = t0;
    let mut on_cell: Option<usize> = match start {
        PlanStart::OnCell { cell, .. } => {
            claims.push((cell, t0));
            Some(cell)
        }
        PlanStart::AtWorkstation(_) => None,
    };
    for action in actions {
        match *action {
            Action::Wait { ticks } => {
                for k in 1..=ticks {
                    if let Some(c) = on_cell {
                        claims.push((c, t + k));
                    }
                }
                t += ticks;
            }
            Action::Move { cell, .. } => {
                // Claim the grant tick and the arrival stand.
                claims.push((cell, t));
                claims.push((cell, t + 1));
                t += 1;
                on_cell = Some(cell);
            }
            Action::Turn { .. } => {
                let c = on_cell.expect("turning requires a cell");
                for k in 1..=ctx.turn_ticks {
                    claims.push((c, t + k));
                }
                t += ctx.turn_ticks;
            }
            Action::Drop { .. } => {
                let c = on_cell.expect("dropping requires a cell");
                for k in 1..=ctx.drop_ticks {
                    claims.push((c, t + k));
                }
                t += ctx.drop_ticks;
            }
            Action::Enter { .. } => {
                // Vacates the entrance cell at the end of this tick; the
                // standing tick is already claimed.
                t += 1;
                on_cell = None;
            }
        }
    }
    claims.sort_unstable();
    claims.dedup();
    claims
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_flow_network, parse_layout, Demand};

    const CORRIDOR: &str = "3 5\n. . D1 . .\nW1 E E E ES\nNW W W W SW\n";

    fn setup() -> (crate::network::Layout, FlowNetwork) {
        let layout = parse_layout(CORRIDOR).unwrap();
        let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
        (layout, network)
    }

    #[test]
    fn free_corridor_plan_is_free_flow() {
        let (_, network) = setup();
        let ctx = PlannerContext { network: &network, turn_ticks: 4, drop_ticks: 1, horizon: 200 };
        let table = ReservationTable::new();
        let parked = ParkedOverlay::default();
        let mut heuristics = HeuristicCache::default();
        let plan = ca_star_plan(
            &ctx,
            &table,
            &parked,
            &mut heuristics,
            0,
            PlanStart::AtWorkstation(1),
            PlanGoal::DropAt(1),
            0,
            None,
        )
        .expect("plan exists");
        // Exit move + one lane move = 2 ticks of travel, then the drop.
        let moves = plan.actions.iter().filter(|a| matches!(a, Action::Move { .. })).count();
        assert_eq!(moves, 2);
        assert!(!plan.actions.iter().any(|a| matches!(a, Action::Wait { .. })));
        assert_eq!(plan.arrival, 2 + ctx.drop_ticks);
    }

    #[test]
    fn opposing_reservation_inserts_one_wait() {
        let (layout, network) = setup();
        let ctx = PlannerContext { network: &network, turn_ticks: 4, drop_ticks: 1, horizon: 200 };
        let mut table = ReservationTable::new();
        let parked = ParkedOverlay::default();
        let mut heuristics = HeuristicCache::default();
        // Another robot holds the first lane cell exactly when we would claim
        // its grant tick (tick 0) for the exit move.
        table.reserve(99, vec![(layout.index(1, 1), 0)]);
        let plan = ca_star_plan(
            &ctx,
            &table,
            &parked,
            &mut heuristics,
            0,
            PlanStart::AtWorkstation(1),
            PlanGoal::DropAt(1),
            0,
            None,
        )
        .expect("plan exists");
        let waits: u64 = plan
            .actions
            .iter()
            .map(|a| if let Action::Wait { ticks } = a { *ticks } else { 0 })
            .sum();
        assert_eq!(waits, 1, "plan should wait out the reservation: {:?}", plan.actions);
        assert_eq!(plan.arrival, 3 + ctx.drop_ticks);
    }

    #[test]
    fn fully_reserved_horizon_fails() {
        let (layout, network) = setup();
        let ctx = PlannerContext { network: &network, turn_ticks: 4, drop_ticks: 1, horizon: 16 };
        let mut table = ReservationTable::new();
        let parked = ParkedOverlay::default();
        let mut heuristics = HeuristicCache::default();
        let mut claims = Vec::new();
        for t in 0..40 {
            claims.push((layout.index(1, 1), t));
        }
        table.reserve(99, claims);
        let plan = ca_star_plan(
            &ctx,
            &table,
            &parked,
            &mut heuristics,
            0,
            PlanStart::AtWorkstation(1),
            PlanGoal::DropAt(1),
            0,
            None,
        );
        assert!(plan.is_none());
    }

    #[test]
    fn claims_match_hold_semantics() {
        let (layout, network) = setup();
        let ctx = PlannerContext { network: &network, turn_ticks: 4, drop_ticks: 1, horizon: 64 };
        let c11 = layout.index(1, 1);
        let c12 = layout.index(1, 2);
        let actions = vec![
            Action::Move { cell: c11, heading: Heading::East },
            Action::Move { cell: c12, heading: Heading::East },
            Action::Drop { dropoff: 1 },
        ];
        let claims = derive_claims(&ctx, PlanStart::AtWorkstation(1), 10, &actions);
        // Exit move at tick 10: holds (c11, 10) and (c11, 11); next move at
        // tick 11: (c12, 11), (c12, 12); drop (1 tick) plus handover: (c12, 13).
        assert_eq!(
            claims,
            vec![(c11, 10), (c11, 11), (c12, 11), (c12, 12), (c12, 13)]
        );
    }
}
