//! Assignment policies: who handles a parcel, and where a freed robot goes.

use rand::Rng;

use crate::decompose::{DecomposeError, SplitTable};
use crate::network::{Direction, FlowNetwork, NodeKind};

use super::plan::static_shortest_path;
use super::SimError;

/// Uniform parcel-to-workstation / robot-to-workstation assignment.
pub fn policy_random(n_workstations: usize, rng: &mut impl Rng) -> Result<u32, SimError> {
    if n_workstations == 0 {
        return Err(SimError::Config("no workstations to assign to".into()));
    }
    Ok(rng.gen_range(1..=n_workstations as u32))
}

/// Draw a (workstation, path-table index) pair from the split distribution
/// for one drop-off and direction.
pub fn policy_flow_guided(
    split: &SplitTable,
    direction: Direction,
    dropoff: u32,
    rng: &mut impl Rng,
) -> Result<(u32, usize), DecomposeError> {
    split.sample(dropoff, direction, rng)
}

/// Drop-offs partitioned by nearest workstation (free-flow travel ticks);
/// the robot fleet is split evenly across zones at trial start.
#[derive(Debug, Clone)]
pub struct ZoneMap {
    /// Owning workstation per drop-off id minus one.
    dropoff_zone: Vec<u32>,
    n_workstations: usize,
}

impl ZoneMap {
    pub fn build(network: &FlowNetwork, turn_ticks: u64) -> Result<ZoneMap, SimError> {
        let n_w = network.n_workstations;
        if n_w == 0 {
            return Err(SimError::Config("zoning needs at least one workstation".into()));
        }
        let mut dropoff_zone = Vec::with_capacity(network.n_dropoffs);
        for d in 1..=network.n_dropoffs as u32 {
            let d_node = network.dropoff_node(d);
            let mut best: Option<(u64, u32)> = None;
            for w in 1..=n_w as u32 {
                let w_node = network.workstation_node(w);
                if let Some(path) =
                    static_shortest_path(network, turn_ticks, w_node, |n| n == d_node, None)
                {
                    // Path cost in ticks: moves are 1, turns turn_ticks.
                    let mut ticks = 0u64;
                    for pair in path.windows(2) {
                        match (network.nodes[pair[0]], network.nodes[pair[1]]) {
                            (
                                NodeKind::CellHeading { cell: a, .. },
                                NodeKind::CellHeading { cell: b, .. },
                            ) => ticks += if a == b { turn_ticks } else { 1 },
                            (NodeKind::Workstation(_), NodeKind::CellHeading { .. }) => ticks += 1,
                            _ => {}
                        }
                    }
                    if best.map_or(true, |(bt, _)| ticks < bt) {
                        best = Some((ticks, w));
                    }
                }
            }
            match best {
                Some((_, w)) => dropoff_zone.push(w),
                None => {
                    return Err(SimError::Config(format!(
                        "drop-off {d} unreachable from every workstation"
                    )))
                }
            }
        }
        Ok(ZoneMap { dropoff_zone, n_workstations: n_w })
    }

    /// The workstation owning a drop-off's zone.
    pub fn workstation_for_dropoff(&self, dropoff: u32) -> u32 {
        self.dropoff_zone[dropoff as usize - 1]
    }

    /// Zone (= home workstation) of robot `i` under an even fleet split.
    pub fn robot_zone(&self, robot_index: usize) -> u32 {
        (robot_index % self.n_workstations) as u32 + 1
    }
}

/// Zone assignment for a parcel: the workstation owning its drop-off.
pub fn policy_zoning_parcel(zones: &ZoneMap, dropoff: u32) -> u32 {
    zones.workstation_for_dropoff(dropoff)
}

/// Zone assignment for a freed robot: always its own zone's workstation,
/// regardless of queue lengths.
pub fn policy_zoning_robot(robot_zone: u32) -> u32 {
    robot_zone
}
