//! Frank-Wolfe against a brute-force oracle on a mirror-symmetric layout:
//! one drop-off served by two geometrically identical workstation loops, so
//! the optimal load split is exactly 50/50.

use sortflow_core::delay::{total_cost, LinkFlow, TimingParams};
use sortflow_core::network::{build_flow_network, parse_layout, Demand, FlowNetwork, Heading, Layout};
use sortflow_core::solver::{frank_wolfe, line_search, SolverConfig};

/// Two mirror-image loops: W1 on top, W2 below, both two moves from D1.
const MIRROR: &str = "5 3\nSW W NW\nW1 E EN\n. . D1\nW2 E ES\nNW W SW\n";

struct Routes {
    top_fwd: Vec<usize>,
    top_bwd: Vec<usize>,
    bot_fwd: Vec<usize>,
    bot_bwd: Vec<usize>,
}

fn routes(layout: &Layout, network: &FlowNetwork) -> Routes {
    let node = |r: usize, c: usize, h: Heading| {
        network.cell_heading_node(layout.index(r, c), h).unwrap()
    };
    let top_fwd = vec![
        network.source(),
        network.workstation_node(1),
        node(1, 1, Heading::East),
        node(1, 2, Heading::East),
        network.dropoff_node(1),
        network.sink(),
    ];
    let top_bwd = vec![
        network.sink(),
        network.dropoff_node(1),
        node(1, 2, Heading::North),
        node(0, 2, Heading::North),
        node(0, 2, Heading::West),
        node(0, 1, Heading::West),
        node(0, 0, Heading::West),
        node(0, 0, Heading::South),
        network.workstation_node(1),
        network.source(),
    ];
    let bot_fwd = vec![
        network.source(),
        network.workstation_node(2),
        node(3, 1, Heading::East),
        node(3, 2, Heading::East),
        network.dropoff_node(1),
        network.sink(),
    ];
    let bot_bwd = vec![
        network.sink(),
        network.dropoff_node(1),
        node(3, 2, Heading::South),
        node(4, 2, Heading::South),
        node(4, 2, Heading::West),
        node(4, 1, Heading::West),
        node(4, 0, Heading::West),
        node(4, 0, Heading::North),
        network.workstation_node(2),
        network.source(),
    ];
    Routes { top_fwd, top_bwd, bot_fwd, bot_bwd }
}

fn flow_for_split(network: &FlowNetwork, routes: &Routes, lambda: f64, share_top: f64) -> LinkFlow {
    let mut flow = LinkFlow::zeros(network.arcs.len());
    let mut add = |nodes: &[usize], class_fwd: bool, amount: f64| {
        for pair in nodes.windows(2) {
            let arc = network.arc_id(pair[0], pair[1]).expect("route arc");
            if class_fwd {
                flow.forward[arc] += amount;
            } else {
                flow.backward[arc] += amount;
            }
        }
    };
    add(&routes.top_fwd, true, lambda * share_top);
    add(&routes.bot_fwd, true, lambda * (1.0 - share_top));
    add(&routes.top_bwd, false, lambda * share_top);
    add(&routes.bot_bwd, false, lambda * (1.0 - share_top));
    flow
}

#[test]
fn symmetric_split_is_half_by_brute_force_and_frank_wolfe() {
    let layout = parse_layout(MIRROR).unwrap();
    let lambda = 0.2;
    let network = build_flow_network(&layout, &Demand::uniform(lambda, 1)).unwrap();
    let timing = TimingParams::standard();
    let routes = routes(&layout, &network);

    // Brute force over the 1-D split parameter.
    let mut best = (f64::INFINITY, 0.0);
    for step in 0..=200 {
        let share = step as f64 / 200.0;
        let flow = flow_for_split(&network, &routes, lambda, share);
        let tc = total_cost(&network, &flow, &timing).unwrap();
        if tc < best.0 {
            best = (tc, share);
        }
    }
    assert!(
        (best.1 - 0.5).abs() < 0.01,
        "brute-force optimum at share {} (tc {})",
        best.1,
        best.0
    );

    let (flow, trace) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
    assert!(trace.converged);
    let load_1 = network.arc_id(network.source(), network.workstation_node(1)).unwrap();
    let load_2 = network.arc_id(network.source(), network.workstation_node(2)).unwrap();
    assert!(
        (flow.total(load_1) - lambda / 2.0).abs() < 1e-3,
        "workstation 1 load {} not an even split",
        flow.total(load_1)
    );
    assert!((flow.total(load_2) - lambda / 2.0).abs() < 1e-3);
    // The solver's cost matches the brute-force optimum.
    let tc = total_cost(&network, &flow, &timing).unwrap();
    assert!(tc <= best.0 + 1e-6, "solver tc {tc} vs brute force {}", best.0);
}

/// On the same fixture the line search recovers the known interior optimum:
/// from all-on-top toward all-on-bottom the best step is exactly one half.
#[test]
fn line_search_finds_interior_minimum() {
    let layout = parse_layout(MIRROR).unwrap();
    let lambda = 0.2;
    let network = build_flow_network(&layout, &Demand::uniform(lambda, 1)).unwrap();
    let timing = TimingParams::standard();
    let routes = routes(&layout, &network);
    let all_top = flow_for_split(&network, &routes, lambda, 1.0);
    let all_bot = flow_for_split(&network, &routes, lambda, 0.0);
    let (alpha, tc) = line_search(&network, &all_top, &all_bot, &timing, 64).unwrap();
    assert!((alpha - 0.5).abs() < 1e-6, "alpha {alpha}");
    let tc_top = total_cost(&network, &all_top, &timing).unwrap();
    let tc_bot = total_cost(&network, &all_bot, &timing).unwrap();
    assert!(tc <= tc_top.min(tc_bot) + 1e-9);
}
