//! Independent oracles for the delay model: closed-form hand sums, a Lindley
//! M/D/1 queue simulation, an event-driven corridor micro-simulation, and
//! central finite differences for the gradient. None of these share code with
//! the implementation paths they check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use sortflow_core::delay::{
    cost_gradient, expected_cell_delay, total_cost, workstation_delay, LinkFlow, TimingParams,
};
use sortflow_core::network::{
    build_flow_network, generate_standard_layout, parse_layout, Demand, FlowNetwork, Heading,
};
use sortflow_core::solver::all_or_nothing;

const CORRIDOR: &str = "3 5\n. . D1 . .\nW1 E E E ES\nNW W W W SW\n";

fn free_flow_costs(network: &FlowNetwork, timing: &TimingParams) -> Vec<f64> {
    (0..network.arcs.len())
        .map(|a| sortflow_core::delay::free_flow_cost(network, a, timing))
        .collect()
}

/// Total cost on the corridor equals the arc-by-arc hand sum: forward leg
/// load + two congested moves + drop, backward leg with three turns.
#[test]
fn corridor_total_cost_matches_hand_sum() {
    let layout = parse_layout(CORRIDOR).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
    let timing = TimingParams::standard();
    let flow = all_or_nothing(&network, &free_flow_costs(&network, &timing)).unwrap();

    // Forward: load queue (M/G/1 at v = 0.1), one move into a pure-through
    // cell (E[S] = 0.5 * 0.1 * 4), one move into the drop cell (carries the
    // forward drop and the backward resumption: m2 = 0.1*4 + 0.1*9), drop.
    let load = 3.0 + 0.1 * 9.0 / (2.0 * (1.0 - 0.3));
    let into_through = 1.0 + 0.5 * 0.1 * 4.0;
    let into_drop_cell = 1.0 + 0.5 * (0.1 * 4.0 + 0.1 * 9.0);
    let fwd = 0.1 * (load + into_through + into_drop_cell + 1.0);
    // Backward: two through moves at 1.2, three moves into turning cells at
    // 1.0 + 0.5*0.1*36 = 2.8 each, three turns at 4, two extra through moves
    // on the return lane, workstation entry at 1.0.
    let into_turning = 1.0 + 0.5 * 0.1 * 36.0;
    let bwd = 0.1
        * (into_through // (1,2) -> (1,3)
            + into_turning // -> (1,4)
            + 4.0
            + into_turning // -> (2,4)
            + 4.0
            + into_through * 3.0 // row 2 through moves
            + into_turning // -> (2,0)
            + 4.0
            + 1.0);
    let expected = fwd + bwd;
    let tc = total_cost(&network, &flow, &timing).unwrap();
    assert!((tc - expected).abs() < 1e-9, "tc {tc} vs hand sum {expected}");
}

/// Pollaczek-Khinchin prediction vs a Lindley-recursion M/D/1 simulation:
/// sojourn = E[T_load] + lambda E[S^2] / (2 (1 - rho)) = 3.642857 at
/// lambda = 0.1, deterministic service 3.
#[test]
fn mg1_prediction_matches_lindley_queue() {
    let layout = parse_layout(CORRIDOR).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.1, 1)).unwrap();
    let timing = TimingParams::standard();
    let mut flow = LinkFlow::zeros(network.arcs.len());
    let load_arc = network.arc_id(network.source(), network.workstation_node(1)).unwrap();
    flow.forward[load_arc] = 0.1;
    let predicted = workstation_delay(&network, &flow, 1, &timing).unwrap();
    assert!((predicted - 3.642857142857143).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let interarrival = Exp::new(0.1).unwrap();
    let service = 3.0f64;
    let mut wait_q = 0.0f64;
    let mut sum_sojourn = 0.0f64;
    let arrivals = 300_000usize;
    for _ in 0..arrivals {
        sum_sojourn += wait_q + service;
        let gap: f64 = interarrival.sample(&mut rng);
        wait_q = (wait_q + service - gap).max(0.0);
    }
    let measured = sum_sojourn / arrivals as f64;
    let rel = (measured - predicted).abs() / predicted;
    assert!(rel < 0.05, "M/D/1 oracle off by {:.2}%: {measured} vs {predicted}", rel * 100.0);
}

/// Light-traffic cell delay: the formula against an event-driven simulation
/// of the blocking process it models. Each corridor cell sees its arc flow
/// as an independent Poisson arrival stream, and an admitted robot holds the
/// cell for its in-move plus out-move (2*T1). The formula drops the
/// queueing correction 1/(1-rho), so at rho = 0.1 the simulation sits about
/// 11% above it; that is the approximation being quantified here.
///
/// A head-fed corridor would not work as an oracle: followers space out into
/// lockstep convoys and interior waits vanish, which is exactly the arrival
/// independence the renewal model assumes away.
#[test]
fn cell_delay_matches_blocking_process_simulation() {
    // Prediction side: a real corridor network with 0.05 flow on the lane,
    // evaluated per arc into cells (1,2)..(1,5).
    let text = "3 8\n. . . . . . D1 .\nW1 E E E E E E ES\nNW W W W W W W SW\n";
    let layout = parse_layout(text).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.05, 1)).unwrap();
    let timing = TimingParams::standard();
    let mut flow = LinkFlow::zeros(network.arcs.len());
    let node = |col: usize| network.cell_heading_node(layout.index(1, col), Heading::East).unwrap();
    for col in 1..=4 {
        let arc = network.arc_id(node(col), node(col + 1)).unwrap();
        flow.forward[arc] = 0.05;
    }
    let mut predictions = Vec::new();
    for col in 1..=4 {
        let arc = network.arc_id(node(col), node(col + 1)).unwrap();
        predictions.push(expected_cell_delay(&network, &flow, &timing, arc));
    }
    for p in &predictions {
        assert!((p - 0.1).abs() < 1e-12, "through-cell prediction should be 0.1, got {p}");
    }

    // Oracle side: per cell, Poisson arrivals at the arc flow rate into a
    // FIFO cell held 2*T1 per robot.
    let rate = 0.05f64;
    let hold = 2.0 * timing.t1;
    let arrivals_per_cell = 400_000usize;
    let interarrival = Exp::new(rate).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (i, predicted) in predictions.iter().enumerate() {
        let mut clock = 0.0f64;
        let mut busy_until = 0.0f64;
        let mut wait_sum = 0.0f64;
        for _ in 0..arrivals_per_cell {
            clock += interarrival.sample(&mut rng);
            let wait = (busy_until - clock).max(0.0);
            wait_sum += wait;
            busy_until = clock + wait + hold;
        }
        let measured = wait_sum / arrivals_per_cell as f64;
        let rel = (measured - predicted).abs() / predicted;
        assert!(
            rel < 0.15,
            "cell {}: blocking simulation {measured:.4} vs prediction {predicted:.4} ({:.1}% off)",
            i + 2,
            rel * 100.0
        );
    }
}

/// Build a strictly feasible flow as a convex combination of all-or-nothing
/// assignments under randomized arc costs.
fn random_feasible_flow(network: &FlowNetwork, rng: &mut ChaCha8Rng) -> LinkFlow {
    let components = 3;
    let mut weights: Vec<f64> = (0..components).map(|_| rng.gen::<f64>() + 0.1).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut flow = LinkFlow::zeros(network.arcs.len());
    for &w in &weights {
        let costs: Vec<f64> = (0..network.arcs.len()).map(|_| rng.gen::<f64>() + 0.05).collect();
        let aon = all_or_nothing(network, &costs).unwrap();
        for a in 0..network.arcs.len() {
            flow.forward[a] += w * aon.forward[a];
            flow.backward[a] += w * aon.backward[a];
        }
    }
    flow
}

/// Analytic gradient vs central finite differences on randomized networks
/// and flows. Arcs feeding a zero-flow cell are skipped: the delay model has
/// a one-sided kink there and central differences straddle it.
#[test]
fn gradient_matches_finite_differences() {
    let timing = TimingParams::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut compared = 0usize;
    for instance in 0..20 {
        let rows = 5 + (instance % 3);
        let cols = 5 + (instance % 4);
        let n_d = 1 + instance % 3;
        let layout = match generate_standard_layout(rows, cols, 1 + instance % 2, n_d, instance as u64)
        {
            Ok(l) => l,
            Err(_) => continue,
        };
        let demand = Demand::uniform(0.05 + 0.1 * rng.gen::<f64>(), n_d);
        let network = build_flow_network(&layout, &demand).unwrap();
        let flow = random_feasible_flow(&network, &mut rng);
        let cv = cost_gradient(&network, &flow, &timing).unwrap();
        let h = 1e-6;
        for arc in 0..network.arcs.len() {
            if cell_flow_near_zero(&network, &flow, arc, 10.0 * h) {
                continue;
            }
            let mut plus = flow.clone();
            plus.forward[arc] += h;
            let mut minus = flow.clone();
            minus.forward[arc] -= h;
            let fd = (total_cost(&network, &plus, &timing).unwrap()
                - total_cost(&network, &minus, &timing).unwrap())
                / (2.0 * h);
            let rel = (cv.gradient[arc] - fd).abs() / fd.abs().max(1e-6);
            assert!(
                rel < 1e-5,
                "instance {instance} arc {arc}: analytic {} vs fd {fd} (rel {rel:.2e})",
                cv.gradient[arc]
            );
            compared += 1;
        }
    }
    assert!(compared > 500, "only {compared} arcs compared");
}

/// True when perturbing this arc touches a cell whose total flow is too
/// small for a two-sided difference to stay on one smooth branch.
fn cell_flow_near_zero(network: &FlowNetwork, flow: &LinkFlow, arc: usize, margin: f64) -> bool {
    for cell in &network.cells {
        let affected = cell.inflow_arcs.contains(&arc)
            || cell.turn_arcs.contains(&arc)
            || cell.drop_arcs.contains(&arc);
        if affected {
            let v: f64 = cell.inflow_arcs.iter().map(|&a| flow.total(a)).sum();
            return v <= margin;
        }
    }
    false
}

/// Monotonicity: scaling every flow component up never lowers the cost.
#[test]
fn total_cost_monotone_under_flow_increase() {
    let timing = TimingParams::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = generate_standard_layout(7, 8, 2, 3, 1).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.1, 3)).unwrap();
    for _ in 0..20 {
        let flow = random_feasible_flow(&network, &mut rng);
        let base = total_cost(&network, &flow, &timing).unwrap();
        let scaled = flow.interpolate(&LinkFlow::zeros(network.arcs.len()), -0.2); // 1.2x
        let bigger = total_cost(&network, &scaled, &timing).unwrap();
        assert!(bigger >= base - 1e-12, "cost fell from {base} to {bigger}");
    }
}

/// The cell-delay estimate never exceeds its own Theorem-style upper bound.
#[test]
fn delay_sits_inside_error_bound_sandwich() {
    let timing = TimingParams::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let layout = generate_standard_layout(7, 8, 2, 3, 1).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.1, 3)).unwrap();
    let flow = random_feasible_flow(&network, &mut rng);
    let bounds = sortflow_core::delay::approximation_error_bound(&network, &flow, &timing, 20);
    for arc in 0..network.arcs.len() {
        let delay = expected_cell_delay(&network, &flow, &timing, arc);
        assert!(delay >= 0.0);
        assert!(delay <= delay + bounds[arc], "sandwich ordering");
        assert!(bounds[arc] >= 0.0);
    }
}
