//! Flow decomposition round-trips: recomposing the recovered paths must
//! reproduce the solver's link flow arc by arc, within the push-count bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sortflow_core::decompose::{build_split_table, decompose_flow};
use sortflow_core::delay::TimingParams;
use sortflow_core::network::{build_flow_network, generate_standard_layout, Demand, Direction, NodeKind};
use sortflow_core::solver::{frank_wolfe, SolverConfig};

#[test]
fn random_solver_outputs_round_trip() {
    let timing = TimingParams::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut instances = 0usize;
    for seed in 0..40u64 {
        let rows = 6 + (seed % 3) as usize;
        let cols = 6 + (seed % 4) as usize;
        let n_w = 1 + (seed % 2) as usize;
        let n_d = 1 + (seed % 4) as usize;
        let layout = match generate_standard_layout(rows, cols, n_w, n_d, seed) {
            Ok(l) => l,
            Err(_) => continue,
        };
        let lambda = 0.02 + 0.1 * rng.gen::<f64>();
        let network = build_flow_network(&layout, &Demand::uniform(lambda, n_d)).unwrap();
        let (flow, _) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
        let table = decompose_flow(&network, &flow, &mut rng).unwrap();

        assert!(
            table.pushes <= 2 * network.nodes.len() + network.arcs.len(),
            "push bound violated: {} > 2*{}+{}",
            table.pushes,
            network.nodes.len(),
            network.arcs.len()
        );
        assert_eq!(table.cycle_cancellations, 0, "seed {seed} left circulation behind");

        let recomposed = table.recompose(&network);
        for a in 0..network.arcs.len() {
            assert!(
                (recomposed.forward[a] - flow.forward[a]).abs() <= 1e-9,
                "seed {seed} arc {a} forward: {} vs {}",
                recomposed.forward[a],
                flow.forward[a]
            );
            assert!(
                (recomposed.backward[a] - flow.backward[a]).abs() <= 1e-9,
                "seed {seed} arc {a} backward",
            );
        }

        // Path shapes: forward (S, W, ..., D, T); backward (T, D, ..., W, S).
        for entry in &table.entries {
            let first = network.nodes[entry.nodes[0]];
            let last = network.nodes[*entry.nodes.last().unwrap()];
            match entry.direction {
                Direction::Forward => {
                    assert_eq!(first, NodeKind::Source);
                    assert_eq!(last, NodeKind::Sink);
                }
                Direction::Backward => {
                    assert_eq!(first, NodeKind::Sink);
                    assert_eq!(last, NodeKind::Source);
                }
            }
            assert!(entry.intensity > 0.0);
        }
        instances += 1;
    }
    assert!(instances >= 25, "only {instances} instances exercised");
}

/// Sampling from the split table reproduces path intensities proportionally.
#[test]
fn split_sampling_tracks_intensities() {
    let timing = TimingParams::standard();
    let layout = generate_standard_layout(9, 10, 2, 4, 5).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.12, 4)).unwrap();
    let (flow, _) = frank_wolfe(&network, &timing, &SolverConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = decompose_flow(&network, &flow, &mut rng).unwrap();
    let split = build_split_table(&table).unwrap();

    for dropoff in 1..=4u32 {
        for direction in [Direction::Forward, Direction::Backward] {
            let probs = split.probabilities(dropoff, direction).unwrap();
            let total: f64 = probs.iter().map(|(_, _, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let draws = 100_000usize;
            let mut counts = vec![0usize; table.entries.len()];
            for _ in 0..draws {
                let (_, entry) = split.sample(dropoff, direction, &mut rng).unwrap();
                counts[entry] += 1;
            }
            for &(entry, _, p) in &probs {
                let freq = counts[entry] as f64 / draws as f64;
                assert!(
                    (freq - p).abs() < 0.01,
                    "dropoff {dropoff} {direction}: frequency {freq} vs probability {p}"
                );
            }
        }
    }
}
