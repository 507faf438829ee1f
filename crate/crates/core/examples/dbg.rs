use sortflow_core::network::*;
use sortflow_core::sim::static_shortest_path;
fn main() {
    let layout = generate_standard_layout(19, 20, 2, 30, 7).unwrap();
    let network = build_flow_network(&layout, &Demand::uniform(0.1, 30)).unwrap();
    let w1 = network.workstation_node(1);
    let idx = |r: usize, c: usize| r * 20 + c;
    let node = |r: usize, c: usize, h: Heading| network.cell_heading_node(idx(r, c), h);
    // Hand path probes toward W1 avoiding cell (3,13)=73.
    for (label, r, c, h) in [
        ("(1,14) W", 1, 14, Heading::West),
        ("(1,9) S", 1, 9, Heading::South),
        ("(3,9) S", 3, 9, Heading::South),
        ("(7,9) W", 7, 9, Heading::West),
        ("(7,1) W", 7, 1, Heading::West),
        ("(7,0) N", 7, 0, Heading::North),
        ("(6,0) N", 6, 0, Heading::North),
    ] {
        match node(r, c, h) {
            Some(n) => {
                let p = static_shortest_path(&network, 4, n, |x| x == w1, Some(73));
                println!("{label}: node {n}, path len {:?}", p.map(|p| p.len()));
            }
            None => println!("{label}: NO NODE"),
        }
    }
    // Does the entrance arc exist?
    if let Some(n) = node(6, 0, Heading::North) {
        println!("entrance arc (6,0)N->W1: {:?}", network.arc_id(n, w1));
    }
    if let Some(n) = node(5, 1, Heading::West) {
        println!("entrance arc (5,1)W->W1: {:?}", network.arc_id(n, w1));
    }
    println!("W1 pos {:?}, W2 pos {:?}", layout.workstation_position(1), layout.workstation_position(2));
    println!("(6,0) cell: {:?}", layout.cell(6, 0));
}
