//! Layouts and the flow-network representation built from them.

mod graph;
mod layout;

pub use graph::{
    build_flow_network, Approach, ApproachTail, Arc, ArcKind, CellTable, Commodity, Demand,
    Direction, FlowNetwork, NetworkError, NodeKind,
};
pub use layout::{
    generate_standard_layout, parse_layout, CellSpec, ElementRef, Heading, HeadingSet, Layout,
    LayoutError, ViolationKind, HEADING_ORDER,
};
