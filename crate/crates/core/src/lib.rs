//! Core library for flow-guided operation of grid-based robotic sorting
//! systems.
//!
//! The offline half models the floor as a multi-commodity flow network with
//! congestion-dependent link costs, solves for an approximately
//! system-optimal flow with Frank-Wolfe, and decomposes the link flow into
//! executable paths with split probabilities. The online half is a
//! discrete-time multi-robot simulator that can drive robots either from
//! those split tables or from prioritized time-expanded planning baselines,
//! and collects throughput and flow-distribution metrics.
//!
//! Modules follow the pipeline order:
//!
//! - [`network`]: layouts and the heading-expanded flow network.
//! - [`delay`]: link costs, the total-cost objective, and its gradient.
//! - [`solver`]: Frank-Wolfe with all-or-nothing subproblems.
//! - [`decompose`]: link flow to path flow, and split tables.
//! - [`sim`]: the tick-level simulator, policies, and metrics.
//! - [`files`]: the CSV and JSON artifact formats shared with the CLI.

pub mod decompose;
pub mod delay;
pub mod files;
pub mod network;
pub mod sim;
pub mod solver;
