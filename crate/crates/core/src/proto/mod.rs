//! Distributed protocols, built as node programs for the simulator.

pub mod bounded;
pub mod common;
pub mod planar;
