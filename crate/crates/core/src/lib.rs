//! Differential energy debugging over operator-level execution traces.

pub mod detect;
pub mod diagnose;
pub mod energy;
pub mod graph;
pub mod simulate;
pub mod subgraph_match;
pub mod tensor_equiv;
pub mod trace_model;
