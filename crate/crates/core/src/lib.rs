//! Deterministic message-passing simulation and protocols that evaluate
//! local first-order graph properties (and unary counting extensions) over
//! bounded-degree and planar networks, with per-link message accounting so
//! the frugality contract — a bounded number of O(log n)-bit messages per
//! link — is mechanically checkable. Every distributed answer can be
//! cross-checked against a centralized brute-force oracle.

pub mod bfs;
pub mod netsim;
pub mod proto;
pub mod query;
pub mod canon;
pub mod embedding;
pub mod error;
pub mod fileio;
pub mod gen;
pub mod graph;
pub mod td;
pub mod tdeval;
