//! Federated graph attention training under differential privacy and
//! additively homomorphic secure aggregation, with poisoning attacks, robust
//! aggregation and embedding-based anomaly detection.

pub mod anomaly;
pub mod config;
pub mod dp;
pub mod experiment;
pub mod fed;
pub mod gat;
pub mod graph;
pub mod metrics;
pub mod rng;
pub mod secagg;
pub mod synthgen;
pub mod threat;
