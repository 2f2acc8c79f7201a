//! Discrete-event simulator for speculative decoding on a mobile NPU with
//! processing-in-memory drafting.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod edc;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod queues;
pub mod timing;
pub mod tvc;
pub mod workload;
