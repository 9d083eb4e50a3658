//! Trace-driven simulator and scheduling library for offloaded
//! mixture-of-experts inference under speculative decoding.

pub mod analytics;
pub mod balancer;
pub mod engine;
pub mod estimator;
pub mod metrics;
pub mod policy;
pub mod sim;
pub mod trace;
