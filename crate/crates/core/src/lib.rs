//! Multi-catch scaling environments, the Nibbler GVF-discovery agent,
//! incremental deep Q/QV baselines, scaling metrics and an experiment harness.

pub mod baselines;
pub mod gvf;
pub mod harness;
pub mod metrics;
pub mod micrograd;
pub mod multicatch;
pub mod nibbler;
pub mod oracle;
pub mod rng;
pub mod selection;
