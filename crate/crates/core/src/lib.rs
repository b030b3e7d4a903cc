//! Analytical performance, cost, and cluster-scheduling models for serving
//! large language models on prefill- and decode-specialized accelerators.
//!
//! The crate is layered bottom-up:
//!
//! * [`model`] expands a transformer and a batch into operators with FLOP and byte counts.
//! * [`chip`] describes accelerators, machines and interconnects and derives peak rates.
//! * [`perf`] turns operators into latencies with a roofline plus systolic tile quantization.
//! * [`econ`] prices a chip (die, memory) and estimates its TDP.
//! * [`workload`] reads or synthesizes request traces and defines SLO tiers.
//! * [`sim`] replays a trace through a discrete-event cluster scheduler.
//! * [`explore`] drives design-space sweeps, provisioning and reallocation.

pub mod chip;
pub mod econ;
pub mod error;
pub mod explore;
pub mod model;
pub mod perf;
pub mod presets;
pub mod sim;
pub mod stats;
pub mod workload;

pub use error::{Error, Result};
