//! Core building blocks for templated shuffles: messages and buffers,
//! partition/combiner registries, the cluster topology and its transfer-time
//! model, the shuffle template language with its plan lowering, schedule
//! helpers, and sampling-based reduction-ratio estimation.
//!
//! This crate is `no_std` (with `alloc`); execution, networking, and the CLI
//! live in the companion `teshu` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod algorithms;
pub mod error;
pub mod hash;
pub mod message;
pub mod plan;
pub mod registry;
pub mod sampling;
pub mod schedule;
pub mod template;
pub mod topology;

pub use error::{Error, Result};
pub use message::{Message, MessageBuffer, MSG_HEADER_BYTES};
pub use registry::{Combiner, FnRegistry, Partitioner};
pub use topology::{CostModel, Level, RackId, ServerId, Topology, WorkerId};
