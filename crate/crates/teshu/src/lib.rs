//! Execution side of the templated shuffle stack: the plan engine, the
//! shuffle manager service, the cluster simulator, workload generation, and
//! the experiment harness behind the CLI.

pub mod config;
pub mod engine;
pub mod experiments;
pub mod manager;
pub mod simulator;
pub mod workload;
