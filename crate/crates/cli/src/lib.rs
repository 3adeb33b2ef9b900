//! Operator tooling for the join engine: config-file parsing, workload
//! generation, node daemons, multi-process orchestration and simulator
//! suites. The binary in `main.rs` is a thin clap wrapper over
//! [`commands`].

pub mod commands;
pub mod kv;
pub mod manifest;
pub mod resfile;
