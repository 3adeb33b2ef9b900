pub mod baseline;
pub mod config;
pub mod error;
pub mod event;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod runtime;
pub mod sim;
pub mod sync;
pub mod trace;
pub mod transport;
pub mod wire;
pub mod workload;

pub use config::{ClusterConfig, JoinMode, NodeAddr, Predicate, ResultFormat};
pub use error::{Error, Result};
