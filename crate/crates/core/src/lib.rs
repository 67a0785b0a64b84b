//! Discrete-event simulator for agent discovery over Kademlia and
//! Cyclon+Vicinity overlays under node churn and agent cooling.

pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod lifecycle;
pub mod metrics;
pub mod overlay;
pub mod sim;
pub mod substrate;
pub mod workload;

pub use config::RegimeConfig;
pub use error::{Error, Result};
pub use overlay::OverlayKind;
pub use sim::{run_once, RunReport, Simulation};
