//! Networked parts of the fusion system: the TCP server that owns the scene
//! graph, the operator HTTP bridge, and simulated sensor clients.

pub mod bridge;
pub mod client;
pub mod server;
pub mod stats;

pub use client::{drive, DriveError, DriveMode, DriveOptions, DriveOutcome};
pub use server::{serve, ServerConfig, ServerError, ServerHandle};
pub use stats::{LatencySummary, MetricsReport};
