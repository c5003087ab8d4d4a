//! Multi-sensor tracking fusion over a two-layer dynamic scene graph.
//!
//! Sensors (active nodes) measure rigid bodies (passive nodes). The graph
//! stores the latest measurement per pair; pose-graph optimization over SE(3)
//! recovers every node pose, and kinematic completion composes paths through
//! the graph to report targets a sensor cannot see itself.

pub mod completion;
pub mod engine;
pub mod graph;
pub mod info;
pub mod logs;
pub mod metrics;
pub mod pgo;
pub mod se3;
pub mod sim;
pub mod wire;

pub use completion::{query_pose, Completion, CompletionError, KinematicPath};
pub use engine::{EngineConfig, FusionEngine};
pub use graph::{DynamicSceneGraph, GraphConfig, GraphError, GraphSnapshot, InterEdge, Layer, NodeId, Timestamp};
pub use info::InfoMatrix;
pub use pgo::{solve, solve_snapshot, PgoError, SolveOptions, SolveReport, StateVector};
pub use se3::{relative, Pose, Se3Error, Twist};
