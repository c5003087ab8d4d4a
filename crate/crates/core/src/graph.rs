//! The two-layer dynamic scene graph.
//!
//! Active nodes are tracking devices, passive nodes are tracked rigid bodies.
//! Only active nodes measure passive nodes; each (sensor, target) pair holds at
//! most one inter-layer edge carrying the latest measurement. Intra-layer edges
//! between passive nodes are never stored: they are derived on demand from
//! pairs of measurements sharing a sensor, so a sensor's own pose never enters
//! them.

use crate::info::InfoMatrix;
use crate::se3::{relative, Pose};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

/// Microseconds since the Unix epoch (or since scenario start for simulated logs).
pub type Timestamp = i64;

pub const DEFAULT_STALE_AFTER_US: i64 = 500_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Active,
    Passive,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    layer: Layer,
    name: String,
}

impl NodeId {
    pub fn new(layer: Layer, name: impl Into<String>) -> Self {
        Self {
            layer,
            name: name.into(),
        }
    }

    pub fn active(name: impl Into<String>) -> Self {
        Self::new(Layer::Active, name)
    }

    pub fn passive(name: impl Into<String>) -> Self {
        Self::new(Layer::Passive, name)
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_active(&self) -> bool {
        self.layer == Layer::Active
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {0} already registered")]
    DuplicateNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node name must be non-empty")]
    EmptyName,
    #[error("edge endpoint {node} has the wrong layer (expected {expected:?})")]
    WrongLayer { node: NodeId, expected: Layer },
    #[error("measurement {sensor}->{target} at {timestamp} is older than stored {stored}")]
    StaleTimestamp {
        sensor: String,
        target: String,
        timestamp: Timestamp,
        stored: Timestamp,
    },
}

/// One sensor-to-target measurement: the target's pose in the sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct InterEdge {
    pub sensor: NodeId,
    pub target: NodeId,
    pub pose: Pose,
    pub timestamp: Timestamp,
    pub status: bool,
    pub info: InfoMatrix,
}

impl InterEdge {
    /// A lost-track edge (`status == false`) always carries zero information.
    pub fn new(
        sensor: impl Into<String>,
        target: impl Into<String>,
        pose: Pose,
        timestamp: Timestamp,
        status: bool,
        info: InfoMatrix,
    ) -> Self {
        Self {
            sensor: NodeId::active(sensor),
            target: NodeId::passive(target),
            pose,
            timestamp,
            status,
            info: if status { info } else { InfoMatrix::zero() },
        }
    }

    /// Usable as a constraint: tracked and carrying some information.
    pub fn is_valid(&self) -> bool {
        self.status && !self.info.is_zero()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntraEstimate {
    pub via: NodeId,
    /// `P_first^-1 * P_second` as seen by `via`.
    pub pose: Pose,
    pub timestamp: Timestamp,
}

/// Parallel estimates of the relative pose between two passive nodes.
/// `pair.0 < pair.1`; the reverse direction is the inverse pose.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraEdgeSet {
    pub pair: (NodeId, NodeId),
    pub estimates: Vec<IntraEstimate>,
}

impl IntraEdgeSet {
    /// Newest estimate; ties go to the lexicographically smallest sensor.
    pub fn freshest(&self) -> &IntraEstimate {
        self.estimates
            .iter()
            .min_by(|a, b| b.timestamp.cmp(&a.timestamp).then_with(|| a.via.cmp(&b.via)))
            .expect("intra-edge sets are never empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    /// Edges older than this (relative to the query time) are ignored.
    pub stale_after_us: i64,
    /// Two measurements from one sensor only form an intra-layer estimate
    /// when their timestamps differ by at most this much.
    pub sync_window_us: i64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            stale_after_us: DEFAULT_STALE_AFTER_US,
            sync_window_us: DEFAULT_STALE_AFTER_US,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DynamicSceneGraph {
    active: BTreeSet<NodeId>,
    passive: BTreeSet<NodeId>,
    edges: BTreeMap<(String, String), InterEdge>,
    config: GraphConfig,
}

impl DynamicSceneGraph {
    pub fn new(config: GraphConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: GraphConfig) {
        self.config = config;
    }

    fn layer_set(&self, layer: Layer) -> &BTreeSet<NodeId> {
        match layer {
            Layer::Active => &self.active,
            Layer::Passive => &self.passive,
        }
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.layer_set(id.layer).contains(id)
    }

    /// Looks a name up in both layers.
    pub fn find(&self, name: &str) -> Option<NodeId> {
        [NodeId::active(name), NodeId::passive(name)]
            .into_iter()
            .find(|id| self.contains(id))
    }

    pub fn active_nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.active.iter()
    }

    pub fn passive_nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.passive.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, sensor: &str, target: &str) -> Option<&InterEdge> {
        self.edges.get(&(sensor.to_owned(), target.to_owned()))
    }

    pub fn edges(&self) -> impl Iterator<Item = &InterEdge> {
        self.edges.values()
    }

    /// Edges incident to `id`, in either role.
    pub fn edges_of<'a>(&'a self, id: &'a NodeId) -> impl Iterator<Item = &'a InterEdge> + 'a {
        self.edges
            .values()
            .filter(move |e| &e.sensor == id || &e.target == id)
    }

    /// Names are unique across both layers, so wire messages can refer to a
    /// node by name alone.
    pub fn add_node(&mut self, id: NodeId) -> Result<(), GraphError> {
        if id.name.is_empty() {
            return Err(GraphError::EmptyName);
        }
        if let Some(existing) = self.find(&id.name) {
            return Err(GraphError::DuplicateNode(existing));
        }
        match id.layer {
            Layer::Active => self.active.insert(id),
            Layer::Passive => self.passive.insert(id),
        };
        Ok(())
    }

    pub fn remove_node(&mut self, id: &NodeId) -> Result<(), GraphError> {
        let removed = match id.layer {
            Layer::Active => self.active.remove(id),
            Layer::Passive => self.passive.remove(id),
        };
        if !removed {
            return Err(GraphError::UnknownNode(id.clone()));
        }
        self.edges.retain(|_, e| &e.sensor != id && &e.target != id);
        Ok(())
    }

    pub fn upsert_measurement(&mut self, edge: InterEdge) -> Result<(), GraphError> {
        for (node, expected) in [(&edge.sensor, Layer::Active), (&edge.target, Layer::Passive)] {
            if node.layer != expected {
                return Err(GraphError::WrongLayer {
                    node: node.clone(),
                    expected,
                });
            }
            if !self.contains(node) {
                return Err(GraphError::UnknownNode(node.clone()));
            }
        }
        let key = (edge.sensor.name.clone(), edge.target.name.clone());
        if let Some(stored) = self.edges.get(&key) {
            if edge.timestamp < stored.timestamp {
                return Err(GraphError::StaleTimestamp {
                    sensor: key.0,
                    target: key.1,
                    timestamp: edge.timestamp,
                    stored: stored.timestamp,
                });
            }
        }
        let mut edge = edge;
        if !edge.status {
            edge.info = InfoMatrix::zero();
        }
        self.edges.insert(key, edge);
        Ok(())
    }

    pub fn derive_intra_edges(&self, now: Timestamp) -> Vec<IntraEdgeSet> {
        self.snapshot(now).intra_edges()
    }

    pub fn snapshot(&self, now: Timestamp) -> GraphSnapshot {
        let oldest = now.saturating_sub(self.config.stale_after_us);
        GraphSnapshot {
            now,
            active: self.active.iter().cloned().collect(),
            passive: self.passive.iter().cloned().collect(),
            edges: self
                .edges
                .values()
                .filter(|e| e.timestamp >= oldest)
                .cloned()
                .collect(),
            config: self.config,
        }
    }
}

/// Immutable copy of the graph at one instant, with stale edges pruned.
/// Lost-track edges are kept; consumers gate on [`InterEdge::is_valid`] or
/// `status`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    pub now: Timestamp,
    pub active: Vec<NodeId>,
    pub passive: Vec<NodeId>,
    /// Sorted by (sensor, target).
    pub edges: Vec<InterEdge>,
    pub config: GraphConfig,
}

impl GraphSnapshot {
    /// Builds a snapshot directly from edges, registering every endpoint.
    pub fn from_edges(now: Timestamp, edges: Vec<InterEdge>) -> Self {
        let mut active = BTreeSet::new();
        let mut passive = BTreeSet::new();
        for e in &edges {
            active.insert(e.sensor.clone());
            passive.insert(e.target.clone());
        }
        let mut edges = edges;
        edges.sort_by(|a, b| (&a.sensor, &a.target).cmp(&(&b.sensor, &b.target)));
        Self {
            now,
            active: active.into_iter().collect(),
            passive: passive.into_iter().collect(),
            edges,
            config: GraphConfig::default(),
        }
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        match id.layer {
            Layer::Active => self.active.binary_search(id).is_ok(),
            Layer::Passive => self.passive.binary_search(id).is_ok(),
        }
    }

    pub fn edge(&self, sensor: &NodeId, target: &NodeId) -> Option<&InterEdge> {
        self.edges
            .binary_search_by(|e| (&e.sensor, &e.target).cmp(&(sensor, target)))
            .ok()
            .map(|i| &self.edges[i])
    }

    pub fn valid_edges(&self) -> impl Iterator<Item = &InterEdge> {
        self.edges.iter().filter(|e| e.is_valid())
    }

    /// For every passive pair and every sensor with tracked edges to both,
    /// one estimate of `P_j1^-1 P_j2 = T_ij1^-1 T_ij2`.
    pub fn intra_edges(&self) -> Vec<IntraEdgeSet> {
        let mut by_sensor: BTreeMap<&NodeId, Vec<&InterEdge>> = BTreeMap::new();
        for e in self.edges.iter().filter(|e| e.status) {
            by_sensor.entry(&e.sensor).or_default().push(e);
        }
        let mut sets: BTreeMap<(NodeId, NodeId), Vec<IntraEstimate>> = BTreeMap::new();
        for (sensor, edges) in by_sensor {
            for (k, first) in edges.iter().enumerate() {
                for second in &edges[k + 1..] {
                    if (first.timestamp - second.timestamp).abs() > self.config.sync_window_us {
                        continue;
                    }
                    // edges are sorted by target within a sensor, so first < second
                    sets.entry((first.target.clone(), second.target.clone()))
                        .or_default()
                        .push(IntraEstimate {
                            via: sensor.clone(),
                            pose: relative(&first.pose, &second.pose),
                            timestamp: first.timestamp.min(second.timestamp),
                        });
                }
            }
        }
        sets.into_iter()
            .map(|(pair, estimates)| IntraEdgeSet { pair, estimates })
            .collect()
    }

    pub fn export(&self) -> SnapshotExport {
        SnapshotExport {
            active: self.active.iter().map(|n| n.name.clone()).collect(),
            passive: self.passive.iter().map(|n| n.name.clone()).collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeExport {
                    sensor: e.sensor.name.clone(),
                    target: e.target.name.clone(),
                    pose: e.pose,
                    t_us: e.timestamp,
                    status: e.status,
                    info_diag: e.info.diagonal(),
                })
                .collect(),
        }
    }
}

/// JSON form of a snapshot, as served to the dashboard and written to logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotExport {
    pub active: Vec<String>,
    pub passive: Vec<String>,
    pub edges: Vec<EdgeExport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeExport {
    pub sensor: String,
    pub target: String,
    pub pose: Pose,
    pub t_us: Timestamp,
    pub status: bool,
    pub info_diag: [f64; 6],
}
