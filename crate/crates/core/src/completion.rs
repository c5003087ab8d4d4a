//! Scene completion under occlusion.
//!
//! When a sensor has no valid measurement of a target, the target's pose in
//! the sensor frame is recovered by composing relative poses along a chain of
//! other edges: inter-layer edges (traversable in both directions) and derived
//! intra-layer edges between passive nodes.
//!
//! Among all simple paths the one with the fewest edges wins; ties go to the
//! freshest path (largest minimum timestamp), then to the lexicographically
//! smallest node-name sequence.

use crate::graph::{GraphSnapshot, Layer, NodeId, Timestamp};
use crate::pgo::StateVector;
use crate::se3::Pose;
use serde::Serialize;
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompletionError {
    #[error("no path from {sensor} to {target}")]
    NoPath { sensor: NodeId, target: NodeId },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("{node} is not a {expected:?} node")]
    WrongLayer { node: NodeId, expected: Layer },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    Inter,
    Intra,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathEdge {
    pub kind: LinkKind,
    pub from: NodeId,
    pub to: NodeId,
    /// Pose of `to` in the frame of `from`.
    pub pose: Pose,
    pub timestamp: Timestamp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicPath {
    pub edges: Vec<PathEdge>,
    /// Oldest timestamp along the path.
    pub freshness: Timestamp,
}

impl KinematicPath {
    fn from_edges(edges: Vec<PathEdge>) -> Self {
        let freshness = edges.iter().map(|e| e.timestamp).min().unwrap_or(Timestamp::MAX);
        Self { edges, freshness }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn nodes(&self) -> Vec<&NodeId> {
        let mut nodes: Vec<&NodeId> = self.edges.iter().map(|e| &e.from).collect();
        if let Some(last) = self.edges.last() {
            nodes.push(&last.to);
        }
        nodes
    }

    pub fn node_names(&self) -> Vec<String> {
        self.nodes().into_iter().map(|n| n.name().to_owned()).collect()
    }

    pub fn compose(&self) -> Pose {
        self.edges
            .iter()
            .fold(Pose::identity(), |acc, e| acc * e.pose)
    }

    /// Chained endpoints, correct start and end, no repeated node.
    pub fn is_well_formed(&self, sensor: &NodeId, target: &NodeId) -> bool {
        let nodes = self.nodes();
        let chained = self.edges.windows(2).all(|w| w[0].to == w[1].from);
        let mut sorted = nodes.clone();
        sorted.sort();
        sorted.dedup();
        chained
            && !self.edges.is_empty()
            && nodes.first() == Some(&sensor)
            && nodes.last() == Some(&target)
            && sorted.len() == nodes.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub pose: Pose,
    /// The requesting sensor currently tracks the target itself.
    pub direct: bool,
    pub path: KinematicPath,
}

#[derive(Clone, Debug)]
struct Link {
    kind: LinkKind,
    pose: Pose,
    timestamp: Timestamp,
}

/// Traversable view of a snapshot: every node, valid inter-layer edges in
/// both directions and one representative per derived intra-layer pair.
#[derive(Clone, Debug, Default)]
pub struct SearchGraph {
    adjacency: BTreeMap<NodeId, BTreeMap<NodeId, Link>>,
}

impl SearchGraph {
    /// With `refined`, links between two optimized nodes carry the optimized
    /// relative pose instead of the raw measurement.
    pub fn build(snapshot: &GraphSnapshot, refined: Option<&StateVector>) -> Self {
        let mut g = SearchGraph::default();
        for id in snapshot.active.iter().chain(&snapshot.passive) {
            g.adjacency.entry(id.clone()).or_default();
        }
        let optimized = |a: &NodeId, b: &NodeId| refined.and_then(|s| s.relative(a, b));
        for e in snapshot.edges.iter().filter(|e| e.status) {
            let pose = optimized(&e.sensor, &e.target).unwrap_or(e.pose);
            g.insert(&e.sensor, &e.target, LinkKind::Inter, pose, e.timestamp);
        }
        for set in snapshot.intra_edges() {
            let (a, b) = &set.pair;
            let freshest = set.freshest();
            let newest = set.estimates.iter().map(|e| e.timestamp).max().unwrap_or(freshest.timestamp);
            let (pose, ts) = match optimized(a, b) {
                Some(p) => (p, newest),
                None => (freshest.pose, freshest.timestamp),
            };
            g.insert(a, b, LinkKind::Intra, pose, ts);
        }
        g
    }

    fn insert(&mut self, a: &NodeId, b: &NodeId, kind: LinkKind, pose: Pose, timestamp: Timestamp) {
        self.adjacency.entry(a.clone()).or_default().insert(
            b.clone(),
            Link {
                kind,
                pose,
                timestamp,
            },
        );
        self.adjacency.entry(b.clone()).or_default().insert(
            a.clone(),
            Link {
                kind,
                pose: pose.inverse(),
                timestamp,
            },
        );
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.adjacency.contains_key(id)
    }

    fn link(&self, from: &NodeId, to: &NodeId) -> Option<&Link> {
        self.adjacency.get(from)?.get(to)
    }

    /// Breadth-first hop counts to `target`.
    fn hops_to(&self, target: &NodeId) -> BTreeMap<&NodeId, usize> {
        let mut dist = BTreeMap::new();
        let Some((root, _)) = self.adjacency.get_key_value(target) else {
            return dist;
        };
        dist.insert(root, 0);
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n];
            for next in self.adjacency[n].keys() {
                if !dist.contains_key(next) {
                    dist.insert(next, d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    /// Depth-first enumeration of the shortest simple paths, pruned by hop
    /// distance, keeping the best under the selection rule.
    pub fn shortest_path(&self, sensor: &NodeId, target: &NodeId) -> Option<KinematicPath> {
        let dist = self.hops_to(target);
        let depth = *dist.get(sensor)?;
        if depth == 0 {
            return None;
        }
        let mut best: Option<(Timestamp, Vec<&NodeId>)> = None;
        let mut stack = vec![sensor];
        self.dfs(&dist, target, depth, &mut stack, Timestamp::MAX, &mut best);
        let (_, nodes) = best?;
        let edges = nodes
            .windows(2)
            .map(|w| {
                let link = self.link(w[0], w[1]).expect("path follows links");
                PathEdge {
                    kind: link.kind,
                    from: w[0].clone(),
                    to: w[1].clone(),
                    pose: link.pose,
                    timestamp: link.timestamp,
                }
            })
            .collect();
        Some(KinematicPath::from_edges(edges))
    }

    fn dfs<'a>(
        &'a self,
        dist: &BTreeMap<&'a NodeId, usize>,
        target: &NodeId,
        depth: usize,
        stack: &mut Vec<&'a NodeId>,
        freshness: Timestamp,
        best: &mut Option<(Timestamp, Vec<&'a NodeId>)>,
    ) {
        let here = *stack.last().expect("stack starts with the sensor");
        if here == target {
            let better = match best {
                None => true,
                Some((f, names)) => {
                    freshness > *f || (freshness == *f && stack.iter().map(|n| n.name()).lt(names.iter().map(|n| n.name())))
                }
            };
            if better {
                *best = Some((freshness, stack.clone()));
            }
            return;
        }
        let used = stack.len() - 1;
        for (next, link) in &self.adjacency[here] {
            let remaining = depth - used - 1;
            if dist.get(next) != Some(&remaining) || stack.contains(&next) {
                continue;
            }
            stack.push(next);
            self.dfs(dist, target, depth, stack, freshness.min(link.timestamp), best);
            stack.pop();
        }
    }
}

fn check(snapshot: &GraphSnapshot, id: &NodeId, expected: Layer) -> Result<(), CompletionError> {
    if id.layer() != expected {
        return Err(CompletionError::WrongLayer {
            node: id.clone(),
            expected,
        });
    }
    if !snapshot.contains(id) {
        return Err(CompletionError::UnknownNode(id.clone()));
    }
    Ok(())
}

fn query_in(
    snapshot: &GraphSnapshot,
    graph: &SearchGraph,
    refined: Option<&StateVector>,
    sensor: &NodeId,
    target: &NodeId,
) -> Result<Completion, CompletionError> {
    if let Some(edge) = snapshot.edge(sensor, target).filter(|e| e.status) {
        let pose = refined
            .and_then(|s| s.relative(sensor, target))
            .unwrap_or(edge.pose);
        let path = KinematicPath::from_edges(vec![PathEdge {
            kind: LinkKind::Inter,
            from: sensor.clone(),
            to: target.clone(),
            pose,
            timestamp: edge.timestamp,
        }]);
        return Ok(Completion {
            pose,
            direct: true,
            path,
        });
    }
    let path = graph
        .shortest_path(sensor, target)
        .ok_or_else(|| CompletionError::NoPath {
            sensor: sensor.clone(),
            target: target.clone(),
        })?;
    Ok(Completion {
        pose: path.compose(),
        direct: false,
        path,
    })
}

/// Pose of `target` in the frame of `sensor`: the direct measurement when it
/// is tracked, otherwise the composition along the selected path.
pub fn query_pose(
    snapshot: &GraphSnapshot,
    sensor: &NodeId,
    target: &NodeId,
    refined: Option<&StateVector>,
) -> Result<Completion, CompletionError> {
    check(snapshot, sensor, Layer::Active)?;
    check(snapshot, target, Layer::Passive)?;
    let graph = SearchGraph::build(snapshot, refined);
    query_in(snapshot, &graph, refined, sensor, target)
}

pub type CompletionMap = BTreeMap<NodeId, Result<Completion, CompletionError>>;

/// [`query_pose`] for every passive node of the snapshot.
pub fn complete_all(
    snapshot: &GraphSnapshot,
    sensor: &NodeId,
    refined: Option<&StateVector>,
) -> Result<CompletionMap, CompletionError> {
    let graph = SearchGraph::build(snapshot, refined);
    complete_all_in(snapshot, &graph, sensor, refined)
}

/// [`complete_all`] against a prebuilt search graph, for answering several
/// sensors from one snapshot.
pub fn complete_all_in(
    snapshot: &GraphSnapshot,
    graph: &SearchGraph,
    sensor: &NodeId,
    refined: Option<&StateVector>,
) -> Result<CompletionMap, CompletionError> {
    check(snapshot, sensor, Layer::Active)?;
    Ok(snapshot
        .passive
        .iter()
        .map(|t| (t.clone(), query_in(snapshot, graph, refined, sensor, t)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::InterEdge;
    use crate::info::InfoMatrix;
    use crate::se3::{relative, Twist};
    use nalgebra::Vector6;

    fn pose(v: [f64; 6]) -> Pose {
        Pose::exp(&Twist::from_vector(&Vector6::from(v)))
    }

    fn meas(s: &str, t: &str, a: &Pose, p: &Pose, ts: Timestamp, status: bool) -> InterEdge {
        InterEdge::new(s, t, relative(a, p), ts, status, InfoMatrix::identity())
    }

    #[test]
    fn direct_edge_wins() {
        let a = pose([0.0, 0.0, 0.0, 0.1, 0.2, 0.3]);
        let p = pose([1.0, 2.0, 3.0, 0.0, 0.0, 0.5]);
        let snap = GraphSnapshot::from_edges(0, vec![meas("s", "t", &a, &p, 0, true)]);
        let c = query_pose(&snap, &NodeId::active("s"), &NodeId::passive("t"), None).unwrap();
        assert!(c.direct);
        assert_eq!(c.path.len(), 1);
        assert_eq!(c.pose, relative(&a, &p));
    }

    /// a1 lost p1; p2 is seen by a1 and a2, p1 by a2 only.
    fn occluded_scene() -> (GraphSnapshot, Pose, Pose) {
        let a1 = pose([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let a2 = pose([2.0, 0.0, 0.5, 0.0, 0.3, 1.2]);
        let p1 = pose([0.5, 0.5, 1.0, 0.2, 0.0, 0.0]);
        let p2 = pose([-0.5, 0.3, 1.2, 0.0, -0.4, 0.1]);
        let snap = GraphSnapshot::from_edges(
            100,
            vec![
                meas("a1", "p1", &a1, &p1, 100, false),
                meas("a1", "p2", &a1, &p2, 100, true),
                meas("a2", "p1", &a2, &p1, 100, true),
                meas("a2", "p2", &a2, &p2, 100, true),
            ],
        );
        (snap, a1, p1)
    }

    #[test]
    fn occluded_target_via_intra_edge() {
        let (snap, a1, p1) = occluded_scene();
        let c = query_pose(&snap, &NodeId::active("a1"), &NodeId::passive("p1"), None).unwrap();
        assert!(!c.direct);
        assert_eq!(c.path.node_names(), ["a1", "p2", "p1"]);
        assert_eq!(c.path.edges[1].kind, LinkKind::Intra);
        let (dt, dr) = c.pose.distance(&relative(&a1, &p1));
        assert!(dt < 1e-12 && dr < 1e-12);
        assert!(c.path.is_well_formed(&NodeId::active("a1"), &NodeId::passive("p1")));
    }

    #[test]
    fn no_path_and_unknown() {
        let (mut snap, _, _) = occluded_scene();
        for e in &mut snap.edges {
            if e.target.name() == "p1" {
                e.status = false;
            }
        }
        assert!(matches!(
            query_pose(&snap, &NodeId::active("a1"), &NodeId::passive("p1"), None),
            Err(CompletionError::NoPath { .. })
        ));
        assert!(matches!(
            query_pose(&snap, &NodeId::active("zz"), &NodeId::passive("p1"), None),
            Err(CompletionError::UnknownNode(_))
        ));
        assert!(matches!(
            query_pose(&snap, &NodeId::passive("p2"), &NodeId::passive("p1"), None),
            Err(CompletionError::WrongLayer { .. })
        ));
    }

    #[test]
    fn complete_all_marks_indirect() {
        let (snap, _, _) = occluded_scene();
        let all = complete_all(&snap, &NodeId::active("a1"), None).unwrap();
        assert!(!all[&NodeId::passive("p1")].as_ref().unwrap().direct);
        assert!(all[&NodeId::passive("p2")].as_ref().unwrap().direct);
        let all = complete_all(&snap, &NodeId::active("a2"), None).unwrap();
        assert!(all.values().all(|c| c.as_ref().unwrap().direct));

        let empty = GraphSnapshot {
            edges: vec![],
            ..snap.clone()
        };
        let all = complete_all(&empty, &NodeId::active("a1"), None).unwrap();
        assert!(all.values().all(|c| matches!(c, Err(CompletionError::NoPath { .. }))));
    }

    #[test]
    fn freshness_breaks_length_ties() {
        // s reaches t through x (old) or y (new), both two hops
        let i = Pose::identity();
        let snap = GraphSnapshot::from_edges(
            1000,
            vec![
                meas("s", "x", &i, &i, 10, true),
                meas("s", "y", &i, &i, 900, true),
                meas("u", "x", &i, &i, 10, true),
                meas("u", "t", &i, &i, 10, true),
                meas("v", "y", &i, &i, 900, true),
                meas("v", "t", &i, &i, 900, true),
            ],
        );
        let c = query_pose(&snap, &NodeId::active("s"), &NodeId::passive("t"), None).unwrap();
        assert_eq!(c.path.node_names(), ["s", "y", "t"]);
        assert_eq!(c.path.freshness, 900);
    }
}
