//! One fusion cycle: snapshot the graph, optimize, complete every target for
//! every receiving sensor. Shared by the live server and offline replay so
//! both produce identical results from identical graphs.

use crate::completion::{complete_all_in, query_pose, CompletionError, SearchGraph};
use crate::graph::{DynamicSceneGraph, GraphConfig, GraphError, GraphSnapshot, InterEdge, NodeId, Timestamp};
use crate::info::{InfoError, InfoMatrix};
use crate::pgo::{eligible_anchors, solve_snapshot, PgoError, SolveOptions, SolveReport};
use crate::wire::{Measurement, PoseUpdate, QueryResult, UpdateEntry};
use crate::se3::{relative, Pose};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Weights for a sensor type when measurements carry no `info_diag`.
pub fn default_info_for(sensor_type: &str) -> InfoMatrix {
    let deg = std::f64::consts::PI / 180.0;
    match sensor_type {
        "ots" => InfoMatrix::from_sigmas(0.25e-3, 0.05 * deg),
        "hmd" => InfoMatrix::from_sigmas(2e-3, 0.5 * deg),
        _ => InfoMatrix::identity(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub graph: GraphConfig,
    pub solve: SolveOptions,
    /// Register unknown targets on first measurement.
    pub auto_register: bool,
    /// When set, only these target names may be registered.
    pub allow_list: Option<BTreeSet<String>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            solve: SolveOptions::default(),
            auto_register: true,
            allow_list: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("target {0} is not registered")]
    UnknownTarget(String),
    #[error("sensor {0} is not registered")]
    UnknownSensor(String),
    #[error("invalid info_diag: {0}")]
    InvalidInfo(#[from] InfoError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("unknown sensor {0}")]
    Unknown(String),
    #[error("sensor {0} has no valid edge and cannot anchor the graph")]
    Ineligible(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ingested {
    Applied,
    /// Older than the stored measurement of the same pair.
    DroppedStale,
}

/// Result of one fusion cycle.
#[derive(Clone, Debug)]
pub struct FusionCycle {
    pub cycle: u64,
    pub snapshot: GraphSnapshot,
    pub report: Option<SolveReport>,
    pub error: Option<PgoError>,
    /// Keyed by receiving sensor name.
    pub updates: BTreeMap<String, PoseUpdate>,
}

fn lost_entry(target: &NodeId) -> UpdateEntry {
    UpdateEntry {
        target: target.name().to_owned(),
        pose: Pose::identity(),
        direct: false,
        uncertainty: [0.0; 6],
        lose_track: true,
    }
}

/// Optimizes `snapshot` and answers every receiver. Pure: no engine state.
pub fn fuse(
    snapshot: GraphSnapshot,
    preferred_anchor: &[Option<&NodeId>],
    opts: &SolveOptions,
    receivers: &[NodeId],
    cycle: u64,
) -> FusionCycle {
    let (report, error) = match solve_snapshot(&snapshot, preferred_anchor, opts) {
        Ok(r) => (Some(r), None),
        Err(PgoError::NoEligibleAnchor) => (None, None),
        Err(e) => (None, Some(e)),
    };
    let refined = report.as_ref().map(|r| &r.state);
    let search = SearchGraph::build(&snapshot, refined);
    let mut updates = BTreeMap::new();
    for sensor in receivers {
        let Ok(results) = complete_all_in(&snapshot, &search, sensor, refined) else {
            continue;
        };
        let poses = results
            .iter()
            .map(|(target, res)| match res {
                Ok(c) => UpdateEntry {
                    target: target.name().to_owned(),
                    pose: c.pose,
                    direct: c.direct,
                    uncertainty: report
                        .as_ref()
                        .and_then(|r| r.uncertainties.get(target).copied())
                        .unwrap_or([0.0; 6]),
                    lose_track: false,
                },
                Err(_) => lost_entry(target),
            })
            .collect();
        updates.insert(
            sensor.name().to_owned(),
            PoseUpdate {
                solve_t_us: snapshot.now,
                poses,
                cycle,
                sensor_id: None,
            },
        );
    }
    FusionCycle {
        cycle,
        snapshot,
        report,
        error,
        updates,
    }
}

/// Graph plus the little state that persists across cycles: the logical
/// clock (newest measurement timestamp), anchor preferences, counters.
#[derive(Clone, Debug)]
pub struct FusionEngine {
    graph: DynamicSceneGraph,
    config: EngineConfig,
    clock: Timestamp,
    anchor: Option<NodeId>,
    forced_anchor: Option<NodeId>,
    last_report: Option<SolveReport>,
    completed_cycles: u64,
    dropped_stale: u64,
}

impl FusionEngine {
    pub fn new(config: EngineConfig) -> Self {
        Self {
            graph: DynamicSceneGraph::new(config.graph),
            config,
            clock: 0,
            anchor: None,
            forced_anchor: None,
            last_report: None,
            completed_cycles: 0,
            dropped_stale: 0,
        }
    }

    pub fn graph(&self) -> &DynamicSceneGraph {
        &self.graph
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn dropped_stale(&self) -> u64 {
        self.dropped_stale
    }

    pub fn completed_cycles(&self) -> u64 {
        self.completed_cycles
    }

    pub fn last_report(&self) -> Option<&SolveReport> {
        self.last_report.as_ref()
    }

    pub fn register_sensor(&mut self, name: &str) -> Result<(), GraphError> {
        self.graph.add_node(NodeId::active(name))
    }

    fn target_allowed(&self, name: &str) -> bool {
        self.config
            .allow_list
            .as_ref()
            .is_none_or(|allowed| allowed.contains(name))
    }

    pub fn register_target(&mut self, name: &str) -> Result<(), IngestError> {
        if !self.target_allowed(name) {
            return Err(IngestError::UnknownTarget(name.to_owned()));
        }
        self.graph.add_node(NodeId::passive(name))?;
        Ok(())
    }

    /// Removes a node by name from whichever layer holds it.
    pub fn remove(&mut self, name: &str) -> Result<NodeId, GraphError> {
        let id = self
            .graph
            .find(name)
            .ok_or_else(|| GraphError::UnknownNode(NodeId::passive(name)))?;
        self.graph.remove_node(&id)?;
        if self.forced_anchor.as_ref() == Some(&id) {
            self.forced_anchor = None;
        }
        Ok(id)
    }

    pub fn ingest(
        &mut self,
        m: &Measurement,
        default_info: &InfoMatrix,
    ) -> Result<Ingested, IngestError> {
        let sensor = NodeId::active(&m.sensor_id);
        if !self.graph.contains(&sensor) {
            return Err(IngestError::UnknownSensor(m.sensor_id.clone()));
        }
        let target = NodeId::passive(&m.target);
        if !self.graph.contains(&target) {
            if !self.config.auto_register {
                return Err(IngestError::UnknownTarget(m.target.clone()));
            }
            self.register_target(&m.target)?;
        }
        let info = match m.info_diag {
            Some(d) => InfoMatrix::from_diagonal(d)?,
            None => *default_info,
        };
        let edge = InterEdge::new(&m.sensor_id, &m.target, m.pose, m.t_us, m.status, info);
        match self.graph.upsert_measurement(edge) {
            Ok(()) => {
                self.clock = self.clock.max(m.t_us);
                Ok(Ingested::Applied)
            }
            Err(GraphError::StaleTimestamp { .. }) => {
                self.dropped_stale += 1;
                Ok(Ingested::DroppedStale)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        self.graph.snapshot(self.clock)
    }

    pub fn preferred_anchors(&self) -> Vec<Option<NodeId>> {
        vec![self.forced_anchor.clone(), self.anchor.clone()]
    }

    pub fn force_anchor(&mut self, name: &str) -> Result<(), AnchorError> {
        let id = NodeId::active(name);
        if !self.graph.contains(&id) {
            return Err(AnchorError::Unknown(name.to_owned()));
        }
        if !eligible_anchors(&self.snapshot()).contains(&id) {
            return Err(AnchorError::Ineligible(name.to_owned()));
        }
        self.forced_anchor = Some(id);
        Ok(())
    }

    /// Stores the outcome of a finished cycle.
    pub fn record(&mut self, report: Option<SolveReport>) {
        if let Some(r) = &report {
            self.anchor = Some(r.state.anchor.clone());
        }
        self.last_report = report;
        self.completed_cycles += 1;
    }

    /// Snapshot, fuse and record in one step; answers `receivers`, or every
    /// active node when `None`.
    pub fn cycle(&mut self, receivers: Option<&[NodeId]>) -> FusionCycle {
        let snapshot = self.snapshot();
        let all: Vec<NodeId>;
        let receivers = match receivers {
            Some(r) => r,
            None => {
                all = snapshot.active.clone();
                &all
            }
        };
        let preferred = self.preferred_anchors();
        let refs: Vec<Option<&NodeId>> = preferred.iter().map(|p| p.as_ref()).collect();
        let out = fuse(
            snapshot,
            &refs,
            &self.config.solve,
            receivers,
            self.completed_cycles + 1,
        );
        self.record(out.report.clone());
        out
    }

    pub fn query(&self, sensor: &str, target: &str) -> QueryResult {
        let snapshot = self.snapshot();
        let refined = self.last_report.as_ref().map(|r| &r.state);
        let lost = QueryResult {
            target: target.to_owned(),
            pose: None,
            direct: false,
            uncertainty: None,
            path: vec![],
            age_us: 0,
            lose_track: true,
            cycle: self.completed_cycles,
        };
        let target_id = NodeId::passive(target);
        match query_pose(&snapshot, &NodeId::active(sensor), &target_id, refined) {
            Ok(c) => {
                let newest = c.path.edges.iter().map(|e| e.timestamp).max().unwrap_or(snapshot.now);
                QueryResult {
                    pose: Some(c.pose),
                    direct: c.direct,
                    uncertainty: self
                        .last_report
                        .as_ref()
                        .and_then(|r| r.uncertainties.get(&target_id).copied()),
                    path: c.path.node_names(),
                    age_us: (snapshot.now - newest).max(0),
                    lose_track: false,
                    ..lost
                }
            }
            Err(CompletionError::NoPath { .. } | CompletionError::UnknownNode(_) | CompletionError::WrongLayer { .. }) => lost,
        }
    }
}

/// Batch replay: measurements are grouped by timestamp (in log order) and one
/// fusion cycle runs after each group. Every sensor in the log is registered
/// up front and receives an update each cycle.
pub fn replay_offline(log: &[Measurement], config: &EngineConfig) -> Vec<PoseUpdate> {
    let mut engine = FusionEngine::new(config.clone());
    let sensors: BTreeSet<&str> = log.iter().map(|m| m.sensor_id.as_str()).collect();
    for s in &sensors {
        // names are unique in a well-formed log; a clash only skips the duplicate
        let _ = engine.register_sensor(s);
    }
    let mut out = Vec::new();
    let mut k = 0;
    while k < log.len() {
        let t = log[k].t_us;
        let mut end = k;
        while end < log.len() && log[end].t_us == t {
            let _ = engine.ingest(&log[end], &InfoMatrix::identity());
            end += 1;
        }
        k = end;
        let cycle = engine.cycle(None);
        for (sensor, mut update) in cycle.updates {
            update.sensor_id = Some(sensor);
            out.push(update);
        }
    }
    out
}

/// Differences between two sets of tagged updates, matched on
/// `(solve_t_us, sensor_id)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateComparison {
    pub compared: usize,
    /// Keys present in only one of the two sets.
    pub unmatched: usize,
    /// Entries whose target set, `lose_track` or `direct` flags differ.
    pub flag_mismatches: usize,
    pub max_trans: f64,
    pub max_rot: f64,
}

impl UpdateComparison {
    pub fn within(&self, tol: f64) -> bool {
        self.compared > 0
            && self.unmatched == 0
            && self.flag_mismatches == 0
            && self.max_trans <= tol
            && self.max_rot <= tol
    }
}

/// Compares sensor-frame target poses and the relative pose of every target
/// pair between two update sets. When one key appears several times the last
/// update wins.
pub fn compare_updates(a: &[PoseUpdate], b: &[PoseUpdate]) -> UpdateComparison {
    fn index(u: &[PoseUpdate]) -> BTreeMap<(i64, Option<&str>), &PoseUpdate> {
        u.iter().map(|u| ((u.solve_t_us, u.sensor_id.as_deref()), u)).collect()
    }
    let (ia, ib) = (index(a), index(b));
    let mut out = UpdateComparison {
        unmatched: ia.keys().filter(|k| !ib.contains_key(*k)).count()
            + ib.keys().filter(|k| !ia.contains_key(*k)).count(),
        ..Default::default()
    };
    let worst = |p: &Pose, q: &Pose, out: &mut UpdateComparison| {
        let (t, r) = p.distance(q);
        out.max_trans = out.max_trans.max(t);
        out.max_rot = out.max_rot.max(r);
    };
    for (key, ua) in &ia {
        let Some(ub) = ib.get(key) else { continue };
        out.compared += 1;
        let tracked: Vec<(&UpdateEntry, &UpdateEntry)> = ua
            .poses
            .iter()
            .filter_map(|ea| {
                let Some(eb) = ub.entry(&ea.target) else {
                    out.flag_mismatches += 1;
                    return None;
                };
                if ea.lose_track != eb.lose_track || ea.direct != eb.direct {
                    out.flag_mismatches += 1;
                    return None;
                }
                (!ea.lose_track).then_some((ea, eb))
            })
            .collect();
        out.flag_mismatches += ub.poses.iter().filter(|e| ua.entry(&e.target).is_none()).count();
        for (i, (ea, eb)) in tracked.iter().enumerate() {
            worst(&ea.pose, &eb.pose, &mut out);
            for (fa, fb) in &tracked[i + 1..] {
                worst(&relative(&ea.pose, &fa.pose), &relative(&eb.pose, &fb.pose), &mut out);
            }
        }
    }
    out
}
