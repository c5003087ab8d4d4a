//! Pose-graph optimization over a graph snapshot.
//!
//! Unknowns are the poses of all active nodes `A_i` and passive nodes `P_j`
//! in the frame of one anchor sensor, which is pinned to identity. Each
//! tracked inter-layer edge contributes the residual
//! `r_ij = Log(T_ij^-1 A_i^-1 P_j)` weighted by its information matrix.
//! Updates are right perturbations, `X <- X exp(delta)`.
//!
//! The linear system is solved densely: desk-scale graphs stay below a few
//! hundred state dimensions.

use crate::graph::{GraphSnapshot, InterEdge, NodeId};
use crate::se3::{se3_right_jacobian_inv, Pose, Se3Error, Twist};
use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PgoError {
    #[error(transparent)]
    Se3(#[from] Se3Error),
    #[error("state has no pose for node {0}")]
    MissingNode(NodeId),
    #[error("anchor {0} is not an active node of the snapshot")]
    InvalidAnchor(NodeId),
    #[error("anchor {0} has no valid edge")]
    AnchorWithoutEdges(NodeId),
    #[error("no active node has a valid edge")]
    NoEligibleAnchor,
    #[error("normal equations stay singular after damping up to {max_damping:e}")]
    SingularNormalEquations { max_damping: f64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub max_iter: usize,
    /// Stop once `(c_prev - c) / c_prev` drops below this.
    pub cost_tol: f64,
    /// Stop once the update norm drops below this.
    pub step_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            cost_tol: 1e-10,
            step_tol: 1e-12,
        }
    }
}

/// Damping schedule tried after the undamped Gauss-Newton step.
const DAMPING: [f64; 9] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub active: BTreeMap<NodeId, Pose>,
    pub passive: BTreeMap<NodeId, Pose>,
    pub anchor: NodeId,
}

impl StateVector {
    pub fn new(anchor: NodeId) -> Self {
        let mut active = BTreeMap::new();
        active.insert(anchor.clone(), Pose::identity());
        Self {
            active,
            passive: BTreeMap::new(),
            anchor,
        }
    }

    pub fn pose(&self, id: &NodeId) -> Option<&Pose> {
        if id.is_active() {
            self.active.get(id)
        } else {
            self.passive.get(id)
        }
    }

    pub fn set(&mut self, id: NodeId, pose: Pose) {
        if id.is_active() {
            self.active.insert(id, pose);
        } else {
            self.passive.insert(id, pose);
        }
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.pose(id).is_some()
    }

    /// `X_from^-1 X_to`, frame independent.
    pub fn relative(&self, from: &NodeId, to: &NodeId) -> Option<Pose> {
        Some(self.pose(from)?.inverse() * *self.pose(to)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub state: StateVector,
    /// Cost at the initial state followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Diagonal of the passive node's 6x6 block of `(J^T Omega J)^-1`.
    pub uncertainties: BTreeMap<NodeId, [f64; 6]>,
    /// Snapshot nodes not connected to the anchor through valid edges.
    pub excluded: Vec<NodeId>,
    /// Accepted steps that needed Levenberg damping.
    pub damped_steps: usize,
    pub max_damping: f64,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().unwrap_or(&0.0)
    }

    pub fn export(&self) -> ReportExport {
        let poses = self
            .state
            .active
            .iter()
            .chain(&self.state.passive)
            .map(|(id, p)| (id.name().to_owned(), *p))
            .collect();
        ReportExport {
            converged: self.converged,
            iterations: self.iterations,
            cost: self.cost_trace.clone(),
            poses,
            uncertainty: self
                .uncertainties
                .iter()
                .map(|(id, u)| (id.name().to_owned(), *u))
                .collect(),
            anchor: self.state.anchor.name().to_owned(),
        }
    }
}

/// JSON form of a [`SolveReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportExport {
    pub converged: bool,
    pub iterations: usize,
    pub cost: Vec<f64>,
    pub poses: BTreeMap<String, Pose>,
    pub uncertainty: BTreeMap<String, [f64; 6]>,
    pub anchor: String,
}

/// `Log(T^-1 A^-1 P)`.
pub fn residual(measured: &Pose, sensor: &Pose, target: &Pose) -> Result<Twist, Se3Error> {
    (measured.inverse() * sensor.inverse() * *target).log()
}

/// Residual Jacobians with respect to right perturbations of the sensor and
/// target poses.
fn residual_jacobians(r: &Twist, sensor: &Pose, target: &Pose) -> (Matrix6<f64>, Matrix6<f64>) {
    let jr_inv = se3_right_jacobian_inv(r);
    let d_sensor = -jr_inv * (target.inverse() * *sensor).adjoint();
    (d_sensor, jr_inv)
}

fn endpoint_poses<'a>(
    state: &'a StateVector,
    e: &InterEdge,
) -> Result<(&'a Pose, &'a Pose), PgoError> {
    let a = state
        .pose(&e.sensor)
        .ok_or_else(|| PgoError::MissingNode(e.sensor.clone()))?;
    let p = state
        .pose(&e.target)
        .ok_or_else(|| PgoError::MissingNode(e.target.clone()))?;
    Ok((a, p))
}

/// Weighted least-squares cost `sum r^T Omega r` over valid edges. Lost-track
/// and zero-information edges contribute exactly nothing.
pub fn cost(snapshot: &GraphSnapshot, state: &StateVector) -> Result<f64, PgoError> {
    cost_of(snapshot.valid_edges(), state)
}

fn cost_of<'a>(
    edges: impl Iterator<Item = &'a InterEdge>,
    state: &StateVector,
) -> Result<f64, PgoError> {
    let mut total = 0.0;
    for e in edges {
        let (a, p) = endpoint_poses(state, e)?;
        let r = residual(&e.pose, a, p)?.to_vector();
        total += r.dot(&(e.info.matrix() * r));
    }
    Ok(total)
}

/// Column layout: 6-blocks for non-anchor active nodes then passive nodes,
/// each in sorted order. The anchor has no columns.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableLayout {
    blocks: BTreeMap<NodeId, usize>,
}

impl VariableLayout {
    pub fn new(state: &StateVector) -> Self {
        let blocks = state
            .active
            .keys()
            .filter(|id| **id != state.anchor)
            .chain(state.passive.keys())
            .cloned()
            .enumerate()
            .map(|(k, id)| (id, k))
            .collect();
        Self { blocks }
    }

    pub fn block(&self, id: &NodeId) -> Option<usize> {
        self.blocks.get(id).copied()
    }

    pub fn dim(&self) -> usize {
        6 * self.blocks.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, usize)> {
        self.blocks.iter().map(|(id, k)| (id, *k))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JacobianBlock {
    pub row_block: usize,
    pub col_block: usize,
    pub value: Matrix6<f64>,
}

/// Block-sparse stacked Jacobian: 6 rows per valid edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseJacobian {
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<JacobianBlock>,
    pub layout: VariableLayout,
}

impl SparseJacobian {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for b in &self.blocks {
            m.view_mut((6 * b.row_block, 6 * b.col_block), (6, 6))
                .copy_from(&b.value);
        }
        m
    }
}

/// Stacked residual `r0` and Jacobian `J` at `state`, in snapshot edge order.
pub fn jacobian(
    snapshot: &GraphSnapshot,
    state: &StateVector,
) -> Result<(DVector<f64>, SparseJacobian), PgoError> {
    let layout = VariableLayout::new(state);
    let edges: Vec<&InterEdge> = snapshot.valid_edges().collect();
    let mut r0 = DVector::zeros(6 * edges.len());
    let mut blocks = Vec::with_capacity(2 * edges.len());
    for (row, e) in edges.iter().enumerate() {
        let (a, p) = endpoint_poses(state, e)?;
        let r = residual(&e.pose, a, p)?;
        r0.fixed_rows_mut::<6>(6 * row).copy_from(&r.to_vector());
        let (d_sensor, d_target) = residual_jacobians(&r, a, p);
        if let Some(col) = layout.block(&e.sensor) {
            blocks.push(JacobianBlock {
                row_block: row,
                col_block: col,
                value: d_sensor,
            });
        }
        if let Some(col) = layout.block(&e.target) {
            blocks.push(JacobianBlock {
                row_block: row,
                col_block: col,
                value: d_target,
            });
        }
    }
    Ok((
        r0,
        SparseJacobian {
            rows: 6 * edges.len(),
            cols: layout.dim(),
            blocks,
            layout,
        },
    ))
}

/// Active nodes with at least one valid edge.
pub fn eligible_anchors(snapshot: &GraphSnapshot) -> BTreeSet<NodeId> {
    snapshot.valid_edges().map(|e| e.sensor.clone()).collect()
}

/// First eligible candidate in `preferred`, else the lexicographically
/// smallest eligible active node.
pub fn select_anchor(snapshot: &GraphSnapshot, preferred: &[Option<&NodeId>]) -> Option<NodeId> {
    let eligible = eligible_anchors(snapshot);
    preferred
        .iter()
        .flatten()
        .find(|id| eligible.contains(**id))
        .map(|id| (*id).clone())
        .or_else(|| eligible.into_iter().next())
}

/// Initial state by composing measurements along breadth-first (shortest)
/// chains from the anchor. Returns the state and the unreachable nodes.
pub fn initialize(
    snapshot: &GraphSnapshot,
    anchor: &NodeId,
) -> Result<(StateVector, Vec<NodeId>), PgoError> {
    if !anchor.is_active() || !snapshot.contains(anchor) {
        return Err(PgoError::InvalidAnchor(anchor.clone()));
    }
    let mut adjacency: BTreeMap<&NodeId, Vec<&InterEdge>> = BTreeMap::new();
    for e in snapshot.valid_edges() {
        adjacency.entry(&e.sensor).or_default().push(e);
        adjacency.entry(&e.target).or_default().push(e);
    }
    if !adjacency.contains_key(anchor) {
        return Err(PgoError::AnchorWithoutEdges(anchor.clone()));
    }
    let mut state = StateVector::new(anchor.clone());
    let mut queue = VecDeque::from([anchor.clone()]);
    while let Some(node) = queue.pop_front() {
        let here = *state.pose(&node).expect("queued nodes have poses");
        for e in adjacency.get(&node).into_iter().flatten() {
            let (next, pose) = if node.is_active() {
                (&e.target, here * e.pose)
            } else {
                (&e.sensor, here * e.pose.inverse())
            };
            if !state.contains(next) {
                state.set(next.clone(), pose);
                queue.push_back(next.clone());
            }
        }
    }
    let excluded = snapshot
        .active
        .iter()
        .chain(&snapshot.passive)
        .filter(|id| !state.contains(id))
        .cloned()
        .collect();
    Ok((state, excluded))
}

struct NormalEquations {
    hessian: DMatrix<f64>,
    gradient: DVector<f64>,
}

fn normal_equations(
    edges: &[&InterEdge],
    state: &StateVector,
    layout: &VariableLayout,
) -> Result<NormalEquations, PgoError> {
    let n = layout.dim();
    let mut hessian = DMatrix::zeros(n, n);
    let mut gradient = DVector::zeros(n);
    for e in edges {
        let (a, p) = endpoint_poses(state, e)?;
        let r = residual(&e.pose, a, p)?;
        let (d_sensor, d_target) = residual_jacobians(&r, a, p);
        let omega = e.info.matrix();
        let rv = r.to_vector();
        let cols = [
            (layout.block(&e.sensor), d_sensor),
            (layout.block(&e.target), d_target),
        ];
        for (ci, ji) in cols.iter() {
            let Some(ci) = ci else { continue };
            let jt_omega = ji.transpose() * omega;
            let mut g = gradient.fixed_rows_mut::<6>(6 * ci);
            g += jt_omega * rv;
            for (cj, jj) in cols.iter() {
                let Some(cj) = cj else { continue };
                let mut h = hessian.fixed_view_mut::<6, 6>(6 * ci, 6 * cj);
                h += jt_omega * jj;
            }
        }
    }
    Ok(NormalEquations { hessian, gradient })
}

fn retract(state: &StateVector, layout: &VariableLayout, delta: &DVector<f64>) -> StateVector {
    let mut next = state.clone();
    for (id, k) in layout.nodes() {
        let d = Twist::from_vector(&Vector6::from_iterator(
            delta.rows(6 * k, 6).iter().copied(),
        ));
        let current = *state.pose(id).expect("layout built from state");
        next.set(id.clone(), current * Pose::exp(&d));
    }
    next.set(state.anchor.clone(), Pose::identity());
    next
}

/// Restricts `snapshot` to valid edges between nodes present in `state`.
fn usable_edges<'a>(snapshot: &'a GraphSnapshot, state: &StateVector) -> Vec<&'a InterEdge> {
    snapshot
        .valid_edges()
        .filter(|e| state.contains(&e.sensor) && state.contains(&e.target))
        .collect()
}

/// Gauss-Newton on `J^T Omega J delta = -J^T Omega r0`, falling back to
/// Levenberg damping (`lambda * diag`) when the undamped system is singular
/// or its step increases the cost.
///
/// Nodes not connected to the anchor through valid edges are dropped from the
/// problem and listed in [`SolveReport::excluded`].
pub fn solve(
    snapshot: &GraphSnapshot,
    init: &StateVector,
    opts: &SolveOptions,
) -> Result<SolveReport, PgoError> {
    let anchor = &init.anchor;
    let (reachable, excluded) = initialize(snapshot, anchor)?;
    let mut state = StateVector::new(anchor.clone());
    for id in reachable.active.keys().chain(reachable.passive.keys()) {
        if id == anchor {
            continue;
        }
        let pose = init
            .pose(id)
            .ok_or_else(|| PgoError::MissingNode(id.clone()))?;
        state.set(id.clone(), *pose);
    }

    let edges = usable_edges(snapshot, &state);
    let layout = VariableLayout::new(&state);
    let mut current = cost_of(edges.iter().copied(), &state)?;
    let mut report = SolveReport {
        state: state.clone(),
        cost_trace: vec![current],
        iterations: 0,
        converged: false,
        uncertainties: BTreeMap::new(),
        excluded,
        damped_steps: 0,
        max_damping: 0.0,
    };

    for _ in 0..opts.max_iter {
        if current == 0.0 {
            report.converged = true;
            break;
        }
        let ne = normal_equations(&edges, &state, &layout)?;
        let rhs = -&ne.gradient;
        let diag = ne.hessian.diagonal();
        let mut factorized = false;
        let mut accepted = None;
        for lambda in std::iter::once(0.0).chain(DAMPING) {
            let mut h = ne.hessian.clone();
            if lambda > 0.0 {
                for k in 0..h.nrows() {
                    h[(k, k)] += lambda * diag[k];
                }
            }
            let Some(chol) = h.cholesky() else { continue };
            factorized = true;
            let delta = chol.solve(&rhs);
            let candidate = retract(&state, &layout, &delta);
            let Ok(c) = cost_of(edges.iter().copied(), &candidate) else {
                continue;
            };
            if c <= current {
                accepted = Some((candidate, c, delta.norm(), lambda));
                break;
            }
        }
        match accepted {
            None if !factorized => {
                return Err(PgoError::SingularNormalEquations {
                    max_damping: DAMPING[DAMPING.len() - 1],
                })
            }
            // no step lowers the cost: numerically at the minimum
            None => {
                report.converged = true;
                break;
            }
            Some((candidate, c, step, lambda)) => {
                let decrease = current - c;
                state = candidate;
                report.iterations += 1;
                report.cost_trace.push(c);
                if lambda > 0.0 {
                    report.damped_steps += 1;
                    report.max_damping = report.max_damping.max(lambda);
                }
                let done = step < opts.step_tol || decrease <= opts.cost_tol * current;
                current = c;
                if done {
                    report.converged = true;
                    break;
                }
            }
        }
    }

    report.uncertainties = marginals(&edges, &state, &layout)?;
    report.state = state;
    Ok(report)
}

fn marginals(
    edges: &[&InterEdge],
    state: &StateVector,
    layout: &VariableLayout,
) -> Result<BTreeMap<NodeId, [f64; 6]>, PgoError> {
    let ne = normal_equations(edges, state, layout)?;
    let n = ne.hessian.nrows();
    let covariance = match ne.hessian.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => ne
            .hessian
            .pseudo_inverse(1e-12)
            .unwrap_or_else(|_| DMatrix::zeros(n, n)),
    };
    Ok(state
        .passive
        .keys()
        .filter_map(|id| {
            let k = layout.block(id)?;
            let mut d = [0.0; 6];
            for (i, v) in d.iter_mut().enumerate() {
                *v = covariance[(6 * k + i, 6 * k + i)].max(0.0);
            }
            Some((id.clone(), d))
        })
        .collect())
}

pub fn marginal_uncertainty(report: &SolveReport, j: &NodeId) -> Result<[f64; 6], PgoError> {
    report
        .uncertainties
        .get(j)
        .copied()
        .ok_or_else(|| PgoError::UnknownNode(j.clone()))
}

/// Anchor selection, chain initialization and solve in one call.
pub fn solve_snapshot(
    snapshot: &GraphSnapshot,
    preferred_anchor: &[Option<&NodeId>],
    opts: &SolveOptions,
) -> Result<SolveReport, PgoError> {
    let anchor = select_anchor(snapshot, preferred_anchor).ok_or(PgoError::NoEligibleAnchor)?;
    let (init, _) = initialize(snapshot, &anchor)?;
    solve(snapshot, &init, opts)
}
