#![allow(dead_code)]

use nalgebra::{Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenefuse_core::graph::{GraphSnapshot, InterEdge, NodeId};
use scenefuse_core::info::InfoMatrix;
use scenefuse_core::se3::{Pose, Twist};
use std::collections::BTreeMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-scale..=scale))
}

/// Random pose with translation in `[-t, t]^3` and rotation angle < `angle`.
pub fn pose(rng: &mut ChaCha8Rng, t: f64, angle: f64) -> Pose {
    let axis = vec3(rng, 1.0);
    let phi = if axis.norm() > 0.0 {
        axis.normalize() * rng.random_range(0.0..angle)
    } else {
        Vector3::zeros()
    };
    Pose::exp(&Twist::new(vec3(rng, t), phi))
}

pub fn twist(rng: &mut ChaCha8Rng, max_norm: f64) -> Twist {
    let v = nalgebra::Vector6::from_fn(|_, _| rng.random_range(-1.0..=1.0));
    let n = rng.random_range(0.0..=max_norm);
    Twist::from_vector(&(v.normalize() * n))
}

/// Random symmetric positive definite information matrix.
pub fn info(rng: &mut ChaCha8Rng) -> InfoMatrix {
    let l = Matrix6::from_fn(|_, _| rng.random_range(-1.0..=1.0));
    let m = l * l.transpose() + Matrix6::identity() * 0.5;
    InfoMatrix::new((m + m.transpose()) * 0.5).unwrap()
}

pub struct Scene {
    pub truth: BTreeMap<NodeId, Pose>,
    pub snapshot: GraphSnapshot,
}

pub fn sensor_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

pub fn target_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

/// Every sensor measures every target; `noise` is the twist norm bound of
/// right-multiplied measurement noise, `p_lost` the chance an edge is flagged
/// lost.
pub fn scene(rng: &mut ChaCha8Rng, n_s: usize, n_t: usize, noise: f64, p_lost: f64, random_info: bool) -> Scene {
    let mut truth = BTreeMap::new();
    for s in sensor_names(n_s) {
        truth.insert(NodeId::active(s), pose(rng, 2.0, 1.0));
    }
    for t in target_names(n_t) {
        truth.insert(NodeId::passive(t), pose(rng, 0.5, 1.0));
    }
    let mut edges = Vec::new();
    for s in sensor_names(n_s) {
        for t in target_names(n_t) {
            let a = truth[&NodeId::active(s.clone())];
            let p = truth[&NodeId::passive(t.clone())];
            let meas = a.inverse() * p * Pose::exp(&twist(rng, noise));
            let status = rng.random::<f64>() >= p_lost;
            let w = if random_info { info(rng) } else { InfoMatrix::identity() };
            edges.push(InterEdge::new(s.clone(), t.clone(), meas, 0, status, w));
        }
    }
    Scene {
        truth,
        snapshot: GraphSnapshot::from_edges(0, edges),
    }
}

use nalgebra::{DMatrix, DVector, Vector6};
use scenefuse_core::pgo::{residual, StateVector, VariableLayout};

/// Residuals of every valid edge stacked in snapshot order.
pub fn stacked_residuals(snapshot: &GraphSnapshot, state: &StateVector) -> DVector<f64> {
    let rows: Vec<Vector6<f64>> = snapshot
        .valid_edges()
        .map(|e| {
            let a = state.pose(&e.sensor).unwrap();
            let p = state.pose(&e.target).unwrap();
            residual(&e.pose, a, p).unwrap().to_vector()
        })
        .collect();
    let mut out = DVector::zeros(6 * rows.len());
    for (i, r) in rows.iter().enumerate() {
        out.fixed_rows_mut::<6>(6 * i).copy_from(r);
    }
    out
}

/// Central differences of the stacked residual under right perturbations
/// `X exp(h e_k)` of every free node.
pub fn fd_jacobian(snapshot: &GraphSnapshot, state: &StateVector, h: f64) -> DMatrix<f64> {
    let layout = VariableLayout::new(state);
    let rows = 6 * snapshot.valid_edges().count();
    let mut j = DMatrix::zeros(rows, layout.dim());
    for (id, block) in layout.nodes() {
        for k in 0..6 {
            let mut step = Vector6::zeros();
            step[k] = h;
            let base = *state.pose(id).unwrap();
            let mut plus = state.clone();
            plus.set(id.clone(), base * Pose::exp(&Twist::from_vector(&step)));
            let mut minus = state.clone();
            minus.set(id.clone(), base * Pose::exp(&Twist::from_vector(&-step)));
            let col = (stacked_residuals(snapshot, &plus) - stacked_residuals(snapshot, &minus)) / (2.0 * h);
            j.column_mut(6 * block + k).copy_from(&col);
        }
    }
    j
}

/// State at the truth perturbed by `exp(twist)` per node, anchored at `anchor`
/// (whose pose is re-expressed so it sits at the identity).
pub fn perturbed_state(rng: &mut ChaCha8Rng, truth: &BTreeMap<NodeId, Pose>, anchor: &NodeId, max_norm: f64) -> StateVector {
    let to_anchor = truth[anchor].inverse();
    let mut state = StateVector::new(anchor.clone());
    for (id, p) in truth {
        if id == anchor {
            continue;
        }
        state.set(id.clone(), to_anchor * *p * Pose::exp(&twist(rng, max_norm)));
    }
    state
}

/// Exhaustive kinematic completion: enumerate every simple path in the
/// two-layer link graph and pick fewest edges, then the largest minimum
/// timestamp, then the smallest node-name sequence. Returns the composed
/// pose and node names.
pub fn brute_force_completion(snapshot: &GraphSnapshot, sensor: &str, target: &str) -> Option<(Pose, Vec<String>)> {
    // name -> name -> (pose of `to` in `from`, timestamp)
    let mut links: BTreeMap<String, BTreeMap<String, (Pose, i64)>> = BTreeMap::new();
    let mut add = |a: &str, b: &str, pose: Pose, ts: i64| {
        links.entry(a.to_owned()).or_default().insert(b.to_owned(), (pose, ts));
        links.entry(b.to_owned()).or_default().insert(a.to_owned(), (pose.inverse(), ts));
    };
    let tracked: Vec<&InterEdge> = snapshot.edges.iter().filter(|e| e.status).collect();
    for e in &tracked {
        add(e.sensor.name(), e.target.name(), e.pose, e.timestamp);
    }
    // intra links: per passive pair, the estimate with the newest
    // min-timestamp among common sensors (ties: smallest sensor name)
    let window = snapshot.config.sync_window_us;
    let mut intra: BTreeMap<(String, String), (i64, String, Pose)> = BTreeMap::new();
    for e1 in &tracked {
        for e2 in &tracked {
            if e1.sensor != e2.sensor || e1.target.name() >= e2.target.name() {
                continue;
            }
            if (e1.timestamp - e2.timestamp).abs() > window {
                continue;
            }
            let ts = e1.timestamp.min(e2.timestamp);
            let cand = (ts, e1.sensor.name().to_owned(), e1.pose.inverse() * e2.pose);
            let key = (e1.target.name().to_owned(), e2.target.name().to_owned());
            let replace = match intra.get(&key) {
                None => true,
                Some((t, s, _)) => ts > *t || (ts == *t && cand.1 < *s),
            };
            if replace {
                intra.insert(key, cand);
            }
        }
    }
    for ((a, b), (ts, _, pose)) in intra {
        add(&a, &b, pose, ts);
    }

    let mut all: Vec<(usize, i64, Vec<String>)> = Vec::new();
    let mut stack = vec![sensor.to_owned()];
    fn walk(
        links: &BTreeMap<String, BTreeMap<String, (Pose, i64)>>,
        target: &str,
        stack: &mut Vec<String>,
        fresh: i64,
        out: &mut Vec<(usize, i64, Vec<String>)>,
    ) {
        let here = stack.last().unwrap().clone();
        if here == target {
            out.push((stack.len() - 1, fresh, stack.clone()));
            return;
        }
        let Some(next) = links.get(&here) else { return };
        for (n, (_, ts)) in next {
            if stack.contains(n) {
                continue;
            }
            stack.push(n.clone());
            walk(links, target, stack, fresh.min(*ts), out);
            stack.pop();
        }
    }
    walk(&links, target, &mut stack, i64::MAX, &mut all);
    let best = all
        .into_iter()
        .filter(|p| p.0 > 0)
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then_with(|| a.2.cmp(&b.2)))?;
    let names = best.2;
    let pose = names
        .windows(2)
        .fold(Pose::identity(), |acc, w| acc * links[&w[0]][&w[1]].0);
    Some((pose, names))
}

/// Every bipartite topology with `a` sensors and `p` targets, `a + p <= max`,
/// where each sensor/target pair is absent, tracked or lost. `assign`
/// provides the measured pose and timestamp of edge number `k`.
pub fn for_each_topology(max_nodes: usize, mut assign: impl FnMut(usize, &str, &str) -> (Pose, i64), mut f: impl FnMut(&GraphSnapshot)) -> usize {
    let mut count = 0;
    for a in 1..max_nodes {
        for p in 1..=(max_nodes - a) {
            let pairs: Vec<(String, String)> = sensor_names(a)
                .into_iter()
                .flat_map(|s| target_names(p).into_iter().map(move |t| (s.clone(), t)))
                .collect();
            let total = 3usize.pow(pairs.len() as u32);
            for code in 0..total {
                let mut c = code;
                let mut edges = Vec::new();
                for (k, (s, t)) in pairs.iter().enumerate() {
                    let state = c % 3;
                    c /= 3;
                    if state == 0 {
                        continue;
                    }
                    let (pose, ts) = assign(k, s, t);
                    edges.push(InterEdge::new(s.clone(), t.clone(), pose, ts, state == 1, InfoMatrix::identity()));
                }
                let mut snap = GraphSnapshot::from_edges(10, edges);
                // keep isolated nodes of this topology in the snapshot
                snap.active = sensor_names(a).into_iter().map(NodeId::active).collect();
                snap.passive = target_names(p).into_iter().map(NodeId::passive).collect();
                f(&snap);
                count += 1;
            }
        }
    }
    count
}
