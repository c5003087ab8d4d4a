mod common;

use common::*;
use scenefuse_core::graph::{GraphSnapshot, InterEdge, NodeId};
use scenefuse_core::info::InfoMatrix;
use scenefuse_core::pgo::{cost, jacobian, solve, solve_snapshot, SolveOptions, StateVector};
use scenefuse_core::se3::Pose;

#[test]
fn analytic_jacobian_matches_central_differences() {
    let mut r = rng(101);
    for case in 0..40 {
        let n_s = 1 + case % 3;
        let n_t = 1 + (case / 3) % 3;
        let scene = scene(&mut r, n_s, n_t, 0.05, 0.2, true);
        let anchor = NodeId::active("s0");
        let state = perturbed_state(&mut r, &scene.truth, &anchor, 0.3);
        let (_, jac) = jacobian(&scene.snapshot, &state).unwrap();
        let analytic = jac.to_dense();
        let numeric = fd_jacobian(&scene.snapshot, &state, 1e-6);
        let err = (&analytic - &numeric).norm() / numeric.norm().max(1.0);
        assert!(err < 1e-6, "case {case}: relative error {err}");
    }
}

#[test]
fn noiseless_scene_is_recovered_exactly() {
    let mut r = rng(7);
    for _ in 0..20 {
        let scene = scene(&mut r, 2, 2, 0.0, 0.0, false);
        let anchor = NodeId::active("s0");
        let init = perturbed_state(&mut r, &scene.truth, &anchor, 0.1);
        let report = solve(&scene.snapshot, &init, &SolveOptions::default()).unwrap();
        assert!(report.final_cost() < 1e-16, "cost {}", report.final_cost());
        let (t0, t1) = (NodeId::passive("t0"), NodeId::passive("t1"));
        let want = scene.truth[&t0].inverse() * scene.truth[&t1];
        let (dt, dr) = report.state.relative(&t0, &t1).unwrap().distance(&want);
        assert!(dt < 1e-6 && dr < 1e-6);
    }
}

#[test]
fn cost_trace_never_increases() {
    let mut r = rng(8);
    for _ in 0..20 {
        let scene = scene(&mut r, 3, 3, 0.05, 0.1, true);
        let Ok(report) = solve_snapshot(&scene.snapshot, &[], &SolveOptions::default()) else {
            continue;
        };
        for w in report.cost_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", report.cost_trace);
        }
    }
}

#[test]
fn lost_edges_do_not_contribute() {
    let mut r = rng(9);
    let base = scene(&mut r, 2, 3, 0.05, 0.0, true);
    let anchor = NodeId::active("s0");
    let state = perturbed_state(&mut r, &base.truth, &anchor, 0.2);
    let mut with_lost = base.snapshot.edges.clone();
    // a wildly wrong but lost measurement
    with_lost.push(InterEdge::new("s0", "t9", Pose::from_translation(50.0, 0.0, 0.0), 0, false, InfoMatrix::identity()));
    let mut st = state.clone();
    st.set(NodeId::passive("t9"), Pose::identity());
    let c0 = cost(&base.snapshot, &state).unwrap();
    let c1 = cost(&GraphSnapshot::from_edges(0, with_lost), &st).unwrap();
    assert_eq!(c0, c1);
}

#[test]
fn gauge_transform_leaves_relative_poses_unchanged() {
    let mut r = rng(10);
    for _ in 0..10 {
        let base = scene(&mut r, 2, 3, 0.0, 0.0, false);
        let g = pose(&mut r, 5.0, 3.0);
        let noise: Vec<Pose> = (0..6).map(|_| Pose::exp(&twist(&mut r, 0.01))).collect();
        let synth = |shift: &Pose| {
            let edges = base
                .snapshot
                .edges
                .iter()
                .zip(&noise)
                .map(|(e, n)| {
                    let a = *shift * base.truth[&e.sensor];
                    let p = *shift * base.truth[&e.target];
                    InterEdge::new(e.sensor.name(), e.target.name(), a.inverse() * p * *n, 0, true, InfoMatrix::identity())
                })
                .collect();
            let snap = GraphSnapshot::from_edges(0, edges);
            solve_snapshot(&snap, &[], &SolveOptions::default()).unwrap()
        };
        let plain = synth(&Pose::identity());
        let moved = synth(&g);
        for (a, b) in [("t0", "t1"), ("t0", "t2"), ("t1", "t2")] {
            let (a, b) = (NodeId::passive(a), NodeId::passive(b));
            let (dt, dr) = plain.state.relative(&a, &b).unwrap().distance(&moved.state.relative(&a, &b).unwrap());
            assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
        }
    }
}

#[test]
fn single_edge_uncertainty_is_inverse_weight() {
    let edge = |s: &str, w: f64| InterEdge::new(s, "t0", Pose::from_translation(0.0, 0.0, 1.0), 0, true, InfoMatrix::identity().scaled(w));
    let snap = GraphSnapshot::from_edges(0, vec![edge("s0", 4.0), edge("s1", 1.0)]);
    let report = solve_snapshot(&snap, &[], &SolveOptions::default()).unwrap();
    let u = report.uncertainties[&NodeId::passive("t0")];
    // s1 is free, so only the anchor's edge pins t0
    for v in u {
        assert!((v - 0.25).abs() < 1e-9, "{u:?}");
    }
}

#[test]
fn anchor_is_identity_and_excluded_nodes_reported() {
    let edges = vec![
        InterEdge::new("s0", "t0", Pose::from_translation(0.0, 0.0, 1.0), 0, true, InfoMatrix::identity()),
        InterEdge::new("s1", "t1", Pose::from_translation(0.0, 0.0, 2.0), 0, true, InfoMatrix::identity()),
    ];
    let snap = GraphSnapshot::from_edges(0, edges);
    let report = solve_snapshot(&snap, &[], &SolveOptions::default()).unwrap();
    assert_eq!(report.state.anchor, NodeId::active("s0"));
    assert_eq!(report.state.pose(&NodeId::active("s0")), Some(&Pose::identity()));
    assert_eq!(report.excluded, vec![NodeId::active("s1"), NodeId::passive("t1")]);
    let _ = StateVector::new(NodeId::active("s0"));
}
