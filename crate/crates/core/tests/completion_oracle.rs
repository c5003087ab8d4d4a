mod common;

use common::*;
use scenefuse_core::completion::{query_pose, CompletionError};
use scenefuse_core::graph::{GraphSnapshot, InterEdge, NodeId};
use scenefuse_core::info::InfoMatrix;
use scenefuse_core::se3::Pose;

fn check_against_oracle(max_nodes: usize, timestamps: impl Fn(usize) -> i64) -> usize {
    let mut r = rng(55);
    let measured: Vec<Pose> = (0..16).map(|_| pose(&mut r, 1.0, 2.0)).collect();
    let mut queries = 0;
    for_each_topology(
        max_nodes,
        |k, _, _| (measured[k], timestamps(k)),
        |snap| {
            for s in &snap.active {
                for t in &snap.passive {
                    let got = query_pose(snap, s, t, None);
                    let want = brute_force_completion(snap, s.name(), t.name());
                    queries += 1;
                    match (got, want) {
                        (Ok(c), Some((pose, names))) => {
                            assert!(c.path.is_well_formed(s, t));
                            if c.direct {
                                assert_eq!(names.len(), 2);
                            }
                            assert_eq!(c.path.node_names(), names, "{snap:?}");
                            let (dt, dr) = c.pose.distance(&pose);
                            assert!(dt < 1e-9 && dr < 1e-9);
                        }
                        (Err(CompletionError::NoPath { .. }), None) => {}
                        (got, want) => panic!("{s} -> {t}: {got:?} vs {want:?} in {snap:?}"),
                    }
                }
            }
        },
    );
    queries
}

#[test]
fn matches_brute_force_with_equal_timestamps() {
    assert!(check_against_oracle(5, |_| 5) > 1000);
}

#[test]
fn matches_brute_force_with_mixed_timestamps() {
    check_against_oracle(5, |k| ((k * 7) % 3) as i64);
}

#[test]
fn indirect_matches_direct_when_noiseless() {
    let mut r = rng(77);
    for _ in 0..50 {
        let sc = scene(&mut r, 3, 3, 0.0, 0.0, false);
        for lost in 0..sc.snapshot.edges.len() {
            let mut edges = sc.snapshot.edges.clone();
            let e = edges[lost].clone();
            edges[lost] = InterEdge::new(e.sensor.name(), e.target.name(), e.pose, 0, false, InfoMatrix::identity());
            let snap = GraphSnapshot::from_edges(0, edges);
            let c = query_pose(&snap, &e.sensor, &e.target, None).unwrap();
            assert!(!c.direct);
            let (dt, dr) = c.pose.distance(&e.pose);
            assert!(dt < 1e-9 && dr < 1e-9);
        }
    }
}

#[test]
fn wrong_layers_are_rejected() {
    let snap = GraphSnapshot::from_edges(
        0,
        vec![InterEdge::new("s0", "t0", Pose::identity(), 0, true, InfoMatrix::identity())],
    );
    assert!(matches!(
        query_pose(&snap, &NodeId::passive("t0"), &NodeId::passive("t0"), None),
        Err(CompletionError::WrongLayer { .. })
    ));
    assert!(matches!(
        query_pose(&snap, &NodeId::active("s0"), &NodeId::passive("zz"), None),
        Err(CompletionError::UnknownNode(_))
    ));
}
