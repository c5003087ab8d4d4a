mod common;

use common::*;
use scenefuse_core::se3::{relative, Pose, Twist};
use scenefuse_core::wire::WireMessage;
use nalgebra::Vector3;
use std::time::Duration;

fn pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    Pose::exp(&Twist::new(Vector3::new(x, y, z), Vector3::new(0.0, 0.0, yaw)))
}

async fn wait_cycles(server: &scenefuse_net::ServerHandle, n: u64) {
    let start = server.metrics().await.unwrap().cycles;
    while server.metrics().await.unwrap().cycles < start + n {
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
}

#[tokio::test]
async fn hello_then_disconnect_leaves_graph_empty() {
    let server = start(50.0).await;
    let g = get_json(&server, "/graph").await;
    assert_eq!(g["active"], serde_json::json!([]));
    assert_eq!(g["passive"], serde_json::json!([]));

    let c = LineClient::hello(server.addr, "hmd-1", &[]).await;
    assert_eq!(get_json(&server, "/graph").await["active"], serde_json::json!(["hmd-1"]));
    drop(c);
    wait_cycles(&server, 1).await;
    let g = get_json(&server, "/graph").await;
    assert_eq!(g["active"], serde_json::json!([]));
    assert_eq!(g["edges"], serde_json::json!([]));
    server.shutdown().await;
}

#[tokio::test]
async fn shared_targets_reach_both_clients_with_flags() {
    let server = start(50.0).await;
    let mut a = LineClient::hello(server.addr, "a", &["p", "q"]).await;
    let mut b = LineClient::hello(server.addr, "b", &["p"]).await;
    // world: a at origin, b offset; p and q somewhere in front
    let wa = Pose::identity();
    let wb = pose(1.0, 0.5, 0.0, 0.7);
    let wp = pose(0.3, 1.0, 0.2, -0.4);
    let wq = pose(-0.2, 1.2, 0.1, 1.1);
    for k in 0..5 {
        let t = 1000 * k;
        a.send_meas(meas("a", "p", t, relative(&wa, &wp), true)).await;
        a.send_meas(meas("a", "q", t, relative(&wa, &wq), true)).await;
        b.send_meas(meas("b", "p", t, relative(&wb, &wp), true)).await;
    }
    a.query("p").await;
    let ub = b.settled_update("p").await;
    let ua = a.settled_update("p").await;
    assert!(ua.entry("p").unwrap().direct && ua.entry("q").unwrap().direct);
    let bp = ub.entry("p").unwrap();
    let bq = ub.entry("q").unwrap();
    assert!(bp.direct && !bp.lose_track);
    assert!(!bq.direct && !bq.lose_track);
    let (dt, dr) = bq.pose.distance(&relative(&wb, &wq));
    assert!(dt < 1e-9 && dr < 1e-9, "{dt} {dr}");
    assert!(bq.uncertainty.iter().all(|u| *u > 0.0));
    assert_eq!(ub.solve_t_us, 4000);
    server.shutdown().await;
}

#[tokio::test]
async fn malformed_line_closes_only_that_session() {
    let server = start(50.0).await;
    let mut bad = LineClient::hello(server.addr, "bad", &[]).await;
    let mut good = LineClient::hello(server.addr, "good", &["p"]).await;
    bad.send_raw("{\"type\": \"meas\", oops").await;
    match bad.recv_non_update().await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, "malformed"),
        other => panic!("{other:?}"),
    }
    assert_eq!(bad.recv_non_update().await, None);

    good.send_meas(meas("good", "p", 1, Pose::identity(), true)).await;
    let u = good.settled_update("p").await;
    assert!(u.entry("p").unwrap().direct);
    let m = server.metrics().await.unwrap();
    assert_eq!(m.sessions, 1);
    assert_eq!(m.protocol_errors, 1);
    assert_eq!(get_json(&server, "/graph").await["active"], serde_json::json!(["good"]));
    server.shutdown().await;
}

#[tokio::test]
async fn protocol_violations() {
    let server = start(50.0).await;
    // unknown type: error reply, session stays open
    let mut c = LineClient::hello(server.addr, "s", &["p"]).await;
    c.send_raw(r#"{"type":"teleport"}"#).await;
    match c.recv_non_update().await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, "unknown_type"),
        other => panic!("{other:?}"),
    }
    assert!(!c.query("p").await.direct);

    // measurement before hello
    let mut early = LineClient::connect(server.addr).await;
    early.send_meas(meas("x", "p", 1, Pose::identity(), true)).await;
    assert!(matches!(early.recv().await, Some(WireMessage::Error(_))));
    assert_eq!(early.recv().await, None);

    // duplicate sensor id
    let mut dup = LineClient::connect(server.addr).await;
    dup.send_raw(r#"{"type":"hello","sensor_id":"s"}"#).await;
    match dup.recv().await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, "duplicate_sensor"),
        other => panic!("{other:?}"),
    }
    assert_eq!(dup.recv().await, None);

    // measurement claiming another sensor's identity
    c.send_meas(meas("someone-else", "p", 1, Pose::identity(), true)).await;
    match c.recv_non_update().await {
        Some(WireMessage::Error(e)) => assert_eq!(e.code, "sensor_mismatch"),
        other => panic!("{other:?}"),
    }
    assert_eq!(c.recv_non_update().await, None);
    server.shutdown().await;
}

#[tokio::test]
async fn lost_and_stale_measurements() {
    let server = start(50.0).await;
    let mut c = LineClient::hello(server.addr, "s", &["p"]).await;
    c.send_meas(meas("s", "p", 100, pose(0.0, 0.0, 1.0, 0.0), true)).await;
    c.send_meas(meas("s", "p", 50, pose(9.0, 0.0, 1.0, 0.0), true)).await;
    c.query("p").await;
    assert_eq!(server.metrics().await.unwrap().dropped_stale, 1);
    let g = get_json(&server, "/graph").await;
    assert_eq!(g["edges"][0]["t_us"], 100);

    c.send_meas(meas("s", "p", 200, pose(0.0, 0.0, 1.0, 0.0), false)).await;
    let u = c.settled_update("p").await;
    assert!(u.entry("p").unwrap().lose_track);
    let g = get_json(&server, "/graph").await;
    assert_eq!(g["edges"][0]["status"], false);
    assert_eq!(g["edges"][0]["info_diag"], serde_json::json!([0.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    server.shutdown().await;
}

#[tokio::test]
async fn query_direct_indirect_and_lost() {
    let server = start(50.0).await;
    let mut a = LineClient::hello(server.addr, "a", &["p", "q"]).await;
    let mut b = LineClient::hello(server.addr, "b", &["p"]).await;
    let wb = pose(0.5, -0.5, 0.0, 0.3);
    let wp = pose(0.0, 1.0, 0.0, 0.2);
    let wq = pose(0.4, 1.0, 0.3, -0.6);
    a.send_meas(meas("a", "p", 10, wp, true)).await;
    a.send_meas(meas("a", "q", 10, wq, true)).await;
    b.send_meas(meas("b", "p", 10, relative(&wb, &wp), true)).await;
    a.query("p").await;
    b.settled_update("p").await;

    let direct = b.query("p").await;
    assert!(direct.direct && !direct.lose_track);
    assert_eq!(direct.path, vec!["b", "p"]);
    let indirect = b.query("q").await;
    assert!(!indirect.direct && !indirect.lose_track);
    assert_eq!(indirect.path, vec!["b", "p", "q"]);
    assert!(indirect.uncertainty.is_some());
    let (dt, dr) = indirect.pose.unwrap().distance(&relative(&wb, &wq));
    assert!(dt < 1e-9 && dr < 1e-9);
    let lost = b.query("nowhere").await;
    assert!(lost.lose_track && lost.pose.is_none());
    server.shutdown().await;
}

#[tokio::test]
async fn shutdown_says_bye() {
    let server = start(50.0).await;
    let mut c = LineClient::hello(server.addr, "s", &[]).await;
    server.shutdown().await;
    assert_eq!(c.recv_non_update().await, Some(WireMessage::Bye));
    assert_eq!(c.recv().await, None);
}

#[tokio::test]
async fn bind_failure_is_reported() {
    let first = start(50.0).await;
    let taken = first.addr;
    let err = scenefuse_net::serve(scenefuse_net::ServerConfig {
        listen: taken,
        operator_listen: None,
        ..Default::default()
    })
    .await
    .err()
    .unwrap();
    assert!(matches!(err, scenefuse_net::ServerError::Bind { .. }));
    first.shutdown().await;
}

#[tokio::test]
async fn session_log_is_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.ndjson");
    let server = start_with(|c| {
        c.fusion_hz = 100.0;
        c.log_path = Some(path.clone());
    })
    .await;
    let mut c = LineClient::hello(server.addr, "s", &["p"]).await;
    c.send_meas(meas("s", "p", 5, Pose::identity(), true)).await;
    c.settled_update("p").await;
    drop(c);
    server.shutdown().await;
    let recs = scenefuse_core::logs::read_estimates(&path).unwrap();
    let metas = recs
        .iter()
        .filter(|r| matches!(r, scenefuse_core::logs::EstRecord::Meas(_)))
        .count();
    assert_eq!(metas, 1);
    assert!(recs.iter().any(|r| matches!(r,
        scenefuse_core::logs::EstRecord::Update(u) if u.sensor_id.as_deref() == Some("s"))));
}
