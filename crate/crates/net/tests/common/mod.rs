#![allow(dead_code)]

use scenefuse_core::se3::Pose;
use scenefuse_core::wire::{Hello, Measurement, PoseUpdate, Query, QueryResult, WireMessage};
use scenefuse_net::{serve, ServerConfig, ServerHandle};
use std::net::SocketAddr;
use std::time::Duration;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;

pub const WAIT: Duration = Duration::from_secs(5);

pub async fn start(fusion_hz: f64) -> ServerHandle {
    start_with(|c| c.fusion_hz = fusion_hz).await
}

pub async fn start_with(edit: impl FnOnce(&mut ServerConfig)) -> ServerHandle {
    let mut config = ServerConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        operator_listen: Some("127.0.0.1:0".parse().unwrap()),
        ..ServerConfig::default()
    };
    edit(&mut config);
    serve(config).await.unwrap()
}

pub fn url(server: &ServerHandle, path: &str) -> String {
    format!("http://{}{}", server.operator_addr.unwrap(), path)
}

pub async fn get_json(server: &ServerHandle, path: &str) -> serde_json::Value {
    reqwest::get(url(server, path)).await.unwrap().json().await.unwrap()
}

pub fn meas(sensor: &str, target: &str, t_us: i64, pose: Pose, status: bool) -> Measurement {
    Measurement {
        sensor_id: sensor.into(),
        target: target.into(),
        t_us,
        pose,
        status,
        info_diag: None,
    }
}

/// Raw protocol client for poking at the server line by line.
pub struct LineClient {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

impl LineClient {
    pub async fn connect(addr: SocketAddr) -> Self {
        let (read, write) = TcpStream::connect(addr).await.unwrap().into_split();
        Self {
            lines: BufReader::new(read).lines(),
            write,
        }
    }

    pub async fn hello(addr: SocketAddr, sensor: &str, targets: &[&str]) -> Self {
        let mut c = Self::connect(addr).await;
        c.send(&WireMessage::Hello(Hello {
            sensor_id: sensor.into(),
            sensor_type: "generic".into(),
            targets: targets.iter().map(|t| t.to_string()).collect(),
        }))
        .await;
        match c.recv().await {
            Some(WireMessage::Welcome(_)) => c,
            other => panic!("expected welcome, got {other:?}"),
        }
    }

    pub async fn send_raw(&mut self, line: &str) {
        self.write.write_all(line.as_bytes()).await.unwrap();
        self.write.write_all(b"\n").await.unwrap();
    }

    pub async fn send(&mut self, msg: &WireMessage) {
        self.send_raw(&msg.encode()).await;
    }

    pub async fn send_meas(&mut self, m: Measurement) {
        self.send(&WireMessage::Meas(m)).await;
    }

    /// Next message, `None` on EOF. Panics on timeout.
    pub async fn recv(&mut self) -> Option<WireMessage> {
        let line = tokio::time::timeout(WAIT, self.lines.next_line())
            .await
            .expect("server reply timed out")
            .ok()??;
        Some(WireMessage::decode(&line).unwrap())
    }

    pub async fn query(&mut self, target: &str) -> QueryResult {
        self.send(&WireMessage::Query(Query { target: target.into() })).await;
        loop {
            match self.recv().await {
                Some(WireMessage::Result(r)) => return r,
                Some(_) => {}
                None => panic!("closed while waiting for query result"),
            }
        }
    }

    pub async fn update_from(&mut self, min_cycle: u64) -> PoseUpdate {
        loop {
            match self.recv().await {
                Some(WireMessage::Update(u)) if u.cycle >= min_cycle => return u,
                Some(_) => {}
                None => panic!("closed while waiting for update"),
            }
        }
    }

    /// First update computed after everything sent so far was ingested.
    pub async fn settled_update(&mut self, probe: &str) -> PoseUpdate {
        let c = self.query(probe).await.cycle;
        self.update_from(c + 2).await
    }

    /// Skips updates until something else (or EOF) arrives.
    pub async fn recv_non_update(&mut self) -> Option<WireMessage> {
        loop {
            match self.recv().await {
                Some(WireMessage::Update(_)) => {}
                other => return other,
            }
        }
    }
}
