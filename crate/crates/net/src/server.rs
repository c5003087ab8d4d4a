//! Fusion server.
//!
//! Task layout: one reader and one writer task per TCP session, a single
//! actor task that owns the [`FusionEngine`] and applies every mutation in
//! queue order, and a fusion task that asks the actor for a snapshot on each
//! tick, solves it, and fans the updates out to the session writers. Nothing
//! holds a lock while writing to a socket.

use crate::bridge;
use crate::stats::{LatencyWindow, MetricsReport};
use scenefuse_core::engine::{default_info_for, fuse, AnchorError, EngineConfig, FusionEngine, IngestError};
use scenefuse_core::graph::{GraphError, NodeId, SnapshotExport};
use scenefuse_core::info::InfoMatrix;
use scenefuse_core::pgo::{ReportExport, SolveOptions, SolveReport};
use scenefuse_core::wire::{Hello, Measurement, QueryResult, WireError, WireMessage, Welcome};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot, watch, Notify};
use tokio::task::JoinHandle;

/// Per-session outbound queue depth; updates beyond it are dropped for that
/// session rather than stalling the fusion loop.
const OUTBOX_DEPTH: usize = 256;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub operator_listen: Option<SocketAddr>,
    pub fusion_hz: f64,
    pub engine: EngineConfig,
    /// NDJSON session log: received measurements and sent updates.
    pub log_path: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: ([127, 0, 0, 1], 7878).into(),
            operator_listen: Some(([127, 0, 0, 1], 7879).into()),
            fusion_hz: 20.0,
            engine: EngineConfig::default(),
            log_path: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot open session log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fusion_hz must be positive, got {0}")]
    FusionRate(f64),
}

#[derive(Debug)]
pub(crate) enum Outbound {
    Line(String),
    Close,
}

struct Session {
    sensor: String,
    default_info: InfoMatrix,
    outbox: mpsc::Sender<Outbound>,
    close: Arc<Notify>,
}

pub(crate) struct CycleInput {
    cycle: u64,
    snapshot: scenefuse_core::graph::GraphSnapshot,
    preferred: Vec<Option<NodeId>>,
    opts: SolveOptions,
    receivers: Vec<(NodeId, mpsc::Sender<Outbound>)>,
}

/// Reasons the bridge reports back for node and anchor commands.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeCommandError {
    #[error("unknown node {0}")]
    Unknown(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) enum Command {
    Hello {
        hello: Hello,
        outbox: mpsc::Sender<Outbound>,
        close: Arc<Notify>,
        reply: oneshot::Sender<Result<u64, (String, String)>>,
    },
    Measurement {
        session: u64,
        m: Measurement,
    },
    Query {
        session: u64,
        target: String,
        reply: oneshot::Sender<Option<QueryResult>>,
    },
    Leave {
        session: u64,
    },
    ProtocolError,
    BeginCycle {
        reply: oneshot::Sender<CycleInput>,
    },
    EndCycle {
        report: Option<SolveReport>,
        latency_ms: f64,
        drops: u64,
    },
    Graph {
        reply: oneshot::Sender<SnapshotExport>,
    },
    Report {
        reply: oneshot::Sender<Option<ReportExport>>,
    },
    AddNode {
        name: String,
        reply: oneshot::Sender<Result<(), NodeCommandError>>,
    },
    RemoveNode {
        name: String,
        reply: oneshot::Sender<Result<(), NodeCommandError>>,
    },
    ForceAnchor {
        name: String,
        reply: oneshot::Sender<Result<(), NodeCommandError>>,
    },
    Metrics {
        reply: oneshot::Sender<MetricsReport>,
    },
}

/// Bridge push payload, one per fusion cycle.
#[derive(Serialize)]
struct Frame<'a> {
    cycle: u64,
    snapshot: &'a SnapshotExport,
    report: Option<ReportExport>,
}

struct Actor {
    engine: FusionEngine,
    sessions: BTreeMap<u64, Session>,
    next_session: u64,
    latency: LatencyWindow,
    broadcast_drops: u64,
    protocol_errors: u64,
    log: Option<mpsc::UnboundedSender<String>>,
}

impl Actor {
    fn session_of(&self, sensor: &str) -> Option<u64> {
        self.sessions
            .iter()
            .find(|(_, s)| s.sensor == sensor)
            .map(|(id, _)| *id)
    }

    fn close_session(&mut self, id: u64) {
        if let Some(s) = self.sessions.remove(&id) {
            let _ = s.outbox.try_send(Outbound::Line(WireMessage::Bye.encode()));
            let _ = s.outbox.try_send(Outbound::Close);
            s.close.notify_one();
            let _ = self.engine.remove(&s.sensor);
        }
    }

    fn fail_session(&mut self, id: u64, code: &str, detail: String) {
        self.protocol_errors += 1;
        if let Some(s) = self.sessions.remove(&id) {
            let _ = s.outbox.try_send(Outbound::Line(WireMessage::error(code, detail).encode()));
            let _ = s.outbox.try_send(Outbound::Close);
            s.close.notify_one();
            let _ = self.engine.remove(&s.sensor);
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Hello {
                hello,
                outbox,
                close,
                reply,
            } => {
                if hello.sensor_id.is_empty() {
                    let _ = reply.send(Err(("invalid_hello".into(), "empty sensor_id".into())));
                    return;
                }
                if let Err(e) = self.engine.register_sensor(&hello.sensor_id) {
                    let code = match e {
                        GraphError::DuplicateNode(_) => "duplicate_sensor",
                        _ => "invalid_hello",
                    };
                    let _ = reply.send(Err((code.into(), e.to_string())));
                    return;
                }
                for t in &hello.targets {
                    // already-known targets are fine; disallowed ones surface on use
                    let _ = self.engine.register_target(t);
                }
                let id = self.next_session;
                self.next_session += 1;
                self.sessions.insert(
                    id,
                    Session {
                        sensor: hello.sensor_id.clone(),
                        default_info: default_info_for(&hello.sensor_type),
                        outbox,
                        close,
                    },
                );
                tracing::info!(sensor = %hello.sensor_id, session = id, "session registered");
                let _ = reply.send(Ok(id));
            }
            Command::Measurement { session, m } => {
                let Some(s) = self.sessions.get(&session) else { return };
                if m.sensor_id != s.sensor {
                    let detail = format!("session is {}, measurement claims {}", s.sensor, m.sensor_id);
                    self.fail_session(session, "sensor_mismatch", detail);
                    return;
                }
                let info = s.default_info;
                match self.engine.ingest(&m, &info) {
                    Ok(_) => {
                        if let Some(log) = &self.log {
                            let _ = log.send(WireMessage::Meas(m).encode());
                        }
                    }
                    Err(e) => {
                        let code = match e {
                            IngestError::UnknownTarget(_) => "unknown_target",
                            IngestError::InvalidInfo(_) => "invalid_info",
                            _ => "rejected",
                        };
                        let _ = s
                            .outbox
                            .try_send(Outbound::Line(WireMessage::error(code, e.to_string()).encode()));
                    }
                }
            }
            Command::Query { session, target, reply } => {
                let result = self
                    .sessions
                    .get(&session)
                    .map(|s| self.engine.query(&s.sensor, &target));
                let _ = reply.send(result);
            }
            Command::Leave { session } => {
                if let Some(s) = self.sessions.remove(&session) {
                    tracing::info!(sensor = %s.sensor, session, "session closed");
                    let _ = self.engine.remove(&s.sensor);
                }
            }
            Command::ProtocolError => self.protocol_errors += 1,
            Command::BeginCycle { reply } => {
                let receivers = self
                    .sessions
                    .values()
                    .map(|s| (NodeId::active(&s.sensor), s.outbox.clone()))
                    .collect();
                let _ = reply.send(CycleInput {
                    cycle: self.engine.completed_cycles() + 1,
                    snapshot: self.engine.snapshot(),
                    preferred: self.engine.preferred_anchors(),
                    opts: self.engine.config().solve,
                    receivers,
                });
            }
            Command::EndCycle {
                report,
                latency_ms,
                drops,
            } => {
                self.engine.record(report);
                self.latency.push(latency_ms);
                self.broadcast_drops += drops;
            }
            Command::Graph { reply } => {
                let _ = reply.send(self.engine.snapshot().export());
            }
            Command::Report { reply } => {
                let _ = reply.send(self.engine.last_report().map(|r| r.export()));
            }
            Command::AddNode { name, reply } => {
                let r = match self.engine.register_target(&name) {
                    Ok(()) => Ok(()),
                    Err(IngestError::Graph(GraphError::DuplicateNode(_))) => {
                        Err(NodeCommandError::Conflict(format!("node {name} already exists")))
                    }
                    Err(e) => Err(NodeCommandError::Invalid(e.to_string())),
                };
                let _ = reply.send(r);
            }
            Command::RemoveNode { name, reply } => {
                let r = match self.session_of(&name) {
                    Some(id) => {
                        self.close_session(id);
                        Ok(())
                    }
                    None => self
                        .engine
                        .remove(&name)
                        .map(|_| ())
                        .map_err(|_| NodeCommandError::Unknown(name.clone())),
                };
                let _ = reply.send(r);
            }
            Command::ForceAnchor { name, reply } => {
                let r = self.engine.force_anchor(&name).map_err(|e| match e {
                    AnchorError::Unknown(n) => NodeCommandError::Unknown(n),
                    e @ AnchorError::Ineligible(_) => NodeCommandError::Conflict(e.to_string()),
                });
                let _ = reply.send(r);
            }
            Command::Metrics { reply } => {
                let _ = reply.send(MetricsReport {
                    cycles: self.engine.completed_cycles(),
                    dropped_stale: self.engine.dropped_stale(),
                    sessions: self.sessions.len(),
                    broadcast_drops: self.broadcast_drops,
                    protocol_errors: self.protocol_errors,
                    latency_ms: self.latency.summary(),
                });
            }
        }
    }

    fn shutdown(&mut self) {
        let ids: Vec<u64> = self.sessions.keys().copied().collect();
        for id in ids {
            self.close_session(id);
        }
    }
}

/// Handle to a running server.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub operator_addr: Option<SocketAddr>,
    commands: mpsc::Sender<Command>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn metrics(&self) -> Option<MetricsReport> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(Command::Metrics { reply: tx }).await.ok()?;
        rx.await.ok()
    }

    /// Stops accepting, closes every session with BYE and waits for all
    /// server tasks to finish.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

fn now_us() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as i64)
        .unwrap_or(0)
}

/// Binds the sensor and operator listeners and starts serving.
pub async fn serve(config: ServerConfig) -> Result<ServerHandle, ServerError> {
    if !(config.fusion_hz > 0.0 && config.fusion_hz.is_finite()) {
        return Err(ServerError::FusionRate(config.fusion_hz));
    }
    let listener = TcpListener::bind(config.listen).await.map_err(|source| ServerError::Bind {
        addr: config.listen,
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| ServerError::Bind {
        addr: config.listen,
        source,
    })?;
    let operator = match config.operator_listen {
        Some(a) => {
            let l = TcpListener::bind(a)
                .await
                .map_err(|source| ServerError::Bind { addr: a, source })?;
            let bound = l.local_addr().map_err(|source| ServerError::Bind { addr: a, source })?;
            Some((l, bound))
        }
        None => None,
    };
    let log = match &config.log_path {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|source| ServerError::Log {
                path: path.clone(),
                source,
            })?;
            let (tx, rx) = mpsc::unbounded_channel();
            Some((tx, spawn_logger(file, rx)))
        }
        None => None,
    };

    let (cmd_tx, cmd_rx) = mpsc::channel::<Command>(4096);
    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let (frames, _) = broadcast::channel::<Arc<str>>(64);
    let mut tasks = Vec::new();

    let actor = Actor {
        engine: FusionEngine::new(config.engine.clone()),
        sessions: BTreeMap::new(),
        next_session: 1,
        latency: LatencyWindow::new(10_000),
        broadcast_drops: 0,
        protocol_errors: 0,
        log: log.as_ref().map(|(tx, _)| tx.clone()),
    };
    tasks.push(tokio::spawn(run_actor(actor, cmd_rx, shutdown_rx.clone())));
    tasks.push(tokio::spawn(run_fusion(
        cmd_tx.clone(),
        Duration::from_secs_f64(1.0 / config.fusion_hz),
        frames.clone(),
        log.as_ref().map(|(tx, _)| tx.clone()),
        shutdown_rx.clone(),
    )));
    tasks.push(tokio::spawn(run_acceptor(listener, cmd_tx.clone(), shutdown_rx.clone())));
    let operator_addr = match operator {
        Some((l, bound)) => {
            let router = bridge::router(bridge::BridgeState {
                commands: cmd_tx.clone(),
                frames: frames.clone(),
                shutdown: shutdown_rx.clone(),
            });
            let mut stop = shutdown_rx.clone();
            tasks.push(tokio::spawn(async move {
                let _ = axum::serve(l, router)
                    .with_graceful_shutdown(async move {
                        let _ = stop.wait_for(|s| *s).await;
                    })
                    .await;
            }));
            Some(bound)
        }
        None => None,
    };
    if let Some((tx, handle)) = log {
        // the logger stops once every sender (actor, fusion task) is gone
        drop(tx);
        tasks.push(handle);
    }
    Ok(ServerHandle {
        addr,
        operator_addr,
        commands: cmd_tx,
        shutdown: shutdown_tx,
        tasks,
    })
}

fn spawn_logger(file: std::fs::File, mut rx: mpsc::UnboundedReceiver<String>) -> JoinHandle<()> {
    tokio::task::spawn_blocking(move || {
        let mut w = std::io::BufWriter::new(file);
        while let Some(line) = rx.blocking_recv() {
            if writeln!(w, "{line}").is_err() {
                break;
            }
        }
        let _ = w.flush();
    })
}

async fn run_actor(mut actor: Actor, mut rx: mpsc::Receiver<Command>, mut stop: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            biased;
            _ = stop.wait_for(|s| *s) => break,
            cmd = rx.recv() => match cmd {
                Some(cmd) => actor.handle(cmd),
                None => break,
            },
        }
    }
    actor.shutdown();
}

async fn run_fusion(
    commands: mpsc::Sender<Command>,
    period: Duration,
    frames: broadcast::Sender<Arc<str>>,
    log: Option<mpsc::UnboundedSender<String>>,
    mut stop: watch::Receiver<bool>,
) {
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            _ = ticker.tick() => {}
        }
        let (tx, rx) = oneshot::channel();
        if commands.send(Command::BeginCycle { reply: tx }).await.is_err() {
            break;
        }
        let Ok(input) = rx.await else { break };
        let started = Instant::now();
        let receivers: Vec<NodeId> = input.receivers.iter().map(|(id, _)| id.clone()).collect();
        let preferred: Vec<Option<&NodeId>> = input.preferred.iter().map(|p| p.as_ref()).collect();
        let out = fuse(input.snapshot, &preferred, &input.opts, &receivers, input.cycle);
        let lines: Vec<(usize, String)> = input
            .receivers
            .iter()
            .enumerate()
            .filter_map(|(k, (id, _))| {
                out.updates
                    .get(id.name())
                    .map(|u| (k, WireMessage::Update(u.clone()).encode()))
            })
            .collect();
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;

        let mut drops = 0;
        for (k, line) in lines {
            if input.receivers[k].1.try_send(Outbound::Line(line)).is_err() {
                drops += 1;
            }
        }
        if let Some(log) = &log {
            for (sensor, u) in &out.updates {
                let mut u = u.clone();
                u.sensor_id = Some(sensor.clone());
                let _ = log.send(WireMessage::Update(u).encode());
            }
        }
        if frames.receiver_count() > 0 {
            let frame = Frame {
                cycle: out.cycle,
                snapshot: &out.snapshot.export(),
                report: out.report.as_ref().map(|r| r.export()),
            };
            if let Ok(json) = serde_json::to_string(&frame) {
                let _ = frames.send(json.into());
            }
        }
        let done = Command::EndCycle {
            report: out.report,
            latency_ms,
            drops,
        };
        if commands.send(done).await.is_err() {
            break;
        }
    }
}

async fn run_acceptor(listener: TcpListener, commands: mpsc::Sender<Command>, mut stop: watch::Receiver<bool>) {
    let session_stop = stop.clone();
    loop {
        tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    tokio::spawn(run_session(stream, peer, commands.clone(), session_stop.clone()));
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            },
        }
    }
}

async fn run_writer(mut write: tokio::net::tcp::OwnedWriteHalf, mut rx: mpsc::Receiver<Outbound>) {
    while let Some(msg) = rx.recv().await {
        match msg {
            Outbound::Line(mut line) => {
                line.push('\n');
                if write.write_all(line.as_bytes()).await.is_err() {
                    break;
                }
            }
            Outbound::Close => break,
        }
    }
    let _ = write.shutdown().await;
}

async fn run_session(stream: TcpStream, peer: SocketAddr, commands: mpsc::Sender<Command>, mut stop: watch::Receiver<bool>) {
    let (read, write) = stream.into_split();
    let (out_tx, out_rx) = mpsc::channel(OUTBOX_DEPTH);
    let writer = tokio::spawn(run_writer(write, out_rx));
    let close = Arc::new(Notify::new());
    let mut lines = BufReader::new(read).lines();
    let mut session: Option<u64> = None;
    let send = |msg: WireMessage| {
        let tx = out_tx.clone();
        async move {
            let _ = tx.send(Outbound::Line(msg.encode())).await;
        }
    };

    loop {
        let line = tokio::select! {
            _ = close.notified() => break,
            _ = stop.wait_for(|s| *s) => None,
            line = lines.next_line() => Some(line),
        };
        let Some(line) = line else {
            // registered sessions get BYE from the actor; let it land first
            if session.is_some() {
                let _ = tokio::time::timeout(Duration::from_secs(1), close.notified()).await;
            }
            break;
        };
        let line = match line {
            Ok(Some(l)) => l,
            Ok(None) | Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let msg = match WireMessage::decode(&line) {
            Ok(m) => m,
            Err(e @ WireError::UnknownType(_)) => {
                let _ = commands.send(Command::ProtocolError).await;
                send(WireMessage::error(e.code(), e.to_string())).await;
                continue;
            }
            Err(e) => {
                let _ = commands.send(Command::ProtocolError).await;
                send(WireMessage::error(e.code(), e.to_string())).await;
                break;
            }
        };
        match (msg, session) {
            (WireMessage::Hello(hello), None) => {
                let (tx, rx) = oneshot::channel();
                let cmd = Command::Hello {
                    hello,
                    outbox: out_tx.clone(),
                    close: close.clone(),
                    reply: tx,
                };
                if commands.send(cmd).await.is_err() {
                    break;
                }
                match rx.await {
                    Ok(Ok(id)) => {
                        session = Some(id);
                        send(WireMessage::Welcome(Welcome { server_time_us: now_us() })).await;
                    }
                    Ok(Err((code, detail))) => {
                        send(WireMessage::error(&code, detail)).await;
                        break;
                    }
                    Err(_) => break,
                }
            }
            (WireMessage::Meas(m), Some(id)) => {
                if commands.send(Command::Measurement { session: id, m }).await.is_err() {
                    break;
                }
            }
            (WireMessage::Query(q), Some(id)) => {
                let (tx, rx) = oneshot::channel();
                let cmd = Command::Query {
                    session: id,
                    target: q.target,
                    reply: tx,
                };
                if commands.send(cmd).await.is_err() {
                    break;
                }
                match rx.await {
                    Ok(Some(result)) => send(WireMessage::Result(result)).await,
                    _ => break,
                }
            }
            (WireMessage::Bye, _) => break,
            (other, _) => {
                let _ = commands.send(Command::ProtocolError).await;
                let kind = other.encode();
                send(WireMessage::error("protocol", format!("unexpected message {kind}"))).await;
                break;
            }
        }
    }
    if let Some(id) = session {
        let _ = commands.send(Command::Leave { session: id }).await;
    }
    let _ = out_tx.send(Outbound::Close).await;
    drop(out_tx);
    let _ = writer.await;
    tracing::debug!(%peer, "connection finished");
}
