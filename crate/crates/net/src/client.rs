//! Sensor client: replays a measurement log against a running server, one
//! TCP session per sensor, and collects the pose updates it receives.

use scenefuse_core::logs::{self, LogError};
use scenefuse_core::wire::{Hello, Measurement, PoseUpdate, Query, QueryResult, WireMessage};
use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Barrier};
use tokio::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DriveMode {
    /// Send each measurement at its log time divided by `speed`.
    Realtime { speed: f64 },
    /// Send everything as fast as the connection allows.
    Max,
    /// One log timestamp at a time; every sensor waits for the first update
    /// that reflects all measurements of the step before moving on. Only
    /// those updates are recorded.
    Lockstep,
}

#[derive(Clone, Debug)]
pub struct DriveOptions {
    pub mode: DriveMode,
    pub sensor_type: String,
    /// Drop this sensor's connection without BYE once the log reaches `t_us`.
    pub kill: Option<(String, i64)>,
    pub results_log: Option<PathBuf>,
    /// Longest wait for any single server reply.
    pub timeout: Duration,
}

impl Default for DriveOptions {
    fn default() -> Self {
        Self {
            mode: DriveMode::Max,
            sensor_type: "generic".into(),
            kill: None,
            results_log: None,
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DriveOutcome {
    /// Received updates, tagged with the receiving sensor.
    pub updates: Vec<PoseUpdate>,
    /// Measurements sent per sensor.
    pub sent: BTreeMap<String, usize>,
    pub killed: Vec<String>,
}

#[derive(Debug, Error)]
pub enum DriveError {
    #[error("cannot connect to {addr}: {source}")]
    Connect {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server rejected {sensor}: {detail}")]
    Rejected { sensor: String, detail: String },
    #[error("connection of {sensor} lost")]
    ConnectionLost {
        sensor: String,
        outcome: Box<DriveOutcome>,
    },
    #[error("{sensor}: no reply within {timeout:?}")]
    Timeout { sensor: String, timeout: Duration },
    #[error("kill is not supported in lockstep mode")]
    KillInLockstep,
    #[error("realtime speed must be positive, got {0}")]
    Speed(f64),
    #[error(transparent)]
    Log(#[from] LogError),
}

struct Shared {
    barrier: Barrier,
    max_cycle: AtomicU64,
}

#[derive(Default)]
struct SensorResult {
    updates: Vec<PoseUpdate>,
    sent: usize,
    killed: bool,
}

enum Failure {
    Lost,
    Other(DriveError),
}

struct Conn {
    sensor: String,
    write: BufWriter<OwnedWriteHalf>,
    rx: mpsc::UnboundedReceiver<WireMessage>,
    reader: tokio::task::JoinHandle<()>,
    timeout: Duration,
    record_all: bool,
    result: SensorResult,
}

impl Conn {
    async fn send(&mut self, msg: &WireMessage) -> Result<(), Failure> {
        let mut line = msg.encode();
        line.push('\n');
        self.write.write_all(line.as_bytes()).await.map_err(|_| Failure::Lost)
    }

    async fn flush(&mut self) -> Result<(), Failure> {
        self.write.flush().await.map_err(|_| Failure::Lost)
    }

    async fn next(&mut self) -> Result<WireMessage, Failure> {
        let msg = tokio::time::timeout(self.timeout, self.rx.recv())
            .await
            .map_err(|_| {
                Failure::Other(DriveError::Timeout {
                    sensor: self.sensor.clone(),
                    timeout: self.timeout,
                })
            })?
            .ok_or(Failure::Lost)?;
        match &msg {
            WireMessage::Update(u) if self.record_all => self.record(u.clone()),
            WireMessage::Bye => return Err(Failure::Lost),
            _ => {}
        }
        Ok(msg)
    }

    fn record(&mut self, mut u: PoseUpdate) {
        u.sensor_id = Some(self.sensor.clone());
        self.result.updates.push(u);
    }

    async fn query(&mut self, target: &str) -> Result<QueryResult, Failure> {
        self.send(&WireMessage::Query(Query { target: target.to_owned() })).await?;
        self.flush().await?;
        loop {
            if let WireMessage::Result(r) = self.next().await? {
                return Ok(r);
            }
        }
    }

    async fn wait_cycle(&mut self, min_cycle: u64) -> Result<PoseUpdate, Failure> {
        loop {
            if let WireMessage::Update(u) = self.next().await? {
                if u.cycle >= min_cycle {
                    return Ok(u);
                }
            }
        }
    }

    /// Waits for an update computed after everything sent so far was ingested.
    async fn settle(&mut self, target: &str) -> Result<(), Failure> {
        let c = self.query(target).await?.cycle;
        self.wait_cycle(c + 2).await.map(|_| ())
    }
}

async fn connect(
    addr: SocketAddr,
    sensor: &str,
    targets: Vec<String>,
    opts: &DriveOptions,
) -> Result<Conn, Failure> {
    let stream = TcpStream::connect(addr).await.map_err(|source| {
        Failure::Other(DriveError::Connect { addr, source })
    })?;
    let _ = stream.set_nodelay(true);
    let (read, write) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    let reader = tokio::spawn(async move {
        let mut lines = BufReader::new(read).lines();
        while let Ok(Some(line)) = lines.next_line().await {
            match WireMessage::decode(&line) {
                Ok(msg) => {
                    if tx.send(msg).is_err() {
                        break;
                    }
                }
                Err(e) => tracing::warn!(error = %e, "undecodable server line"),
            }
        }
    });
    let mut conn = Conn {
        sensor: sensor.to_owned(),
        write: BufWriter::new(write),
        rx,
        reader,
        timeout: opts.timeout,
        record_all: opts.mode != DriveMode::Lockstep,
        result: SensorResult::default(),
    };
    let hello = Hello {
        sensor_id: sensor.to_owned(),
        sensor_type: opts.sensor_type.clone(),
        targets,
    };
    conn.send(&WireMessage::Hello(hello)).await?;
    conn.flush().await?;
    loop {
        match conn.next().await? {
            WireMessage::Welcome(_) => return Ok(conn),
            WireMessage::Error(e) => {
                return Err(Failure::Other(DriveError::Rejected {
                    sensor: sensor.to_owned(),
                    detail: format!("{}: {}", e.code, e.detail),
                }))
            }
            _ => {}
        }
    }
}

async fn barrier(shared: &Shared, sensor: &str, timeout: Duration) -> Result<(), Failure> {
    tokio::time::timeout(timeout, shared.barrier.wait())
        .await
        .map(|_| ())
        .map_err(|_| {
            Failure::Other(DriveError::Timeout {
                sensor: sensor.to_owned(),
                timeout,
            })
        })
}

async fn run_sensor(
    addr: SocketAddr,
    sensor: String,
    own: Vec<Measurement>,
    steps: Arc<Vec<i64>>,
    shared: Arc<Shared>,
    opts: DriveOptions,
) -> (SensorResult, Option<Failure>) {
    let targets: BTreeSet<String> = own.iter().map(|m| m.target.clone()).collect();
    let probe = targets.iter().next().cloned().unwrap_or_default();
    let mut conn = match connect(addr, &sensor, targets.into_iter().collect(), &opts).await {
        Ok(c) => c,
        Err(f) => return (SensorResult::default(), Some(f)),
    };
    let outcome = match opts.mode {
        DriveMode::Lockstep => lockstep(&mut conn, &own, &steps, &shared, &probe).await,
        DriveMode::Max | DriveMode::Realtime { .. } => stream(&mut conn, &own, &opts, steps[0], &probe).await,
    };
    conn.reader.abort();
    (conn.result, outcome.err())
}

async fn lockstep(
    conn: &mut Conn,
    own: &[Measurement],
    steps: &[i64],
    shared: &Shared,
    probe: &str,
) -> Result<(), Failure> {
    let mut k = 0;
    for &t in steps {
        while k < own.len() && own[k].t_us == t {
            conn.send(&WireMessage::Meas(own[k].clone())).await?;
            conn.result.sent += 1;
            k += 1;
        }
        let c = conn.query(probe).await?.cycle;
        shared.max_cycle.fetch_max(c, Ordering::SeqCst);
        barrier(shared, &conn.sensor, conn.timeout).await?;
        // any cycle started after every sensor's query saw all of this step
        let target = shared.max_cycle.load(Ordering::SeqCst) + 2;
        let u = conn.wait_cycle(target).await?;
        conn.record(u);
        barrier(shared, &conn.sensor, conn.timeout).await?;
    }
    conn.send(&WireMessage::Bye).await?;
    conn.flush().await
}

async fn stream(
    conn: &mut Conn,
    own: &[Measurement],
    opts: &DriveOptions,
    t0: i64,
    probe: &str,
) -> Result<(), Failure> {
    let start = Instant::now();
    let kill_at = opts
        .kill
        .as_ref()
        .filter(|(s, _)| *s == conn.sensor)
        .map(|(_, t)| *t);
    for m in own {
        if kill_at.is_some_and(|t| m.t_us >= t) {
            conn.result.killed = true;
            // dropping the socket without BYE is the point
            let _ = conn.flush().await;
            return Ok(());
        }
        if let DriveMode::Realtime { speed } = opts.mode {
            let offset = Duration::from_secs_f64((m.t_us - t0).max(0) as f64 * 1e-6 / speed);
            tokio::time::sleep_until(start + offset).await;
            conn.send(&WireMessage::Meas(m.clone())).await?;
            conn.flush().await?;
        } else {
            conn.send(&WireMessage::Meas(m.clone())).await?;
        }
        conn.result.sent += 1;
        while let Ok(msg) = conn.rx.try_recv() {
            match msg {
                WireMessage::Update(u) => conn.record(u),
                WireMessage::Bye => return Err(Failure::Lost),
                _ => {}
            }
        }
    }
    conn.flush().await?;
    conn.settle(probe).await?;
    conn.send(&WireMessage::Bye).await?;
    conn.flush().await
}

/// Replays `log` through the server at `addr`. Sensors and their targets are
/// taken from the log. On connection loss the partial outcome is returned in
/// the error and still written to the results log.
pub async fn drive(
    addr: SocketAddr,
    log: &[Measurement],
    opts: &DriveOptions,
) -> Result<DriveOutcome, DriveError> {
    match opts.mode {
        DriveMode::Lockstep if opts.kill.is_some() => return Err(DriveError::KillInLockstep),
        DriveMode::Realtime { speed } if !(speed > 0.0 && speed.is_finite()) => {
            return Err(DriveError::Speed(speed))
        }
        _ => {}
    }
    if log.is_empty() {
        return Ok(DriveOutcome::default());
    }
    let mut by_sensor: BTreeMap<String, Vec<Measurement>> = BTreeMap::new();
    for m in log {
        by_sensor.entry(m.sensor_id.clone()).or_default().push(m.clone());
    }
    let mut steps: Vec<i64> = Vec::new();
    for m in log {
        if steps.last() != Some(&m.t_us) {
            steps.push(m.t_us);
        }
    }
    let steps = Arc::new(steps);
    let shared = Arc::new(Shared {
        barrier: Barrier::new(by_sensor.len()),
        max_cycle: AtomicU64::new(0),
    });
    let tasks: Vec<_> = by_sensor
        .into_iter()
        .map(|(sensor, own)| {
            let task = tokio::spawn(run_sensor(
                addr,
                sensor.clone(),
                own,
                steps.clone(),
                shared.clone(),
                opts.clone(),
            ));
            (sensor, task)
        })
        .collect();

    let mut outcome = DriveOutcome::default();
    let mut lost = None;
    let mut other = None;
    for (sensor, task) in tasks {
        let (result, failure) = match task.await {
            Ok(r) => r,
            Err(_) => (SensorResult::default(), Some(Failure::Lost)),
        };
        outcome.updates.extend(result.updates);
        outcome.sent.insert(sensor.clone(), result.sent);
        if result.killed {
            outcome.killed.push(sensor.clone());
        }
        match failure {
            Some(Failure::Lost) if lost.is_none() => lost = Some(sensor),
            Some(Failure::Other(e)) if other.is_none() => other = Some(e),
            _ => {}
        }
    }
    outcome
        .updates
        .sort_by(|a, b| (a.cycle, &a.sensor_id).cmp(&(b.cycle, &b.sensor_id)));
    if let Some(path) = &opts.results_log {
        logs::write_updates(path, &outcome.updates)?;
    }
    if let Some(e) = other {
        return Err(e);
    }
    if let Some(sensor) = lost {
        return Err(DriveError::ConnectionLost {
            sensor,
            outcome: Box::new(outcome),
        });
    }
    Ok(outcome)
}
