//! Subcommand arguments and their implementations.

use crate::config::{ms_to_us, FileConfig};
use crate::CliError;
use clap::{Args, Subcommand, ValueEnum};
use scenefuse_core::engine::EngineConfig;
use scenefuse_core::logs::{self, EstRecord, GtRecord};
use scenefuse_core::metrics::evaluate;
use scenefuse_core::sim::{self, GroundTruth, ScenarioConfig};
use scenefuse_net::{drive, serve, DriveError, DriveMode, DriveOptions, ServerConfig};
use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Args, Clone, Debug)]
pub struct GlobalArgs {
    /// Config file (TOML, or JSON); defaults to $SCENEFUSE_CONFIG.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log filter for the NDJSON log on stderr, e.g. "info" or "scenefuse_net=debug".
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ScenarioArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seconds of simulated time.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Sample rate, Hz.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub sensors: Option<usize>,
    #[arg(long)]
    pub targets: Option<usize>,
    /// Per-sample occlusion probability.
    #[arg(long)]
    pub p_block: Option<f64>,
    /// Translational noise sigma, millimeters.
    #[arg(long)]
    pub sigma_t_mm: Option<f64>,
    /// Rotational noise sigma, degrees.
    #[arg(long)]
    pub sigma_r_deg: Option<f64>,
    /// Keep sensors at their starting poses.
    #[arg(long)]
    pub static_sensors: bool,
}

impl ScenarioArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<ScenarioConfig, CliError> {
        let mut c = file.scenario();
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.duration {
            c.duration_s = v;
        }
        if let Some(v) = self.rate {
            c.rate_hz = v;
        }
        if let Some(v) = self.sensors {
            c.n_sensors = v;
        }
        if let Some(v) = self.targets {
            c.n_targets = v;
        }
        if let Some(v) = self.p_block {
            c.p_block = v;
        }
        if let Some(v) = self.sigma_t_mm {
            c.noise.sigma_t = v * 1e-3;
        }
        if let Some(v) = self.sigma_r_deg {
            c.noise.sigma_r = v.to_radians();
        }
        if self.static_sensors {
            c.sensors_static = true;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args, Clone, Debug, Default)]
pub struct ServeArgs {
    /// Sensor interface address.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Operator HTTP bridge address.
    #[arg(long)]
    pub operator_listen: Option<SocketAddr>,
    /// Do not start the operator bridge.
    #[arg(long)]
    pub no_operator: bool,
    #[arg(long)]
    pub fusion_hz: Option<f64>,
    /// Edges older than this are ignored, milliseconds.
    #[arg(long)]
    pub stale_ms: Option<f64>,
    /// Largest timestamp gap for two measurements to pair up, milliseconds.
    #[arg(long)]
    pub sync_ms: Option<f64>,
    /// Comma-separated target names; others are rejected.
    #[arg(long, value_delimiter = ',')]
    pub allow_list: Option<Vec<String>>,
    /// Reject measurements of targets not declared in HELLO or added by the operator.
    #[arg(long)]
    pub no_auto_register: bool,
    /// Session log (NDJSON) of received measurements and sent updates.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl ServeArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<ServerConfig, CliError> {
        let f = &file.server;
        let d = ServerConfig::default();
        let mut engine = EngineConfig::default();
        if let Some(ms) = self.stale_ms.or(f.stale_ms) {
            engine.graph.stale_after_us = ms_to_us(ms);
        }
        if let Some(ms) = self.sync_ms.or(f.sync_ms) {
            engine.graph.sync_window_us = ms_to_us(ms);
        }
        if engine.graph.stale_after_us <= 0 || engine.graph.sync_window_us < 0 {
            return Err(CliError::Usage("stale and sync windows must be positive".into()));
        }
        engine.allow_list = self
            .allow_list
            .clone()
            .or_else(|| f.allow_list.clone())
            .map(|v| v.into_iter().collect::<BTreeSet<_>>());
        engine.auto_register = !self.no_auto_register && f.auto_register.unwrap_or(true);
        let no_operator = self.no_operator || f.no_operator.unwrap_or(false);
        let config = ServerConfig {
            listen: self.listen.or(f.listen).unwrap_or(d.listen),
            operator_listen: if no_operator {
                None
            } else {
                self.operator_listen.or(f.operator_listen).or(d.operator_listen)
            },
            fusion_hz: self.fusion_hz.or(f.fusion_hz).unwrap_or(d.fusion_hz),
            engine,
            log_path: self.log.clone().or_else(|| f.log.clone()),
        };
        if !(config.fusion_hz > 0.0 && config.fusion_hz.is_finite()) {
            return Err(CliError::Usage(format!("--fusion-hz must be positive, got {}", config.fusion_hz)));
        }
        Ok(config)
    }
}

#[derive(Subcommand, Clone, Debug)]
pub enum SimCommand {
    /// Simulate ground-truth motion.
    Generate(GenerateArgs),
    /// Turn ground truth into a noisy, occluded measurement log.
    Observe(ObserveArgs),
    /// Replay a measurement log against a running server.
    Drive(DriveArgs),
}

#[derive(Args, Clone, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Ground-truth output (NDJSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct ObserveArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Ground truth from `generate`.
    #[arg(long)]
    pub gt: PathBuf,
    /// Measurement log output (NDJSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum ModeArg {
    Realtime,
    Max,
    Lockstep,
}

#[derive(Args, Clone, Debug)]
pub struct DriveArgs {
    /// Measurement log to replay.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub server: SocketAddr,
    #[arg(long, value_enum, default_value = "realtime")]
    pub mode: ModeArg,
    /// Time scale for realtime mode.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// Results log of received updates (NDJSON).
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// Drop one sensor's connection at a log time: SENSOR@T_US.
    #[arg(long, value_parser = parse_kill)]
    pub kill: Option<(String, i64)>,
    /// Sensor type announced in HELLO.
    #[arg(long, default_value = "generic")]
    pub sensor_type: String,
    /// Seconds to wait for any single server reply.
    #[arg(long, default_value_t = 10.0)]
    pub timeout_s: f64,
}

fn parse_kill(s: &str) -> Result<(String, i64), String> {
    let (sensor, t) = s.rsplit_once('@').ok_or("expected SENSOR@T_US")?;
    let t = t.parse().map_err(|e| format!("bad time {t:?}: {e}"))?;
    if sensor.is_empty() {
        return Err("empty sensor name".into());
    }
    Ok((sensor.to_owned(), t))
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// Measurement and/or results logs; may be repeated.
    #[arg(long, required = true)]
    pub est: Vec<PathBuf>,
    /// Ground truth log.
    #[arg(long)]
    pub gt: PathBuf,
    /// RTE interval, seconds.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Association tolerance, milliseconds.
    #[arg(long)]
    pub tolerance_ms: Option<f64>,
    /// Lag search half-width, milliseconds.
    #[arg(long)]
    pub max_lag_ms: Option<f64>,
    /// Drop lost samples instead of holding the last estimate.
    #[arg(long)]
    pub no_hold: bool,
    /// Directory for report.csv, table.txt and traj_xyz.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub(crate) fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)
}

fn input_err(path: &Path) -> impl FnOnce(logs::LogError) -> CliError + '_ {
    move |e| match e {
        logs::LogError::Io { source, .. } => CliError::Input {
            path: path.to_owned(),
            detail: source.to_string(),
        },
        other => CliError::Input {
            path: path.to_owned(),
            detail: other.to_string(),
        },
    }
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

/// Runs until SIGINT or SIGTERM, then closes every session with BYE.
pub fn run_serve(args: &ServeArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = args.resolve(file)?;
    runtime()?.block_on(async {
        let handle = serve(config).await.map_err(CliError::runtime)?;
        println!("sensor interface on {}", handle.addr);
        if let Some(op) = handle.operator_addr {
            println!("operator bridge on http://{op}");
        }
        tracing::info!(addr = %handle.addr, "serving");
        wait_for_signal().await;
        tracing::info!("shutting down");
        handle.shutdown().await;
        println!("stopped");
        Ok(())
    })
}

pub fn run_generate(args: &GenerateArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = args.scenario.resolve(file)?;
    let gt = sim::generate(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    logs::write_ndjson(&args.out, &gt.records).map_err(CliError::runtime)?;
    println!(
        "{} samples, mean target path {:.2} m -> {}",
        gt.records.len(),
        gt.mean_target_path_length(),
        args.out.display()
    );
    Ok(())
}

pub fn run_observe(args: &ObserveArgs, file: &FileConfig) -> Result<(), CliError> {
    let cfg = args.scenario.resolve(file)?;
    let records = logs::read_ground_truth(&args.gt).map_err(input_err(&args.gt))?;
    let entities: BTreeSet<&str> = records.iter().map(|r| r.entity.as_str()).collect();
    for name in cfg.sensor_names().iter().chain(&cfg.target_names()) {
        if !entities.contains(name.as_str()) {
            return Err(CliError::Usage(format!(
                "ground truth has no entity {name}; check --sensors/--targets"
            )));
        }
    }
    let gt = GroundTruth {
        records,
        path_lengths: Default::default(),
    };
    let meas = sim::observe(&gt, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    logs::write_measurements(&args.out, &meas).map_err(CliError::runtime)?;
    let blocked = meas.iter().filter(|m| !m.status).count();
    println!(
        "{} measurements, {} blocked -> {}",
        meas.len(),
        blocked,
        args.out.display()
    );
    Ok(())
}

pub fn run_drive(args: &DriveArgs) -> Result<(), CliError> {
    let log = logs::read_measurements(&args.log).map_err(input_err(&args.log))?;
    let mode = match args.mode {
        ModeArg::Realtime => DriveMode::Realtime { speed: args.speed },
        ModeArg::Max => DriveMode::Max,
        ModeArg::Lockstep => DriveMode::Lockstep,
    };
    if !(args.timeout_s > 0.0 && args.timeout_s.is_finite()) {
        return Err(CliError::Usage("--timeout-s must be positive".into()));
    }
    let opts = DriveOptions {
        mode,
        sensor_type: args.sensor_type.clone(),
        kill: args.kill.clone(),
        results_log: args.results.clone(),
        timeout: Duration::from_secs_f64(args.timeout_s),
    };
    let outcome = runtime()?.block_on(drive(args.server, &log, &opts));
    match outcome {
        Ok(out) => {
            println!(
                "sent {} measurements, received {} updates",
                out.sent.values().sum::<usize>(),
                out.updates.len()
            );
            Ok(())
        }
        Err(e @ (DriveError::Speed(_) | DriveError::KillInLockstep)) => Err(CliError::Usage(e.to_string())),
        Err(e) => Err(CliError::runtime(e)),
    }
}

pub fn read_estimates(paths: &[PathBuf]) -> Result<Vec<EstRecord>, CliError> {
    let mut est = Vec::new();
    for p in paths {
        est.extend(logs::read_estimates(p).map_err(input_err(p))?);
    }
    Ok(est)
}

pub fn read_gt(path: &Path) -> Result<Vec<GtRecord>, CliError> {
    logs::read_ground_truth(path).map_err(input_err(path))
}

pub fn run_eval(args: &EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    let mut opts = file.eval_options();
    if let Some(d) = args.delta {
        opts.delta_s = d;
    }
    if let Some(ms) = args.tolerance_ms {
        opts.tolerance_us = ms_to_us(ms);
    }
    if let Some(ms) = args.max_lag_ms {
        opts.max_lag_us = ms_to_us(ms);
    }
    if args.no_hold {
        opts.hold_lost = false;
    }
    if !(opts.delta_s > 0.0) || opts.tolerance_us < 0 || opts.max_lag_us < 0 {
        return Err(CliError::Usage("--delta must be positive and tolerances non-negative".into()));
    }
    let est = read_estimates(&args.est)?;
    let gt = read_gt(&args.gt)?;
    let evaluation = evaluate(&est, &gt, &opts).map_err(CliError::runtime)?;
    print!("{}", evaluation.table());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(output_err(dir))?;
        evaluation.write(dir).map_err(output_err(dir))?;
    }
    Ok(())
}
