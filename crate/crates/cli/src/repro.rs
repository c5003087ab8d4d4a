//! End-to-end reproduction run: simulate the desk-scale scenario, stream it
//! through a local server, evaluate, and check the headline claims.

use crate::commands::{runtime, ScenarioArgs};
use crate::config::FileConfig;
use crate::CliError;
use clap::Args;
use scenefuse_core::engine::{compare_updates, replay_offline, EngineConfig};
use scenefuse_core::logs::{self, EstRecord};
use scenefuse_core::metrics::{evaluate, Evaluation, FUSED};
use scenefuse_core::sim::{self, ScenarioConfig};
use scenefuse_core::wire::{Measurement, PoseUpdate};
use scenefuse_net::{drive, serve, DriveMode, DriveOptions, LatencySummary, ServerConfig};
use std::fmt;
use std::path::PathBuf;

pub const EQUIVALENCE_TOL: f64 = 1e-8;
pub const ATE_RATIO: f64 = 0.7;
pub const LOSS_RATIO: f64 = 0.5;
pub const LATENCY_P99_MS: f64 = 50.0;

#[derive(Args, Clone, Debug)]
pub struct ReproArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Output directory for logs and reports.
    #[arg(long, default_value = "repro-out")]
    pub out: PathBuf,
    /// Fusion rate of the server the scenario is streamed through.
    #[arg(long, default_value_t = 1000.0)]
    pub fusion_hz: f64,
    /// Seconds of the separate 3 sensor x 3 target latency run at 20 Hz; 0 skips it.
    #[arg(long, default_value_t = 3.0)]
    pub latency_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict}  {:<28} {}", self.name, self.detail)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_owned(),
        passed,
        detail,
    }
}

pub struct ReproOutcome {
    pub table: String,
    pub checks: Vec<Check>,
}

/// Two-sided 99.9 % normal-approximation interval for a binomial fraction.
pub fn binomial_interval(p: f64, n: usize) -> (f64, f64) {
    let half = 3.290_526_731 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

pub fn occlusion_check(log: &[Measurement], p_block: f64) -> Check {
    let n = log.len();
    let blocked = log.iter().filter(|m| !m.status).count();
    let frac = blocked as f64 / n.max(1) as f64;
    let (lo, hi) = binomial_interval(p_block, n);
    check(
        "occlusion rate",
        n > 0 && frac >= lo && frac <= hi,
        format!("{frac:.4} blocked of {n}, expected [{lo:.4}, {hi:.4}]"),
    )
}

/// Fused vs best single sensor, for every target pair.
pub fn fusion_checks(eval: &Evaluation) -> Vec<Check> {
    let mut checks = Vec::new();
    let pairs: Vec<&str> = eval
        .reports
        .iter()
        .filter(|r| r.source == FUSED)
        .map(|r| r.target.as_str())
        .collect();
    if pairs.is_empty() {
        checks.push(check("fusion benefit", false, "no fused trajectories".into()));
    }
    for pair in pairs {
        let fused = eval.get(FUSED, pair).and_then(|r| r.report.as_ref().ok());
        let singles: Vec<_> = eval
            .reports
            .iter()
            .filter(|r| r.source != FUSED && r.target == pair)
            .filter_map(|r| r.report.as_ref().ok())
            .collect();
        let best_ate = singles.iter().map(|r| r.ate_trans).fold(f64::INFINITY, f64::min);
        let best_loss = singles.iter().map(|r| r.loss_track_ratio).fold(f64::INFINITY, f64::min);
        match fused {
            Some(f) => {
                checks.push(check(
                    &format!("fused ATE {pair}"),
                    f.ate_trans < ATE_RATIO * best_ate,
                    format!(
                        "{:.3} mm vs best single {:.3} mm (ratio {:.3}, need < {ATE_RATIO})",
                        f.ate_trans * 1e3,
                        best_ate * 1e3,
                        f.ate_trans / best_ate
                    ),
                ));
                checks.push(check(
                    &format!("fused loss {pair}"),
                    f.loss_track_ratio < LOSS_RATIO * best_loss,
                    format!(
                        "{:.4} vs best single {:.4} (ratio {:.3}, need < {LOSS_RATIO})",
                        f.loss_track_ratio,
                        best_loss,
                        f.loss_track_ratio / best_loss
                    ),
                ));
            }
            None => checks.push(check(&format!("fused {pair}"), false, "fused evaluation failed".into())),
        }
    }
    checks
}

pub fn latency_check(summary: &LatencySummary) -> Check {
    check(
        "cycle latency p99",
        summary.count > 0 && summary.p99 < LATENCY_P99_MS,
        format!(
            "{:.3} ms over {} cycles (mean {:.3}, max {:.3}), need < {LATENCY_P99_MS}",
            summary.p99, summary.count, summary.mean, summary.max
        ),
    )
}

fn local_server(fusion_hz: f64) -> ServerConfig {
    ServerConfig {
        listen: ([127, 0, 0, 1], 0).into(),
        operator_listen: None,
        fusion_hz,
        engine: EngineConfig::default(),
        log_path: None,
    }
}

/// Streams `log` through a fresh loopback server in lockstep.
pub async fn stream_lockstep(log: &[Measurement], fusion_hz: f64) -> Result<(Vec<PoseUpdate>, LatencySummary), CliError> {
    let server = serve(local_server(fusion_hz)).await.map_err(CliError::runtime)?;
    let opts = DriveOptions {
        mode: DriveMode::Lockstep,
        ..DriveOptions::default()
    };
    let result = drive(server.addr, log, &opts).await;
    let latency = server.metrics().await.map(|m| m.latency_ms).unwrap_or_default();
    server.shutdown().await;
    Ok((result.map_err(CliError::runtime)?.updates, latency))
}

/// Realtime 3 x 3 run at 20 Hz, measuring the server's cycle latency.
pub async fn latency_run(seed: u64, duration_s: f64) -> Result<LatencySummary, CliError> {
    let cfg = ScenarioConfig {
        seed,
        duration_s,
        n_sensors: 3,
        n_targets: 3,
        ..ScenarioConfig::default()
    };
    let log = sim::observe(&sim::generate(&cfg).map_err(CliError::runtime)?, &cfg).map_err(CliError::runtime)?;
    let server = serve(local_server(20.0)).await.map_err(CliError::runtime)?;
    let opts = DriveOptions {
        mode: DriveMode::Realtime { speed: 1.0 },
        ..DriveOptions::default()
    };
    let result = drive(server.addr, &log, &opts).await;
    let latency = server.metrics().await.map(|m| m.latency_ms).unwrap_or_default();
    server.shutdown().await;
    result.map_err(CliError::runtime)?;
    Ok(latency)
}

pub fn run(args: &ReproArgs, file: &FileConfig) -> Result<ReproOutcome, CliError> {
    let cfg = args.scenario.resolve(file)?;
    if !(args.fusion_hz > 0.0 && args.fusion_hz.is_finite()) || args.latency_s < 0.0 {
        return Err(CliError::Usage("--fusion-hz must be positive and --latency-s non-negative".into()));
    }
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let simulate = |cfg: &ScenarioConfig| -> Result<_, CliError> {
        let gt = sim::generate(cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        let log = sim::observe(&gt, cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((gt, log))
    };
    tracing::info!(seed = cfg.seed, duration_s = cfg.duration_s, "simulating");
    let (gt, log) = simulate(&cfg)?;
    let (gt2, log2) = simulate(&cfg)?;
    let mut checks = vec![check(
        "deterministic simulation",
        gt == gt2 && log == log2,
        format!("{} ground-truth samples, {} measurements", gt.records.len(), log.len()),
    )];
    checks.push(occlusion_check(&log, cfg.p_block));

    let rt = runtime()?;
    tracing::info!(fusion_hz = args.fusion_hz, "streaming through local server");
    let (online, _) = rt.block_on(stream_lockstep(&log, args.fusion_hz))?;
    let offline = replay_offline(&log, &EngineConfig::default());
    let cmp = compare_updates(&online, &offline);
    checks.push(check(
        "online/offline equivalence",
        cmp.within(EQUIVALENCE_TOL),
        format!(
            "{} updates compared, max diff {:.2e} m / {:.2e} rad, {} unmatched, {} flag mismatches",
            cmp.compared, cmp.max_trans, cmp.max_rot, cmp.unmatched, cmp.flag_mismatches
        ),
    ));

    let mut est: Vec<EstRecord> = log.iter().cloned().map(EstRecord::Meas).collect();
    est.extend(online.iter().cloned().map(EstRecord::Update));
    let evaluation = evaluate(&est, &gt.records, &file.eval_options()).map_err(CliError::runtime)?;
    checks.extend(fusion_checks(&evaluation));

    if args.latency_s > 0.0 {
        tracing::info!("latency run");
        let latency = rt.block_on(latency_run(cfg.seed, args.latency_s))?;
        checks.push(latency_check(&latency));
    }

    let write = |name: &str, result: Result<(), logs::LogError>| {
        result.map_err(|e| CliError::Runtime(format!("cannot write {name}: {e}")))
    };
    write("gt.ndjson", logs::write_ndjson(&args.out.join("gt.ndjson"), &gt.records))?;
    write("meas.ndjson", logs::write_measurements(&args.out.join("meas.ndjson"), &log))?;
    write("results.ndjson", logs::write_updates(&args.out.join("results.ndjson"), &online))?;
    evaluation
        .write(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot write reports: {e}")))?;
    let lines: Vec<String> = checks.iter().map(|c| c.to_string()).collect();
    std::fs::write(args.out.join("checks.txt"), lines.join("\n") + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write checks.txt: {e}")))?;
    Ok(ReproOutcome {
        table: evaluation.table(),
        checks,
    })
}
