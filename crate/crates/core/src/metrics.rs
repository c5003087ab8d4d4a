//! Trajectory evaluation: ATE after rigid alignment, RTE over a fixed
//! interval, loss-track ratio and top-percentile errors.
//!
//! Evaluation works on intra-layer relative trajectories `P_a^-1 P_b`
//! between pairs of targets, which every source (single sensor or fused) can
//! express without knowing where the sensors are.

use crate::logs::{EstRecord, GtRecord};
use crate::se3::{umeyama_align, Pose, Se3Error};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const DEFAULT_TOLERANCE_US: i64 = 20_000;
pub const DEFAULT_MAX_LAG_US: i64 = 200_000;
pub const FUSED: &str = "fused";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("trajectory geometry is degenerate (rank {rank})")]
    DegenerateGeometry { rank: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("no overlap between estimate and ground truth: {0}")]
    NoOverlap(String),
}

impl From<Se3Error> for MetricsError {
    fn from(e: Se3Error) -> Self {
        match e {
            Se3Error::DegenerateGeometry { rank } => MetricsError::DegenerateGeometry { rank },
            Se3Error::TooFewPoses(n) => MetricsError::TooFewSamples { needed: 3, got: n },
            other => MetricsError::NoOverlap(other.to_string()),
        }
    }
}

/// Translational and rotational magnitude of an error pose, via its twist.
pub fn error_norms(e: &Pose) -> (f64, f64) {
    match e.log() {
        Ok(xi) => (xi.rho.norm(), xi.phi.norm()),
        // rotation within 1e-6 of pi: the twist is ill-conditioned there
        Err(_) => (e.translation().norm(), e.angle()),
    }
}

/// Nearest-neighbor matching of `est_times + lag` to `gt_times` (both sorted)
/// within `tolerance_us`. Each ground-truth sample is used at most once; on a
/// collision the closer estimate wins. Returns (est index, gt index) pairs in
/// increasing order.
pub fn associate(est_times: &[i64], gt_times: &[i64], tolerance_us: i64, lag_us: i64) -> Vec<(usize, usize)> {
    let mut best: BTreeMap<usize, (i64, usize)> = BTreeMap::new();
    for (i, &t) in est_times.iter().enumerate() {
        let t = t + lag_us;
        let k = gt_times.partition_point(|&g| g < t);
        let nearest = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&j| j < gt_times.len())
            .min_by_key(|&j| ((gt_times[j] - t).abs(), j));
        let Some(j) = nearest else { continue };
        let gap = (gt_times[j] - t).abs();
        if gap > tolerance_us {
            continue;
        }
        match best.get(&j) {
            Some(&(g, _)) if g <= gap => {}
            _ => {
                best.insert(j, (gap, i));
            }
        }
    }
    best.into_iter().map(|(j, (_, i))| (i, j)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub estimated: Vec<(i64, Pose)>,
    pub ground_truth: Vec<(i64, Pose)>,
    /// (estimated index, ground-truth index), increasing.
    pub association: Vec<(usize, usize)>,
    pub unmatched: usize,
}

impl TrajectoryPair {
    pub fn new(estimated: Vec<(i64, Pose)>, ground_truth: Vec<(i64, Pose)>, tolerance_us: i64, lag_us: i64) -> Self {
        let et: Vec<i64> = estimated.iter().map(|s| s.0).collect();
        let gt: Vec<i64> = ground_truth.iter().map(|s| s.0).collect();
        let association = associate(&et, &gt, tolerance_us, lag_us);
        let unmatched = estimated.len() - association.len();
        Self {
            estimated,
            ground_truth,
            association,
            unmatched,
        }
    }

    /// Pair with identical timestamps, associated one-to-one.
    pub fn aligned(estimated: Vec<(i64, Pose)>, ground_truth: Vec<(i64, Pose)>) -> Self {
        Self::new(estimated, ground_truth, 0, 0)
    }

    /// (ground-truth time, estimate, ground truth) per associated sample.
    pub fn matched(&self) -> impl Iterator<Item = (i64, &Pose, &Pose)> + '_ {
        self.association
            .iter()
            .map(|&(i, j)| (self.ground_truth[j].0, &self.estimated[i].1, &self.ground_truth[j].1))
    }

    pub fn len(&self) -> usize {
        self.association.len()
    }

    pub fn is_empty(&self) -> bool {
        self.association.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ate {
    pub trans: f64,
    pub rot: f64,
    pub trans_std: f64,
}

fn rmse(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Per-sample (translational, rotational) errors `log(gt^-1 S est)` after
/// rigid alignment `S`.
pub fn ate_errors(pair: &TrajectoryPair) -> Result<Vec<(f64, f64)>, MetricsError> {
    let (est, gt): (Vec<Pose>, Vec<Pose>) = pair.matched().map(|(_, e, g)| (*e, *g)).unzip();
    if est.len() < 3 {
        return Err(MetricsError::TooFewSamples {
            needed: 3,
            got: est.len(),
        });
    }
    let s = umeyama_align(&est, &gt)?;
    Ok(est
        .iter()
        .zip(&gt)
        .map(|(e, g)| error_norms(&(g.inverse() * s * *e)))
        .collect())
}

pub fn ate(pair: &TrajectoryPair) -> Result<Ate, MetricsError> {
    let errs = ate_errors(pair)?;
    let n = errs.len() as f64;
    let mean = errs.iter().map(|e| e.0).sum::<f64>() / n;
    let var = errs.iter().map(|e| (e.0 - mean).powi(2)).sum::<f64>() / n;
    Ok(Ate {
        trans: rmse(errs.iter().map(|e| e.0)),
        rot: rmse(errs.iter().map(|e| e.1)),
        trans_std: var.sqrt(),
    })
}

/// Per-pair errors of `(gt_i^-1 gt_k)^-1 (est_i^-1 est_k)` where sample `k`
/// is the associated sample nearest to `t_i + delta`, within half the median
/// sample spacing.
pub fn rte_errors(pair: &TrajectoryPair, delta_s: f64) -> Result<Vec<(f64, f64)>, MetricsError> {
    let matched: Vec<(i64, &Pose, &Pose)> = pair.matched().collect();
    let delta_us = (delta_s * 1e6).round() as i64;
    let times: Vec<i64> = matched.iter().map(|m| m.0).collect();
    let spacing = median_spacing(&times).unwrap_or(0);
    let slack = spacing.max(1) / 2;
    let mut out = Vec::new();
    for (i, &(t, e_i, g_i)) in matched.iter().enumerate() {
        let want = t + delta_us;
        let k = times.partition_point(|&x| x < want);
        let nearest = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&k| k < times.len() && k > i)
            .min_by_key(|&k| (times[k] - want).abs());
        let Some(k) = nearest else { continue };
        if (times[k] - want).abs() > slack {
            continue;
        }
        let (_, e_k, g_k) = matched[k];
        let gt_rel = g_i.inverse() * *g_k;
        let est_rel = e_i.inverse() * *e_k;
        out.push(error_norms(&(gt_rel.inverse() * est_rel)));
    }
    if out.is_empty() {
        return Err(MetricsError::TooFewSamples {
            needed: 1,
            got: 0,
        });
    }
    Ok(out)
}

pub fn rte(pair: &TrajectoryPair, delta_s: f64) -> Result<(f64, f64), MetricsError> {
    let errs = rte_errors(pair, delta_s)?;
    Ok((rmse(errs.iter().map(|e| e.0)), rmse(errs.iter().map(|e| e.1))))
}

/// Mean of the largest `percent`% of `values` (at least one value).
pub fn top_percent_mean(values: &[f64], percent: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let n = ((v.len() as f64 * percent / 100.0).ceil() as usize).clamp(1, v.len());
    v[..n].iter().sum::<f64>() / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatusInterval {
    pub start_us: i64,
    pub end_us: i64,
    pub tracked: bool,
}

/// Untracked time over `total_us`.
pub fn loss_ratio(intervals: &[StatusInterval], total_us: i64) -> f64 {
    if total_us <= 0 {
        return 0.0;
    }
    let lost: i64 = intervals
        .iter()
        .filter(|s| !s.tracked)
        .map(|s| (s.end_us - s.start_us).max(0))
        .sum();
    (lost as f64 / total_us as f64).clamp(0.0, 1.0)
}

fn median_spacing(times: &[i64]) -> Option<i64> {
    let mut d: Vec<i64> = times.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_unstable();
    Some(d[d.len() / 2])
}

/// Translational speed between consecutive samples, stamped at the midpoint.
fn speeds(samples: &[(i64, Pose)]) -> (Vec<i64>, Vec<f64>) {
    samples
        .windows(2)
        .filter(|w| w[1].0 > w[0].0)
        .map(|w| {
            let dt = (w[1].0 - w[0].0) as f64 * 1e-6;
            let v = (w[1].1.translation() - w[0].1.translation()).norm() / dt;
            ((w[0].0 + w[1].0) / 2, v)
        })
        .unzip()
}

fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    let denom = (sxx * syy).sqrt();
    (denom > 0.0).then(|| sxy / denom)
}

/// Linear interpolation of a sampled series at `t`; `None` outside its span.
fn interpolate(times: &[i64], values: &[f64], t: i64) -> Option<f64> {
    let k = times.partition_point(|&x| x < t);
    if k < times.len() && times[k] == t {
        return Some(values[k]);
    }
    if k == 0 || k == times.len() {
        return None;
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let w = (t - t0) as f64 / (t1 - t0) as f64;
    Some(values[k - 1] * (1.0 - w) + values[k] * w)
}

/// Time offset in `[-max_lag_us, max_lag_us]` (multiples of `step_us`) that
/// maximizes the correlation of translational speed between estimate and
/// ground truth, the latter interpolated linearly at the shifted estimate
/// times. Shifted samples landing more than `tolerance_us` away from any
/// reference sample are ignored. Ties go to the smallest offset magnitude;
/// no usable signal gives 0.
pub fn estimate_lag(est: &[(i64, Pose)], gt: &[(i64, Pose)], max_lag_us: i64, step_us: i64, tolerance_us: i64) -> i64 {
    if max_lag_us <= 0 || step_us <= 0 {
        return 0;
    }
    let (et, ev) = speeds(est);
    let (gt_t, gv) = speeds(gt);
    let mut lags = vec![0i64];
    let mut k = step_us;
    while k <= max_lag_us {
        lags.push(k);
        lags.push(-k);
        k += step_us;
    }
    let mut best = (f64::NEG_INFINITY, 0i64);
    for lag in lags {
        let pairs: Vec<(f64, f64)> = et
            .iter()
            .zip(&ev)
            .filter_map(|(&t, &v)| {
                let t = t + lag;
                let k = gt_t.partition_point(|&x| x < t);
                let gap = [k.checked_sub(1), Some(k)]
                    .into_iter()
                    .flatten()
                    .filter(|&j| j < gt_t.len())
                    .map(|j| (gt_t[j] - t).abs())
                    .min()?;
                if gap > tolerance_us {
                    return None;
                }
                interpolate(&gt_t, &gv, t).map(|g| (v, g))
            })
            .collect();
        if let Some(r) = pearson(&pairs) {
            if r > best.0 + 1e-12 {
                best = (r, lag);
            }
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub ate_trans: f64,
    pub ate_rot: f64,
    pub ate_std: f64,
    pub rte_trans: f64,
    pub rte_rot: f64,
    pub top5_trans: f64,
    pub loss_track_ratio: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub delta_s: f64,
    pub tolerance_us: i64,
    pub max_lag_us: i64,
    pub lag_step_us: i64,
    /// Carry the last valid estimate through lost samples (zero-order hold)
    /// when computing ATE/RTE. Without it lost samples are simply dropped.
    pub hold_lost: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            delta_s: 1.0,
            tolerance_us: DEFAULT_TOLERANCE_US,
            max_lag_us: DEFAULT_MAX_LAG_US,
            lag_step_us: 5_000,
            hold_lost: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajRow {
    pub t_us: i64,
    pub estimate: Option<Pose>,
    pub ground_truth: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceReport {
    pub source: String,
    /// "target-a~target-b": the trajectory of b expressed in a's frame.
    pub target: String,
    pub lag_us: i64,
    pub unmatched: usize,
    pub report: Result<ErrorReport, MetricsError>,
    pub trajectory: Vec<TrajRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<SourceReport>,
    /// Ground-truth samples skipped because the reference was invalid.
    pub excluded_gt: usize,
}

type Timeline = Vec<(i64, Option<Pose>)>;

fn pair_key(a: &str, b: &str) -> String {
    format!("{a}~{b}")
}

/// Relative ground truth `P_a^-1 P_b` for each pair of targets, at instants
/// where both references are valid.
fn ground_truth_pairs(gt: &[GtRecord], targets: &[String]) -> (BTreeMap<String, Vec<(i64, Pose)>>, usize) {
    let mut at: BTreeMap<i64, BTreeMap<&str, &GtRecord>> = BTreeMap::new();
    for r in gt {
        at.entry(r.t_us).or_default().insert(&r.entity, r);
    }
    let mut out: BTreeMap<String, Vec<(i64, Pose)>> = BTreeMap::new();
    let mut excluded = 0;
    for (i, a) in targets.iter().enumerate() {
        for b in &targets[i + 1..] {
            let series = out.entry(pair_key(a, b)).or_default();
            for (t, recs) in &at {
                match (recs.get(a.as_str()), recs.get(b.as_str())) {
                    (Some(ra), Some(rb)) if ra.valid && rb.valid => {
                        series.push((*t, ra.pose.inverse() * rb.pose));
                    }
                    (Some(_), Some(_)) => excluded += 1,
                    _ => {}
                }
            }
        }
    }
    (out, excluded)
}

/// Per-source relative-pose timelines from measurements (one per sensor)
/// and updates (fused). `None` marks instants where the source had no valid
/// pose for one of the two targets.
fn estimate_timelines(est: &[EstRecord], a: &str, b: &str) -> BTreeMap<String, Timeline> {
    let mut meas: BTreeMap<&str, BTreeMap<i64, (Option<&crate::wire::Measurement>, Option<&crate::wire::Measurement>)>> =
        BTreeMap::new();
    let mut updates: BTreeMap<i64, Vec<&crate::wire::PoseUpdate>> = BTreeMap::new();
    for r in est {
        match r {
            EstRecord::Meas(m) if m.target == a || m.target == b => {
                let slot = meas.entry(&m.sensor_id).or_default().entry(m.t_us).or_default();
                if m.target == a {
                    slot.0 = Some(m);
                } else {
                    slot.1 = Some(m);
                }
            }
            EstRecord::Meas(_) => {}
            EstRecord::Update(u) => updates.entry(u.solve_t_us).or_default().push(u),
        }
    }
    let mut out = BTreeMap::new();
    for (sensor, by_t) in meas {
        let tl: Timeline = by_t
            .into_iter()
            .map(|(t, (ma, mb))| {
                let pose = match (ma, mb) {
                    (Some(ma), Some(mb)) if ma.status && mb.status => Some(ma.pose.inverse() * mb.pose),
                    _ => None,
                };
                (t, pose)
            })
            .collect();
        out.insert(sensor.to_owned(), tl);
    }
    if !updates.is_empty() {
        let tl: Timeline = updates
            .into_iter()
            .map(|(t, mut us)| {
                // latest cycle first, then receiver name
                us.sort_by(|x, y| y.cycle.cmp(&x.cycle).then_with(|| x.sensor_id.cmp(&y.sensor_id)));
                let pose = us.iter().find_map(|u| {
                    let (ea, eb) = (u.entry(a)?, u.entry(b)?);
                    (!ea.lose_track && !eb.lose_track).then(|| ea.pose.inverse() * eb.pose)
                });
                (t, pose)
            })
            .collect();
        out.insert(FUSED.to_owned(), tl);
    }
    out
}

fn evaluate_source(
    source: &str,
    target: &str,
    timeline: &Timeline,
    gt: &[(i64, Pose)],
    opts: &EvalOptions,
) -> SourceReport {
    let valid: Vec<(i64, Pose)> = timeline.iter().filter_map(|(t, p)| p.map(|p| (*t, p))).collect();
    let lag_us = estimate_lag(&valid, gt, opts.max_lag_us, opts.lag_step_us, opts.tolerance_us);
    let times: Vec<i64> = timeline.iter().map(|s| s.0).collect();
    let gt_times: Vec<i64> = gt.iter().map(|s| s.0).collect();
    let assoc = associate(&times, &gt_times, opts.tolerance_us, lag_us);
    let unmatched = timeline.len() - assoc.len();

    let mut at_gt: Vec<Option<Pose>> = vec![None; gt.len()];
    for &(i, j) in &assoc {
        at_gt[j] = timeline[i].1;
    }
    // status over the ground-truth span covered by this estimate
    let (first, last) = match (assoc.first(), assoc.last()) {
        (Some(f), Some(l)) => (f.1, l.1),
        _ => {
            return SourceReport {
                source: source.to_owned(),
                target: target.to_owned(),
                lag_us,
                unmatched,
                report: Err(MetricsError::NoOverlap(format!("{source} vs {target}"))),
                trajectory: Vec::new(),
            }
        }
    };
    let nominal = median_spacing(&gt_times).unwrap_or(1);
    let mut intervals = Vec::new();
    let mut total = 0;
    for j in first..=last {
        let end = if j + 1 < gt.len() {
            gt_times[j + 1].min(gt_times[j] + nominal)
        } else {
            gt_times[j] + nominal
        };
        total += end - gt_times[j];
        intervals.push(StatusInterval {
            start_us: gt_times[j],
            end_us: end,
            tracked: at_gt[j].is_some(),
        });
    }
    let loss = loss_ratio(&intervals, total);

    let mut held = Vec::new();
    let mut held_gt = Vec::new();
    let mut trajectory = Vec::new();
    let mut last_valid: Option<Pose> = None;
    for j in first..=last {
        let shown = match at_gt[j] {
            Some(p) => {
                last_valid = Some(p);
                Some(p)
            }
            None if opts.hold_lost => last_valid,
            None => None,
        };
        trajectory.push(TrajRow {
            t_us: gt_times[j],
            estimate: at_gt[j],
            ground_truth: gt[j].1,
        });
        if let Some(p) = shown {
            held.push((gt_times[j], p));
            held_gt.push(gt[j]);
        }
    }
    let pair = TrajectoryPair::aligned(held, held_gt);
    let report = ate(&pair).and_then(|a| {
        let rte_errs = rte_errors(&pair, opts.delta_s)?;
        let trans: Vec<f64> = rte_errs.iter().map(|e| e.0).collect();
        Ok(ErrorReport {
            ate_trans: a.trans,
            ate_rot: a.rot,
            ate_std: a.trans_std,
            rte_trans: rmse(trans.iter().copied()),
            rte_rot: rmse(rte_errs.iter().map(|e| e.1)),
            top5_trans: top_percent_mean(&trans, 5.0),
            loss_track_ratio: loss,
            n_samples: pair.len(),
        })
    });
    SourceReport {
        source: source.to_owned(),
        target: target.to_owned(),
        lag_us,
        unmatched,
        report,
        trajectory,
    }
}

/// Error reports for every (source, target pair) found in `est` against `gt`.
pub fn evaluate(est: &[EstRecord], gt: &[GtRecord], opts: &EvalOptions) -> Result<Evaluation, MetricsError> {
    let mut targets: BTreeSet<String> = BTreeSet::new();
    for r in est {
        match r {
            EstRecord::Meas(m) => {
                targets.insert(m.target.clone());
            }
            EstRecord::Update(u) => targets.extend(u.poses.iter().map(|e| e.target.clone())),
        }
    }
    let gt_entities: BTreeSet<&str> = gt.iter().map(|r| r.entity.as_str()).collect();
    let targets: Vec<String> = targets.into_iter().filter(|t| gt_entities.contains(t.as_str())).collect();
    if targets.len() < 2 {
        return Err(MetricsError::NoOverlap(
            "fewer than two targets appear in both logs".into(),
        ));
    }
    let (gt_pairs, excluded_gt) = ground_truth_pairs(gt, &targets);
    let mut reports = Vec::new();
    for (i, a) in targets.iter().enumerate() {
        for b in &targets[i + 1..] {
            let key = pair_key(a, b);
            let gt_series = &gt_pairs[&key];
            for (source, tl) in estimate_timelines(est, a, b) {
                reports.push(evaluate_source(&source, &key, &tl, gt_series, opts));
            }
        }
    }
    if reports.iter().all(|r| r.report.is_err()) {
        if let Some(r) = reports.iter().find_map(|r| r.report.as_ref().err()) {
            return Err(r.clone());
        }
    }
    Ok(Evaluation { reports, excluded_gt })
}

impl Evaluation {
    pub fn get(&self, source: &str, target: &str) -> Option<&SourceReport> {
        self.reports.iter().find(|r| r.source == source && r.target == target)
    }

    /// One row per source x target x metric; rotations in radians.
    pub fn report_csv(&self) -> String {
        let mut s = String::from("source,target,metric,value\n");
        for r in &self.reports {
            let _ = writeln!(s, "{},{},lag_us,{}", r.source, r.target, r.lag_us);
            let _ = writeln!(s, "{},{},unmatched,{}", r.source, r.target, r.unmatched);
            match &r.report {
                Ok(e) => {
                    for (k, v) in [
                        ("ate_trans_m", e.ate_trans),
                        ("ate_rot_rad", e.ate_rot),
                        ("ate_std_m", e.ate_std),
                        ("rte_trans_m", e.rte_trans),
                        ("rte_rot_rad", e.rte_rot),
                        ("top5_trans_m", e.top5_trans),
                        ("loss_track_ratio", e.loss_track_ratio),
                        ("n_samples", e.n_samples as f64),
                    ] {
                        let _ = writeln!(s, "{},{},{k},{v}", r.source, r.target);
                    }
                }
                Err(e) => {
                    let _ = writeln!(s, "{},{},error,\"{e}\"", r.source, r.target);
                }
            }
        }
        s
    }

    /// Human-readable comparison table; millimeters and degrees.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<22} {:>18} {:>11} {:>12} {:>12} {:>10} {:>8} {:>8}",
            "source", "target", "ATE trans [mm]", "ATE [deg]", "RTE [mm]", "top5% [mm]", "loss [%]", "lag[ms]", "n"
        );
        for r in &self.reports {
            match &r.report {
                Ok(e) => {
                    let _ = writeln!(
                        s,
                        "{:<12} {:<22} {:>9.3} ± {:<6.3} {:>11.4} {:>12.3} {:>12.3} {:>10.2} {:>8.1} {:>8}",
                        r.source,
                        r.target,
                        e.ate_trans * 1e3,
                        e.ate_std * 1e3,
                        e.ate_rot.to_degrees(),
                        e.rte_trans * 1e3,
                        e.top5_trans * 1e3,
                        e.loss_track_ratio * 100.0,
                        r.lag_us as f64 / 1e3,
                        e.n_samples
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<12} {:<22} error: {e}", r.source, r.target);
                }
            }
        }
        s
    }

    /// Per-axis estimated and reference translation of every relative
    /// trajectory; empty estimate columns mark lost samples.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("source,target,t_s,est_x,est_y,est_z,gt_x,gt_y,gt_z\n");
        for r in &self.reports {
            for row in &r.trajectory {
                let g = row.ground_truth.translation();
                let e = match row.estimate {
                    Some(p) => {
                        let t = p.translation();
                        format!("{},{},{}", t.x, t.y, t.z)
                    }
                    None => ",,".to_owned(),
                };
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{e},{},{},{}",
                    r.source,
                    r.target,
                    row.t_us as f64 * 1e-6,
                    g.x,
                    g.y,
                    g.z
                );
            }
        }
        s
    }

    /// Writes report.csv, table.txt and traj_xyz.csv into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.report_csv())?;
        std::fs::write(dir.join("table.txt"), self.table())?;
        std::fs::write(dir.join("traj_xyz.csv"), self.trajectory_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use nalgebra::Vector3;

    fn wiggle(n: usize) -> Vec<(i64, Pose)> {
        (0..n)
            .map(|i| {
                let s = i as f64 * 0.1;
                let xi = Twist::new(
                    Vector3::new(s.sin(), (1.3 * s).cos(), 0.3 * s),
                    Vector3::new(0.2 * s.cos(), 0.1, 0.3 * s.sin()),
                );
                (i as i64 * 100_000, Pose::exp(&xi))
            })
            .collect()
    }

    #[test]
    fn association_is_injective_within_tolerance() {
        let est = [0, 5, 10, 31, 100];
        let gt = [0, 10, 20, 30];
        let a = associate(&est, &gt, 4, 0);
        assert_eq!(a, vec![(0, 0), (2, 1), (3, 3)]);
        let shifted = associate(&[10, 20], &gt, 0, -10);
        assert_eq!(shifted, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = wiggle(50);
        let pair = TrajectoryPair::aligned(gt.clone(), gt);
        let a = ate(&pair).unwrap();
        assert!(a.trans < 1e-12 && a.rot < 1e-12 && a.trans_std < 1e-12);
        let (t, r) = rte(&pair, 1.0).unwrap();
        assert!(t < 1e-12 && r < 1e-12);
    }

    #[test]
    fn stationary_trajectory_is_degenerate() {
        let gt: Vec<(i64, Pose)> = (0..10).map(|i| (i, Pose::identity())).collect();
        let pair = TrajectoryPair::aligned(gt.clone(), gt);
        assert_eq!(ate(&pair), Err(MetricsError::DegenerateGeometry { rank: 0 }));
        let two = TrajectoryPair::aligned(wiggle(2), wiggle(2));
        assert_eq!(ate(&two), Err(MetricsError::TooFewSamples { needed: 3, got: 2 }));
    }

    #[test]
    fn top_percent() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(top_percent_mean(&v, 5.0), (96.0 + 97.0 + 98.0 + 99.0 + 100.0) / 5.0);
        assert_eq!(top_percent_mean(&[3.0], 5.0), 3.0);
        assert_eq!(top_percent_mean(&[], 5.0), 0.0);
    }

    #[test]
    fn loss_ratio_definition() {
        let iv = |s, e, tracked| StatusInterval {
            start_us: s,
            end_us: e,
            tracked,
        };
        assert_eq!(loss_ratio(&[iv(0, 100, true)], 100), 0.0);
        assert_eq!(loss_ratio(&[iv(0, 100, false)], 100), 1.0);
        assert!((loss_ratio(&[iv(0, 90, true), iv(90, 100, false)], 100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn lag_search_recovers_shift() {
        let gt = wiggle(400);
        let est: Vec<(i64, Pose)> = gt.iter().map(|(t, p)| (t - 85_000, *p)).collect();
        assert_eq!(estimate_lag(&est, &gt, 200_000, 5_000, 20_000), 85_000);
        assert_eq!(estimate_lag(&gt, &gt, 200_000, 5_000, 20_000), 0);
    }
}
