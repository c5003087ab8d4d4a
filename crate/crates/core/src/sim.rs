//! Synthetic scenarios: moving sensors and targets driven by random
//! accelerations, observed through noisy, randomly occluded measurements.
//!
//! All randomness comes from ChaCha8 (a counter-based stream cipher with a
//! 64-bit block counter) seeded from `ScenarioConfig::seed`. Motion and
//! observation draw from separate streams of the same key, so changing noise
//! or occlusion settings never changes the ground truth.

use crate::logs::GtRecord;
use crate::se3::{so3_exp, so3_log, Pose};
use crate::wire::Measurement;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

const MOTION_STREAM: u64 = 0;
const OBSERVE_STREAM: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("p_block must lie in [0, 1], got {0}")]
    BlockProbability(f64),
    #[error("noise sigmas must be non-negative")]
    NegativeSigma,
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("burst probabilities must lie in [0, 1]")]
    BurstProbability,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelLimits {
    /// m/s^2, per axis.
    pub linear: f64,
    /// rad/s^2, per axis.
    pub angular: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// meters
    pub sigma_t: f64,
    /// radians
    pub sigma_r: f64,
}

/// Two-state occlusion model: a clear link becomes blocked with `p_enter`,
/// a blocked one clears with `p_exit`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstConfig {
    pub p_enter: f64,
    pub p_exit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Sensors start on a horizontal circle of this radius, facing the center.
    pub sensor_radius: f64,
    /// Targets start uniformly inside a cube of this edge length at the center.
    pub target_cube: f64,
}

/// Spring and damper pulling each entity back to its starting pose, keeping
/// the random walk inside the workspace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confinement {
    /// 1/s^2
    pub stiffness: f64,
    /// 1/s
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub rate_hz: f64,
    pub n_sensors: usize,
    pub n_targets: usize,
    pub p_block: f64,
    pub accel_limits: AccelLimits,
    /// Applied to every sensor without an entry in `sensor_noise`.
    pub noise: NoiseConfig,
    pub sensor_noise: Vec<NoiseConfig>,
    pub sensors_static: bool,
    pub burst: Option<BurstConfig>,
    pub placement: Placement,
    pub confinement: Confinement,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 500.0,
            rate_hz: 30.0,
            n_sensors: 2,
            n_targets: 2,
            p_block: 0.1,
            accel_limits: AccelLimits {
                linear: 0.9,
                angular: 1.0,
            },
            noise: NoiseConfig {
                sigma_t: 1e-3,
                sigma_r: 0.1_f64.to_radians(),
            },
            sensor_noise: Vec::new(),
            sensors_static: false,
            burst: None,
            placement: Placement {
                sensor_radius: 2.0,
                target_cube: 0.5,
            },
            confinement: Confinement {
                stiffness: 0.16,
                damping: 0.5,
            },
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(0.0..=1.0).contains(&self.p_block) {
            return Err(ScenarioError::BlockProbability(self.p_block));
        }
        let sigmas = std::iter::once(&self.noise).chain(&self.sensor_noise);
        if sigmas.clone().any(|n| !(n.sigma_t >= 0.0 && n.sigma_r >= 0.0)) {
            return Err(ScenarioError::NegativeSigma);
        }
        if !(self.rate_hz > 0.0) {
            return Err(ScenarioError::NonPositive("rate_hz"));
        }
        if !(self.duration_s >= 0.0) {
            return Err(ScenarioError::NonPositive("duration_s"));
        }
        if let Some(b) = self.burst {
            if !(0.0..=1.0).contains(&b.p_enter) || !(0.0..=1.0).contains(&b.p_exit) {
                return Err(ScenarioError::BurstProbability);
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration_s * self.rate_hz).round() as usize
    }

    pub fn timestamp(&self, step: usize) -> i64 {
        (step as f64 * 1e6 / self.rate_hz).round() as i64
    }

    pub fn sensor_names(&self) -> Vec<String> {
        (1..=self.n_sensors).map(|i| format!("sensor-{i}")).collect()
    }

    pub fn target_names(&self) -> Vec<String> {
        (1..=self.n_targets).map(|i| format!("target-{i}")).collect()
    }

    pub fn noise_for(&self, sensor_index: usize) -> NoiseConfig {
        self.sensor_noise
            .get(sensor_index)
            .copied()
            .unwrap_or(self.noise)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionState {
    pub pose: Pose,
    pub linear_vel: Vector3<f64>,
    pub angular_vel: Vector3<f64>,
}


#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Time-major: every entity at step 0, then step 1, and so on.
    pub records: Vec<GtRecord>,
    /// Polyline length of each entity's translation, meters.
    pub path_lengths: BTreeMap<String, f64>,
}

impl GroundTruth {
    pub fn trajectory(&self, entity: &str) -> Vec<(i64, Pose)> {
        self.records
            .iter()
            .filter(|r| r.entity == entity)
            .map(|r| (r.t_us, r.pose))
            .collect()
    }

    pub fn mean_target_path_length(&self) -> f64 {
        let targets: Vec<f64> = self
            .path_lengths
            .iter()
            .filter(|(k, _)| k.starts_with("target-"))
            .map(|(_, v)| *v)
            .collect();
        targets.iter().sum::<f64>() / targets.len().max(1) as f64
    }
}

fn uniform3(rng: &mut ChaCha8Rng, limit: f64) -> Vector3<f64> {
    if limit == 0.0 {
        // keep the stream position independent of the limit
        let _: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        return Vector3::zeros();
    }
    Vector3::from_fn(|_, _| rng.random_range(-limit..=limit))
}

fn normal3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * sigma
    })
}

fn initial_poses(config: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<(String, Pose)> {
    let mut out = Vec::new();
    let n = config.n_sensors.max(1) as f64;
    for (i, name) in config.sensor_names().into_iter().enumerate() {
        let angle = std::f64::consts::TAU * i as f64 / n;
        let position = Vector3::new(angle.cos(), angle.sin(), 0.0) * config.placement.sensor_radius;
        let toward = -position;
        let rotation = if toward.norm() > 0.0 {
            UnitQuaternion::face_towards(&toward, &Vector3::z())
        } else {
            UnitQuaternion::identity()
        };
        out.push((name, Pose::new(rotation, position)));
    }
    let half = 0.5 * config.placement.target_cube;
    for name in config.target_names() {
        let position = uniform3(rng, half);
        let rotation = so3_exp(&uniform3(rng, std::f64::consts::FRAC_PI_4));
        out.push((name, Pose::new(rotation, position)));
    }
    out
}

/// Ground-truth trajectories for every sensor and target.
pub fn generate(config: &ScenarioConfig) -> Result<GroundTruth, ScenarioError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(MOTION_STREAM);
    let homes = initial_poses(config, &mut rng);
    let mut states: Vec<MotionState> = homes
        .iter()
        .map(|(_, p)| MotionState {
            pose: *p,
            linear_vel: Vector3::zeros(),
            angular_vel: Vector3::zeros(),
        })
        .collect();
    let dt = 1.0 / config.rate_hz;
    let Confinement { stiffness, damping } = config.confinement;
    let steps = config.steps();
    let mut records = Vec::with_capacity(steps * homes.len());
    let mut lengths = vec![0.0; homes.len()];

    for step in 0..steps {
        let t_us = config.timestamp(step);
        for ((name, _), s) in homes.iter().zip(&states) {
            records.push(GtRecord {
                t_us,
                entity: name.clone(),
                pose: s.pose,
                valid: true,
            });
        }
        if step + 1 == steps {
            break;
        }
        for (k, ((_, home), s)) in homes.iter().zip(states.iter_mut()).enumerate() {
            let lin = uniform3(&mut rng, config.accel_limits.linear);
            let ang = uniform3(&mut rng, config.accel_limits.angular);
            if config.sensors_static && k < config.n_sensors {
                continue;
            }
            let offset = s.pose.translation() - home.translation();
            let tilt = so3_log(&(home.rotation().inverse() * s.pose.rotation()));
            s.linear_vel += (lin - offset * stiffness - s.linear_vel * damping) * dt;
            s.angular_vel += (ang - tilt * stiffness - s.angular_vel * damping) * dt;
            let translation = s.pose.translation() + s.linear_vel * dt;
            let rotation = UnitQuaternion::new_normalize(
                (s.pose.rotation() * so3_exp(&(s.angular_vel * dt))).into_inner(),
            );
            lengths[k] += (translation - s.pose.translation()).norm();
            s.pose = Pose::new(rotation, translation);
        }
    }

    Ok(GroundTruth {
        records,
        path_lengths: homes.into_iter().map(|(n, _)| n).zip(lengths).collect(),
    })
}

/// Noisy, occlusion-flagged measurements `A_i^-1 P_j exp(noise)` for every
/// (sensor, target, step). Blocked samples keep their pose with
/// `status = false`.
pub fn observe(gt: &GroundTruth, config: &ScenarioConfig) -> Result<Vec<Measurement>, ScenarioError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(OBSERVE_STREAM);
    let sensors = config.sensor_names();
    let targets = config.target_names();
    let mut by_step: BTreeMap<i64, BTreeMap<&str, Pose>> = BTreeMap::new();
    for r in &gt.records {
        by_step.entry(r.t_us).or_default().insert(&r.entity, r.pose);
    }
    let mut blocked = vec![vec![false; targets.len()]; sensors.len()];
    let mut out = Vec::with_capacity(by_step.len() * sensors.len() * targets.len());
    for (t_us, poses) in &by_step {
        for (i, sensor) in sensors.iter().enumerate() {
            let noise = config.noise_for(i);
            let info_diag = (noise.sigma_t > 0.0 && noise.sigma_r > 0.0).then(|| {
                let wt = 1.0 / (noise.sigma_t * noise.sigma_t);
                let wr = 1.0 / (noise.sigma_r * noise.sigma_r);
                [wt, wt, wt, wr, wr, wr]
            });
            for (j, target) in targets.iter().enumerate() {
                let u: f64 = rng.random();
                blocked[i][j] = match config.burst {
                    None => u < config.p_block,
                    Some(b) if blocked[i][j] => u >= b.p_exit,
                    Some(b) => u < b.p_enter,
                };
                let rho = normal3(&mut rng, noise.sigma_t);
                let phi = normal3(&mut rng, noise.sigma_r);
                let (Some(a), Some(p)) = (poses.get(sensor.as_str()), poses.get(target.as_str())) else {
                    continue;
                };
                let truth = a.inverse() * *p;
                let pose = if noise.sigma_t == 0.0 && noise.sigma_r == 0.0 {
                    truth
                } else {
                    truth * Pose::exp(&crate::se3::Twist::new(rho, phi))
                };
                out.push(Measurement {
                    sensor_id: sensor.clone(),
                    target: target.clone(),
                    t_us: *t_us,
                    pose,
                    status: !blocked[i][j],
                    info_diag,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            duration_s: 5.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_acceleration_is_stationary() {
        let cfg = ScenarioConfig {
            accel_limits: AccelLimits {
                linear: 0.0,
                angular: 0.0,
            },
            ..short(3)
        };
        let gt = generate(&cfg).unwrap();
        for name in cfg.sensor_names().iter().chain(&cfg.target_names()) {
            let traj = gt.trajectory(name);
            assert!(traj.iter().all(|(_, p)| *p == traj[0].1), "{name} moved");
        }
        assert!(gt.path_lengths.values().all(|l| *l == 0.0));
    }

    #[test]
    fn same_seed_same_logs() {
        let cfg = short(11);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(observe(&a, &cfg).unwrap(), observe(&b, &cfg).unwrap());
        let c = generate(&short(12)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn noiseless_measurements_are_exact() {
        let cfg = ScenarioConfig {
            p_block: 0.0,
            noise: NoiseConfig {
                sigma_t: 0.0,
                sigma_r: 0.0,
            },
            ..short(5)
        };
        let gt = generate(&cfg).unwrap();
        let log = observe(&gt, &cfg).unwrap();
        assert_eq!(log.len(), cfg.steps() * 4);
        let lookup: BTreeMap<(i64, &str), Pose> = gt
            .records
            .iter()
            .map(|r| ((r.t_us, r.entity.as_str()), r.pose))
            .collect();
        for m in &log {
            assert!(m.status);
            assert!(m.info_diag.is_none());
            let a = lookup[&(m.t_us, m.sensor_id.as_str())];
            let p = lookup[&(m.t_us, m.target.as_str())];
            let (dt, dr) = (a * m.pose).distance(&p);
            assert!(dt < 1e-12 && dr < 1e-12);
        }
    }

    #[test]
    fn always_blocked() {
        let cfg = ScenarioConfig {
            p_block: 1.0,
            ..short(1)
        };
        let log = observe(&generate(&cfg).unwrap(), &cfg).unwrap();
        assert!(log.iter().all(|m| !m.status));
    }

    #[test]
    fn static_sensors_do_not_move() {
        let cfg = ScenarioConfig {
            sensors_static: true,
            ..short(2)
        };
        let gt = generate(&cfg).unwrap();
        assert_eq!(gt.path_lengths["sensor-1"], 0.0);
        assert!(gt.path_lengths["target-1"] > 0.0);
    }

    #[test]
    fn sensors_face_the_center() {
        let cfg = short(0);
        let gt = generate(&cfg).unwrap();
        let a = gt.trajectory("sensor-1")[0].1;
        let forward = a.rotation() * Vector3::z();
        let to_center = (-a.translation()).normalize();
        assert!((forward - to_center).norm() < 1e-12);
    }

    #[test]
    fn burst_model_produces_runs() {
        let cfg = ScenarioConfig {
            burst: Some(BurstConfig {
                p_enter: 0.02,
                p_exit: 0.2,
            }),
            duration_s: 200.0,
            ..ScenarioConfig::default()
        };
        let log = observe(&generate(&cfg).unwrap(), &cfg).unwrap();
        let flags: Vec<bool> = log
            .iter()
            .filter(|m| m.sensor_id == "sensor-1" && m.target == "target-1")
            .map(|m| !m.status)
            .collect();
        let blocked = flags.iter().filter(|b| **b).count() as f64 / flags.len() as f64;
        // stationary blocked fraction p_enter / (p_enter + p_exit) = 1/11
        assert!((blocked - 1.0 / 11.0).abs() < 0.03, "{blocked}");
        let runs = flags.windows(2).filter(|w| !w[0] && w[1]).count() as f64;
        let mean_run = flags.iter().filter(|b| **b).count() as f64 / runs.max(1.0);
        assert!(mean_run > 3.0, "{mean_run}");
    }

    #[test]
    fn invalid_configs() {
        let bad = ScenarioConfig {
            p_block: 1.5,
            ..ScenarioConfig::default()
        };
        assert_eq!(generate(&bad), Err(ScenarioError::BlockProbability(1.5)));
        let bad = ScenarioConfig {
            noise: NoiseConfig {
                sigma_t: -1.0,
                sigma_r: 0.0,
            },
            ..ScenarioConfig::default()
        };
        assert_eq!(generate(&bad), Err(ScenarioError::NegativeSigma));
    }
}
