use scenefuse_core::se3::Pose;
use scenefuse_core::sim::{generate, observe, AccelLimits, NoiseConfig, ScenarioConfig};
use std::collections::BTreeMap;

fn occlusion_config() -> ScenarioConfig {
    // 2 sensors x 1 target x 50 000 steps = 1e5 samples
    ScenarioConfig {
        seed: 42,
        n_sensors: 2,
        n_targets: 1,
        rate_hz: 100.0,
        duration_s: 500.0,
        p_block: 0.1,
        ..ScenarioConfig::default()
    }
}

#[test]
fn blocked_fraction_and_simultaneous_blocks() {
    let cfg = occlusion_config();
    let log = observe(&generate(&cfg).unwrap(), &cfg).unwrap();
    assert_eq!(log.len(), 100_000);
    let blocked = log.iter().filter(|m| !m.status).count() as f64 / log.len() as f64;
    assert!((0.094..=0.106).contains(&blocked), "{blocked}");

    let mut per_step: BTreeMap<i64, usize> = BTreeMap::new();
    for m in log.iter().filter(|m| !m.status) {
        *per_step.entry(m.t_us).or_default() += 1;
    }
    let steps = cfg.steps() as f64;
    let both = per_step.values().filter(|c| **c == 2).count() as f64 / steps;
    // binomial 99.9% interval: 0.01 +- 3.29 sqrt(0.01 * 0.99 / n)
    let half = 3.29 * (0.01 * 0.99 / steps).sqrt();
    assert!((both - 0.01).abs() < half, "{both} +- {half}");
}

#[test]
fn translational_noise_matches_sigma() {
    let cfg = ScenarioConfig {
        seed: 3,
        n_sensors: 1,
        n_targets: 1,
        rate_hz: 200.0,
        duration_s: 500.0,
        p_block: 0.0,
        noise: NoiseConfig {
            sigma_t: 1e-3,
            sigma_r: 0.1_f64.to_radians(),
        },
        ..ScenarioConfig::default()
    };
    let gt = generate(&cfg).unwrap();
    let log = observe(&gt, &cfg).unwrap();
    assert_eq!(log.len(), 100_000);
    let lookup: BTreeMap<(i64, &str), Pose> = gt.records.iter().map(|r| ((r.t_us, r.entity.as_str()), r.pose)).collect();
    let mut sq = 0.0;
    let mut n = 0.0;
    for m in &log {
        let truth = lookup[&(m.t_us, "sensor-1")].inverse() * lookup[&(m.t_us, "target-1")];
        let err = (truth.inverse() * m.pose).log().unwrap();
        sq += err.rho.norm_squared();
        n += 3.0;
    }
    let sigma = (sq / n).sqrt();
    assert!((sigma / 1e-3 - 1.0).abs() < 0.03, "{sigma}");
}

#[test]
fn path_length_matches_trapezoidal_integration() {
    let cfg = ScenarioConfig {
        seed: 9,
        duration_s: 100.0,
        ..ScenarioConfig::default()
    };
    let gt = generate(&cfg).unwrap();
    let dt = 1.0 / cfg.rate_hz;
    for (name, reported) in &gt.path_lengths {
        let traj = gt.trajectory(name);
        // the integrator's velocity at each sample is the backward difference;
        // its magnitude is integrated with the trapezoidal rule
        let pos: Vec<_> = traj.iter().map(|(_, p)| *p.translation()).collect();
        let speed: Vec<f64> = (0..pos.len())
            .map(|i| if i == 0 { 0.0 } else { (pos[i] - pos[i - 1]).norm() / dt })
            .collect();
        let trapz: f64 = speed.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
        if *reported == 0.0 {
            assert_eq!(trapz, 0.0);
            continue;
        }
        assert!((trapz / reported - 1.0).abs() < 1e-3, "{name}: {trapz} vs {reported}");
    }
}

#[test]
fn calibrated_path_length_near_desk_scale_value() {
    // bisection on the linear acceleration limit for an 82.7 m mean target path
    let base = ScenarioConfig::default();
    let length = |linear: f64| {
        let cfg = ScenarioConfig {
            accel_limits: AccelLimits { linear, ..base.accel_limits },
            ..base.clone()
        };
        generate(&cfg).unwrap().mean_target_path_length()
    };
    let (mut lo, mut hi) = (0.01, 10.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if length(mid) < 82.7 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let calibrated = length(0.5 * (lo + hi));
    assert!((calibrated / 82.7 - 1.0).abs() < 0.01, "{calibrated}");
    let default = length(base.accel_limits.linear);
    assert!(default > 82.7 / 2.0 && default < 82.7 * 2.0, "{default}");
}

#[test]
fn scenario_files_round_trip() {
    let cfg = ScenarioConfig {
        burst: Some(scenefuse_core::sim::BurstConfig { p_enter: 0.1, p_exit: 0.5 }),
        ..ScenarioConfig::default()
    };
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<ScenarioConfig>(&json).unwrap(), cfg);
    let partial: ScenarioConfig = serde_json::from_str(r#"{"seed": 5, "p_block": 0.2}"#).unwrap();
    assert_eq!(partial.seed, 5);
    assert_eq!(partial.n_sensors, 2);
}
