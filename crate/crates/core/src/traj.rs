//! Synthetic sensor trajectories.
//!
//! Random-waypoint paths for a small fleet of mobile sensors sampling at
//! a regular interval inside a square box, standing in for real GPS
//! traces when none are available. Values are initialized to zero and
//! are meant to be filled by simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ObservationRecord};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct TrajectoryConfig {
    /// Number of sensors `J`.
    pub sensors: usize,
    /// Total observation count, split as evenly as possible across sensors.
    pub count: usize,
    /// Campaign duration in seconds.
    pub duration_s: f64,
    /// Side of the square operating area in meters.
    pub extent_m: f64,
    /// Travel speed in m/s; zero yields fixed sensors.
    pub speed_mps: f64,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            sensors: 8,
            count: 3000,
            duration_s: 7200.0,
            extent_m: 10_000.0,
            speed_mps: 8.0,
            seed: 0,
        }
    }
}

/// Generate a trajectory dataset. Deterministic given the seed: sensor
/// paths are drawn one after another from a single ChaCha stream.
pub fn generate(cfg: &TrajectoryConfig) -> Result<Dataset> {
    use crate::error::Error;
    if cfg.sensors == 0 || cfg.count == 0 {
        return Err(Error::Config("trajectory needs sensors >= 1 and count >= 1".into()));
    }
    if cfg.count < cfg.sensors {
        return Err(Error::Config(format!(
            "count {} is smaller than the sensor fleet {}",
            cfg.count, cfg.sensors
        )));
    }
    if !(cfg.duration_s > 0.0 && cfg.extent_m > 0.0 && cfg.speed_mps >= 0.0) {
        return Err(Error::Config(
            "duration and extent must be positive, speed nonnegative".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = cfg.count / cfg.sensors;
    let extra = cfg.count % cfg.sensors;

    let mut records = Vec::with_capacity(cfg.count);
    let mut obs_id = 0usize;
    for s in 0..cfg.sensors {
        let per = base + usize::from(s < extra);
        let dt = cfg.duration_s / per as f64;
        let mut pos = (
            rng.random_range(0.0..cfg.extent_m),
            rng.random_range(0.0..cfg.extent_m),
        );
        let mut target = (
            rng.random_range(0.0..cfg.extent_m),
            rng.random_range(0.0..cfg.extent_m),
        );
        for k in 0..per {
            let t = k as f64 * dt;
            records.push(ObservationRecord {
                obs_id,
                x: pos.0,
                y: pos.1,
                t,
                sensor_id: s + 1,
                value: 0.0,
                covariates: vec![1.0],
            });
            obs_id += 1;

            // Advance toward the waypoint, picking a new one on arrival.
            let mut travel = cfg.speed_mps * dt;
            while travel > 0.0 {
                let dx = target.0 - pos.0;
                let dy = target.1 - pos.1;
                let dist = (dx * dx + dy * dy).sqrt();
                if dist <= travel {
                    pos = target;
                    travel -= dist;
                    target = (
                        rng.random_range(0.0..cfg.extent_m),
                        rng.random_range(0.0..cfg.extent_m),
                    );
                    if dist == 0.0 {
                        break;
                    }
                } else {
                    pos.0 += dx / dist * travel;
                    pos.1 += dy / dist * travel;
                    travel = 0.0;
                }
            }
        }
    }
    Dataset::new(records, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let ds = generate(&TrajectoryConfig::default()).unwrap();
        assert_eq!(ds.n(), 3000);
        assert_eq!(ds.sensor_count(), 8);
        let (lo, hi) = ds.time_span();
        assert_eq!(lo, 0.0);
        assert!(hi < 7200.0 && hi > 7000.0);
        let (x0, x1, y0, y1) = ds.bounding_box();
        assert!(x0 >= 0.0 && x1 <= 10_000.0 && y0 >= 0.0 && y1 <= 10_000.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = TrajectoryConfig {
            count: 120,
            sensors: 4,
            seed: 17,
            ..TrajectoryConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn single_observation() {
        let cfg = TrajectoryConfig {
            count: 1,
            sensors: 1,
            ..TrajectoryConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.sensor_count(), 1);
    }
}
