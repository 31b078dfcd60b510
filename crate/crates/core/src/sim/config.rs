use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimators::Algorithm;
use crate::lm::SolverOptions;
use crate::physics::PhysicalParams;

/// Box-shaped room with the floor at `z = 0` and a corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub side_x_m: f64,
    pub side_y_m: f64,
    #[serde(default = "default_height")]
    pub height_m: f64,
}

fn default_height() -> f64 {
    3.0
}

impl Room {
    pub fn new(side_x_m: f64, side_y_m: f64, height_m: f64) -> Self {
        Self {
            side_x_m,
            side_y_m,
            height_m,
        }
    }

    pub fn square(side_m: f64) -> Self {
        Self::new(side_m, side_m, default_height())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("side_x_m", self.side_x_m),
            ("side_y_m", self.side_y_m),
            ("height_m", self.height_m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(
                    name,
                    format!("room dimension must be positive, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn upper_corner(&self) -> crate::physics::Vec3 {
        crate::physics::Vec3::new(self.side_x_m, self.side_y_m, self.height_m)
    }
}

/// Everything an experiment run depends on. All fields have defaults that
/// reproduce the 12-anchor, 10 m x 10 m x 3 m reference operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub room: Room,
    pub anchor_count: usize,
    pub params: PhysicalParams,
    pub trials: usize,
    /// Noise draws per deployment for the ML-at-truth statistics.
    pub noise_realizations: usize,
    pub seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// Random initializations for the multi-start comparison (1 disables it).
    pub init_count: usize,
    /// Position error below which a run counts as converged to the global basin.
    pub success_threshold_m: f64,
    pub margin_m: f64,
    pub condition_cap: f64,
    pub solver: SolverOptions,
    /// Room side lengths for the PEB sweep.
    pub side_lengths_m: Vec<f64>,
    /// Anchor counts for the PEB sweep.
    pub anchor_counts: Vec<usize>,
    /// Distances for the power curve; empty selects a default grid.
    pub distance_grid_m: Vec<f64>,
    pub alignment_quantile: f64,
    pub alignment_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            room: Room::square(10.0),
            anchor_count: 12,
            params: PhysicalParams::reference(),
            trials: 1000,
            noise_realizations: 1000,
            seed: 1,
            algorithms: Algorithm::ALL.to_vec(),
            init_count: 3,
            success_threshold_m: 0.1,
            margin_m: super::DEFAULT_MARGIN_M,
            condition_cap: crate::fisher::DEFAULT_CONDITION_CAP,
            solver: SolverOptions::default(),
            side_lengths_m: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
            anchor_counts: vec![5, 8, 12, 20, 40],
            distance_grid_m: Vec::new(),
            alignment_quantile: 0.1,
            alignment_samples: 1_000_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.room.validate()?;
        self.params.validate()?;
        self.solver.validate()?;
        if self.trials == 0 {
            return Err(invalid("trials", "need at least one trial"));
        }
        if self.anchor_count == 0 {
            return Err(invalid("anchor_count", "need at least one anchor"));
        }
        if self.init_count == 0 {
            return Err(invalid("init_count", "need at least one initialization"));
        }
        let min_side = self
            .room
            .side_x_m
            .min(self.room.side_y_m)
            .min(self.room.height_m);
        if !(self.margin_m >= 0.0 && 2.0 * self.margin_m < min_side) {
            return Err(invalid("margin_m", "margin must leave a nonempty interior"));
        }
        if !(self.success_threshold_m > 0.0) {
            return Err(invalid("success_threshold_m", "must be positive"));
        }
        if !(self.condition_cap > 1.0) {
            return Err(invalid("condition_cap", "must exceed one"));
        }
        if !(self.alignment_quantile > 0.0 && self.alignment_quantile < 1.0) {
            return Err(invalid("alignment_quantile", "must lie in (0, 1)"));
        }
        if self
            .side_lengths_m
            .iter()
            .any(|s| !(*s > 2.0 * self.margin_m))
        {
            return Err(invalid(
                "side_lengths_m",
                "sides must exceed twice the margin",
            ));
        }
        if self.anchor_counts.contains(&0) {
            return Err(invalid("anchor_counts", "anchor counts must be positive"));
        }
        Ok(())
    }

    /// Logarithmic grid from 0.1 m to 100 m, 20 points per decade.
    pub fn distance_grid(&self) -> Vec<f64> {
        if !self.distance_grid_m.is_empty() {
            return self.distance_grid_m.clone();
        }
        (0..=60)
            .map(|i| 10f64.powf(-1.0 + i as f64 / 20.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"trials": 7, "seed": 42, "algorithms": ["WLS", "cascade"]}"#,
        )
        .unwrap();
        assert_eq!(c.trials, 7);
        assert_eq!(c.seed, 42);
        assert_eq!(c.algorithms, vec![Algorithm::Wls, Algorithm::Cascade]);
        assert_eq!(c.anchor_count, 12);
        assert!(c.validate().is_ok());
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ExperimentConfig::from_json(r#"{"trails": 7}"#).is_err());
        let c = ExperimentConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            room: Room::new(10.0, -1.0, 3.0),
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
