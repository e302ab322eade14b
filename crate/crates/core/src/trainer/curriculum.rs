//! Linear curriculum weight for the auxiliary self-supervised term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Steps over which the weight ramps from min to max. Zero pins the
    /// weight at `lambda_max` immediately.
    pub ramp_steps: u64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule { lambda_min: 0.0, lambda_max: 0.1, ramp_steps: 81_920 }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_min < 0.0 || self.lambda_max < self.lambda_min {
            return Err(Error::config("need 0 <= lambda_min <= lambda_max"));
        }
        Ok(())
    }
}

/// Ramp value at step `t`: linear from `lambda_min` to `lambda_max` over
/// `ramp_steps`, constant afterwards.
pub fn curriculum_lambda(t: u64, schedule: &CurriculumSchedule) -> f64 {
    if schedule.ramp_steps == 0 || t >= schedule.ramp_steps {
        return schedule.lambda_max;
    }
    let frac = t as f64 / schedule.ramp_steps as f64;
    schedule.lambda_min + (schedule.lambda_max - schedule.lambda_min) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_midpoint_saturation() {
        let s = CurriculumSchedule { lambda_min: 0.2, lambda_max: 1.0, ramp_steps: 100 };
        assert_eq!(curriculum_lambda(0, &s), 0.2);
        assert!((curriculum_lambda(50, &s) - 0.6).abs() < 1e-12);
        assert_eq!(curriculum_lambda(100, &s), 1.0);
        assert_eq!(curriculum_lambda(10_000, &s), 1.0);
    }

    #[test]
    fn monotone_over_sampled_grid() {
        let s = CurriculumSchedule::default();
        let mut prev = -1.0;
        for t in (0..200_000).step_by(997) {
            let l = curriculum_lambda(t, &s);
            assert!(l >= prev);
            prev = l;
        }
    }
}
