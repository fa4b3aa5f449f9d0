use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts every `period` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Steps per annealing wave.
    pub period: usize,
    /// Number of waves a run is planned for; informational, the schedule
    /// keeps restarting past it.
    pub waves: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-5,
            period: 100,
            waves: 1,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.period == 0 {
            return Err(Error::Config("schedule period must be at least one step".into()));
        }
        Ok(())
    }

    /// Default schedule shape for a given peak rate: floor at 1% of peak.
    pub fn for_peak(lr_max: f64, period: usize, waves: usize) -> Self {
        Self {
            lr_max,
            lr_min: lr_max / 100.0,
            period: period.max(1),
            waves,
        }
    }
}

pub fn cosine_lr(step: usize, params: &ScheduleParams) -> f64 {
    let phase = (step % params.period.max(1)) as f64 / params.period.max(1) as f64;
    params.lr_min + 0.5 * (params.lr_max - params.lr_min) * (1.0 + (PI * phase).cos())
}
