//! Variance-preserving noise schedule and the uniform time grids used by
//! N-step samplers.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
}

/// Continuous-time schedule `z_t = alpha(t) x + sigma(t) eps` on `t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Lower clamp for training-time draws of `t`.
    pub t_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Cosine,
            t_min: 1e-3,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::config(
                "schedule.t_min",
                format!("must lie in (0, 1), got {t_min}"),
            ));
        }
        Ok(NoiseSchedule { kind, t_min })
    }

    /// Returns `(alpha_t, sigma_t)`. The endpoints are exact: `(1, 0)` at
    /// `t = 0` and `(0, 1)` at `t = 1`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        match self.kind {
            ScheduleKind::Cosine => {
                if t == 0.0 {
                    Ok((1.0, 0.0))
                } else if t == 1.0 {
                    Ok((0.0, 1.0))
                } else {
                    let (s, c) = (FRAC_PI_2 * t).sin_cos();
                    Ok((c, s))
                }
            }
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.0)
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.alpha_sigma(t)?.1)
    }

    /// Truncated-SNR weight `max(alpha^2 / sigma^2, 1)`.
    pub fn snr_weight(&self, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if sigma == 0.0 {
            return Err(Error::Domain(format!(
                "snr weight undefined at t={t} (sigma = 0)"
            )));
        }
        Ok((alpha * alpha / (sigma * sigma)).max(1.0))
    }
}

/// Descending uniform grid `[1, 1 - 1/N, ..., 1/N]` for an N-step sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Target time of step `i`; the last step lands on `0`.
    pub fn next_time(&self, i: usize) -> f64 {
        self.times.get(i + 1).copied().unwrap_or(0.0)
    }

    /// Iterator over consecutive `(t, s)` pairs, ending with `(1/N, 0)`.
    pub fn transitions(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        (0..self.steps).map(move |i| (self.times[i], self.next_time(i)))
    }
}

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

pub fn make_grid(steps: usize) -> Result<TimeGrid> {
    if !is_power_of_two(steps) {
        return Err(Error::config(
            "steps",
            format!("sampler step count must be a power of two, got {steps}"),
        ));
    }
    let n = steps as f64;
    let times = (0..steps).map(|i| (steps - i) as f64 / n).collect();
    Ok(TimeGrid { steps, times })
}
