use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::check_len;
use crate::numerics::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 50,
            beta_min: 1e-3,
            beta_max: 0.2,
        }
    }
}

/// Linear beta schedule with cached cumulative products.
///
/// Timesteps are 1-based: `beta(1)` is the first forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    fingerprint: u64,
}

/// Builds a linearly interpolated schedule.
pub fn build_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        timesteps,
        beta_min,
        beta_max,
    })
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            timesteps,
            beta_min,
            beta_max,
        } = config;
        if timesteps == 0 {
            return Err(Error::argument("schedule needs T >= 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::argument(format!(
                "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let mut fp = derive_seed(timesteps as u64, "schedule");
        for b in &betas {
            fp = derive_seed(fp, &b.to_bits().to_string());
        }
        Ok(NoiseSchedule {
            config,
            betas,
            alpha_bars,
            fingerprint: fp,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// Identifies the schedule; trajectories record it.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            Err(Error::argument(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )))
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Fixed reverse std `sqrt(β_t (1−ᾱ_{t−1}) / (1−ᾱ_t))`; zero at `t = 1`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        (self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }

    /// Coefficients `(c1, c2)` of the posterior mean
    /// `c1 · (x_t − c2 · ε̂)`.
    pub fn mean_coefficients(&self, t: usize) -> (f64, f64) {
        let c1 = 1.0 / self.alpha(t).sqrt();
        let c2 = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        (c1, c2)
    }
}

/// Forward noising `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    check_len("q_sample eps", x0.len(), eps.len())?;
    let ab = schedule.alpha_bar(t);
    Ok(q_sample_with(x0, eps, ab))
}

pub(crate) fn q_sample_with(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}
