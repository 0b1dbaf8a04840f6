//! Reverse-chain sampling with recorded Gaussian transitions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::numerics::linalg::check_len;
use crate::numerics::{gaussian_sample, Grads, Mlp, Rng, Tape};

/// One reverse transition `x_{t−1} ~ N(mean, std²·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: usize,
    pub mean: Vec<f64>,
    pub std: f64,
    /// Seed of the stream that drew this step's noise.
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub class_id: usize,
    pub schedule_fingerprint: u64,
    /// `x_T, x_{T−1}, …, x_0`.
    pub states: Vec<Vec<f64>>,
    /// Transitions in sampling order (`t = T … 1`).
    pub steps: Vec<Transition>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    /// State `x_t`.
    pub fn state(&self, t: usize) -> &[f64] {
        let big_t = self.steps.len();
        &self.states[big_t - t]
    }

    /// Transition that produced `x_{t−1}` from `x_t`.
    pub fn transition(&self, t: usize) -> &Transition {
        let big_t = self.steps.len();
        &self.steps[big_t - t]
    }

    /// Re-draws every step from its stored noise seed and checks that the
    /// stored states come out bit-identical.
    pub fn replay_matches(&self) -> bool {
        self.steps.iter().enumerate().all(|(i, step)| {
            let mut r = Rng::new(step.noise_seed);
            match gaussian_sample(&mut r, &step.mean, step.std) {
                Ok(x) => x == self.states[i + 1],
                Err(_) => false,
            }
        })
    }
}

/// Posterior mean `μ_θ(x_t, t, y)` and the tape of the ε-prediction.
pub fn posterior_mean(
    params: &Mlp,
    x_t: &[f64],
    t: usize,
    class_id: usize,
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, Tape)> {
    if t == 0 || t > schedule.timesteps() {
        return Err(Error::argument(format!("timestep {t} outside schedule")));
    }
    let (eps_hat, tape) = params.forward(x_t, t, class_id)?;
    let (c1, c2) = schedule.mean_coefficients(t);
    let mean = x_t
        .iter()
        .zip(&eps_hat)
        .map(|(x, e)| c1 * (x - c2 * e))
        .collect();
    Ok((mean, tape))
}

/// One reverse step; returns `(x_{t−1}, mean, std)`. At `t = 1` the std is
/// zero and `x_0` equals the mean.
pub fn reverse_step(
    params: &Mlp,
    x_t: &[f64],
    t: usize,
    class_id: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (mean, _) = posterior_mean(params, x_t, t, class_id, schedule)?;
    let std = schedule.posterior_std(t);
    let x_prev = gaussian_sample(rng, &mean, std)?;
    Ok((x_prev, mean, std))
}

/// Samples a full chain from `x_T ~ N(0, I)`.
pub fn sample_trajectory(
    params: &Mlp,
    class_id: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if let Some(n) = params.num_classes() {
        if class_id >= n {
            return Err(Error::Label {
                label: class_id,
                size: n,
            });
        }
    }
    let big_t = schedule.timesteps();
    let mut x = rng.normal_vec(params.state_dim());
    let mut states = Vec::with_capacity(big_t + 1);
    let mut steps = Vec::with_capacity(big_t);
    states.push(x.clone());
    for t in (1..=big_t).rev() {
        let noise_seed = rng.next_seed();
        let (x_prev, mean, std) =
            reverse_step(params, &x, t, class_id, schedule, &mut Rng::new(noise_seed))?;
        steps.push(Transition {
            t,
            mean,
            std,
            noise_seed,
        });
        states.push(x_prev.clone());
        x = x_prev;
    }
    Ok(Trajectory {
        class_id,
        schedule_fingerprint: schedule.fingerprint(),
        states,
        steps,
    })
}

/// Samples one trajectory per class id, each from its own child stream,
/// in parallel. Output order follows `class_ids`.
pub fn sample_trajectories(
    params: &Mlp,
    class_ids: &[usize],
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<Vec<Trajectory>> {
    class_ids
        .par_iter()
        .enumerate()
        .map(|(i, &c)| sample_trajectory(params, c, schedule, &mut rng.child_indexed("traj", i)))
        .collect()
}

/// Isotropic Gaussian log density `log N(x_prev; mean, std²·I)`.
pub fn log_prob_step(mean: &[f64], std: f64, x_prev: &[f64]) -> Result<f64> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::argument(format!("log density needs std > 0, got {std}")));
    }
    check_len("log_prob_step", mean.len(), x_prev.len())?;
    let d = mean.len() as f64;
    let var = std * std;
    let sq: f64 = mean.iter().zip(x_prev).map(|(m, x)| (x - m) * (x - m)).sum();
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
}

/// Adds `scale · ∇_θ log p_θ(x_{t−1} | x_t, c, t)` into `acc`, with the
/// recorded states held fixed. Returns the log density.
pub fn accumulate_log_prob_grad(
    params: &Mlp,
    traj: &Trajectory,
    t: usize,
    schedule: &NoiseSchedule,
    scale: f64,
    acc: &mut Grads,
) -> Result<f64> {
    let std = schedule.posterior_std(t);
    if !(std > 0.0) {
        return Err(Error::argument(format!("timestep {t} has zero variance")));
    }
    let (mean, tape) = posterior_mean(params, traj.state(t), t, traj.class_id, schedule)?;
    let x_prev = traj.state(t - 1);
    let (c1, c2) = schedule.mean_coefficients(t);
    let var = std * std;
    // d log p / d mean = (x − μ)/σ², d mean / d ε̂ = −c1·c2
    let g: Vec<f64> = x_prev
        .iter()
        .zip(&mean)
        .map(|(x, m)| -(c1 * c2) * (x - m) / var)
        .collect();
    params.backward_into(&tape, &g, scale, acc)?;
    log_prob_step(&mean, std, x_prev)
}

/// Adds `scale · ∇_θ KL(N(μ_θ, σ²) ‖ N(μ_ref, σ²))` at the recorded `x_t`.
/// Returns the KL value.
pub fn accumulate_kl_grad(
    params: &Mlp,
    reference: &Mlp,
    traj: &Trajectory,
    t: usize,
    schedule: &NoiseSchedule,
    scale: f64,
    acc: &mut Grads,
) -> Result<f64> {
    let std = schedule.posterior_std(t);
    if !(std > 0.0) {
        return Err(Error::argument(format!("timestep {t} has zero variance")));
    }
    let x_t = traj.state(t);
    let (mean, tape) = posterior_mean(params, x_t, t, traj.class_id, schedule)?;
    let (ref_mean, _) = posterior_mean(reference, x_t, t, traj.class_id, schedule)?;
    let (c1, c2) = schedule.mean_coefficients(t);
    let var = std * std;
    let diff: Vec<f64> = mean.iter().zip(&ref_mean).map(|(a, b)| a - b).collect();
    let g: Vec<f64> = diff.iter().map(|d| -(c1 * c2) * d / var).collect();
    params.backward_into(&tape, &g, scale, acc)?;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * var))
}
