//! Reward-driven policy-gradient fine-tuning of the diffusion sampler.
//!
//! Each reverse transition is a Gaussian policy step with a learnable mean
//! and fixed variance. The update ascends
//!
//! ```text
//! (1/N) Σ_i R_i Σ_t log p_θ(x_{t−1} | x_t, c, t)
//!   − β (1/N) Σ_i mean_t KL(p_θ(·|x_t) ‖ p_ref(·|x_t))
//! ```
//!
//! with sampled states held fixed (score-function estimator).

use serde::{Deserialize, Serialize};

use crate::diffusion::sampling::{accumulate_log_prob_grad, posterior_mean};
use crate::diffusion::{sample_trajectories, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{parallel, Grads, Mlp, Optimizer, OptimizerKind, Rng};
use crate::rewards::{compute_step, MemoryBank, RewardBreakdown, RewardWeights};
use crate::world::FeatureExtractor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Trajectories per identity per step.
    pub batch_size: usize,
    pub identities_per_step: usize,
    pub kl_weight: f64,
    /// Number of stochastic timesteps used per update; `None` uses all.
    pub timestep_subsample: Option<usize>,
    pub steps: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            learning_rate: 1e-5,
            optimizer: OptimizerKind::adam(),
            batch_size: 8,
            identities_per_step: 4,
            kl_weight: 0.01,
            timestep_subsample: None,
            steps: 100,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.identities_per_step == 0 {
            return Err(Error::argument("rl batch sizes must be positive"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::argument("kl_weight must be >= 0"));
        }
        if self.timestep_subsample == Some(0) {
            return Err(Error::argument("timestep_subsample must be positive"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::new(self.optimizer, self.learning_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGradientReport {
    pub step: usize,
    pub mean_r_norm: f64,
    pub mean_r_sem: f64,
    pub mean_r_cov: f64,
    pub mean_r_exp: f64,
    pub grad_norm: f64,
    pub kl: f64,
}

/// `Σ_{t ∈ timesteps} ∇_θ log p_θ(x_{t−1} | x_t, c, t)` along a recorded
/// trajectory.
pub fn trajectory_logprob_grads(
    params: &Mlp,
    traj: &Trajectory,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Grads> {
    check_trajectory(traj, schedule)?;
    let mut acc = Grads::zeros_like(params);
    for &t in timesteps {
        accumulate_log_prob_grad(params, traj, t, schedule, 1.0, &mut acc)?;
    }
    Ok(acc)
}

fn check_trajectory(traj: &Trajectory, schedule: &NoiseSchedule) -> Result<()> {
    if traj.schedule_fingerprint != schedule.fingerprint()
        || traj.steps.len() != schedule.timesteps()
    {
        return Err(Error::State(
            "trajectory was sampled under a different schedule".into(),
        ));
    }
    Ok(())
}

/// Timesteps with non-zero transition variance.
pub fn stochastic_timesteps(schedule: &NoiseSchedule) -> Vec<usize> {
    (1..=schedule.timesteps())
        .filter(|&t| schedule.posterior_std(t) > 0.0)
        .collect()
}

/// Timesteps used by one update and the rescaling that keeps the summed
/// log-prob gradient unbiased.
pub fn select_timesteps(
    schedule: &NoiseSchedule,
    subsample: Option<usize>,
    rng: &mut Rng,
) -> (Vec<usize>, f64) {
    let eligible = stochastic_timesteps(schedule);
    match subsample {
        Some(k) if k < eligible.len() => {
            let mut pick: Vec<usize> = rng
                .choose_distinct(eligible.len(), k)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            pick.sort_unstable_by(|a, b| b.cmp(a));
            let scale = eligible.len() as f64 / k as f64;
            (pick, scale)
        }
        _ => {
            let mut all = eligible;
            all.reverse();
            (all, 1.0)
        }
    }
}

/// Ascent direction of the KL-regularized objective (not yet negated).
/// Returns `(gradient, mean KL per trajectory)`.
pub fn objective_gradient(
    params: &Mlp,
    trajs: &[Trajectory],
    rewards: &[f64],
    theta_ref: &Mlp,
    kl_weight: f64,
    timesteps: &[usize],
    logprob_scale: f64,
    schedule: &NoiseSchedule,
) -> Result<(Grads, f64)> {
    if trajs.len() != rewards.len() {
        return Err(Error::Dimension {
            context: "policy_update rewards",
            expected: trajs.len(),
            got: rewards.len(),
        });
    }
    if trajs.is_empty() {
        return Err(Error::argument("policy update needs trajectories"));
    }
    for tr in trajs {
        check_trajectory(tr, schedule)?;
    }
    let inv_n = 1.0 / trajs.len() as f64;
    let kl_scale = if timesteps.is_empty() {
        0.0
    } else {
        kl_weight / timesteps.len() as f64
    };
    let items: Vec<(&Trajectory, f64)> = trajs.iter().zip(rewards.iter().copied()).collect();
    let (kl_total, grads) = parallel::accumulate(params, &items, |_, (traj, reward), acc| {
        let mut kl_sum = 0.0;
        for &t in timesteps {
            let std = schedule.posterior_std(t);
            if !(std > 0.0) {
                return Err(Error::argument(format!("timestep {t} has zero variance")));
            }
            let var = std * std;
            let x_t = traj.state(t);
            let (mean, tape) = posterior_mean(params, x_t, t, traj.class_id, schedule)?;
            let (c1, c2) = schedule.mean_coefficients(t);
            let x_prev = traj.state(t - 1);
            // d(objective)/d(mean), then chain through mean = c1(x_t − c2 ε̂)
            let mut g_mean: Vec<f64> = x_prev
                .iter()
                .zip(&mean)
                .map(|(x, m)| reward * logprob_scale * (x - m) / var)
                .collect();
            if kl_weight > 0.0 {
                let (ref_mean, _) = posterior_mean(theta_ref, x_t, t, traj.class_id, schedule)?;
                let mut kl = 0.0;
                for ((g, m), r) in g_mean.iter_mut().zip(&mean).zip(&ref_mean) {
                    *g -= kl_scale * (m - r) / var;
                    kl += (m - r) * (m - r);
                }
                kl_sum += kl / (2.0 * var);
            }
            let g_eps: Vec<f64> = g_mean.iter().map(|g| -(c1 * c2) * g).collect();
            params.backward_into(&tape, &g_eps, inv_n, acc)?;
        }
        Ok(if timesteps.is_empty() {
            0.0
        } else {
            kl_sum / timesteps.len() as f64
        })
    })?;
    Ok((grads, kl_total * inv_n))
}

/// One ascent step on the KL-regularized policy objective.
///
/// `opt` carries optimizer state across steps. Non-finite gradients reject
/// the step and leave parameters untouched.
#[allow(clippy::too_many_arguments)]
pub fn policy_update(
    params: &Mlp,
    trajs: &[Trajectory],
    rewards: &[f64],
    theta_ref: &Mlp,
    config: &RlConfig,
    schedule: &NoiseSchedule,
    opt: &mut Optimizer,
    rng: &mut Rng,
) -> Result<(Mlp, PolicyGradientReport)> {
    if !rewards.iter().all(|r| r.is_finite()) {
        return Err(Error::numeric("non-finite reward"));
    }
    let (timesteps, scale) = select_timesteps(schedule, config.timestep_subsample, rng);
    let (mut grads, kl) = objective_gradient(
        params,
        trajs,
        rewards,
        theta_ref,
        config.kl_weight,
        &timesteps,
        scale,
        schedule,
    )?;
    let grad_norm = grads.norm();
    if !grads.is_finite() || !grad_norm.is_finite() {
        return Err(Error::numeric("policy gradient"));
    }
    grads.scale(-1.0);
    let mut next = params.clone();
    opt.step(&mut next, &grads)?;
    let report = PolicyGradientReport {
        step: 0,
        mean_r_norm: mean(rewards),
        mean_r_sem: f64::NAN,
        mean_r_cov: f64::NAN,
        mean_r_exp: f64::NAN,
        grad_norm,
        kl,
    };
    Ok((next, report))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RlStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct RlRun {
    pub params: Mlp,
    pub history: Vec<PolicyGradientReport>,
    /// Reward breakdowns per step, grouped by identity batch.
    pub rewards: Vec<Vec<Vec<RewardBreakdown>>>,
    pub status: RlStatus,
}

/// Samples identity batches, scores terminal samples with the reward, and
/// applies policy updates for `config.steps` steps.
///
/// Class ids index the denoiser's class table; `bank` must hold an entry
/// for each of `0..num_classes`. A failing step stops the loop with the
/// history gathered so far and the last good parameters.
pub fn rl_finetune(
    theta0: &Mlp,
    bank: &MemoryBank,
    extractor: &FeatureExtractor,
    weights: &RewardWeights,
    config: &RlConfig,
    schedule: &NoiseSchedule,
    rng: &Rng,
) -> Result<RlRun> {
    config.validate()?;
    let num_classes = theta0
        .num_classes()
        .ok_or_else(|| Error::argument("policy must be class-conditional"))?;
    for c in 0..num_classes {
        bank.entry(c)?;
    }
    let mut params = theta0.clone();
    let mut opt = config.optimizer()?;
    let mut history = Vec::with_capacity(config.steps);
    let mut reward_log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        match rl_step(
            &params, theta0, bank, extractor, weights, config, schedule, &mut opt, rng, step,
        ) {
            Ok((next, report, breakdowns)) => {
                params = next;
                history.push(report);
                reward_log.push(breakdowns);
            }
            Err(e) => {
                log::warn!("rl step {step} rejected: {e}");
                return Ok(RlRun {
                    params,
                    history,
                    rewards: reward_log,
                    status: RlStatus::Aborted {
                        step,
                        reason: e.to_string(),
                    },
                });
            }
        }
    }
    Ok(RlRun {
        params,
        history,
        rewards: reward_log,
        status: RlStatus::Completed,
    })
}

#[allow(clippy::too_many_arguments)]
fn rl_step(
    params: &Mlp,
    theta_ref: &Mlp,
    bank: &MemoryBank,
    extractor: &FeatureExtractor,
    weights: &RewardWeights,
    config: &RlConfig,
    schedule: &NoiseSchedule,
    opt: &mut Optimizer,
    rng: &Rng,
    step: usize,
) -> Result<(Mlp, PolicyGradientReport, Vec<Vec<RewardBreakdown>>)> {
    let step_rng = rng.child_indexed("step", step);
    let num_classes = params.num_classes().unwrap_or(0);
    let mut ids = step_rng
        .child("identities")
        .choose_distinct(num_classes, config.identities_per_step);
    ids.sort_unstable();
    let labels: Vec<usize> = ids
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, config.batch_size))
        .collect();
    let trajs = sample_trajectories(params, &labels, schedule, &step_rng.child("trajectories"))?;
    let terminals: Vec<Vec<f64>> = trajs.iter().map(|t| t.terminal().to_vec()).collect();
    let feats = extractor.extract_features(&terminals)?;
    let batches: Vec<(usize, Vec<Vec<f64>>)> = ids
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let lo = k * config.batch_size;
            (c, feats[lo..lo + config.batch_size].to_vec())
        })
        .collect();
    let breakdowns = compute_step(&batches, bank, weights)?;
    let flat: Vec<&RewardBreakdown> = breakdowns.iter().flatten().collect();
    let rewards: Vec<f64> = flat.iter().map(|b| b.r_norm).collect();
    let (next, mut report) = policy_update(
        params,
        &trajs,
        &rewards,
        theta_ref,
        config,
        schedule,
        opt,
        &mut step_rng.child("timesteps"),
    )?;
    report.step = step;
    report.mean_r_sem = mean(&flat.iter().map(|b| b.r_sem).collect::<Vec<_>>());
    report.mean_r_cov = mean(&breakdowns.iter().map(|b| b[0].r_cov).collect::<Vec<_>>());
    report.mean_r_exp = mean(&breakdowns.iter().map(|b| b[0].r_exp).collect::<Vec<_>>());
    Ok((next, report, breakdowns))
}
