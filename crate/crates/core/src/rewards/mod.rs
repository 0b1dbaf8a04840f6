//! Multi-objective reward: memory bank and prototypes, semantic
//! consistency, distributional coverage, expressive diversity, per-step
//! standardization and the bounded weighted combination.

pub mod bank;
pub mod components;

use serde::{Deserialize, Serialize};

pub use bank::{build_bank, BankEntry, MemoryBank};
pub use components::{
    combine, coverage_reward, expansion_reward, rbf_kernel, semantic_reward, standardize,
    trace_cov,
};

use crate::error::{Error, Result};

/// Which samples share the standardization statistics of the semantic term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeScope {
    /// Every sample of the training step.
    Step,
    /// Samples of the same identity batch.
    PerIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Bandwidth {
    Fixed { sigma: f64 },
    /// Median pairwise distance of the reference bank.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum Temperature {
    Fixed { tau: f64 },
    /// `τ = scale · S_r` of the identity.
    RelativeToReference { scale: f64 },
}

/// Reward hyperparameters as configured (before bank-dependent resolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_sem: f64,
    pub lambda_cov: f64,
    pub lambda_exp: f64,
    pub bandwidth: Bandwidth,
    pub alpha: f64,
    pub epsilon_expand: f64,
    pub temperature: Temperature,
    pub eps_std: f64,
    pub include_self_pairs: bool,
    pub scope: StandardizeScope,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_sem: 1.0,
            lambda_cov: 0.75,
            lambda_exp: 0.25,
            bandwidth: Bandwidth::Median,
            alpha: 0.5,
            epsilon_expand: 0.1,
            temperature: Temperature::RelativeToReference { scale: 0.1 },
            eps_std: 1e-8,
            include_self_pairs: true,
            scope: StandardizeScope::Step,
        }
    }
}

/// Fully resolved reward weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_sem: f64,
    pub lambda_cov: f64,
    pub lambda_exp: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub epsilon_expand: f64,
    pub temperature: Temperature,
    pub eps_std: f64,
    pub include_self_pairs: bool,
    pub scope: StandardizeScope,
}

impl RewardConfig {
    /// Resolves bank-dependent defaults (kernel bandwidth).
    pub fn resolve(&self, bank: &MemoryBank) -> Result<RewardWeights> {
        let sigma = match self.bandwidth {
            Bandwidth::Fixed { sigma } => sigma,
            Bandwidth::Median => bank.median_pairwise_distance().ok_or_else(|| {
                Error::argument("median bandwidth undefined for a bank with < 2 distinct features")
            })?,
        };
        let w = RewardWeights {
            lambda_sem: self.lambda_sem,
            lambda_cov: self.lambda_cov,
            lambda_exp: self.lambda_exp,
            sigma,
            alpha: self.alpha,
            epsilon_expand: self.epsilon_expand,
            temperature: self.temperature,
            eps_std: self.eps_std,
            include_self_pairs: self.include_self_pairs,
            scope: self.scope,
        };
        w.validate()?;
        Ok(w)
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let tau_ok = match self.temperature {
            Temperature::Fixed { tau } => tau > 0.0,
            Temperature::RelativeToReference { scale } => scale > 0.0,
        };
        if !(self.sigma > 0.0)
            || !(self.alpha > 0.0)
            || !(self.epsilon_expand >= 0.0)
            || !tau_ok
            || !(self.eps_std > 0.0)
        {
            return Err(Error::argument(
                "reward weights need sigma, alpha, tau, eps_std > 0 and epsilon >= 0",
            ));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [f64; 3] {
        [self.lambda_sem, self.lambda_cov, self.lambda_exp]
    }

    pub fn tau_for(&self, s_r: f64) -> Result<f64> {
        let tau = match self.temperature {
            Temperature::Fixed { tau } => tau,
            Temperature::RelativeToReference { scale } => scale * s_r,
        };
        if tau > 0.0 {
            Ok(tau)
        } else {
            Err(Error::argument("expansion temperature resolved to a non-positive value"))
        }
    }
}

/// Unstandardized reward terms of one identity batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRewards {
    pub identity: usize,
    pub r_sem: Vec<f64>,
    pub r_cov: f64,
    pub r_exp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub identity: usize,
    pub r_sem: f64,
    /// Batch-level terms, broadcast to each sample of the batch.
    pub r_cov: f64,
    pub r_exp: f64,
    pub std_sem: f64,
    pub std_cov: f64,
    pub std_exp: f64,
    pub r_norm: f64,
}

/// Raw terms for one identity batch of normalized generated features.
///
/// The expansion term needs at least two generated features; a single
/// sample carries no dispersion and scores `r_exp = 0`.
pub fn raw_rewards(
    gen_feats: &[Vec<f64>],
    y: usize,
    bank: &MemoryBank,
    weights: &RewardWeights,
) -> Result<RawRewards> {
    if gen_feats.is_empty() {
        return Err(Error::argument("reward batch is empty"));
    }
    let r_sem = gen_feats
        .iter()
        .map(|f| semantic_reward(f, bank, y))
        .collect::<Result<Vec<_>>>()?;
    let r_cov = coverage_reward(
        gen_feats,
        bank,
        y,
        weights.sigma,
        weights.alpha,
        weights.include_self_pairs,
    )?;
    let r_exp = if gen_feats.len() >= 2 {
        let s_r = bank.entry(y)?.trace().ok_or_else(|| {
            Error::argument(format!("identity {y} needs >= 2 reference features"))
        })?;
        let s_g = trace_cov(gen_feats)?;
        expansion_reward(s_g, s_r, weights.epsilon_expand, weights.tau_for(s_r)?)?
    } else {
        0.0
    };
    Ok(RawRewards {
        identity: y,
        r_sem,
        r_cov,
        r_exp,
    })
}

/// Standardizes raw terms over one training step and combines them.
/// Output mirrors the input grouping.
pub fn normalize_step(
    groups: &[RawRewards],
    weights: &RewardWeights,
) -> Result<Vec<Vec<RewardBreakdown>>> {
    if groups.is_empty() || groups.iter().any(|g| g.r_sem.is_empty()) {
        return Err(Error::argument("reward step has an empty batch"));
    }
    let eps = weights.eps_std;
    let all_sem: Vec<f64> = groups.iter().flat_map(|g| g.r_sem.iter().copied()).collect();
    let bcast = |f: fn(&RawRewards) -> f64| -> Vec<f64> {
        groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(f(g), g.r_sem.len()))
            .collect()
    };
    let std_cov = standardize(&bcast(|g| g.r_cov), eps)?;
    let std_exp = standardize(&bcast(|g| g.r_exp), eps)?;
    let std_sem = match weights.scope {
        StandardizeScope::Step => standardize(&all_sem, eps)?,
        StandardizeScope::PerIdentity => {
            let mut out = Vec::with_capacity(all_sem.len());
            for g in groups {
                out.extend(standardize(&g.r_sem, eps)?);
            }
            out
        }
    };
    let lambdas = weights.lambdas();
    let mut k = 0;
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let mut batch = Vec::with_capacity(g.r_sem.len());
        for &r_sem in &g.r_sem {
            let r_norm = combine(std_sem[k], std_cov[k], std_exp[k], lambdas);
            if !r_norm.is_finite() {
                return Err(Error::numeric("combined reward"));
            }
            batch.push(RewardBreakdown {
                identity: g.identity,
                r_sem,
                r_cov: g.r_cov,
                r_exp: g.r_exp,
                std_sem: std_sem[k],
                std_cov: std_cov[k],
                std_exp: std_exp[k],
                r_norm,
            });
            k += 1;
        }
        out.push(batch);
    }
    Ok(out)
}

/// Rewards for a training step made of several identity batches.
pub fn compute_step(
    batches: &[(usize, Vec<Vec<f64>>)],
    bank: &MemoryBank,
    weights: &RewardWeights,
) -> Result<Vec<Vec<RewardBreakdown>>> {
    let raw = batches
        .iter()
        .map(|(y, feats)| raw_rewards(feats, *y, bank, weights))
        .collect::<Result<Vec<_>>>()?;
    normalize_step(&raw, weights)
}

/// Rewards for a single identity batch, standardized within the batch.
pub fn compute_batch(
    gen_feats: &[Vec<f64>],
    y: usize,
    bank: &MemoryBank,
    weights: &RewardWeights,
) -> Result<Vec<RewardBreakdown>> {
    let raw = raw_rewards(gen_feats, y, bank, weights)?;
    Ok(normalize_step(&[raw], weights)?.remove(0))
}
