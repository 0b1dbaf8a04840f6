//! The three reward components and their normalization.

use crate::error::{Error, Result};
use crate::numerics::linalg::{self, check_len};

use super::bank::MemoryBank;

const UNIT_TOL: f64 = 1e-8;

fn ensure_unit(f: &[f64], what: &str) -> Result<()> {
    let n = linalg::norm(f);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::argument(format!("{what} must be unit-norm, got ‖f‖ = {n}")));
    }
    Ok(())
}

/// `(f̂_gᵀ f̂_y + 1) / 2`, the rescaled cosine to the identity prototype.
pub fn semantic_reward(f_g: &[f64], bank: &MemoryBank, y: usize) -> Result<f64> {
    let entry = bank.entry(y)?;
    ensure_unit(f_g, "generated feature")?;
    let cos = linalg::dot(f_g, entry.prototype())?;
    Ok((0.5 * (cos + 1.0)).clamp(0.0, 1.0))
}

/// `exp(−‖u − v‖² / (2σ²))`.
pub fn rbf_kernel(u: &[f64], v: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::argument(format!("kernel bandwidth must be > 0, got {sigma}")));
    }
    Ok((-linalg::sq_dist(u, v)? / (2.0 * sigma * sigma)).exp())
}

/// Mean generated-to-reference kernel minus `alpha` times the mean
/// generated-to-generated kernel.
///
/// With `include_self_pairs` the redundancy term averages over all `B²`
/// ordered pairs; otherwise over the `B(B−1)` off-diagonal pairs (zero when
/// `B = 1`).
pub fn coverage_reward(
    gen_feats: &[Vec<f64>],
    bank: &MemoryBank,
    y: usize,
    sigma: f64,
    alpha: f64,
    include_self_pairs: bool,
) -> Result<f64> {
    if gen_feats.is_empty() {
        return Err(Error::argument("coverage reward needs at least one generated feature"));
    }
    if !(alpha > 0.0) {
        return Err(Error::argument(format!("alpha must be > 0, got {alpha}")));
    }
    let refs = bank.entry(y)?.features();
    for g in gen_feats {
        ensure_unit(g, "generated feature")?;
    }
    let mut cross = 0.0;
    for g in gen_feats {
        for r in refs {
            cross += rbf_kernel(g, r, sigma)?;
        }
    }
    cross /= (gen_feats.len() * refs.len()) as f64;

    let b = gen_feats.len();
    let mut within = 0.0;
    let mut pairs = 0usize;
    for i in 0..b {
        for j in 0..b {
            if i == j && !include_self_pairs {
                continue;
            }
            within += rbf_kernel(&gen_feats[i], &gen_feats[j], sigma)?;
            pairs += 1;
        }
    }
    let redundancy = if pairs == 0 { 0.0 } else { within / pairs as f64 };
    Ok(cross - alpha * redundancy)
}

/// Trace of the unbiased sample covariance, `Σ‖f_j − f̄‖² / (n − 1)`.
pub fn trace_cov(feats: &[Vec<f64>]) -> Result<f64> {
    if feats.len() < 2 {
        return Err(Error::argument("covariance trace needs at least two features"));
    }
    let mean = linalg::mean_vec(feats)?;
    let mut total = 0.0;
    for f in feats {
        check_len("trace_cov", mean.len(), f.len())?;
        total += linalg::sq_dist(f, &mean)?;
    }
    Ok(total / (feats.len() - 1) as f64)
}

/// `−((S_g − (1+ε)·S_r) / τ)²`.
pub fn expansion_reward(s_g: f64, s_r: f64, epsilon_expand: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::argument(format!("tau must be > 0, got {tau}")));
    }
    if s_g < 0.0 || s_r < 0.0 || epsilon_expand < 0.0 {
        return Err(Error::argument("traces and expansion level must be >= 0"));
    }
    let z = (s_g - (1.0 + epsilon_expand) * s_r) / tau;
    Ok(-(z * z))
}

/// `(v − μ) / (σ + ϵ)` with the batch mean and population std.
pub fn standardize(values: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::argument("cannot standardize an empty batch"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps_std;
    Ok(values.iter().map(|v| (v - mean) / denom).collect())
}

/// `tanh(λ_sem·r̃_sem + λ_cov·r̃_cov + λ_exp·r̃_exp)`.
pub fn combine(r_sem: f64, r_cov: f64, r_exp: f64, lambdas: [f64; 3]) -> f64 {
    (lambdas[0] * r_sem + lambdas[1] * r_cov + lambdas[2] * r_exp).tanh()
}
