//! Lookahead sample selection: one virtual gradient step on the mixed
//! batch, then keep the synthetic candidates whose own loss drops the most.

use serde::{Deserialize, Serialize};

use crate::downstream::{id_loss, sample_loss, Classifier};
use crate::error::{Error, Result};
use crate::numerics::sgd_step;
use crate::world::{LabeledSample, Origin};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    /// Fraction of candidates kept, in `(0, 1]`.
    pub keep_fraction: f64,
    pub virtual_lr: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            keep_fraction: 0.5,
            virtual_lr: 0.1,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::argument("keep_fraction must be in (0, 1]"));
        }
        if !(self.virtual_lr >= 0.0) || !self.virtual_lr.is_finite() {
            return Err(Error::argument("virtual_lr must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// `Δl` per candidate, in candidate order.
    pub deltas: Vec<f64>,
    /// Indices of kept candidates, ascending.
    pub kept: Vec<usize>,
    /// Mixed-batch loss before and after the virtual step.
    pub loss_before: f64,
    pub loss_after: f64,
}

/// `w′ = w − lr·∇_w l_id(w, batch)`; `w` is untouched.
pub fn virtual_step(
    w: &Classifier,
    mixed_batch: &[LabeledSample],
    virtual_lr: f64,
) -> Result<Classifier> {
    let (_, grads) = id_loss(w, mixed_batch)?;
    Ok(Classifier {
        net: sgd_step(&w.net, &grads, virtual_lr)?,
        labels: w.labels.clone(),
    })
}

/// `Δl = l_id(w′, x̂) − l_id(w, x̂)` for a synthetic candidate.
pub fn utility_delta(w: &Classifier, w_next: &Classifier, candidate: &LabeledSample) -> Result<f64> {
    if candidate.origin != Origin::Synthetic {
        return Err(Error::argument("utility is defined for synthetic candidates only"));
    }
    Ok(sample_loss(w_next, candidate)? - sample_loss(w, candidate)?)
}

/// Number of candidates kept out of `n`.
pub fn kept_count(n: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * n as f64).ceil() as usize).clamp(usize::from(n > 0), n)
}

/// Indices of the `ceil(fraction·n)` smallest values, ties broken by index,
/// returned in ascending index order.
pub fn smallest_indices(values: &[f64], keep_fraction: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order.truncate(kept_count(values.len(), keep_fraction));
    order.sort_unstable();
    order
}

/// Scores every candidate against one shared virtual step on `mixed_batch`
/// and keeps the smallest-`Δl` fraction (candidate order preserved).
pub fn select(
    w: &Classifier,
    candidates: &[LabeledSample],
    mixed_batch: &[LabeledSample],
    config: &SelectionConfig,
) -> Result<(Vec<LabeledSample>, SelectionReport)> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(Error::argument("no candidates to select from"));
    }
    let (loss_before, _) = id_loss(w, mixed_batch)?;
    let w_next = virtual_step(w, mixed_batch, config.virtual_lr)?;
    let (loss_after, _) = id_loss(&w_next, mixed_batch)?;
    let deltas = candidates
        .iter()
        .map(|c| utility_delta(w, &w_next, c))
        .collect::<Result<Vec<_>>>()?;
    let kept = smallest_indices(&deltas, config.keep_fraction);
    let kept_samples = kept.iter().map(|&i| candidates[i].clone()).collect();
    Ok((
        kept_samples,
        SelectionReport {
            deltas,
            kept,
            loss_before,
            loss_after,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_all_preserves_order() {
        assert_eq!(smallest_indices(&[0.3, -1.0, 0.2], 1.0), vec![0, 1, 2]);
    }

    #[test]
    fn two_candidates_half() {
        assert_eq!(smallest_indices(&[-0.3, 0.2], 0.5), vec![0]);
    }

    #[test]
    fn ties_broken_by_index() {
        assert_eq!(smallest_indices(&[1.0, 0.0, 0.0, 0.0], 0.5), vec![1, 2]);
    }

    #[test]
    fn kept_count_is_ceiling() {
        assert_eq!(kept_count(5, 0.5), 3);
        assert_eq!(kept_count(4, 0.5), 2);
        assert_eq!(kept_count(3, 0.01), 1);
        assert_eq!(kept_count(0, 0.5), 0);
    }

    #[test]
    fn invalid_config_rejected() {
        for (f, lr) in [(0.0, 0.1), (1.5, 0.1), (0.5, -1.0)] {
            let c = SelectionConfig {
                keep_fraction: f,
                virtual_lr: lr,
            };
            assert!(c.validate().is_err());
        }
    }
}
