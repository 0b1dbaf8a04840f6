use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::linalg::{self, check_len};

use super::components::trace_cov;

/// Reference features of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    /// Unit-norm reference features.
    features: Vec<Vec<f64>>,
    /// Normalized mean of `features`.
    prototype: Vec<f64>,
    /// Trace of the reference sample covariance; `None` when fewer than two
    /// features are stored.
    trace: Option<f64>,
}

impl BankEntry {
    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn prototype(&self) -> &[f64] {
        &self.prototype
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn trace(&self) -> Option<f64> {
        self.trace
    }
}

/// Frozen per-identity memory of reference features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    feat_dim: usize,
    entries: BTreeMap<usize, BankEntry>,
}

/// Normalizes every feature, then caches the prototype `normalize(mean)` and
/// the reference covariance trace per identity.
pub fn build_bank(features_by_id: &BTreeMap<usize, Vec<Vec<f64>>>) -> Result<MemoryBank> {
    let feat_dim = features_by_id
        .values()
        .flat_map(|v| v.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::argument("memory bank needs at least one feature"))?;
    let mut entries = BTreeMap::new();
    for (&y, feats) in features_by_id {
        if feats.is_empty() {
            return Err(Error::argument(format!("identity {y} has no reference features")));
        }
        let features = feats
            .iter()
            .map(|f| {
                check_len("build_bank", feat_dim, f.len())?;
                linalg::ensure_finite(f, "build_bank feature")?;
                linalg::normalized(f).ok_or_else(|| Error::argument("zero reference feature"))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean = linalg::mean_vec(&features)?;
        let prototype = linalg::normalized(&mean)
            .filter(|_| linalg::norm(&mean) > 1e-12)
            .ok_or(Error::DegeneratePrototype(y))?;
        let trace = if features.len() >= 2 {
            Some(trace_cov(&features)?)
        } else {
            None
        };
        entries.insert(
            y,
            BankEntry {
                features,
                prototype,
                trace,
            },
        );
    }
    Ok(MemoryBank { feat_dim, entries })
}

impl MemoryBank {
    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn entry(&self, y: usize) -> Result<&BankEntry> {
        self.entries.get(&y).ok_or(Error::Label {
            label: y,
            size: self.entries.len(),
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Median pairwise Euclidean distance over all stored features.
    pub fn median_pairwise_distance(&self) -> Option<f64> {
        let all: Vec<&Vec<f64>> = self.entries.values().flat_map(|e| &e.features).collect();
        let mut d = Vec::with_capacity(all.len() * all.len().saturating_sub(1) / 2);
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                d.push(linalg::sq_dist(all[i], all[j]).ok()?.sqrt());
            }
        }
        if d.is_empty() {
            return None;
        }
        d.sort_by(|a, b| a.total_cmp(b));
        let m = d.len() / 2;
        let med = if d.len() % 2 == 0 {
            0.5 * (d[m - 1] + d[m])
        } else {
            d[m]
        };
        (med > 0.0).then_some(med)
    }
}
