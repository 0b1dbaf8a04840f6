//! Ablation sweeps over {selection, R_sem, R_cov, R_exp}.
//!
//! World, pretraining and cold-start are shared by every variant of a seed;
//! reward fine-tuning runs once per distinct reward-toggle set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mlp;
use crate::world::LabeledSample;

use super::config::PipelineConfig;
use super::stages::{
    stage_coldstart, stage_downstream, stage_pretrain, stage_rl, stage_synth, stage_world,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub dss: bool,
    pub r_sem: bool,
    pub r_cov: bool,
    pub r_exp: bool,
}

impl Toggles {
    fn rewards(self) -> [bool; 3] {
        [self.r_sem, self.r_cov, self.r_exp]
    }

    fn any_reward(self) -> bool {
        self.r_sem || self.r_cov || self.r_exp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    /// Downstream training on real data only.
    RealOnly,
    /// Real plus a synthetic pool. With every reward term off the pool comes
    /// from the cold-start model.
    Synthetic(Toggles),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::RealOnly => "real-only".into(),
            Variant::Synthetic(t) => {
                let mut name = if t.any_reward() {
                    let terms: Vec<&str> = [("sem", t.r_sem), ("cov", t.r_cov), ("exp", t.r_exp)]
                        .iter()
                        .filter(|(_, on)| *on)
                        .map(|(n, _)| *n)
                        .collect();
                    format!("rl[{}]", terms.join("+"))
                } else {
                    "cold-start".to_string()
                };
                if t.dss {
                    name.push_str("+dss");
                }
                name
            }
        }
    }

    /// Base config with this variant's toggles applied.
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Variant::RealOnly => {
                c.stages.use_synthetic = false;
                c.downstream.use_selector = false;
            }
            Variant::Synthetic(t) => {
                c.stages.use_synthetic = true;
                c.stages.skip_rl = !t.any_reward();
                c.downstream.use_selector = t.dss;
                if !t.r_sem {
                    c.rewards.lambda_sem = 0.0;
                }
                if !t.r_cov {
                    c.rewards.lambda_cov = 0.0;
                }
                if !t.r_exp {
                    c.rewards.lambda_exp = 0.0;
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    /// Components added one at a time: real-only, cold-start synthetic,
    /// + selection, then the reward terms in turn.
    pub fn ladder(seeds: Vec<u64>) -> Self {
        let t = |dss, r_sem, r_cov, r_exp| {
            Variant::Synthetic(Toggles {
                dss,
                r_sem,
                r_cov,
                r_exp,
            })
        };
        AblationSpec {
            variants: vec![
                Variant::RealOnly,
                t(false, false, false, false),
                t(true, false, false, false),
                t(true, true, false, false),
                t(true, true, true, false),
                t(true, true, true, true),
            ],
            seeds,
        }
    }

    /// Cartesian product of per-toggle value lists, in the order
    /// dss → r_sem → r_cov → r_exp (last varies fastest).
    pub fn grid(
        dss: &[bool],
        r_sem: &[bool],
        r_cov: &[bool],
        r_exp: &[bool],
        seeds: Vec<u64>,
    ) -> Self {
        let mut variants = Vec::new();
        for &d in dss {
            for &s in r_sem {
                for &c in r_cov {
                    for &e in r_exp {
                        variants.push(Variant::Synthetic(Toggles {
                            dss: d,
                            r_sem: s,
                            r_cov: c,
                            r_exp: e,
                        }));
                    }
                }
            }
        }
        AblationSpec { variants, seeds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::argument("ablation needs at least one seed"));
        }
        if self.variants.is_empty() {
            return Err(Error::argument("ablation needs at least one variant"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    pub closed_set_accuracy: Option<f64>,
    pub novel_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation (0 for a single run).
    pub std_accuracy: f64,
    pub mean_novel_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub from: String,
    pub to: String,
    pub delta: f64,
    pub improves: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<TableRow>,
    /// Cells ordered by variant (spec order), then seed (spec order).
    pub cells: Vec<CellResult>,
    /// Consecutive-row comparisons of mean accuracy.
    pub monotonicity: Vec<LadderStep>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Runs every (variant, seed) cell in memory and tabulates mean ± std
/// accuracy per variant. Seeds run in parallel; cell results do not depend
/// on scheduling.
pub fn run_ablation(spec: &AblationSpec, base: &PipelineConfig) -> Result<AblationTable> {
    spec.validate()?;
    base.validate()?;
    let per_seed: Vec<Vec<CellResult>> = spec
        .seeds
        .par_iter()
        .map(|&seed| run_seed(spec, base, seed))
        .collect();
    let mut cells = Vec::with_capacity(spec.variants.len() * spec.seeds.len());
    for (vi, _) in spec.variants.iter().enumerate() {
        for seed_cells in &per_seed {
            cells.push(seed_cells[vi].clone());
        }
    }
    let rows: Vec<TableRow> = spec
        .variants
        .iter()
        .map(|v| {
            let name = v.name();
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.variant == name).collect();
            let acc: Vec<f64> = mine.iter().filter_map(|c| c.closed_set_accuracy).collect();
            let novel: Vec<f64> = mine.iter().filter_map(|c| c.novel_accuracy).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            TableRow {
                variant: name,
                runs: mine.len(),
                failed: mine.iter().filter(|c| c.error.is_some()).count(),
                mean_accuracy,
                std_accuracy,
                mean_novel_accuracy: (!novel.is_empty()).then(|| mean_std(&novel).0),
            }
        })
        .collect();
    let monotonicity = rows
        .windows(2)
        .map(|w| LadderStep {
            from: w[0].variant.clone(),
            to: w[1].variant.clone(),
            delta: w[1].mean_accuracy - w[0].mean_accuracy,
            improves: w[1].mean_accuracy > w[0].mean_accuracy,
        })
        .collect();
    Ok(AblationTable {
        rows,
        cells,
        monotonicity,
    })
}

/// Shared stages for one seed, then every variant. A failing shared stage
/// marks all of the seed's cells failed.
fn run_seed(spec: &AblationSpec, base: &PipelineConfig, seed: u64) -> Vec<CellResult> {
    let fail = |variant: &Variant, e: &Error| CellResult {
        variant: variant.name(),
        seed,
        closed_set_accuracy: None,
        novel_accuracy: None,
        error: Some(e.to_string()),
    };
    let shared = (|| -> Result<_> {
        let ws = stage_world(base, seed)?;
        let pre = stage_pretrain(base, &ws, seed)?;
        let cs = stage_coldstart(base, &ws, &pre.params, seed)?;
        Ok((ws, cs.params))
    })();
    let (ws, theta0) = match shared {
        Ok(v) => v,
        Err(e) => return spec.variants.iter().map(|v| fail(v, &e)).collect(),
    };
    let mut pools: BTreeMap<[bool; 3], Result<Vec<LabeledSample>>> = BTreeMap::new();
    let mut pool_for = |cfg: &PipelineConfig, key: [bool; 3]| -> Result<Vec<LabeledSample>> {
        if let Some(p) = pools.get(&key) {
            return p.as_ref().map(Clone::clone).map_err(|e| Error::State(e.to_string()));
        }
        let policy: Result<Mlp> = if cfg.rl_enabled() {
            stage_rl(cfg, &ws, &theta0, seed).and_then(|run| match run.status {
                crate::rl::RlStatus::Completed => Ok(run.params),
                crate::rl::RlStatus::Aborted { step, reason } => {
                    Err(Error::Training(format!("rl step {step}: {reason}")))
                }
            })
        } else {
            Ok(theta0.clone())
        };
        let pool = policy.and_then(|p| stage_synth(cfg, &ws, &p, seed));
        let out = pool.as_ref().map(Clone::clone).map_err(|e| Error::State(e.to_string()));
        pools.insert(key, pool);
        out
    };
    spec.variants
        .iter()
        .map(|v| {
            let cfg = v.apply(base);
            let pool = match v {
                Variant::RealOnly => Ok(Vec::new()),
                Variant::Synthetic(t) => pool_for(&cfg, t.rewards()),
            };
            match pool.and_then(|p| stage_downstream(&cfg, &ws, &p, seed)) {
                Ok(r) => CellResult {
                    variant: v.name(),
                    seed,
                    closed_set_accuracy: Some(r.eval.closed_set_accuracy),
                    novel_accuracy: r.eval.novel_accuracy,
                    error: None,
                },
                Err(e) => fail(v, &e),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_names_are_distinct() {
        let spec = AblationSpec::ladder(vec![0]);
        let names: Vec<String> = spec.variants.iter().map(Variant::name).collect();
        assert_eq!(
            names,
            [
                "real-only",
                "cold-start",
                "cold-start+dss",
                "rl[sem]+dss",
                "rl[sem+cov]+dss",
                "rl[sem+cov+exp]+dss"
            ]
        );
    }

    #[test]
    fn grid_enumerates_in_order() {
        let spec = AblationSpec::grid(&[false, true], &[true], &[true], &[true], vec![1, 2]);
        assert_eq!(spec.variants.len(), 2);
        assert_eq!(spec.variants[0].name(), "rl[sem+cov+exp]");
        assert_eq!(spec.variants[1].name(), "rl[sem+cov+exp]+dss");
    }

    #[test]
    fn apply_sets_flags() {
        let base = PipelineConfig::default();
        let c = Variant::RealOnly.apply(&base);
        assert!(!c.stages.use_synthetic && !c.rl_enabled());
        let c = Variant::Synthetic(Toggles {
            dss: true,
            r_sem: false,
            r_cov: true,
            r_exp: false,
        })
        .apply(&base);
        assert!(c.downstream.use_selector && c.rl_enabled());
        assert_eq!(c.rewards.lambda_sem, 0.0);
        assert_eq!(c.rewards.lambda_cov, base.rewards.lambda_cov);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[0.5]).1, 0.0);
    }
}
