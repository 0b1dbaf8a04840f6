//! In-memory stage functions. Each stage draws from its own stream derived
//! from the run seed, so a stage's output does not depend on whether earlier
//! stages were computed or loaded from disk.

use std::collections::BTreeMap;

use crate::diffusion::{
    coldstart_init, pretrain_generic, sample_trajectories, NoiseSchedule, TrainedDenoiser,
};
use crate::downstream::{build_extractor, evaluate, train, Classifier, EvalReport, NovelSet, TrainCurves};
use crate::error::{Error, Result};
use crate::numerics::{Mlp, Rng};
use crate::rewards::{build_bank, MemoryBank, RewardWeights};
use crate::rl::{rl_finetune, RlRun};
use crate::world::{
    generate_generic_world, generate_world, sample_real_set, split_world, FeatureExtractor,
    IdentityWorld, LabeledSample, Origin, WorldSplit,
};

use super::config::PipelineConfig;

/// Stream labels; changing one changes every downstream result.
pub mod streams {
    pub const WORLD: &str = "world";
    pub const SPLIT: &str = "split";
    pub const DATA: &str = "data";
    pub const GENERIC: &str = "generic";
    pub const EXTRACTOR: &str = "extractor";
    pub const PRETRAIN: &str = "pretrain";
    pub const COLDSTART: &str = "coldstart";
    pub const RL: &str = "rl";
    pub const SYNTH: &str = "synth";
    pub const DOWNSTREAM: &str = "downstream";
}

/// Target world, its split, every real sample set, the generic world and
/// the frozen reward extractor.
#[derive(Debug, Clone)]
pub struct WorldStage {
    pub world: IdentityWorld,
    pub split: WorldSplit,
    pub real_train: Vec<LabeledSample>,
    pub heldout: Vec<LabeledSample>,
    pub novel: NovelSet,
    pub generic: IdentityWorld,
    pub extractor: FeatureExtractor,
}

impl WorldStage {
    /// `(observation, class row)` pairs of the real training set.
    pub fn class_dataset(&self) -> Vec<(Vec<f64>, usize)> {
        self.real_train
            .iter()
            .map(|s| {
                let c = self.split.class_of(s.y).expect("training labels are seen");
                (s.x.clone(), c)
            })
            .collect()
    }
}

pub fn stage_world(config: &PipelineConfig, seed: u64) -> Result<WorldStage> {
    config.validate()?;
    let root = Rng::new(seed);
    let world_seed = config
        .data
        .world_seed
        .unwrap_or_else(|| root.child(streams::WORLD).seed());
    let world = generate_world(&config.world, world_seed)?;
    build_world_stage(config, world, None, seed)
}

/// Everything derived from an already generated target world. A stored
/// extractor is reused; otherwise it is trained from the run seed.
pub fn build_world_stage(
    config: &PipelineConfig,
    world: IdentityWorld,
    extractor: Option<FeatureExtractor>,
    seed: u64,
) -> Result<WorldStage> {
    let root = Rng::new(seed);
    let split = split_world(&world, config.data.holdout_ids, root.child(streams::SPLIT).seed())?;
    let data = root.child(streams::DATA);
    let real_train = sample_real_set(
        &world,
        &split.seen,
        config.data.real_per_identity,
        &data,
        "train",
    )?;
    let heldout = sample_real_set(
        &world,
        &split.seen,
        config.eval.heldout_per_identity.max(1),
        &data,
        "heldout",
    )?;
    let novel = NovelSet {
        exemplars: sample_real_set(
            &world,
            &split.novel,
            config.eval.novel_exemplars.max(1),
            &data,
            "novel-exemplars",
        )?,
        queries: sample_real_set(
            &world,
            &split.novel,
            config.eval.novel_queries.max(1),
            &data,
            "novel-queries",
        )?,
    };
    let generic = generate_generic_world(
        &world,
        &config.world,
        &config.generic,
        root.child(streams::GENERIC).seed(),
    )?;
    let extractor = match extractor {
        Some(e) => e,
        None => build_extractor(&generic, &config.extractor, &root.child(streams::EXTRACTOR))?,
    };
    Ok(WorldStage {
        world,
        split,
        real_train,
        heldout,
        novel,
        generic,
        extractor,
    })
}

pub fn stage_pretrain(config: &PipelineConfig, ws: &WorldStage, seed: u64) -> Result<TrainedDenoiser> {
    pretrain_generic(
        &ws.generic,
        &config.denoiser,
        &config.pretrain,
        &mut Rng::new(seed).child(streams::PRETRAIN),
    )
}

pub fn stage_coldstart(
    config: &PipelineConfig,
    ws: &WorldStage,
    theta_pre: &Mlp,
    seed: u64,
) -> Result<TrainedDenoiser> {
    coldstart_init(
        theta_pre,
        &ws.class_dataset(),
        ws.split.seen.len(),
        &config.denoiser,
        &config.coldstart,
        &mut Rng::new(seed).child(streams::COLDSTART),
    )
}

/// Memory bank over extracted real features, keyed by class row.
pub fn reward_bank(config: &PipelineConfig, ws: &WorldStage) -> Result<(MemoryBank, RewardWeights)> {
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (x, c) in ws.class_dataset() {
        by_class
            .entry(c)
            .or_default()
            .push(ws.extractor.extract_one(&x)?);
    }
    let bank = build_bank(&by_class)?;
    let weights = config.rewards.resolve(&bank)?;
    Ok((bank, weights))
}

pub fn stage_rl(
    config: &PipelineConfig,
    ws: &WorldStage,
    theta0: &Mlp,
    seed: u64,
) -> Result<RlRun> {
    let (bank, weights) = reward_bank(config, ws)?;
    let schedule = config.denoiser.schedule()?;
    rl_finetune(
        theta0,
        &bank,
        &ws.extractor,
        &weights,
        &config.rl,
        &schedule,
        &Rng::new(seed).child(streams::RL),
    )
}

/// Synthetic pool: `pool_multiplier · real_per_identity` terminal samples
/// per seen identity, labeled with world labels.
pub fn stage_synth(
    config: &PipelineConfig,
    ws: &WorldStage,
    params: &Mlp,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let schedule: NoiseSchedule = config.denoiser.schedule()?;
    let per_id = config.synth.pool_multiplier * config.data.real_per_identity;
    let class_ids: Vec<usize> = (0..ws.split.seen.len())
        .flat_map(|c| std::iter::repeat_n(c, per_id))
        .collect();
    let trajs = sample_trajectories(
        params,
        &class_ids,
        &schedule,
        &Rng::new(seed).child(streams::SYNTH),
    )?;
    trajs
        .into_iter()
        .map(|t| {
            let x = t.terminal().to_vec();
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Generation(format!(
                    "non-finite sample for class {}",
                    t.class_id
                )));
            }
            Ok(LabeledSample {
                x,
                y: ws.split.seen[t.class_id],
                origin: Origin::Synthetic,
            })
        })
        .collect()
}

pub fn stage_train(
    config: &PipelineConfig,
    ws: &WorldStage,
    pool: &[LabeledSample],
    seed: u64,
) -> Result<(Classifier, TrainCurves)> {
    let mut train_cfg = config.downstream.clone();
    if pool.is_empty() {
        train_cfg.synthetic_ratio = 0.0;
        train_cfg.use_selector = false;
    }
    train(
        &ws.real_train,
        pool,
        &train_cfg,
        None,
        &Rng::new(seed).child(streams::DOWNSTREAM),
    )
}

pub fn stage_eval(ws: &WorldStage, model: &Classifier) -> Result<EvalReport> {
    evaluate(model, &ws.heldout, Some(&ws.novel))
}

#[derive(Debug, Clone)]
pub struct DownstreamResult {
    pub model: Classifier,
    pub curves: TrainCurves,
    pub eval: EvalReport,
}

/// Train then evaluate; an empty pool means real-only training.
pub fn stage_downstream(
    config: &PipelineConfig,
    ws: &WorldStage,
    pool: &[LabeledSample],
    seed: u64,
) -> Result<DownstreamResult> {
    let (model, curves) = stage_train(config, ws, pool, seed)?;
    let eval = stage_eval(ws, &model)?;
    Ok(DownstreamResult {
        model,
        curves,
        eval,
    })
}
