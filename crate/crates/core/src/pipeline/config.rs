use serde::{Deserialize, Serialize};

use crate::diffusion::{ColdStartConfig, DenoiserConfig, PretrainConfig};
use crate::downstream::TrainConfig;
use crate::error::{Error, Result};
use crate::rewards::RewardConfig;
use crate::rl::RlConfig;
use crate::world::{ExtractorConfig, GenericWorldConfig, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Real training observations per seen identity.
    pub real_per_identity: usize,
    /// Identities withheld from training for the novel-identity protocol.
    pub holdout_ids: usize,
    /// Fixed world seed; when absent the world follows the run seed.
    pub world_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            real_per_identity: 8,
            holdout_ids: 0,
            world_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Pool size per identity as a multiple of `real_per_identity`.
    pub pool_multiplier: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { pool_multiplier: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_per_identity: usize,
    /// Labeled exemplars per novel identity (k).
    pub novel_exemplars: usize,
    pub novel_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            heldout_per_identity: 200,
            novel_exemplars: 4,
            novel_queries: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFlags {
    /// Train downstream on real data plus a synthetic pool.
    pub use_synthetic: bool,
    /// Skip reward fine-tuning; the pool comes from the cold-start model.
    pub skip_rl: bool,
}

impl Default for StageFlags {
    fn default() -> Self {
        StageFlags {
            use_synthetic: true,
            skip_rl: false,
        }
    }
}

/// Every knob of a pipeline run, with all defaults materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub data: DataConfig,
    pub generic: GenericWorldConfig,
    pub extractor: ExtractorConfig,
    pub denoiser: DenoiserConfig,
    pub pretrain: PretrainConfig,
    pub coldstart: ColdStartConfig,
    pub rewards: RewardConfig,
    pub rl: RlConfig,
    pub synth: SynthConfig,
    pub downstream: TrainConfig,
    pub eval: EvalConfig,
    pub stages: StageFlags,
}

impl Default for PipelineConfig {
    /// Desk-scale reference configuration.
    fn default() -> Self {
        PipelineConfig {
            world: WorldConfig::default(),
            data: DataConfig::default(),
            generic: GenericWorldConfig::default(),
            extractor: ExtractorConfig::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            coldstart: ColdStartConfig {
                learning_rate: 3e-2,
                ..ColdStartConfig::default()
            },
            rewards: RewardConfig::default(),
            rl: RlConfig::default(),
            synth: SynthConfig::default(),
            downstream: TrainConfig {
                use_selector: true,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            stages: StageFlags::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.real_per_identity < 2 {
            return Err(Error::argument("need at least 2 real samples per identity"));
        }
        if self.data.holdout_ids + 2 > self.world.num_identities {
            return Err(Error::argument("holdout leaves fewer than 2 trained identities"));
        }
        if self.synth.pool_multiplier == 0 && self.stages.use_synthetic {
            return Err(Error::argument("synthetic stage needs pool_multiplier >= 1"));
        }
        self.rl.validate()?;
        self.downstream.selection.validate()?;
        Ok(())
    }

    /// True when at least one reward term carries weight.
    pub fn rl_enabled(&self) -> bool {
        !self.stages.skip_rl
            && self.stages.use_synthetic
            && self.rl.steps > 0
            && [
                self.rewards.lambda_sem,
                self.rewards.lambda_cov,
                self.rewards.lambda_exp,
            ]
            .iter()
            .any(|l| *l != 0.0)
    }
}
