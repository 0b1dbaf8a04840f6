use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::{ConditioningSpec, Mlp, MlpSpec, Rng};

pub const CHECKPOINT_FORMAT: &str = "idsynth-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture of the ε-prediction network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub class_dim: usize,
    pub schedule: ScheduleConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            hidden: vec![64, 64],
            time_dim: 8,
            class_dim: 8,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn network_spec(&self, state_dim: usize, num_classes: usize) -> MlpSpec {
        MlpSpec {
            state_dim,
            hidden: self.hidden.clone(),
            output_dim: state_dim,
            conditioning: Some(ConditioningSpec {
                time_dim: self.time_dim,
                max_t: self.schedule.timesteps,
                num_classes,
                class_dim: self.class_dim,
            }),
        }
    }

    pub fn build(&self, state_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Mlp> {
        Mlp::build(&self.network_spec(state_dim, num_classes), rng)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule)
    }
}

/// Denoiser parameters plus the schedule they were trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserCheckpoint {
    pub format: String,
    pub version: u32,
    pub schedule: ScheduleConfig,
    pub params: Mlp,
}

impl DenoiserCheckpoint {
    pub fn new(params: Mlp, schedule: &NoiseSchedule) -> Self {
        DenoiserCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            schedule: schedule.config(),
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: DenoiserCheckpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let cond = ck
            .params
            .conditioning()
            .cloned()
            .ok_or_else(|| Error::Serde("denoiser checkpoint lacks conditioning".into()))?;
        if cond.max_t != ck.schedule.timesteps {
            return Err(Error::Serde("checkpoint schedule does not match network".into()));
        }
        // re-validate the layer chain
        let params = Mlp::from_layers(
            ck.params.state_dim(),
            Some(cond),
            ck.params.layers().to_vec(),
        )?;
        Ok(DenoiserCheckpoint { params, ..ck })
    }
}
