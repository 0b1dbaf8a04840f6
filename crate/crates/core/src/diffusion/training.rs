//! Denoising objective, generic pretraining, and cold-start adaptation.

use serde::{Deserialize, Serialize};

use super::model::DenoiserConfig;
use super::schedule::{q_sample_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{parallel, Grads, Mlp, Optimizer, OptimizerKind, ParamMask, Rng};
use crate::world::{sample_real, IdentityWorld};

/// One fully specified term of the ε-prediction objective.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedExample {
    pub x0: Vec<f64>,
    /// Row of the class table.
    pub class_id: usize,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` for each `(x0, class)` pair.
pub fn draw_noise(
    batch: &[(Vec<f64>, usize)],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Vec<NoisedExample> {
    batch
        .iter()
        .map(|(x0, c)| NoisedExample {
            x0: x0.clone(),
            class_id: *c,
            t: 1 + rng.below(schedule.timesteps()),
            eps: rng.normal_vec(x0.len()),
        })
        .collect()
}

/// Mean over the batch of `‖ε̂_θ(x_t, t, y) − ε‖²` and its exact gradient.
pub fn denoise_loss_at(
    params: &Mlp,
    examples: &[NoisedExample],
    schedule: &NoiseSchedule,
) -> Result<(f64, Grads)> {
    if examples.is_empty() {
        return Err(Error::argument("empty denoising batch"));
    }
    let inv_n = 1.0 / examples.len() as f64;
    let (total, grads) = parallel::accumulate(params, examples, |_, ex, acc| {
        let xt = q_sample_with(&ex.x0, &ex.eps, schedule.alpha_bar(ex.t));
        let (pred, tape) = params.forward(&xt, ex.t, ex.class_id)?;
        let diff: Vec<f64> = pred.iter().zip(&ex.eps).map(|(p, e)| p - e).collect();
        let g: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        params.backward_into(&tape, &g, inv_n, acc)?;
        Ok(diff.iter().map(|d| d * d).sum::<f64>())
    })?;
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::numeric("denoising loss"));
    }
    Ok((loss, grads))
}

/// Denoising loss at freshly drawn timesteps and noise.
pub fn denoise_loss(
    params: &Mlp,
    batch: &[(Vec<f64>, usize)],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, Grads)> {
    let examples = draw_noise(batch, schedule, rng);
    denoise_loss_at(params, &examples, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Size of the fixed batch used to report initial/final loss.
    pub eval_size: usize,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 6000,
            batch_size: 64,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::adam(),
            eval_size: 512,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColdStartConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Only the class table trains when set.
    pub freeze_backbone: bool,
    pub eval_size: usize,
    pub log_every: usize,
}

impl Default for ColdStartConfig {
    fn default() -> Self {
        ColdStartConfig {
            steps: 1500,
            batch_size: 64,
            learning_rate: 1e-5,
            optimizer: OptimizerKind::adam(),
            freeze_backbone: true,
            eval_size: 512,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub params: Mlp,
    /// Loss on a fixed evaluation batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub curve: Vec<LossPoint>,
}

fn run_denoise_training(
    mut params: Mlp,
    schedule: &NoiseSchedule,
    mut opt: Optimizer,
    steps: usize,
    log_every: usize,
    eval: &[NoisedExample],
    mut next_batch: impl FnMut(&mut Rng) -> Result<Vec<(Vec<f64>, usize)>>,
    rng: &mut Rng,
) -> Result<TrainedDenoiser> {
    let (initial_loss, _) = denoise_loss_at(&params, eval, schedule)?;
    let mut curve = vec![LossPoint {
        step: 0,
        loss: initial_loss,
    }];
    let mut running = 0.0;
    let mut window = 0usize;
    for step in 1..=steps {
        let batch = next_batch(rng)?;
        let (loss, grads) = denoise_loss(&params, &batch, schedule, rng)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        opt.step(&mut params, &grads)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        running += loss;
        window += 1;
        if log_every > 0 && (step % log_every == 0 || step == steps) {
            curve.push(LossPoint {
                step,
                loss: running / window as f64,
            });
            running = 0.0;
            window = 0;
        }
    }
    let (final_loss, _) = denoise_loss_at(&params, eval, schedule)?;
    Ok(TrainedDenoiser {
        params,
        initial_loss,
        final_loss,
        curve,
    })
}

/// Trains a fresh denoiser on the generic world, sampling new observations
/// every step. Class rows index generic identities.
pub fn pretrain_generic(
    generic: &IdentityWorld,
    denoiser: &DenoiserConfig,
    config: &PretrainConfig,
    rng: &mut Rng,
) -> Result<TrainedDenoiser> {
    let schedule = denoiser.schedule()?;
    let n_ids = generic.num_identities();
    let params = denoiser.build(generic.obs_dim, n_ids, &mut rng.child("init"))?;
    let mut eval_rng = rng.child("eval");
    let eval_batch = generic_batch(generic, config.eval_size.max(1), &mut eval_rng)?;
    let eval = draw_noise(&eval_batch, &schedule, &mut eval_rng);
    let opt = Optimizer::new(config.optimizer, config.learning_rate)?;
    let mut data_rng = rng.child("data");
    run_denoise_training(
        params,
        &schedule,
        opt,
        config.steps,
        config.log_every,
        &eval,
        |_| generic_batch(generic, config.batch_size, &mut data_rng),
        &mut rng.child("noise"),
    )
}

fn generic_batch(
    world: &IdentityWorld,
    size: usize,
    rng: &mut Rng,
) -> Result<Vec<(Vec<f64>, usize)>> {
    (0..size)
        .map(|_| {
            let y = rng.below(world.num_identities());
            let s = sample_real(world, y, 1, rng)?;
            Ok((s[0].x.clone(), y))
        })
        .collect()
}

/// Adapts a pretrained denoiser to the target label space: the class table
/// is replaced by `num_classes` zero rows and trained on `dataset`
/// (`(observation, class row)` pairs), with the backbone frozen when
/// configured.
pub fn coldstart_init(
    theta_pre: &Mlp,
    dataset: &[(Vec<f64>, usize)],
    num_classes: usize,
    denoiser: &DenoiserConfig,
    config: &ColdStartConfig,
    rng: &mut Rng,
) -> Result<TrainedDenoiser> {
    if dataset.is_empty() {
        return Err(Error::argument("cold-start dataset is empty"));
    }
    if let Some((_, bad)) = dataset.iter().find(|(_, c)| *c >= num_classes) {
        return Err(Error::Label {
            label: *bad,
            size: num_classes,
        });
    }
    let schedule = denoiser.schedule()?;
    let params = reset_embeddings(theta_pre, num_classes)?;
    let mut eval_rng = rng.child("eval");
    let eval_pairs: Vec<(Vec<f64>, usize)> = (0..config.eval_size.max(1))
        .map(|i| dataset[i % dataset.len()].clone())
        .collect();
    let eval = draw_noise(&eval_pairs, &schedule, &mut eval_rng);
    let opt = Optimizer::new(config.optimizer, config.learning_rate)?.with_mask(ParamMask {
        backbone: !config.freeze_backbone,
        class_table: true,
    });
    let mut data_rng = rng.child("data");
    let batch_size = config.batch_size.max(1);
    run_denoise_training(
        params,
        &schedule,
        opt,
        config.steps,
        config.log_every,
        &eval,
        |_| {
            Ok((0..batch_size)
                .map(|_| dataset[data_rng.below(dataset.len())].clone())
                .collect())
        },
        &mut rng.child("noise"),
    )
}

/// Copy of `params` whose class table is `num_classes` rows of zeros.
pub fn reset_embeddings(params: &Mlp, num_classes: usize) -> Result<Mlp> {
    let mut out = params.clone();
    out.reset_class_table(num_classes)?;
    Ok(out)
}
