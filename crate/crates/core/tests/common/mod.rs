//! Shared oracles and builders for the integration tests.
#![allow(dead_code)]

use idsynth::diffusion::{NoiseSchedule, ScheduleConfig};
use idsynth::numerics::{ConditioningSpec, Mlp, MlpSpec, Rng};
use idsynth::rewards::{build_bank, MemoryBank};
use idsynth::world::{LabeledSample, Origin};
use std::collections::BTreeMap;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` with respect to every parameter.
pub fn fd_grad(params: &Mlp, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let base = params.params_flat();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + FD_STEP;
        work.set_params_flat(&p).unwrap();
        let up = f(&work);
        p[i] = base[i] - FD_STEP;
        work.set_params_flat(&p).unwrap();
        let down = f(&work);
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = l2(a).max(l2(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn schedule(timesteps: usize) -> NoiseSchedule {
    NoiseSchedule::new(ScheduleConfig {
        timesteps,
        beta_min: 1e-3,
        beta_max: 0.2,
    })
    .unwrap()
}

pub fn denoiser(state_dim: usize, hidden: &[usize], classes: usize, timesteps: usize, seed: u64) -> Mlp {
    let spec = MlpSpec {
        state_dim,
        hidden: hidden.to_vec(),
        output_dim: state_dim,
        conditioning: Some(ConditioningSpec {
            time_dim: 4,
            max_t: timesteps,
            num_classes: classes,
            class_dim: 3,
        }),
    };
    Mlp::build(&spec, &mut Rng::new(seed)).unwrap()
}

pub fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = l2(&v);
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    unit(rng.normal_vec(d))
}

/// Bank of random unit features: `per_id` features for each of `ids`.
pub fn random_bank(rng: &mut Rng, ids: usize, per_id: usize, d: usize) -> MemoryBank {
    let mut by: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for y in 0..ids {
        by.insert(y, (0..per_id).map(|_| random_unit(rng, d)).collect());
    }
    build_bank(&by).unwrap()
}

pub fn sample(x: Vec<f64>, y: usize, origin: Origin) -> LabeledSample {
    LabeledSample { x, y, origin }
}

// Scalar reference implementations of the reward terms, written from the
// definitions without sharing code with the library.

pub fn ref_prototype(feats: &[Vec<f64>]) -> Vec<f64> {
    let d = feats[0].len();
    let mut m = vec![0.0; d];
    for f in feats {
        for j in 0..d {
            m[j] += f[j];
        }
    }
    for v in &mut m {
        *v /= feats.len() as f64;
    }
    unit(m)
}

pub fn ref_semantic(f: &[f64], refs: &[Vec<f64>]) -> f64 {
    let p = ref_prototype(refs);
    let mut cos = 0.0;
    for j in 0..f.len() {
        cos += f[j] * p[j];
    }
    (cos + 1.0) / 2.0
}

pub fn ref_kernel(u: &[f64], v: &[f64], sigma: f64) -> f64 {
    let mut d2 = 0.0;
    for j in 0..u.len() {
        d2 += (u[j] - v[j]).powi(2);
    }
    (-d2 / (2.0 * sigma * sigma)).exp()
}

pub fn ref_coverage(gen: &[Vec<f64>], refs: &[Vec<f64>], sigma: f64, alpha: f64, self_pairs: bool) -> f64 {
    let mut cross = 0.0;
    for g in gen {
        for r in refs {
            cross += ref_kernel(g, r, sigma);
        }
    }
    cross /= (gen.len() * refs.len()) as f64;
    let mut within = 0.0;
    let mut n = 0.0;
    for (i, a) in gen.iter().enumerate() {
        for (j, b) in gen.iter().enumerate() {
            if i != j || self_pairs {
                within += ref_kernel(a, b, sigma);
                n += 1.0;
            }
        }
    }
    cross - alpha * if n > 0.0 { within / n } else { 0.0 }
}

pub fn ref_trace_cov(feats: &[Vec<f64>]) -> f64 {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let m = feats.iter().map(|f| f[j]).sum::<f64>() / n;
        total += feats.iter().map(|f| (f[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
    }
    total
}

pub fn ref_expansion(s_g: f64, s_r: f64, eps: f64, tau: f64) -> f64 {
    -((s_g - (1.0 + eps) * s_r) / tau).powi(2)
}

pub fn ref_standardize(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    v.iter().map(|x| (x - m) / (sd + eps)).collect()
}

pub fn ref_combine(s: f64, c: f64, e: f64, l: [f64; 3]) -> f64 {
    (l[0] * s + l[1] * c + l[2] * e).tanh()
}

// Gradient oracles. Each draws a random small configuration from `seed`
// and returns the relative error of the analytic gradient against central
// differences.

use idsynth::diffusion::sampling::{log_prob_step, posterior_mean};
use idsynth::diffusion::{denoise_loss_at, draw_noise, sample_trajectory};
use idsynth::downstream::{id_loss, Classifier};
use idsynth::rl::{objective_gradient, stochastic_timesteps, trajectory_logprob_grads};

fn small_shape(rng: &mut Rng) -> (usize, Vec<usize>, usize, usize) {
    let state = 1 + rng.below(3);
    let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 2 + rng.below(4)).collect();
    let classes = 1 + rng.below(3);
    let timesteps = 3 + rng.below(5);
    (state, hidden, classes, timesteps)
}

pub fn denoise_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (state, hidden, classes, timesteps) = small_shape(&mut rng);
    let net = denoiser(state, &hidden, classes, timesteps, rng.next_seed());
    let sched = schedule(timesteps);
    let batch: Vec<(Vec<f64>, usize)> = (0..1 + rng.below(5))
        .map(|_| (rng.normal_vec(state), rng.below(classes)))
        .collect();
    let ex = draw_noise(&batch, &sched, &mut rng);
    let (_, g) = denoise_loss_at(&net, &ex, &sched).unwrap();
    let fd = fd_grad(&net, |p| denoise_loss_at(p, &ex, &sched).unwrap().0);
    rel_err(&g.flat(), &fd)
}

pub fn logprob_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (state, hidden, classes, timesteps) = small_shape(&mut rng);
    let net = denoiser(state, &hidden, classes, timesteps, rng.next_seed());
    let sched = schedule(timesteps);
    let traj = sample_trajectory(&net, rng.below(classes), &sched, &mut rng).unwrap();
    let ts = stochastic_timesteps(&sched);
    let g = trajectory_logprob_grads(&net, &traj, &ts, &sched).unwrap();
    let fd = fd_grad(&net, |p| {
        ts.iter()
            .map(|&t| {
                let (m, _) = posterior_mean(p, traj.state(t), t, traj.class_id, &sched).unwrap();
                log_prob_step(&m, sched.posterior_std(t), traj.state(t - 1)).unwrap()
            })
            .sum()
    });
    rel_err(&g.flat(), &fd)
}

/// Full policy objective: reward-weighted log-probs minus the KL penalty.
pub fn policy_objective_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let (state, hidden, classes, timesteps) = small_shape(&mut rng);
    let net = denoiser(state, &hidden, classes, timesteps, rng.next_seed());
    let mut reference = net.clone();
    let mut flat = reference.params_flat();
    for v in &mut flat {
        *v += 0.05 * rng.standard_normal();
    }
    reference.set_params_flat(&flat).unwrap();
    let sched = schedule(timesteps);
    let trajs: Vec<_> = (0..1 + rng.below(3))
        .map(|_| sample_trajectory(&net, rng.below(classes), &sched, &mut rng).unwrap())
        .collect();
    let rewards: Vec<f64> = trajs.iter().map(|_| rng.standard_normal()).collect();
    let beta = 0.5 * rng.uniform();
    let ts = stochastic_timesteps(&sched);
    let scale = 1.0 + rng.uniform();
    let (g, _) = objective_gradient(&net, &trajs, &rewards, &reference, beta, &ts, scale, &sched).unwrap();
    let n = trajs.len() as f64;
    let fd = fd_grad(&net, |p| {
        let mut j = 0.0;
        for (tr, r) in trajs.iter().zip(&rewards) {
            let mut lp = 0.0;
            let mut kl = 0.0;
            for &t in &ts {
                let std = sched.posterior_std(t);
                let (m, _) = posterior_mean(p, tr.state(t), t, tr.class_id, &sched).unwrap();
                let (mr, _) = posterior_mean(&reference, tr.state(t), t, tr.class_id, &sched).unwrap();
                lp += log_prob_step(&m, std, tr.state(t - 1)).unwrap();
                kl += m.iter().zip(&mr).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (2.0 * std * std);
            }
            j += r * scale * lp - beta * kl / ts.len() as f64;
        }
        j / n
    });
    rel_err(&g.flat(), &fd)
}

pub fn id_loss_grad_error(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let obs = 1 + rng.below(4);
    let labels: Vec<usize> = (0..2 + rng.below(3)).map(|k| 3 * k + 1).collect();
    let w = Classifier::new(obs, 2 + rng.below(4), labels.clone(), &mut rng).unwrap();
    let batch: Vec<LabeledSample> = (0..1 + rng.below(6))
        .map(|_| sample(rng.normal_vec(obs), labels[rng.below(labels.len())], Origin::Real))
        .collect();
    let (_, g) = id_loss(&w, &batch).unwrap();
    let fd = fd_grad(&w.net, |p| {
        let c = Classifier {
            net: p.clone(),
            labels: w.labels.clone(),
        };
        id_loss(&c, &batch).unwrap().0
    });
    rel_err(&g.flat(), &fd)
}

/// Reference pipeline shrunk to run in well under a second per stage.
pub fn tiny_config() -> idsynth::pipeline::PipelineConfig {
    let mut c = idsynth::pipeline::PipelineConfig::default();
    c.world.num_identities = 5;
    c.data.real_per_identity = 4;
    c.generic.num_identities = 20;
    c.extractor.pretrain.as_mut().unwrap().iterations = 100;
    c.denoiser.hidden = vec![16];
    c.denoiser.schedule.timesteps = 10;
    c.pretrain.steps = 100;
    c.pretrain.eval_size = 32;
    c.coldstart.steps = 50;
    c.coldstart.eval_size = 32;
    c.rl.steps = 4;
    c.rl.batch_size = 3;
    c.rl.identities_per_step = 2;
    c.synth.pool_multiplier = 2;
    c.downstream.iterations = 40;
    c.downstream.log_every = 10;
    c.eval.heldout_per_identity = 10;
    c
}
