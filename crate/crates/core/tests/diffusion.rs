mod common;

use common::*;
use idsynth::diffusion::sampling::{posterior_mean, reverse_step};
use idsynth::diffusion::{
    coldstart_init, q_sample, reset_embeddings, sample_trajectories, sample_trajectory,
    ColdStartConfig, DenoiserCheckpoint, DenoiserConfig,
};
use idsynth::numerics::Rng;

#[test]
fn denoise_loss_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let e = denoise_grad_error(seed);
        assert!(e < FD_TOL, "seed {seed}: rel err {e}");
    }
}

#[test]
fn log_prob_gradient_matches_finite_differences() {
    for seed in 100..110 {
        let e = logprob_grad_error(seed);
        assert!(e < FD_TOL, "seed {seed}: rel err {e}");
    }
}

#[test]
fn linear_schedule_endpoints() {
    let s = schedule(50);
    assert_eq!(s.beta(1), 1e-3);
    assert!((s.beta(50) - 0.2).abs() < 1e-15);
    // alpha_bar is the running product of 1 − β.
    let mut prod = 1.0;
    for t in 1..=50 {
        prod *= 1.0 - s.beta(t);
        assert!((s.alpha_bar(t) - prod).abs() < 1e-14);
    }
}

#[test]
fn last_step_is_deterministic() {
    let s = schedule(6);
    assert_eq!(s.posterior_std(1), 0.0);
    for t in 2..=6 {
        let expect = (s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t))).sqrt();
        assert!((s.posterior_std(t) - expect).abs() < 1e-15);
    }
    let net = denoiser(2, &[4], 2, 6, 3);
    let x = vec![0.3, -0.2];
    let (x0, mean, std) = reverse_step(&net, &x, 1, 1, &s, &mut Rng::new(9)).unwrap();
    assert_eq!(std, 0.0);
    assert_eq!(x0, mean);
}

#[test]
fn posterior_mean_matches_closed_form() {
    let s = schedule(8);
    let net = denoiser(3, &[5], 2, 8, 4);
    let x = vec![0.5, -1.0, 0.25];
    for t in 1..=8 {
        let (m, _) = posterior_mean(&net, &x, t, 0, &s).unwrap();
        let (eps, _) = net.forward(&x, t, 0).unwrap();
        let a = 1.0 - s.beta(t);
        for j in 0..3 {
            let expect = (x[j] - s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt() * eps[j]) / a.sqrt();
            assert!((m[j] - expect).abs() < 1e-12, "t={t}");
        }
    }
}

#[test]
fn q_sample_is_the_forward_marginal() {
    let s = schedule(10);
    let x0 = vec![1.0, -2.0];
    let eps = vec![0.5, 0.1];
    let xt = q_sample(&x0, 7, &eps, &s).unwrap();
    let ab = s.alpha_bar(7);
    for j in 0..2 {
        assert!((xt[j] - (ab.sqrt() * x0[j] + (1.0 - ab).sqrt() * eps[j])).abs() < 1e-15);
    }
}

#[test]
fn trajectories_replay_from_noise_seeds() {
    let s = schedule(12);
    let net = denoiser(3, &[6], 3, 12, 5);
    let tr = sample_trajectory(&net, 2, &s, &mut Rng::new(11)).unwrap();
    assert_eq!(tr.states.len(), 13);
    assert!(tr.replay_matches());
    let again = sample_trajectory(&net, 2, &s, &mut Rng::new(11)).unwrap();
    assert_eq!(tr, again);
    let mut tampered = tr.clone();
    tampered.states[5][0] += 1e-12;
    assert!(!tampered.replay_matches());
}

#[test]
fn batch_sampling_is_order_stable() {
    let s = schedule(5);
    let net = denoiser(2, &[4], 3, 5, 6);
    let rng = Rng::new(21);
    let a = sample_trajectories(&net, &[0, 1, 2, 1], &s, &rng).unwrap();
    let b = sample_trajectories(&net, &[0, 1, 2, 1], &s, &rng).unwrap();
    assert_eq!(a, b);
    let prefix = sample_trajectories(&net, &[0, 1], &s, &rng).unwrap();
    assert_eq!(&a[..2], &prefix[..]);
}

#[test]
fn unknown_class_is_rejected() {
    let s = schedule(5);
    let net = denoiser(2, &[4], 3, 5, 6);
    assert!(sample_trajectory(&net, 3, &s, &mut Rng::new(0)).is_err());
}

#[test]
fn class_embedding_reset_to_zero() {
    let net = denoiser(2, &[4], 5, 5, 7);
    let reset = reset_embeddings(&net, 3).unwrap();
    let table = &reset.conditioning().unwrap().class_table;
    assert_eq!(table.rows(), 3);
    assert!(table.as_slice().iter().all(|v| *v == 0.0));
    assert_eq!(reset.layers(), net.layers());
}

#[test]
fn coldstart_with_frozen_backbone_only_moves_the_class_table() {
    let cfg = DenoiserConfig {
        hidden: vec![6],
        time_dim: 4,
        class_dim: 3,
        schedule: idsynth::diffusion::ScheduleConfig {
            timesteps: 10,
            beta_min: 1e-3,
            beta_max: 0.2,
        },
    };
    let pre = cfg.build(2, 4, &mut Rng::new(1)).unwrap();
    let data: Vec<(Vec<f64>, usize)> = (0..12)
        .map(|i| (vec![i as f64 * 0.1, 1.0 - i as f64 * 0.05], i % 2))
        .collect();
    let cs = ColdStartConfig {
        steps: 30,
        batch_size: 8,
        learning_rate: 1e-2,
        eval_size: 16,
        log_every: 10,
        ..ColdStartConfig::default()
    };
    assert_eq!(ColdStartConfig::default().learning_rate, 1e-5);
    let out = coldstart_init(&pre, &data, 2, &cfg, &cs, &mut Rng::new(2)).unwrap();
    assert_eq!(out.params.layers(), pre.layers());
    let table = &out.params.conditioning().unwrap().class_table;
    assert_eq!(table.rows(), 2);
    assert!(table.as_slice().iter().any(|v| *v != 0.0));
    assert!(out.final_loss < out.initial_loss);
    // Labels beyond the new table are rejected.
    let bad = vec![(vec![0.0, 0.0], 2)];
    assert!(coldstart_init(&pre, &bad, 2, &cfg, &cs, &mut Rng::new(2)).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let s = schedule(7);
    let net = denoiser(3, &[5, 4], 2, 7, 8);
    let ck = DenoiserCheckpoint::new(net.clone(), &s);
    let back = DenoiserCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
    assert_eq!(back.params.params_flat(), net.params_flat());
}
