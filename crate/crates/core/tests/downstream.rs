mod common;

use common::*;
use idsynth::downstream::{evaluate, id_loss, train, Classifier, NovelSet, TrainConfig};
use idsynth::numerics::Rng;
use idsynth::selector::SelectionConfig;
use idsynth::world::{generate_world, sample_real_set, LabeledSample, Origin, WorldConfig};

#[test]
fn id_loss_gradient_matches_finite_differences() {
    for seed in 300..310 {
        let e = id_loss_grad_error(seed);
        assert!(e < FD_TOL, "seed {seed}: rel err {e}");
    }
}

#[test]
fn zero_head_gives_log_c_loss() {
    let mut w = Classifier::new(3, 4, vec![2, 5, 7, 9], &mut Rng::new(1)).unwrap();
    let last = w.net.layers_mut().last_mut().unwrap();
    last.weight.as_mut_slice().fill(0.0);
    last.bias.fill(0.0);
    let mut rng = Rng::new(2);
    let batch: Vec<LabeledSample> = [2, 5, 7, 9, 5]
        .iter()
        .map(|&y| sample(rng.normal_vec(3), y, Origin::Real))
        .collect();
    let (loss, _) = id_loss(&w, &batch).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

struct Data {
    real: Vec<LabeledSample>,
    pool: Vec<LabeledSample>,
    heldout: Vec<LabeledSample>,
}

fn data() -> Data {
    let world = generate_world(&WorldConfig::default(), 5).unwrap();
    let labels: Vec<usize> = (0..world.num_identities()).collect();
    let rng = Rng::new(6);
    let real = sample_real_set(&world, &labels, 8, &rng, "train").unwrap();
    let pool = sample_real_set(&world, &labels, 16, &rng, "pool")
        .unwrap()
        .into_iter()
        .map(|s| LabeledSample {
            origin: Origin::Synthetic,
            ..s
        })
        .collect();
    let heldout = sample_real_set(&world, &labels, 40, &rng, "heldout").unwrap();
    Data { real, pool, heldout }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        iterations: 150,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_ratio_reproduces_real_only_training() {
    let d = data();
    let cfg = TrainConfig {
        synthetic_ratio: 0.0,
        ..small_cfg()
    };
    let rng = Rng::new(3);
    let (a, _) = train(&d.real, &d.pool, &cfg, None, &rng).unwrap();
    let (b, _) = train(&d.real, &[], &small_cfg(), None, &rng).unwrap();
    assert_eq!(a, b);
}

#[test]
fn keep_everything_matches_no_selection() {
    let d = data();
    let rng = Rng::new(4);
    let off = small_cfg();
    let on = TrainConfig {
        use_selector: true,
        selection: SelectionConfig {
            keep_fraction: 1.0,
            virtual_lr: 0.1,
        },
        ..small_cfg()
    };
    let (a, _) = train(&d.real, &d.pool, &off, None, &rng).unwrap();
    let (b, curves) = train(&d.real, &d.pool, &on, None, &rng).unwrap();
    assert_eq!(a, b);
    assert!(!curves.selection.is_empty() && curves.selection.iter().all(|r| r.kept));
}

#[test]
fn selection_log_keeps_the_configured_fraction() {
    let d = data();
    let cfg = TrainConfig {
        use_selector: true,
        iterations: 20,
        ..small_cfg()
    };
    let (_, curves) = train(&d.real, &d.pool, &cfg, None, &Rng::new(5)).unwrap();
    // P = 4 identities × ceil(2 / 0.5) = 16 candidates, 8 kept per iteration.
    for it in 0..20 {
        let rows: Vec<_> = curves.selection.iter().filter(|r| r.iteration == it).collect();
        assert_eq!(rows.len(), 16);
        assert_eq!(rows.iter().filter(|r| r.kept).count(), 8);
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let d = data();
    let (a, ca) = train(&d.real, &d.pool, &small_cfg(), Some(&d.heldout), &Rng::new(8)).unwrap();
    let (b, cb) = train(&d.real, &d.pool, &small_cfg(), Some(&d.heldout), &Rng::new(8)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ca.points, cb.points);
    assert!(ca.final_loss < ca.initial_loss);
    let acc = evaluate(&a, &d.heldout, None).unwrap().closed_set_accuracy;
    assert!(acc > 0.3, "accuracy {acc}");
}

#[test]
fn untrained_model_is_near_chance() {
    let d = data();
    let mut accs = Vec::new();
    for seed in 0..20 {
        let w = Classifier::new(8, 32, (0..10).collect(), &mut Rng::new(seed)).unwrap();
        accs.push(evaluate(&w, &d.heldout, None).unwrap().closed_set_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((0.03..0.2).contains(&mean), "mean untrained accuracy {mean}");
}

#[test]
fn evaluation_protocol_is_enforced() {
    let d = data();
    let w = Classifier::new(8, 8, (0..5).collect(), &mut Rng::new(0)).unwrap();
    // Held-out labels outside the trained set.
    assert!(evaluate(&w, &d.heldout, None).is_err());
    let seen: Vec<LabeledSample> = d.heldout.iter().filter(|s| s.y < 5).cloned().collect();
    let novel = NovelSet {
        exemplars: d.real.iter().filter(|s| s.y >= 5).cloned().collect(),
        queries: d.heldout.iter().filter(|s| s.y >= 5).cloned().collect(),
    };
    let rep = evaluate(&w, &seen, Some(&novel)).unwrap();
    let n = rep.novel_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&n));
    assert_eq!(rep.per_identity.len(), 5);
    let overlapping = NovelSet {
        exemplars: seen.clone(),
        queries: seen.clone(),
    };
    assert!(evaluate(&w, &seen, Some(&overlapping)).is_err());
}

#[test]
fn mislabeled_origins_are_rejected() {
    let d = data();
    assert!(train(&d.pool, &[], &small_cfg(), None, &Rng::new(0)).is_err());
    assert!(train(&d.real, &d.real, &small_cfg(), None, &Rng::new(0)).is_err());
}
