mod common;

use common::*;
use idsynth::numerics::parallel::accumulate;
use idsynth::numerics::{Grads, Mlp, MlpSpec, Rng};

fn plain(seed: u64) -> Mlp {
    let spec = MlpSpec {
        state_dim: 3,
        hidden: vec![4, 5],
        output_dim: 2,
        conditioning: None,
    };
    Mlp::build(&spec, &mut Rng::new(seed)).unwrap()
}

/// `Σ_k c_k · out_k` for a fixed cotangent `c`.
fn projected(out: &[f64], c: &[f64]) -> f64 {
    out.iter().zip(c).map(|(a, b)| a * b).sum()
}

#[test]
fn plain_backward_matches_finite_differences() {
    for seed in 0..5 {
        let net = plain(seed);
        let mut rng = Rng::new(seed + 50);
        let x = rng.normal_vec(3);
        let c = rng.normal_vec(2);
        let (_, tape) = net.forward_plain(&x).unwrap();
        let (g, gx) = net.backward(&tape, &c).unwrap();
        let fd = fd_grad(&net, |p| projected(&p.forward_plain(&x).unwrap().0, &c));
        assert!(rel_err(&g.flat(), &fd) < FD_TOL);
        // Input gradient.
        let fdx: Vec<f64> = (0..3)
            .map(|i| {
                let mut a = x.clone();
                let mut b = x.clone();
                a[i] += FD_STEP;
                b[i] -= FD_STEP;
                (projected(&net.forward_plain(&a).unwrap().0, &c)
                    - projected(&net.forward_plain(&b).unwrap().0, &c))
                    / (2.0 * FD_STEP)
            })
            .collect();
        assert!(rel_err(&gx, &fdx) < FD_TOL);
    }
}

#[test]
fn conditional_backward_matches_finite_differences() {
    for seed in 0..5 {
        let net = denoiser(3, &[6, 4], 4, 20, seed);
        let mut rng = Rng::new(seed + 70);
        let x = rng.normal_vec(3);
        let c = rng.normal_vec(3);
        let t = 1 + rng.below(20);
        let y = rng.below(4);
        let (_, tape) = net.forward(&x, t, y).unwrap();
        let (g, _) = net.backward(&tape, &c).unwrap();
        let fd = fd_grad(&net, |p| projected(&p.forward(&x, t, y).unwrap().0, &c));
        assert!(rel_err(&g.flat(), &fd) < FD_TOL);
        // Only the used class row receives gradient.
        let table = g.class_table.as_ref().unwrap();
        for r in (0..4).filter(|r| *r != y) {
            assert!(table.row(r).iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn chunked_accumulation_equals_serial_sum() {
    let net = plain(1);
    let mut rng = Rng::new(2);
    let xs: Vec<Vec<f64>> = (0..53).map(|_| rng.normal_vec(3)).collect();
    let c = [1.0, -0.5];
    let (total, g) = accumulate(&net, &xs, |_, x, acc| {
        let (out, tape) = net.forward_plain(x)?;
        net.backward_into(&tape, &c, 1.0, acc)?;
        Ok(projected(&out, &c))
    })
    .unwrap();
    let mut serial = Grads::zeros_like(&net);
    let mut s_total = 0.0;
    for x in &xs {
        let (out, tape) = net.forward_plain(x).unwrap();
        let (gi, _) = net.backward(&tape, &c).unwrap();
        serial.axpy(1.0, &gi).unwrap();
        s_total += projected(&out, &c);
    }
    assert!((total - s_total).abs() < 1e-10);
    assert!(rel_err(&g.flat(), &serial.flat()) < 1e-12);
    // Repeated runs are bit-identical.
    let (t2, g2) = accumulate(&net, &xs, |_, x, acc| {
        let (out, tape) = net.forward_plain(x)?;
        net.backward_into(&tape, &c, 1.0, acc)?;
        Ok(projected(&out, &c))
    })
    .unwrap();
    assert_eq!(total.to_bits(), t2.to_bits());
    assert_eq!(g.flat(), g2.flat());
}

#[test]
fn child_streams_are_independent_of_draw_order() {
    let root = Rng::new(42);
    let a = root.child("x").normal_vec(4);
    let mut other = root.child("y");
    other.normal_vec(10);
    assert_eq!(root.child("x").normal_vec(4), a);
    assert_ne!(root.child_indexed("x", 0).normal_vec(4), root.child_indexed("x", 1).normal_vec(4));
}

#[test]
fn non_finite_inputs_rejected() {
    let net = plain(3);
    assert!(net.forward_plain(&[f64::NAN, 0.0, 0.0]).is_err());
    assert!(net.forward_plain(&[0.0, 0.0]).is_err());
}
