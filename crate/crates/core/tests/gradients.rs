mod common;

use common::grad::{mem_errors, cif_errors, randn};
use common::*;
use fusionseg::network::{DualBranchNet, NetworkConfig};
use fusionseg::nn::{Mode, Parameterized};
use fusionseg::objectives::{
    consistency_loss, consistency_loss_with_grad, cross_entropy, cross_entropy_with_grad, dice_loss,
    dice_loss_with_grad, objective_with_grad, LossWeights,
};
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn mem_groups_match_finite_differences() {
    for seed in 0..3 {
        for (name, err) in mem_errors(seed) {
            assert!(err < TOL, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn cif_groups_match_finite_differences() {
    for seed in 0..3 {
        for (name, err) in cif_errors(seed) {
            assert!(err < TOL, "{name}: relative error {err:e}");
        }
    }
}

fn random_probs(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
    let mut p = randn(shape, rng).mapv(f64::exp);
    let z = p.sum_axis(Axis(1)).insert_axis(Axis(1));
    p /= &z;
    p
}

fn fd_probs(p: &Array4<f64>, eps: f64, f: impl Fn(&Array4<f64>) -> f64) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let mut q = p.clone();
            q.as_slice_mut().unwrap()[i] += eps;
            let up = f(&q);
            q.as_slice_mut().unwrap()[i] -= 2.0 * eps;
            (up - f(&q)) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = (2, 2, 3, 3);
    let p = random_probs(shape, &mut rng);
    let q = random_probs(shape, &mut rng);
    let mask = Array3::from_shape_simple_fn((2, 3, 3), || rng.random_range(0..2u8));
    let eps = 1e-6;

    let (_, g) = cross_entropy_with_grad(p.view(), mask.view()).unwrap();
    let fd = fd_probs(&p, eps, |x| cross_entropy(x.view(), mask.view()).unwrap());
    assert!(rel_err(g.as_slice().unwrap(), &fd) < TOL);

    let (_, g) = dice_loss_with_grad(p.view(), mask.view()).unwrap();
    let fd = fd_probs(&p, eps, |x| dice_loss(x.view(), mask.view()).unwrap());
    assert!(rel_err(g.as_slice().unwrap(), &fd) < TOL);

    let (_, ga, gb) = consistency_loss_with_grad(p.view(), q.view()).unwrap();
    let fd = fd_probs(&p, eps, |x| consistency_loss(x.view(), q.view()).unwrap());
    assert!(rel_err(ga.as_slice().unwrap(), &fd) < TOL);
    let fd = fd_probs(&q, eps, |x| consistency_loss(p.view(), x.view()).unwrap());
    assert!(rel_err(gb.as_slice().unwrap(), &fd) < TOL);
}

/// End-to-end check through encoders, enhancement, fusion, decoders,
/// softmax and the semi-supervised objective.
#[test]
fn full_network_gradients_match_finite_differences() {
    for (mem, cif) in [(true, true), (false, false)] {
        let config = NetworkConfig {
            channel_dims: vec![2, 4, 6, 8, 10],
            crop: (32, 32),
            attention_dim: 3,
            enable_mem: mem,
            enable_cif: cif,
            ..NetworkConfig::default()
        };
        let mut net = DualBranchNet::<f64>::new(config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        if let Some(m) = &mut net.branch_a.mem {
            m.out.weight.value.mapv_inplace(|_| 0.3 * rng.random::<f64>() - 0.15);
        }
        if let Some(m) = &mut net.branch_b.mem {
            m.out.weight.value.mapv_inplace(|_| 0.3 * rng.random::<f64>() - 0.15);
        }
        let xa = randn((3, 1, 32, 32), &mut rng);
        let xb = randn((3, 1, 32, 32), &mut rng);
        let mask = Array3::from_shape_fn((2, 32, 32), |(b, y, x)| u8::from((y + x + b * 3) % 7 < 3));
        let w = LossWeights { lambda_cons: 0.5, ..LossWeights::default() };

        net.zero_grad();
        let pred = net.forward(xa.view(), xb.view(), Mode::Train).unwrap();
        let (_, ga, gb) = objective_with_grad(&pred, mask.view(), 2, &w).unwrap();
        net.backward(ga.view(), gb.view());

        let mut loss = |n: &mut DualBranchNet<f64>| {
            let pred = n.forward(xa.view(), xb.view(), Mode::Train).unwrap();
            objective_with_grad(&pred, mask.view(), 2, &w).unwrap().0.l_final
        };
        for name in param_names(&mut net) {
            let len = with_param(&mut net, &name, |p| p.value.len());
            let coords = spread(len, 6);
            let a = analytic(&mut net, &name, &coords);
            // small step: larger ones cross ReLU and max-pool switch points
            let n = fd_param(&mut net, &name, &coords, 1e-7, &mut loss);
            let err = rel_err(&a, &n);
            assert!(err < 1e-4 || a.iter().chain(&n).all(|v| v.abs() < 1e-9), "{name}: {err:e} {a:?} vs {n:?}");
        }
    }
}
