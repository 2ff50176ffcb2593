use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::prob::softmax;

fn linear(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> MlpParams {
    let w = Matrix::from_rows(&weight).unwrap();
    MlpParams::from_layers(vec![Dense { weight: w, bias }]).unwrap()
}

#[test]
fn identity_network() {
    let p = linear(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
    let out = mlp_forward(&p, &Matrix::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
    assert_eq!(out.row(0), &[1.0, 2.0]);
}

#[test]
fn constant_network() {
    let p = linear(vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]], vec![0.5, -0.5]);
    let out = mlp_forward(&p, &Matrix::from_rows(&[[3.0, -7.0, 11.0]]).unwrap()).unwrap();
    assert_eq!(out.row(0), &[0.5, -0.5]);
}

#[test]
fn dimension_mismatch_is_config_error() {
    let p = linear(vec![vec![1.0], vec![1.0]], vec![0.0]);
    let err = mlp_forward(&p, &Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Straight-line reference forward pass written independently of `affine`.
fn reference_forward(p: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (li, layer) in p.layers.iter().enumerate() {
        let mut out = Vec::new();
        for j in 0..layer.output_dim() {
            let mut acc = layer.bias[j];
            for (k, hk) in h.iter().enumerate() {
                acc += hk * layer.weight.get(k, j);
            }
            if li + 1 < p.layers.len() {
                acc = acc.max(0.0);
            }
            out.push(acc);
        }
        h = out;
    }
    h
}

#[test]
fn two_layer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = MlpParams::he_uniform(&[3, 4, 2], &mut rng).unwrap();
    let input = [[0.3, -1.2, 2.0], [1.0, 0.5, -0.25]];
    let out = mlp_forward(&p, &Matrix::from_rows(&input).unwrap()).unwrap();
    for (r, x) in input.iter().enumerate() {
        let expect = reference_forward(&p, x);
        for j in 0..2 {
            assert!((out.get(r, j) - expect[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn nll_examples() {
    let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
    assert!((nll_loss(&[half], &[0], None).unwrap() - 2f64.ln()).abs() < 1e-15);
    let sure = ProbVector::new(vec![1.0, 0.0]).unwrap();
    assert_eq!(nll_loss(&[sure], &[0], None).unwrap(), 0.0);
    let q = ProbVector::new(vec![0.25, 0.75]).unwrap();
    let v = nll_loss(&[q], &[1], Some(&[2.0])).unwrap();
    assert!((v - 2.0 * -(0.75f64.ln())).abs() < 1e-15);
    assert!((v - 0.5754).abs() < 1e-4);
    assert!(nll_loss(&[], &[], None).is_err());
}

#[test]
fn nll_log_is_clamped() {
    let zero = ProbVector::new(vec![1.0, 0.0]).unwrap();
    let v = nll_loss(&[zero], &[1], None).unwrap();
    assert!((v + 1e-12f64.ln()).abs() < 1e-12);
}

#[test]
fn squared_loss_hand_gradient() {
    let p = linear(vec![vec![1.0]], vec![0.0]);
    let x = Matrix::from_rows(&[[2.0]]).unwrap();
    let t = Matrix::from_rows(&[[0.0]]).unwrap();
    let g = backward(&p, &x, &LossSpec::SquaredError { targets: &t }).unwrap();
    assert_eq!(g.loss, 4.0);
    assert_eq!(g.params.layers[0].weight.get(0, 0), 8.0);
}

#[test]
fn zero_weighted_loss_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = MlpParams::he_uniform(&[3, 5, 2], &mut rng).unwrap();
    let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]).unwrap();
    let spec = LossSpec::CrossEntropy { labels: &[0, 1], weights: Some(&[0.0, 0.0]), offsets: None };
    let g = backward(&p, &x, &spec).unwrap();
    assert!(g.params.flatten().iter().all(|v| *v == 0.0));
}

/// Loss recomputed from forward outputs, independent of `loss_and_logit_grad`.
fn reference_loss(p: &MlpParams, x: &Matrix, labels: &[usize], weights: &[f64], offsets: &Matrix) -> f64 {
    let logits = mlp_forward(p, x).unwrap();
    let probs: Vec<ProbVector> = (0..x.rows())
        .map(|r| {
            let l: Vec<f64> = logits.row(r).iter().zip(offsets.row(r)).map(|(a, b)| a + b).collect();
            softmax(&l)
        })
        .collect();
    nll_loss(&probs, labels, Some(weights)).unwrap()
}

pub(crate) fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

#[test]
fn gradients_match_central_differences() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let din = rng.random_range(1..5);
        let hidden = rng.random_range(2..7);
        let classes = rng.random_range(2..4);
        let mut p = MlpParams::he_uniform(&[din, hidden, hidden, classes], &mut rng).unwrap();
        let mut flat = p.flatten();
        for v in flat.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        p.assign_flat(&flat).unwrap();
        let n = rng.random_range(1..6);
        let x = Matrix::from_vec(n, din, (0..n * din).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let offsets =
            Matrix::from_vec(n, classes, (0..n * classes).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let spec = LossSpec::CrossEntropy { labels: &labels, weights: Some(&weights), offsets: Some(&offsets) };
        let analytic = backward(&p, &x, &spec).unwrap().params.flatten();
        let eps = 1e-5;
        let mut numeric = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let mut q = p.clone();
            let mut f = flat.clone();
            f[i] += eps;
            q.assign_flat(&f).unwrap();
            let up = reference_loss(&q, &x, &labels, &weights, &offsets);
            f[i] -= 2.0 * eps;
            q.assign_flat(&f).unwrap();
            let down = reference_loss(&q, &x, &labels, &weights, &offsets);
            numeric[i] = (up - down) / (2.0 * eps);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn soft_targets_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let p = MlpParams::he_uniform(&[3, 6, 2], &mut rng).unwrap();
    let x = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
    let t = Matrix::from_rows(&[[3.0, 1.0], [0.5, 4.0], [2.0, 2.0]]).unwrap();
    let spec = LossSpec::SoftTargets { targets: &t, scale: 0.1 };
    let flat = p.flatten();
    let analytic = backward(&p, &x, &spec).unwrap().params.flatten();
    let loss_at = |f: &[f64]| {
        let mut q = p.clone();
        q.assign_flat(f).unwrap();
        let logits = mlp_forward(&q, &x).unwrap();
        (0..3)
            .map(|r| {
                let s = softmax(logits.row(r));
                -0.1 * (0..2).map(|j| t.get(r, j) * s[j].ln()).sum::<f64>()
            })
            .sum::<f64>()
    };
    let eps = 1e-5;
    let numeric: Vec<f64> = (0..flat.len())
        .map(|i| {
            let mut a = flat.clone();
            let mut b = flat.clone();
            a[i] += eps;
            b[i] -= eps;
            (loss_at(&a) - loss_at(&b)) / (2.0 * eps)
        })
        .collect();
    assert!(max_relative_error(&analytic, &numeric) < 1e-5);
}

#[test]
fn forward_is_deterministic() {
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let mut b = ChaCha8Rng::seed_from_u64(9);
    let pa = MlpParams::he_uniform(&[4, 8, 3], &mut a).unwrap();
    let pb = MlpParams::he_uniform(&[4, 8, 3], &mut b).unwrap();
    assert_eq!(pa, pb);
    let x = Matrix::from_rows(&[[0.5, -0.5, 1.5, 2.0]]).unwrap();
    assert_eq!(mlp_forward(&pa, &x).unwrap(), mlp_forward(&pb, &x).unwrap());
}

#[test]
fn flatten_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = MlpParams::he_uniform(&[2, 3, 2], &mut rng).unwrap();
    let mut q = p.zeros_like();
    q.assign_flat(&p.flatten()).unwrap();
    assert_eq!(p, q);
    assert_eq!(p.num_params(), 2 * 3 + 3 + 3 * 2 + 2);
}
