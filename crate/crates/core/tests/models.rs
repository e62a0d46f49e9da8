mod common;

use adabatch::autodiff::{evaluate, example_eval, hvp, loss};
use adabatch::data::{synth_blobs, Batch, Dataset};
use adabatch::models::{
    build, logistic_constants, quadratic_constants, Activation, Logistic, LossKind, ModelSpec,
};
use adabatch::{Error, Model};
use common::*;
use proptest::prelude::*;

#[test]
fn build_counts_and_determinism() {
    let (_, p) = build(&ModelSpec::mlp(vec![2, 3, 1], Activation::Relu, LossKind::Squared), 4).unwrap();
    assert_eq!(p.len(), 13);
    let (_, q) = build(&ModelSpec::mlp(vec![2, 3, 1], Activation::Relu, LossKind::Squared), 4).unwrap();
    assert_eq!(p, q);
    let (_, r) = build(&ModelSpec::mlp(vec![2, 3, 1], Activation::Relu, LossKind::Squared), 5).unwrap();
    assert_ne!(p, r);
    assert!(build(&ModelSpec::mlp(vec![2], Activation::Relu, LossKind::Squared), 0).is_err());
    assert!(build(&ModelSpec::mlp(vec![2, 0, 1], Activation::Relu, LossKind::Squared), 0).is_err());
}

#[test]
fn quadratic_closed_forms() {
    let a = vec![vec![3.0, 1.0], vec![1.0, 2.0]];
    let model = Model::from_spec(&ModelSpec::quadratic(a)).unwrap();
    let zero = Dataset::zeros(3, 2);
    let p = model.init_params(0).with_values(vec![1.0, 0.0]).unwrap();
    let r = evaluate(&model, &p, zero.examples()).unwrap();
    assert_eq!(r.loss, 1.5);
    assert_eq!(r.grad, vec![3.0, 1.0]);
    assert_eq!(hvp(&model, &p, zero.examples(), &[1.0, 0.0]).unwrap(), vec![3.0, 1.0]);
    assert_eq!(hvp(&model, &p, zero.examples(), &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    let r0 = evaluate(&model, &model.init_params(0), zero.examples()).unwrap();
    assert_eq!((r0.loss, r0.grad), (0.0, vec![0.0, 0.0]));
}

#[test]
fn quadratic_constants_match_jacobi() {
    let c = quadratic_constants(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!((c.lg, c.cs), (2.0, 1.0));
    let c = quadratic_constants(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!((c.lg, c.cs), (1.0, 1.0));
    for seed in 0..5 {
        let mut r = rng(seed);
        let b: Vec<Vec<f64>> = (0..8).map(|_| gaussian_vec(&mut r, 8)).collect();
        // BᵀB + I is SPD
        let a: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..8).map(|j| (0..8).map(|k| b[k][i] * b[k][j]).sum::<f64>() + f64::from(i == j)).collect())
            .collect();
        let ev = jacobi_eigenvalues(&a);
        let c = quadratic_constants(&a).unwrap();
        assert!((c.lg - ev[7]).abs() <= 1e-8 * ev[7], "{} vs {}", c.lg, ev[7]);
        assert!((c.cs - ev[0]).abs() <= 1e-8 * ev[0], "{} vs {}", c.cs, ev[0]);
    }
    assert!(matches!(
        quadratic_constants(&[vec![1.0, 2.0], vec![2.0, 1.0]]),
        Err(Error::NotPositiveDefinite)
    ));
}

#[test]
fn logistic_constants_examples() {
    let ident = Dataset::new("id", Batch::new(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0], 2).unwrap()).unwrap();
    assert_eq!(logistic_constants(&ident, 0.1).unwrap().cs, 0.1);
    // With no feature columns the design matrix is the bias column of ones.
    let ones = Dataset::new("ones", Batch::new(vec![], vec![0.0, 1.0, 1.0, 0.0], 0).unwrap()).unwrap();
    let c = logistic_constants(&ones, 1.0).unwrap();
    assert!((c.lg - 1.25).abs() < 1e-12, "{}", c.lg);
    assert!(matches!(logistic_constants(&ident, 0.0), Err(Error::NonPositiveRegularization)));
    assert!(logistic_constants(&ident, -1.0).is_err());
}

#[test]
fn logistic_lg_matches_jacobi_oracle() {
    let ds = synth_blobs(200, 3, 2.0, 5).unwrap();
    let c = logistic_constants(&ds, 0.05).unwrap();
    let mut g = vec![vec![0.0; 4]; 4];
    let n = ds.len() as f64;
    for i in 0..ds.len() {
        let mut row = ds.examples().x(i).to_vec();
        row.push(1.0);
        for a in 0..4 {
            for b in 0..4 {
                g[a][b] += row[a] * row[b] / n;
            }
        }
    }
    let want = 0.05 + 0.25 * jacobi_eigenvalues(&g)[3];
    assert!((c.lg - want).abs() < 1e-10 * want);
}

#[test]
fn logistic_lstar_matches_newton_oracle() {
    let ds = synth_blobs(300, 2, 1.5, 8).unwrap();
    let l2 = 0.1;
    let c = logistic_constants(&ds, l2).unwrap();
    let model = Model::from_spec(&ModelSpec::logistic(2, l2)).unwrap();
    // Newton's method with the dense finite-difference Hessian.
    let mut p = model.init_params(0);
    for _ in 0..30 {
        let g = evaluate(&model, &p, ds.examples()).unwrap().grad;
        let h = fd_hessian(&model, &p, ds.examples());
        let step = solve(h, g);
        let vals: Vec<f64> = p.values().iter().zip(&step).map(|(a, b)| a - b).collect();
        p = p.with_values(vals).unwrap();
    }
    let oracle = loss(&model, &p, ds.examples()).unwrap();
    assert!((c.lstar - oracle).abs() < 1e-9, "{} vs {}", c.lstar, oracle);
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        x[k] = (b[k] - (k + 1..n).map(|j| a[k][j] * x[j]).sum::<f64>()) / a[k][k];
    }
    x
}

#[test]
fn per_example_gradients_average_to_full_gradient() {
    let ds = synth_blobs(50, 3, 2.0, 1).unwrap();
    let model = Model::from_spec(&ModelSpec::logistic(3, 0.2)).unwrap();
    let p = random_params(&model, 3, 0.5);
    let full = evaluate(&model, &p, ds.examples()).unwrap().grad;
    let mut mean = vec![0.0; p.len()];
    for i in 0..ds.len() {
        let g = example_eval(&model, &p, ds.examples().x(i), ds.examples().y(i)).unwrap().grad;
        mean.iter_mut().zip(&g).for_each(|(m, v)| *m += v / ds.len() as f64);
    }
    assert!(rel_err(&mean, &full) < 1e-12);
}

#[test]
fn convexity_gate() {
    assert!(tanh_mlp().require_convex().is_err());
    assert!(Model::from_spec(&ModelSpec::logistic(2, 0.1)).unwrap().require_convex().is_ok());
}

#[test]
fn logistic_accessor() {
    let l = Logistic::new(3, 0.5).unwrap();
    assert_eq!(l.l2(), 0.5);
    assert!(Logistic::new(3, -0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn regularized_logistic_is_strongly_convex(seed in 0u64..100_000, l2 in 0.01f64..2.0) {
        let model = Model::from_spec(&ModelSpec::logistic(3, l2)).unwrap();
        let batch = class_batch(8, 3, 2, seed);
        let a = random_params(&model, seed ^ 7, 2.0);
        let b = random_params(&model, seed ^ 9, 2.0);
        let ra = evaluate(&model, &a, &batch).unwrap();
        let lb = loss(&model, &b, &batch).unwrap();
        let d: Vec<f64> = b.values().iter().zip(a.values()).map(|(x, y)| x - y).collect();
        let slack = lb - ra.loss - dot(&ra.grad, &d) - 0.5 * l2 * dot(&d, &d);
        prop_assert!(slack >= -1e-10, "slack {slack}");
    }

    #[test]
    fn quadratic_loss_is_half_form(seed in 0u64..100_000) {
        let a = with_spectrum(&[0.5, 1.5, 4.0], seed);
        let model = Model::from_spec(&ModelSpec::quadratic(a.clone())).unwrap();
        let p = random_params(&model, seed, 3.0);
        let v = p.values();
        let want = 0.5 * dot(v, &matvec(&a, v));
        let got = evaluate(&model, &p, Dataset::zeros(2, 3).examples()).unwrap();
        prop_assert!((got.loss - want).abs() <= 1e-12 * (1.0 + want.abs()));
        prop_assert!(rel_err(&got.grad, &matvec(&a, v)) < 1e-12);
    }
}
