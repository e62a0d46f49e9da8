mod common;

use adabatch::adversarial::{fgsm, mix_adversarial, AdvConfig};
use adabatch::autodiff::example_eval;
use adabatch::models::ModelSpec;
use adabatch::Model;
use common::*;
use proptest::prelude::*;

#[test]
fn ratio_twenty_percent_of_ten_perturbs_two() {
    let model = tanh_mlp();
    let p = random_params(&model, 1, 1.0);
    let batch = class_batch(10, 4, 2, 1);
    let out = mix_adversarial(&model, &p, &batch, &AdvConfig::new(0.005, 0.2).unwrap(), &mut rng(3)).unwrap();
    let changed = (0..10).filter(|&i| out.x(i) != batch.x(i)).count();
    assert_eq!(changed, 2);
    assert_eq!(out.labels(), batch.labels());
}

#[test]
fn full_ratio_respects_budget() {
    let model = Model::from_spec(&ModelSpec::logistic(4, 0.0)).unwrap();
    let p = random_params(&model, 2, 1.0);
    let batch = class_batch(12, 4, 2, 2);
    let eps = 0.03;
    let out = mix_adversarial(&model, &p, &batch, &AdvConfig::new(eps, 1.0).unwrap(), &mut rng(0)).unwrap();
    for i in 0..12 {
        assert_ne!(out.x(i), batch.x(i));
        let linf = out.x(i).iter().zip(batch.x(i)).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(linf <= eps + 1e-15);
    }
}

#[test]
fn fgsm_increases_loss_to_first_order() {
    let model = tanh_mlp();
    let p = random_params(&model, 4, 1.0);
    let batch = class_batch(20, 4, 2, 4);
    for i in 0..batch.len() {
        let (x, y) = (batch.x(i), batch.y(i));
        let adv = fgsm(&model, &p, x, y, 1e-4).unwrap();
        let before = example_eval(&model, &p, x, y).unwrap().loss;
        let after = example_eval(&model, &p, &adv, y).unwrap().loss;
        assert!(after >= before - 1e-15, "example {i}: {before} -> {after}");
    }
}

#[test]
fn mixing_is_deterministic_per_seed() {
    let model = tanh_mlp();
    let p = random_params(&model, 5, 1.0);
    let batch = class_batch(30, 4, 2, 5);
    let cfg = AdvConfig::new(0.1, 0.3).unwrap();
    let a = mix_adversarial(&model, &p, &batch, &cfg, &mut rng(9)).unwrap();
    let b = mix_adversarial(&model, &p, &batch, &cfg, &mut rng(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_gradient_leaves_input() {
    // A logistic model with zero weights has no input dependence.
    let model = Model::from_spec(&ModelSpec::logistic(3, 0.0)).unwrap();
    let x = [0.2, -1.0, 3.0];
    assert_eq!(fgsm(&model, &model.init_params(0), &x, 1.0, 0.5).unwrap(), x.to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn components_are_signed_epsilon(seed in 0u64..100_000, eps in 0.0f64..0.5) {
        let model = tanh_mlp();
        let p = random_params(&model, seed, 1.0);
        let batch = class_batch(3, 4, 2, seed);
        for i in 0..3 {
            let adv = fgsm(&model, &p, batch.x(i), batch.y(i), eps).unwrap();
            for (a, x) in adv.iter().zip(batch.x(i)) {
                let d = a - x;
                // x + ε − x need not round to ε exactly, so compare to the
                // representable candidates.
                prop_assert!(*a == *x || *a == x + eps || *a == x - eps, "delta {d}");
            }
        }
    }
}
