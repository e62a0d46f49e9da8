mod common;

use adabatch::scheduler::{FlagReason, SchedulerConfig, SchedulerState};
use common::{arb_lambdas, arb_scheduler_config, check_scheduler_run};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn random_sequences_conform(cfg in arb_scheduler_config(), lambdas in arb_lambdas()) {
        if let Err(e) = check_scheduler_run(&lambdas, &cfg) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn constant_curvature_scales_every_kappa(cfg in arb_scheduler_config(), n in 1usize..60, lam in 0.01f64..100.0) {
        let events = check_scheduler_run(&vec![lam; n], &cfg).map_err(TestCaseError::fail)?;
        for (k, ev) in events.iter().enumerate() {
            let fires = k > 0 && k % cfg.kappa == 0;
            prop_assert_eq!(ev.scaled(), fires, "measurement {}", k + 1);
            if fires {
                prop_assert_eq!(ev.flag_reason, FlagReason::Duration);
            }
        }
    }

    #[test]
    fn uncapped_scaling_keeps_noise_scale(lambdas in arb_lambdas()) {
        let cfg = SchedulerConfig { b_init: 16, b_max: 1 << 40, ..Default::default() };
        let mut st = SchedulerState::init(&cfg).unwrap();
        let ratio = st.lr / st.batch as f64;
        for (k, &l) in lambdas.iter().enumerate() {
            st.epoch = k + 1;
            st.on_epoch_end(l, &cfg);
            prop_assert!((st.lr / st.batch as f64 - ratio).abs() <= 1e-12 * ratio);
        }
    }
}

#[test]
fn decay_epochs_divide_lr() {
    let cfg = SchedulerConfig { decay_epochs: vec![30, 60, 80], decay_ratio: 5.0, ..Default::default() };
    let mut st = SchedulerState::init(&cfg).unwrap();
    assert!(!st.lr_decay(29, &cfg));
    assert!(st.lr_decay(30, &cfg));
    assert!((st.lr - 0.02).abs() < 1e-15);
    st.lr_decay(60, &cfg);
    assert!((st.lr - 0.004).abs() < 1e-15);
}

#[test]
fn rejected_configs() {
    for bad in [
        SchedulerConfig { beta: 1, ..Default::default() },
        SchedulerConfig { alpha: 1.0, ..Default::default() },
        SchedulerConfig { b_init: 0, ..Default::default() },
        SchedulerConfig { b_init: 10, b_max: 5, ..Default::default() },
        SchedulerConfig { gamma0: 1.5, ..Default::default() },
        SchedulerConfig { decay_epochs: vec![5, 5], ..Default::default() },
        SchedulerConfig { eta0: f64::NAN, ..Default::default() },
    ] {
        assert!(SchedulerState::init(&bad).is_err(), "{bad:?}");
    }
}
