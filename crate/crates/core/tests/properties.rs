use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use great::attacks::{attack, AttackMode, AttackSpec};
use great::data::stratified_indices;
use great::defense::greace_output_gradient;
use great::harness::{schedule_eval, Schedule};
use great::multitask::{gal_update, normalize_task_losses, GalBank, GAMMA_FLOOR};
use great::net::{Activation, Architecture, OptimizerConfig, OptimizerKind};
use great::{Model, Optimizer, Tape, Tensor};

fn mode() -> impl Strategy<Value = AttackMode> {
    prop::sample::select(AttackMode::ALL.to_vec())
}

fn probs(rows: usize, classes: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.01f64..1.0, rows * classes).prop_map(move |mut v| {
        for row in v.chunks_mut(classes) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        Tensor::new(vec![rows, classes], v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attacks_stay_in_ball_and_range(
        seed in 0u64..1000,
        eps in 0.0f64..0.5,
        k in 1usize..5,
        mode in mode(),
        pixels in prop::collection::vec(0.0f64..=1.0, 12),
    ) {
        let model = Model::new(
            Architecture::Mlp { dims: vec![4, 6, 3], activation: Activation::Relu },
            seed,
        ).unwrap();
        let x = Tensor::new(vec![3, 4], pixels).unwrap();
        let labels = [0, 1, 2];
        let spec = AttackSpec::new(eps, k, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adv = attack(&model, &x, &labels, &spec, &mut rng).unwrap();
        for (a, o) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn greace_leaves_true_class_alone(
        grad in prop::collection::vec(-3.0f64..3.0, 8),
        aux in probs(2, 4),
        y0 in 0usize..4,
        y1 in 0usize..4,
        beta in 0.0f64..20.0,
    ) {
        let grad = Tensor::new(vec![2, 4], grad).unwrap();
        let out = greace_output_gradient(&grad, &aux, &[y0, y1], beta).unwrap();
        for (r, y) in [y0, y1].into_iter().enumerate() {
            for c in 0..4 {
                let (o, g, p) = (out.data()[r * 4 + c], grad.data()[r * 4 + c], aux.data()[r * 4 + c]);
                if c == y {
                    prop_assert_eq!(o, g);
                } else {
                    prop_assert!((o - (g + beta * p)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn schedule_is_monotone(e_max in 1usize..200, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let s = Schedule::new(e_max, a, b).unwrap();
        let first = schedule_eval(&s, 0.0).unwrap();
        prop_assert_eq!((first.alpha, first.beta), (0.0, 0.0));
        let mut prev = first;
        for e in 1..=e_max {
            let v = schedule_eval(&s, e as f64).unwrap();
            prop_assert!(v.alpha >= prev.alpha && v.beta >= prev.beta && v.lr <= prev.lr);
            prev = v;
        }
        prop_assert_eq!(prev.alpha, a);
    }

    #[test]
    fn gammas_stay_positive(
        steps in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 6), 1..20),
        lr in 0.001f64..2.0,
    ) {
        let mut gals = GalBank::<f64>::new(2, &[3]);
        let config = OptimizerConfig { kind: OptimizerKind::sgd(), lr };
        let mut opt = Optimizer::new(config, gals.gammas());
        for g in steps {
            let grads = vec![
                Tensor::new(vec![3], g[..3].to_vec()).unwrap(),
                Tensor::new(vec![3], g[3..].to_vec()).unwrap(),
            ];
            gal_update(&mut gals, &grads, &mut opt).unwrap();
            prop_assert!(gals.min() >= GAMMA_FLOOR);
        }
    }

    #[test]
    fn gal_forward_is_transparent(gamma in prop::collection::vec(1e-6f64..10.0, 3), f in prop::collection::vec(-5.0f64..5.0, 6)) {
        let mut gals = GalBank::<f64>::new(1, &[3]);
        gals.set(vec![Tensor::new(vec![3], gamma.clone()).unwrap()]).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], f.clone()).unwrap());
        let out = gals.layer(x, 0).unwrap();
        prop_assert_eq!(out.value().to_f64_vec(), f);
        let grad = &tape.backward(out.sum(), &[x], false).unwrap()[0];
        let want: Vec<f64> = (0..6).map(|i| gamma[i % 3]).collect();
        prop_assert_eq!(grad.value().to_f64_vec(), want);
    }

    #[test]
    fn first_normalized_losses_are_one(initial in prop::collection::vec(1e-6f64..1e6, 1..5)) {
        let n = normalize_task_losses(&initial, &initial).unwrap();
        prop_assert!(n.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stratified_subset_has_exact_size(
        labels in prop::collection::vec(0usize..4, 1..200),
        fraction in 0.01f64..=1.0,
        seed in 0u64..100,
    ) {
        let idx = stratified_indices(&labels, 4, fraction, seed).unwrap();
        prop_assert_eq!(idx.len(), (fraction * labels.len() as f64).floor() as usize);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
    }
}
