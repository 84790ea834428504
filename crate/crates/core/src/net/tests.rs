use approx::assert_abs_diff_eq;

use super::loss::{ce_grad_logits, ce_grad_probs, cross_entropy_from_probs, one_hot};
use super::*;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn uniform_logits_give_ln_classes() {
    let tape = Tape::new();
    let logits = tape.leaf(Tensor::full(vec![3, 10], 0.7));
    let loss = softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
    assert_abs_diff_eq!(loss.item(), 10f64.ln(), epsilon = 1e-12);
}

#[test]
fn confident_logits_give_vanishing_loss() {
    let tape = Tape::new();
    let logits = tape.constant(t(&[1, 3], &[60.0, 0.0, 0.0]));
    assert!(softmax_cross_entropy(logits, &[0]).unwrap().item() < 1e-25);
}

#[test]
fn batch_of_two_matches_hand_evaluation() {
    let rows = [[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]];
    let labels = [1, 0];
    let expected: f64 = rows
        .iter()
        .zip(labels)
        .map(|(r, y)| {
            let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
            -(f64::exp(r[y]) / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    let tape = Tape::new();
    let logits = tape.constant(t(&[2, 3], &[1.0, 2.0, 0.5, -1.0, 0.0, 3.0]));
    assert_abs_diff_eq!(softmax_cross_entropy(logits, &labels).unwrap().item(), expected, epsilon = 1e-14);
}

#[test]
fn logit_gradient_matches_analytic_form() {
    let x = t(&[2, 4], &[0.3, -1.2, 2.0, 0.1, 1.5, 1.5, -0.4, 0.0]);
    let labels = [2, 0];
    let tape = Tape::new();
    let logits = tape.leaf(x.clone());
    let loss = softmax_cross_entropy(logits, &labels).unwrap();
    let g = tape.backward(loss, &[logits], false).unwrap()[0].value();
    let analytic = ce_grad_logits(&x, &labels).unwrap();
    assert!(g.max_abs_diff(&analytic) < 1e-10);
}

#[test]
fn probability_gradient_is_zero_off_the_true_class() {
    let logits = t(&[2, 3], &[0.2, 0.9, -0.3, 1.0, -2.0, 0.5]);
    let labels = [1, 2];
    let probs = crate::kernels::softmax_last(&logits);
    let tape = Tape::new();
    let a = tape.leaf(probs.clone());
    let loss = cross_entropy_from_probs(a, &labels, Reduction::Mean).unwrap();
    let g = tape.backward(loss, &[a], false).unwrap()[0].value();
    let analytic = ce_grad_probs(&probs, &labels, Reduction::Mean).unwrap();
    assert!(g.max_abs_diff(&analytic) < 1e-10);
    let mask = one_hot::<f64>(&labels, 3).unwrap();
    for (gv, m) in g.data().iter().zip(mask.data()) {
        if *m == 0.0 {
            assert_eq!(*gv, 0.0);
        }
    }
}

#[test]
fn regression_losses() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
    assert_eq!(mse(x, x).unwrap().item(), 0.0);
    let neg = x.neg();
    assert_abs_diff_eq!(cosine_loss(x, neg).unwrap().item(), 0.0, epsilon = 1e-15);
    let e1 = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let e2 = tape.constant(t(&[1, 2], &[0.0, 1.0]));
    assert_eq!(cosine_loss(e1, e2).unwrap().item(), 1.0);
    let zero = tape.constant(Tensor::zeros(vec![1, 2]));
    assert!(cosine_loss(e1, zero).is_err());
    assert!(mse(e1, x).is_err());
}

fn sgd(lr: f64) -> OptimizerConfig {
    OptimizerConfig {
        kind: OptimizerKind::sgd(),
        lr,
    }
}

#[test]
fn sgd_single_step() {
    let mut params = vec![Tensor::<f64>::zeros(vec![2])];
    let mut opt = Optimizer::new(sgd(0.1), &params);
    opt.step(&mut params, &[t(&[2], &[1.0, -2.0])]).unwrap();
    assert_abs_diff_eq!(params[0].data()[0], -0.1, epsilon = 1e-15);
    assert_abs_diff_eq!(params[0].data()[1], 0.2, epsilon = 1e-15);

    let before = params.clone();
    opt.step(&mut params, &[Tensor::zeros(vec![2])]).unwrap();
    assert_eq!(params, before);
}

#[test]
fn adam_first_step_moves_by_lr_against_the_sign() {
    let g = t(&[4], &[3.0, -0.02, 1e-3, -50.0]);
    let mut params = vec![Tensor::<f64>::zeros(vec![4])];
    let mut opt = Optimizer::new(OptimizerConfig::default(), &params);
    opt.step(&mut params, &[g.clone()]).unwrap();
    for (p, gv) in params[0].data().iter().zip(g.data()) {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        let expected = -1e-3 * gv / (gv.abs() + 1e-8);
        assert_abs_diff_eq!(*p, expected, epsilon = 1e-15);
    }
}

#[test]
fn non_finite_gradient_skips_the_step() {
    let mut params = vec![t(&[2], &[1.0, 2.0])];
    let mut opt = Optimizer::new(sgd(0.1), &params);
    let mut bad = Tensor::<f64>::zeros(vec![2]);
    bad.data_mut()[1] = f64::NAN;
    let outcome = opt.step(&mut params, &[bad]).unwrap();
    assert!(matches!(outcome, StepOutcome::Skipped(_)));
    assert_eq!(params[0].data(), &[1.0, 2.0]);
    assert_eq!(opt.steps(), 0);
    assert!(opt.step(&mut params, &[Tensor::zeros(vec![3])]).is_err());
}

#[test]
fn training_is_bit_deterministic() {
    let run = || {
        let model = Model::<f64>::new(
            Architecture::Mlp {
                dims: vec![4, 6, 3],
                activation: Activation::Relu,
            },
            11,
        )
        .unwrap();
        let x = t(&[3, 4], &[0.1, 0.5, -0.3, 0.9, 1.0, -1.0, 0.2, 0.0, 0.4, 0.4, -0.8, 0.3]);
        let mut params = model.tensors();
        let mut opt = Optimizer::new(
            OptimizerConfig {
                kind: OptimizerKind::sgd_momentum(),
                lr: 0.05,
            },
            &params,
        );
        let mut m = model.clone();
        for _ in 0..10 {
            m.set_tensors(params.clone()).unwrap();
            let tape = Tape::new();
            let p = m.bind(&tape);
            let out = m.forward(tape.constant(x.clone()), &p).unwrap();
            let loss = softmax_cross_entropy(out, &[0, 2, 1]).unwrap();
            let grads: Vec<_> = tape
                .backward(loss, &p, false)
                .unwrap()
                .iter()
                .map(|g| (*g.value()).clone())
                .collect();
            opt.step(&mut params, &grads).unwrap();
        }
        params
    };
    assert_eq!(run(), run());
}

#[test]
fn resnet_output_shape() {
    let model = Model::<f64>::new(build_resnet_small([1, 8, 8], 10, 4, 4), 0).unwrap();
    let out = model.predict(&Tensor::full(vec![5, 1, 8, 8], 0.3)).unwrap();
    assert_eq!(out.shape(), &[5, 10]);
}

#[test]
fn auxiliary_network_has_no_relu() {
    let aux = Model::<f64>::new(build_aux_classifier([1, 8, 8], 10, 4, 4), 0).unwrap();
    let (relu, leaky) = aux.activation_counts();
    assert_eq!(relu, 0);
    assert!(leaky > 0);
    match aux.architecture() {
        Architecture::ResNet { activation, .. } => {
            assert_eq!(*activation, Activation::LeakyRelu { slope: 0.2 })
        }
        other => panic!("unexpected {other:?}"),
    }
    let main = Model::<f64>::new(build_resnet_small([1, 8, 8], 10, 4, 4), 0).unwrap();
    assert_eq!(main.activation_counts().1, 0);
}

#[test]
fn doubling_width_doubles_every_stage() {
    let narrow = Model::<f64>::new(build_resnet_small([3, 8, 8], 10, 4, 4), 0).unwrap();
    let wide = Model::<f64>::new(build_resnet_small([3, 8, 8], 10, 8, 4), 0).unwrap();
    let doubled: Vec<usize> = narrow.conv_channels().iter().map(|c| 2 * c).collect();
    assert_eq!(wide.conv_channels(), doubled);
}

#[test]
fn zeroed_residual_branch_is_identity() {
    let arch = Architecture::ResNet {
        input: [2, 5, 5],
        width: 3,
        blocks: 1,
        classes: None,
        downsample: false,
        activation: Activation::Relu,
    };
    let mut model = Model::<f64>::new(arch, 4).unwrap();
    let values = model
        .params()
        .iter()
        .map(|p| {
            if p.name.starts_with("block0.conv2") {
                Tensor::zeros(p.value.shape().to_vec())
            } else {
                p.value.clone()
            }
        })
        .collect();
    model.set_tensors(values).unwrap();
    let tape = Tape::new();
    let p = model.bind_frozen(&tape);
    let x = tape.constant(Tensor::from_f64(vec![2, 2, 5, 5], &(0..100).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
    let (_, taps) = model.forward_taps(x, &p).unwrap();
    assert_eq!(taps.len(), 2);
    assert_eq!(*taps[1].value(), *taps[0].value());
}

#[test]
fn multi_head_rejects_mismatched_decoder() {
    let enc = Model::<f64>::new(
        Architecture::Mlp { dims: vec![3, 4], activation: Activation::Relu },
        0,
    )
    .unwrap();
    let good = Model::<f64>::new(
        Architecture::Mlp { dims: vec![4, 1], activation: Activation::Relu },
        1,
    )
    .unwrap();
    let bad = Model::<f64>::new(
        Architecture::Mlp { dims: vec![5, 1], activation: Activation::Relu },
        1,
    )
    .unwrap();
    assert!(MultiHeadModel::new(enc.clone(), vec![good.clone()], &[3]).is_ok());
    assert!(MultiHeadModel::new(enc, vec![good, bad], &[3]).is_err());
}

#[test]
fn architecture_json_rejects_unknown_keys() {
    let ok: Architecture = serde_json::from_str(r#"{"kind":"mlp","dims":[2,3],"activation":{"kind":"relu"}}"#).unwrap();
    assert!(matches!(ok, Architecture::Mlp { .. }));
    assert!(serde_json::from_str::<Architecture>(r#"{"kind":"mlp","dims":[2],"activation":{"kind":"relu"},"x":1}"#).is_err());
}
