use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

#[test]
fn relu_and_leaky_forward() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    let y = tape.constant(t(&[2], &[-1.0, 2.0]));
    assert_eq!(y.leaky_relu(0.2).value().data(), &[-0.2, 2.0]);
}

#[test]
fn matmul_of_ones_gives_row_sums() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones([2, 3]));
    let b = tape.constant(Tensor::ones([3, 1]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.value().data(), &[3.0, 3.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones([2, 3]));
    let b = tape.constant(Tensor::ones([2, 3]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = tape.constant(Tensor::ones([4]));
    assert!(a.add(c).unwrap_err().to_string().contains("add"));
}

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    let g = tape.backward(y, &[x], false).unwrap();
    assert_eq!(g[0].item(), 6.0);
    assert!(!g[0].requires_grad());
}

#[test]
fn cube_second_derivative() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = x.mul(x).unwrap().mul(x).unwrap();
    let g = tape.backward(y, &[x], true).unwrap()[0];
    assert!(g.requires_grad());
    assert_eq!(g.item(), 12.0);
    let h = tape.backward(g, &[x], false).unwrap()[0];
    assert_eq!(h.item(), 12.0);
}

#[test]
fn gradient_reversal_forward_and_backward() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
    let r = gradient_reversal(x, 1.0);
    assert_eq!(r.value().data(), x.value().data());
    let u = t(&[3], &[0.5, 0.5, -1.0]);
    let seed = tape.constant(u);
    let g = tape.vjp(r, seed, &[x], false).unwrap()[0];
    assert_eq!(g.value().data(), &[-0.5, -0.5, 1.0]);

    let y = tape.leaf(t(&[1], &[4.0]));
    let ry = y.gradient_reversal(0.5);
    let g = tape.vjp(ry, tape.constant(t(&[1], &[2.0])), &[y], false).unwrap()[0];
    assert_eq!(g.value().data(), &[-1.0]);
}

#[test]
fn double_reversal_restores_signal() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]));
    let rr = x.gradient_reversal(1.0).gradient_reversal(1.0);
    let u = t(&[3], &[0.7, -1.3, 2.9]);
    let g = tape.vjp(rr, tape.constant(u.clone()), &[x], false).unwrap()[0];
    assert_eq!(*g.value(), u);
}

#[test]
fn non_scalar_backward_is_an_error() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([2]));
    assert!(matches!(
        tape.backward(x.exp(), &[x], false),
        Err(Error::NotScalar(_))
    ));
}

#[test]
fn unreachable_input_gets_zero_and_warning() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([2]));
    let z = tape.leaf(Tensor::ones([3]));
    let y = x.sum();
    let g = tape.backward(y, &[x, z], false).unwrap();
    assert_eq!(g[1].value().data(), &[0.0; 3]);
    assert_eq!(tape.warnings().len(), 1);
}

#[test]
fn non_finite_values_abort_with_node() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[0.0, 1.0]));
    let y = x.log().sum();
    match tape.backward(y, &[x], false) {
        Err(Error::NonFinite { op, .. }) => assert_eq!(op, "log"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn relu_has_no_second_order_contribution() {
    // f(x) = sum(relu(x) * relu(x)) has Hessian 2·diag(x > 0); the relu
    // factor itself contributes nothing beyond the product rule.
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.5, 2.0]));
    let r = x.relu();
    let f = r.mul(r).unwrap().sum();
    let g = tape.backward(f, &[x], true).unwrap()[0];
    assert_eq!(g.value().data(), &[0.0, 1.0, 4.0]);
    let h = tape.backward(g.sum(), &[x], false).unwrap()[0];
    assert_eq!(h.value().data(), &[0.0, 2.0, 2.0]);

    // A purely piecewise-linear gradient graph has zero second derivative.
    let w = tape.constant(t(&[3, 1], &[1.5, -2.0, 0.5]));
    let lin = x.reshape(&[1, 3]).unwrap().relu().matmul(w).unwrap().sum();
    let g = tape.backward(lin, &[x], true).unwrap()[0];
    let h = tape.backward(g.sum(), &[x], false).unwrap()[0];
    assert_eq!(h.value().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn replayed_backward_is_bit_identical() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2, 3], &[0.3, -1.2, 0.8, 2.2, -0.4, 0.1]));
    let w = tape.leaf(t(&[3, 2], &[0.5, -0.3, 0.2, 0.9, -1.1, 0.4]));
    let y = x.matmul(w).unwrap().softmax().log().sum();
    let a = tape.backward(y, &[x, w], false).unwrap();
    let b = tape.backward(y, &[x, w], false).unwrap();
    for (ga, gb) in a.iter().zip(&b) {
        assert_eq!(ga.value().data(), gb.value().data());
    }
}

#[test]
fn sum_fd_error_is_zero() {
    let x = t(&[4], &[0.3, -1.0, 2.5, 7.0]);
    let err = finite_difference_check(|_, x| Ok(x.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn sum_of_squares_fd() {
    let x = t(&[2], &[1.0, 2.0]);
    let err = finite_difference_check(|_, x| Ok(x.mul(x)?.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fd_check_rejects_non_finite() {
    let x = t(&[2], &[1.0, 1e-6]);
    let r = finite_difference_check(|_, x| Ok(x.log().sum()), &x, 1e-5);
    assert!(r.is_err());
}

#[test]
fn conv_second_order_matches_fd() {
    // f(x) = sum(leaky(conv(x, w))²) exercises conv, conv-input-grad and
    // conv-weight-grad through the double-backward path.
    let w = Tensor::from_f64(
        [2, 1, 3, 3],
        &(0..18).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect::<Vec<_>>(),
    )
    .unwrap();
    let x = Tensor::from_f64(
        [1, 1, 4, 4],
        &(0..16).map(|i| ((i * 13) % 7) as f64 * 0.2 - 0.6).collect::<Vec<_>>(),
    )
    .unwrap();
    for stride in [1, 2] {
        let w = w.clone();
        let f = objective(move |tape: &Tape<f64>, x| {
            let wv = tape.constant(w.clone());
            let y = x.conv2d(wv, stride)?.exp();
            Ok(y.mul(y)?.sum())
        });
        let v = x.map(|a: f64| (a * 3.0).sin());
        assert!(finite_difference_check(&f, &x, 1e-5).unwrap() < 1e-6);
        assert!(hessian_vector_check(&f, &x, &v, 1e-5).unwrap() < 1e-5);
    }
}

#[test]
fn conv_weight_path_second_order() {
    // Differentiate the input gradient of a conv w.r.t. the weights: the
    // double-backprop path used by gradient adversarial training.
    let x = Tensor::from_f64(
        [2, 1, 3, 3],
        &(0..18).map(|i| ((i * 5) % 9) as f64 * 0.1 - 0.4).collect::<Vec<_>>(),
    )
    .unwrap();
    let w0 = Tensor::from_f64(
        [2, 1, 3, 3],
        &(0..18).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect::<Vec<_>>(),
    )
    .unwrap();
    let f = objective(move |tape: &Tape<f64>, w| {
        let xv = tape.leaf(x.clone());
        let y = xv.conv2d(w, 1)?;
        let loss = y.mul(y)?.exp().sum().log();
        let gx = tape.backward(loss, &[xv], true)?[0];
        Ok(gx.mul(gx)?.sum())
    });
    assert!(finite_difference_check(&f, &w0, 1e-5).unwrap() < 1e-5);
}

#[test]
fn slicing_concat_and_broadcast_gradients() {
    let x = t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
    let f = objective(|tape: &Tape<f64>, x| {
        let a = x.slice(1, 0, 2)?;
        let b = x.slice(1, 2, 1)?;
        let c = Var::concat(&[b, a, x], 1)?;
        let bias = tape.constant(t(&[1, 6], &[1., 2., 3., 4., 5., 6.]));
        let d = c.add(bias)?.softmax().log_softmax();
        let e = d.sum_to(&[1, 6])?.exp();
        Ok(e.mul(e)?.sum().sqrt())
    });
    assert!(finite_difference_check(f, &x, 1e-5).unwrap() < 1e-6);
    let v = x.map(|a| a * 2.0 - 0.1);
    assert!(hessian_vector_check(f, &x, &v, 1e-5).unwrap() < 1e-4);
}

#[test]
fn backward_scale_is_forward_transparent() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = tape.constant(t(&[2], &[0.5, 3.0]));
    let y = x.backward_scale(s).unwrap();
    assert_eq!(y.value().data(), x.value().data());
    let g = tape.backward(y.sum(), &[x], false).unwrap()[0];
    assert_eq!(g.value().data(), &[0.5, 3.0, 0.5, 3.0]);
}
