use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attacks::{fgsm, ifgsm, AttackMode, AttackSpec};
use crate::defense::greace_output_gradient;
use crate::error::Result;
use crate::net::{Activation, Architecture, Model};
use crate::tape::{finite_difference_check, hessian_vector_check, Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one self-test check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}

/// A smooth random function of `x` built from a fixed op sequence.
fn random_graph<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>, ops: &[usize], weights: &[Tensor<f64>]) -> Result<Var<'t, f64>> {
    let mut h = x;
    let mut w = weights.iter();
    for &op in ops {
        h = match op {
            0 => h.matmul(tape.constant(w.next().expect("one weight per matmul").clone()))?,
            1 => h.softmax(),
            2 => h.mul(h)?.add_scalar(1.0).sqrt(),
            3 => h.scale(0.3).exp(),
            _ => h.log_softmax(),
        };
    }
    Ok(h.mul(h)?.sum())
}

fn graph_spec(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<usize>, Vec<Tensor<f64>>) {
    let depth = rng.random_range(1..=5);
    let ops: Vec<usize> = (0..depth).map(|_| rng.random_range(0..5)).collect();
    let weights = ops
        .iter()
        .filter(|&&o| o == 0)
        .map(|_| normal(&[dim, dim], rng).map(|v| v * 0.5))
        .collect();
    (ops, weights)
}

fn worst<I: IntoIterator<Item = Result<f64>>>(it: I) -> Result<f64> {
    it.into_iter().try_fold(0.0f64, |m, v| Ok(m.max(v?)))
}

/// Fast finite-difference and invariant checks of the core machinery.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut push = |name, passed, detail: String| checks.push(Check { name, passed, detail });

    let graphs: Vec<_> = (0..20).map(|_| graph_spec(&mut rng, 4)).collect();
    let points: Vec<_> = (0..20).map(|_| normal(&[2, 4], &mut rng)).collect();
    let fd = worst(graphs.iter().zip(&points).map(|((ops, ws), x)| {
        finite_difference_check(|t, v| random_graph(t, v, ops, ws), x, 1e-5)
    }))?;
    push("first-order finite differences", fd < 1e-4, format!("max relative error {fd:.2e}"));

    let dirs: Vec<_> = (0..20).map(|_| normal(&[2, 4], &mut rng)).collect();
    let hv = worst(graphs.iter().zip(&points).zip(&dirs).map(|(((ops, ws), x), v)| {
        hessian_vector_check(|t, u| random_graph(t, u, ops, ws), x, v, 1e-5)
    }))?;
    push("second-order finite differences", hv < 1e-3, format!("max relative error {hv:.2e}"));

    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_f64(vec![3], &[-1.5, 0.5, 2.0])?);
    let cube = x.mul(x)?.mul(x)?.sum();
    let g = tape.backward(cube, &[x], true)?[0];
    let gg = tape.backward(g.sum(), &[x], false)?[0].value();
    let err = gg.data().iter().zip(x.value().data()).map(|(a, b): (&f64, &f64)| (a - 6.0 * b).abs()).fold(0.0, f64::max);
    push("cube second derivative", err < 1e-9, format!("max error {err:.2e}"));

    let tape = Tape::new();
    let x = tape.leaf(normal(&[2, 3], &mut rng));
    let y = x.gradient_reversal(0.7);
    let up = normal(&[2, 3], &mut rng);
    let g = tape.vjp(y, tape.constant(up.clone()), &[x], false)?[0].value();
    let ok = *y.value() == *x.value() && *g == up.map(|u| -0.7 * u);
    push("gradient reversal", ok, "identity forward, -lambda backward".into());

    let gamma = tape.leaf(normal(&[2, 3], &mut rng).map(f64::abs));
    let z = x.backward_scale(gamma)?;
    push("gradient alignment forward", *z.value() == *x.value(), "identity forward".into());

    let ga = normal(&[2, 3], &mut rng);
    let probs = Tensor::from_f64(vec![2, 3], &[0.2, 0.3, 0.5, 0.6, 0.1, 0.3])?;
    let same = greace_output_gradient(&ga, &probs, &[0, 2], 0.0)?.max_abs_diff(&ga);
    push("greace with beta 0", same <= 1e-12, format!("max deviation {same:.2e}"));

    let model = Model::<f64>::new(
        Architecture::Mlp {
            dims: vec![4, 8, 3],
            activation: Activation::Relu,
        },
        seed,
    )?;
    let xs = normal(&[5, 4], &mut rng).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
    let ys = [0, 1, 2, 0, 1];
    let spec = AttackSpec::new(0.1, 1, AttackMode::NonTargeted);
    let a = fgsm(&model, &xs, &ys, &spec)?;
    let b = ifgsm(&model, &xs, &ys, &spec)?;
    let bound = a.max_abs_diff(&xs);
    push("ifgsm with one step equals fgsm", a == b, String::new());
    push("attack stays in the epsilon ball", bound <= 0.1 + 1e-15, format!("max perturbation {bound}"));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::selftest(3).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
