//! FGSM and iterated FGSM under an ∞-norm budget, robustness sweeps and
//! saliency maps.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::loss::{accuracy, cross_entropy};
use crate::net::{Model, Reduction};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    NonTargeted,
    /// Target the least probable class other than the label.
    TargetedWorst,
    /// Target a uniformly drawn class other than the label.
    TargetedRandom,
}

impl AttackMode {
    pub const ALL: [AttackMode; 3] = [
        AttackMode::NonTargeted,
        AttackMode::TargetedWorst,
        AttackMode::TargetedRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::NonTargeted => "non_targeted",
            AttackMode::TargetedWorst => "targeted_worst",
            AttackMode::TargetedRandom => "targeted_random",
        }
    }

    pub fn is_targeted(self) -> bool {
        self != AttackMode::NonTargeted
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack mode {s:?}")))
    }
}

fn default_range() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub epsilon: f64,
    /// Iterations; 1 is FGSM.
    pub k: usize,
    pub mode: AttackMode,
    /// Valid pixel range `[lo, hi]`.
    #[serde(default = "default_range")]
    pub range: [f64; 2],
}

impl AttackSpec {
    pub fn new(epsilon: f64, k: usize, mode: AttackMode) -> Self {
        Self {
            epsilon,
            k,
            mode,
            range: default_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.k == 0 || !(self.range[0] < self.range[1]) {
            return Err(Error::invalid(format!(
                "attack needs epsilon >= 0, k >= 1 and lo < hi, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `fgsm` for a single step, `ifgsm` otherwise.
    pub fn method(&self) -> &'static str {
        if self.k == 1 {
            "fgsm"
        } else {
            "ifgsm"
        }
    }
}

/// Sign of `∇_x J(θ, x, labels)` for the plain cross-entropy.
pub fn loss_gradient_sign<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    Ok(input_loss_gradient(model, x, labels)?.map(sign))
}

/// `∇_x J(θ, x, labels)` of the summed cross-entropy, without graph
/// construction.
pub fn input_loss_gradient<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let params = model.bind_frozen(&tape);
    let xv = tape.leaf(x.clone());
    let logits = model.forward(xv, &params)?;
    let loss = cross_entropy(logits, labels, Reduction::Sum)?;
    tape.check_finite()?;
    let g = tape.backward(loss, &[xv], false)?[0].value();
    Ok((*g).clone())
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

/// Clamps `v` into the ε-ball around `orig`, stepping inward while
/// rounding leaves the computed `|v − orig|` above ε.
fn into_ball<T: Scalar>(v: T, orig: T, eps: T) -> T {
    let mut v = clamp(v, orig - eps, orig + eps);
    while (v - orig).abs() > eps {
        // One ulp of the larger magnitude always moves `v`.
        let ulp = v.abs().max(orig.abs()).max(T::min_positive_value()) * T::epsilon();
        v = if v > orig { v - ulp } else { v + ulp };
    }
    v
}

/// Single-step attack. Non-targeted: `clamp(x + ε·sign ∇J(x, y))`;
/// targeted: `clamp(x − ε·sign ∇J(x, ȳ))` with `labels` holding ȳ.
pub fn fgsm<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.k != 1 {
        return Err(Error::invalid(format!("fgsm needs k = 1, got {}", spec.k)));
    }
    let s = loss_gradient_sign(model, x, labels)?;
    let eps = T::lit(spec.epsilon);
    let signed = if spec.mode.is_targeted() { -eps } else { eps };
    let (lo, hi) = (T::lit(spec.range[0]), T::lit(spec.range[1]));
    x.zip_map(&s, |v, d| clamp(into_ball(v + signed * d, v, eps), lo, hi))
}

/// `k` steps of size `ε/k`, each projected into the ε-ball around `x`
/// and then into the valid range.
pub fn ifgsm<T: Scalar>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], spec: &AttackSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let step = T::lit(spec.epsilon / spec.k as f64);
    let step = if spec.mode.is_targeted() { -step } else { step };
    let eps = T::lit(spec.epsilon);
    let (lo, hi) = (T::lit(spec.range[0]), T::lit(spec.range[1]));
    let mut adv = x.clone();
    for _ in 0..spec.k {
        let s = loss_gradient_sign(model, &adv, labels)?;
        let moved = adv.zip_map(&s, |v, d| v + step * d)?;
        adv = moved.zip_map(x, |v, orig| clamp(into_ball(v, orig, eps), lo, hi))?;
    }
    Ok(adv)
}

/// Target class for a targeted attack: the least probable class other than
/// `y` (lowest index on ties), or a uniform draw from the classes other
/// than `y`. Non-targeted mode returns `y`.
pub fn select_target<T: Scalar>(probs: &[T], y: usize, mode: AttackMode, rng: &mut impl Rng) -> Result<usize> {
    let classes = probs.len();
    if classes < 2 {
        return Err(Error::invalid("target selection needs at least two classes"));
    }
    if y >= classes {
        return Err(Error::invalid(format!("label {y} outside [0, {classes})")));
    }
    Ok(match mode {
        AttackMode::NonTargeted => y,
        AttackMode::TargetedWorst => {
            let mut best: Option<usize> = None;
            for (j, &p) in probs.iter().enumerate() {
                if j != y && best.is_none_or(|b| p < probs[b]) {
                    best = Some(j);
                }
            }
            best.expect("two classes")
        }
        AttackMode::TargetedRandom => {
            let r = rng.random_range(0..classes - 1);
            if r >= y {
                r + 1
            } else {
                r
            }
        }
    })
}

/// Runs `spec` against `x`, choosing targets from the model's own
/// predictions when the mode is targeted.
pub fn attack<T: Scalar>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let targets = if spec.mode.is_targeted() {
        let probs = crate::kernels::softmax_last(&model.predict(x)?);
        let classes = probs.shape()[1];
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| select_target(&probs.data()[i * classes..(i + 1) * classes], y, spec.mode, rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        labels.to_vec()
    };
    if spec.k == 1 {
        fgsm(model, x, &targets, spec)
    } else {
        ifgsm(model, x, &targets, spec)
    }
}

/// One line of a robustness sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub attack: String,
    pub mode: AttackMode,
    pub epsilon: f64,
    pub k: usize,
    pub accuracy: f64,
    pub seed: u64,
}

/// Accuracy on the true labels after attacking every example, for each
/// combination of `epsilons` and `(k, mode)`. Random targets come from a
/// generator seeded with `seed` afresh for every row.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep<T: Scalar>(
    method: &str,
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    epsilons: &[f64],
    attacks: &[(usize, AttackMode)],
    range: [f64; 2],
    seed: u64,
    batch: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let n = labels.len();
    for &(k, mode) in attacks {
        for &epsilon in epsilons {
            let spec = AttackSpec {
                range,
                ..AttackSpec::new(epsilon, k, mode)
            };
            spec.validate()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut hits = 0.0;
            for start in (0..n).step_by(batch.max(1)) {
                let idx: Vec<usize> = (start..n.min(start + batch.max(1))).collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let adv = attack(model, &x.select(&idx), &y, &spec, &mut rng)?;
                hits += accuracy(&model.predict(&adv)?, &y) * y.len() as f64;
            }
            rows.push(SweepRow {
                method: method.to_string(),
                attack: spec.method().to_string(),
                mode,
                epsilon,
                k,
                accuracy: if n == 0 { 0.0 } else { hits / n as f64 },
                seed,
            });
        }
    }
    Ok(rows)
}

/// Writes sweep rows as CSV with a header.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(SWEEP_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Column order of sweep CSV files.
pub const SWEEP_COLUMNS: [&str; 7] = ["method", "attack", "mode", "epsilon", "k", "accuracy", "seed"];

/// `|∇_x J|` for a single image, maximized over channels and scaled so the
/// largest magnitude maps to 255. Returns row-major `height × width` bytes.
pub fn saliency_map<T: Scalar>(model: &Model<T>, image: &Tensor<T>, label: usize) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape().to_vec();
    let x = match s.len() {
        3 => image.clone().reshape(vec![1, s[0], s[1], s[2]])?,
        4 if s[0] == 1 => image.clone(),
        _ => return Err(Error::shape("saliency_map", format!("{s:?}; expected one CHW image"))),
    };
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let g = input_loss_gradient(model, &x, &[label])?;
    let mut mag = vec![0.0f64; h * w];
    for ch in 0..c {
        for (i, m) in mag.iter_mut().enumerate() {
            let v = g.data()[ch * h * w + i].to_f64().unwrap_or(0.0).abs();
            *m = m.max(v);
        }
    }
    let top = mag.iter().cloned().fold(0.0, f64::max);
    let bytes = mag
        .iter()
        .map(|&m| if top > 0.0 { (m / top * 255.0).round() as u8 } else { 0 })
        .collect();
    Ok((w, h, bytes))
}

/// Writes the saliency map of one image as a binary PGM (`P5`).
pub fn saliency_export<T: Scalar>(model: &Model<T>, image: &Tensor<T>, label: usize, path: &Path) -> Result<()> {
    let (w, h, bytes) = saliency_map(model, image, label)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Architecture};

    fn linear_two_class(w: [f64; 2]) -> Model<f64> {
        // Logits [0, w·x]: the loss for label 0 grows along w.
        let mut m = Model::new(
            Architecture::Mlp {
                dims: vec![2, 2],
                activation: Activation::Relu,
            },
            0,
        )
        .unwrap();
        m.set_tensors(vec![
            Tensor::from_f64(vec![2, 2], &[0.0, w[0], 0.0, w[1]]).unwrap(),
            Tensor::zeros(vec![2]),
        ])
        .unwrap();
        m
    }

    #[test]
    fn fgsm_follows_the_gradient_sign() {
        let m = linear_two_class([0.5, -1.0]);
        let x = Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap();
        let spec = AttackSpec::new(0.1, 1, AttackMode::NonTargeted);
        let adv = fgsm(&m, &x, &[0], &spec).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-15 && (adv.data()[1] - 0.4).abs() < 1e-15);
        let zero = fgsm(&m, &x, &[0], &AttackSpec::new(0.0, 1, AttackMode::NonTargeted)).unwrap();
        assert_eq!(zero, x);
        assert!(fgsm(&m, &x, &[0], &AttackSpec::new(0.1, 3, AttackMode::NonTargeted)).is_err());
    }

    #[test]
    fn fgsm_clamps_to_range() {
        let m = linear_two_class([1.0, 1.0]);
        let x = Tensor::from_f64(vec![1, 2], &[0.95, 0.0]).unwrap();
        let adv = fgsm(&m, &x, &[0], &AttackSpec::new(0.1, 1, AttackMode::NonTargeted)).unwrap();
        assert_eq!(adv.data()[0], 1.0);
    }

    #[test]
    fn ifgsm_on_a_linear_model_matches_fgsm() {
        let m = linear_two_class([0.3, -2.0]);
        let x = Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap();
        let one = fgsm(&m, &x, &[0], &AttackSpec::new(0.1, 1, AttackMode::NonTargeted)).unwrap();
        let ten = ifgsm(&m, &x, &[0], &AttackSpec::new(0.1, 10, AttackMode::NonTargeted)).unwrap();
        assert!(one.max_abs_diff(&ten) < 1e-12);
    }

    #[test]
    fn targeted_and_untargeted_perturbations_negate() {
        let m = linear_two_class([0.7, -0.2]);
        let x = Tensor::from_f64(vec![1, 2], &[0.5, 0.5]).unwrap();
        let up = fgsm(&m, &x, &[0], &AttackSpec::new(0.1, 1, AttackMode::NonTargeted)).unwrap();
        let down = fgsm(&m, &x, &[0], &AttackSpec::new(0.1, 1, AttackMode::TargetedWorst)).unwrap();
        for ((u, d), o) in up.data().iter().zip(down.data()).zip(x.data()) {
            assert!(((u - o) + (d - o)).abs() < 1e-15);
        }
    }

    #[test]
    fn target_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let worst = AttackMode::TargetedWorst;
        assert_eq!(select_target(&[0.7, 0.2, 0.1], 0, worst, &mut rng).unwrap(), 2);
        assert_eq!(select_target(&[0.4, 0.3, 0.3], 0, worst, &mut rng).unwrap(), 1);
        assert_eq!(select_target(&[0.1, 0.5, 0.4], 0, worst, &mut rng).unwrap(), 2);
        assert!(select_target(&[1.0], 0, worst, &mut rng).is_err());
        let mut seen = [0usize; 4];
        for _ in 0..4000 {
            let t = select_target(&[0.25; 4], 1, AttackMode::TargetedRandom, &mut rng).unwrap();
            seen[t] += 1;
        }
        assert_eq!(seen[1], 0);
        for c in [0, 2, 3] {
            assert!((seen[c] as f64 - 4000.0 / 3.0).abs() < 150.0, "{seen:?}");
        }
    }

    #[test]
    fn saliency_of_a_constant_model_is_zero() {
        let m = linear_two_class([0.0, 0.0]);
        let (w, h, bytes) = saliency_map(&m, &Tensor::full(vec![1, 1, 2], 0.3), 0).unwrap();
        assert_eq!((w, h), (2, 1));
        assert!(bytes.iter().all(|b| *b == 0));
    }

    #[test]
    fn saliency_pgm_header_and_scale() {
        let m = Model::<f64>::new(crate::net::build_resnet_small([1, 6, 5], 3, 2, 2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let img = Tensor::from_f64(vec![1, 6, 5], &(0..30).map(|i| i as f64 / 30.0).collect::<Vec<_>>()).unwrap();
        saliency_export(&m, &img, 1, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n5 6\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let body = &bytes[header.len()..];
        assert_eq!(body.len(), 30);
        assert_eq!(*body.iter().max().unwrap(), 255);
        assert!(saliency_export(&m, &img, 1, &dir.path().join("missing/s.pgm")).is_err());
    }
}
