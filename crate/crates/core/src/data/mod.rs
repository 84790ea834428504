//! Datasets: IDX ingestion, synthetic generators, transforms and
//! class-stratified subsampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub mod idx;
pub mod transforms;

pub use idx::{read_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, Idx};
pub use transforms::{augment, canny, multitask_targets, AugmentConfig, NoiseConfig, SpeckleMode};

/// Inputs with class labels and optional dense per-task targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    /// Dense targets, one tensor per extra task, each with the same leading
    /// dimension as `inputs`.
    pub targets: Vec<Tensor<T>>,
    pub classes: usize,
    /// Fraction of the source training set this dataset holds.
    pub fraction: f64,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= classes) {
            return Err(Error::invalid(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            targets: Vec::new(),
            classes,
            fraction: 1.0,
        })
    }

    pub fn with_targets(mut self, targets: Vec<Tensor<T>>) -> Result<Self> {
        if let Some(t) = targets.iter().find(|t| t.batch() != self.len()) {
            return Err(Error::invalid(format!("target of {} rows for {} inputs", t.batch(), self.len())));
        }
        self.targets = targets;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one input, without the batch axis.
    pub fn input_shape(&self) -> Vec<usize> {
        self.inputs.shape()[1..].to_vec()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            targets: self.targets.iter().map(|t| t.select(idx)).collect(),
            classes: self.classes,
            fraction: self.fraction,
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Class-stratified subset of exactly `⌊fraction · n⌋` examples.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        let idx = stratified_indices(&self.labels, self.classes, fraction, seed)?;
        let mut out = self.select(&idx);
        out.fraction = self.fraction * fraction;
        Ok(out)
    }

    /// Shuffled mini-batch index lists covering the dataset once; the last
    /// batch may be short.
    pub fn batches(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

/// Exactly `⌊fraction · n⌋` indices, allocated to classes in proportion to
/// their size (largest remainder, ties to the lower class), drawn without
/// replacement under `seed` and returned sorted.
pub fn stratified_indices(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let total = (fraction * labels.len() as f64).floor() as usize;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let quota: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * total as f64 / labels.len().max(1) as f64).collect();
    let mut take: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
        rb.partial_cmp(&ra).expect("finite").then(a.cmp(&b))
    });
    let mut missing = total - take.iter().sum::<usize>();
    for c in order {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total);
    for (members, n) in by_class.iter_mut().zip(take) {
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..n]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Gaussian blobs: class centers at distance `separation` from the origin
/// in random directions, unit-variance noise around them. Labels cycle
/// through the classes.
pub fn synthetic_classification<T: Scalar>(n: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset<T>> {
    if n == 0 || classes == 0 || dim == 0 {
        return Err(Error::invalid("synthetic_classification needs n, classes and dim > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for c in &centers[l] {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(T::lit(c + e));
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub classes: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Number of random bumps summed into each class prototype.
    #[serde(default = "default_bumps")]
    pub bumps: usize,
}

fn default_bumps() -> usize {
    3
}

/// Small-image classification: each class has a smooth random prototype in
/// [0.2, 0.8]; samples add a random brightness shift and pixel noise and
/// are clamped to [0, 1].
pub fn synthetic_images<T: Scalar>(n: usize, spec: &ImageSpec, seed: u64) -> Result<Dataset<T>> {
    let [c, h, w] = spec.shape;
    if n == 0 || spec.classes == 0 || c * h * w == 0 {
        return Err(Error::invalid("synthetic_images needs n, classes and shape > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = h * w;
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; c * plane];
            for ch in 0..c {
                for _ in 0..spec.bumps {
                    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                    let s = rng.random_range(0.15..0.35) * h.max(w) as f64;
                    let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    for r in 0..h {
                        for col in 0..w {
                            let d2 = (r as f64 - cy).powi(2) + (col as f64 - cx).powi(2);
                            img[ch * plane + r * w + col] += amp * (-d2 / (2.0 * s * s)).exp();
                        }
                    }
                }
            }
            let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            img.iter().map(|v| 0.2 + 0.6 * (v - lo) / span).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let mut data = Vec::with_capacity(n * c * plane);
    for &l in &labels {
        let shift = rng.random_range(-0.1..0.1);
        for &p in &prototypes[l] {
            data.push(T::lit((p + shift + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, spec.classes)
}

/// Two regression tasks on Gaussian inputs: task one's targets are
/// `sin(x A)` for a fixed random `A`, task two's are `scale` times those.
/// Labels are all zero.
pub fn synthetic_two_task<T: Scalar>(n: usize, dim: usize, outputs: usize, scale: f64, seed: u64) -> Result<Dataset<T>> {
    if n == 0 || dim == 0 || outputs == 0 {
        return Err(Error::invalid("synthetic_two_task needs n, dim and outputs > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..dim * outputs)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|v: f64| v / (dim as f64).sqrt())
        .collect();
    let x: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut t1 = Vec::with_capacity(n * outputs);
    for i in 0..n {
        for o in 0..outputs {
            let z: f64 = (0..dim).map(|d| x[i * dim + d] * a[d * outputs + o]).sum();
            t1.push(z.sin());
        }
    }
    let t2: Vec<f64> = t1.iter().map(|v| v * scale).collect();
    Dataset::new(Tensor::from_f64(vec![n, dim], &x)?, vec![0; n], 1)?.with_targets(vec![
        Tensor::from_f64(vec![n, outputs], &t1)?,
        Tensor::from_f64(vec![n, outputs], &t2)?,
    ])
}

/// Multi-task image suite from single-channel images: inputs become the
/// noisy images; targets are the clean image and its Canny edge map.
pub fn image_task_suite<T: Scalar>(clean: &Dataset<T>, noise: &NoiseConfig, seed: u64) -> Result<Dataset<T>> {
    let s = clean.inputs.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("image_task_suite", format!("{s:?}; expected [n, 1, h, w]")));
    }
    let (h, w) = (s[2], s[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut noisy, mut edges) = (Vec::new(), Vec::new());
    for i in 0..clean.len() {
        let img = clean.inputs.row(i).to_f64_vec();
        let sample = multitask_targets(&img, h, w, noise, &mut rng);
        noisy.extend(sample.noisy.into_iter().map(T::lit));
        edges.extend(sample.edges.into_iter().map(T::lit));
    }
    let mut out = Dataset::new(Tensor::new(s.to_vec(), noisy)?, clean.labels.clone(), clean.classes)?;
    out.fraction = clean.fraction;
    out.with_targets(vec![clean.inputs.clone(), Tensor::new(s.to_vec(), edges)?])
}

/// Synthetic data source of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Synthetic {
    Blobs { classes: usize, dim: usize, separation: f64 },
    Images(ImageSpec),
    TwoTask { dim: usize, outputs: usize, scale: f64 },
    ImageTasks { images: ImageSpec, noise: NoiseConfig },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: usize,
    pub test: usize,
}

fn default_fraction() -> f64 {
    1.0
}

/// Where the data comes from and how it is split. Exactly one of `path`
/// (a directory of `train-images.idx`, `train-labels.idx`,
/// `test-images.idx`, `test-labels.idx`) and `synthetic` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<Synthetic>,
    /// Fraction of the training split kept, class-stratified.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    pub seed: u64,
    pub split: Split,
}

impl DatasetManifest {
    pub fn validate(&self, base: &Path) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => {
                for name in IDX_FILES {
                    let f = base.join(p).join(name);
                    if !f.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", f.display())));
                    }
                }
            }
            (None, Some(_)) => {}
            _ => return Err(Error::Config("dataset needs exactly one of path and synthetic".into())),
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if self.split.train == 0 {
            return Err(Error::Config("split.train must be positive".into()));
        }
        Ok(())
    }

    /// Train and test sets; `path` is resolved against `base`.
    pub fn load<T: Scalar>(&self, base: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
        self.validate(base)?;
        let (n_train, n_test) = (self.split.train, self.split.test);
        let (train, test) = if let Some(p) = &self.path {
            let dir = base.join(p);
            let read = |img: &str, lab: &str, n: usize| -> Result<Dataset<T>> {
                let x = read_idx_images::<T>(&dir.join(img))?;
                let y = read_idx_labels(&dir.join(lab))?;
                let classes = y.iter().max().map_or(1, |m| m + 1);
                let d = Dataset::new(x, y, classes)?;
                Ok(d.split_at(n).0)
            };
            let train = read(IDX_FILES[0], IDX_FILES[1], n_train)?;
            let mut test = read(IDX_FILES[2], IDX_FILES[3], n_test)?;
            test.classes = test.classes.max(train.classes);
            (train, test)
        } else {
            let n = n_train + n_test;
            let all = match self.synthetic.as_ref().expect("validated") {
                Synthetic::Blobs { classes, dim, separation } => {
                    synthetic_classification(n, *classes, *dim, *separation, self.seed)?
                }
                Synthetic::Images(spec) => synthetic_images(n, spec, self.seed)?,
                Synthetic::TwoTask { dim, outputs, scale } => synthetic_two_task(n, *dim, *outputs, *scale, self.seed)?,
                Synthetic::ImageTasks { images, noise } => {
                    image_task_suite(&synthetic_images(n, images, self.seed)?, noise, self.seed ^ 0x5eed)?
                }
            };
            all.split_at(n_train)
        };
        let train = if self.fraction < 1.0 {
            train.subsample(self.fraction, self.seed)?
        } else {
            train
        };
        Ok((train, test))
    }
}

/// File names of an IDX dataset directory, in train-images, train-labels,
/// test-images, test-labels order.
pub const IDX_FILES: [&str; 4] = ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"];

/// Writes grayscale train and test sets as an IDX directory.
pub fn save_idx_dir<T: Scalar>(dir: &Path, train: &Dataset<T>, test: &Dataset<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_idx_images(&dir.join(IDX_FILES[0]), &train.inputs)?;
    write_idx_labels(&dir.join(IDX_FILES[1]), &train.labels)?;
    write_idx_images(&dir.join(IDX_FILES[2]), &test.inputs)?;
    write_idx_labels(&dir.join(IDX_FILES[3]), &test.labels)
}
