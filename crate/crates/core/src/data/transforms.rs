//! Image transforms: noise for the denoising task, Canny edges, and
//! pad-crop-flip augmentation. Images are single-channel `h × w` slices of
//! `f64` in [0, 1], row-major.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeckleMode {
    /// `x · (1 + N(0, std))`.
    Multiplicative,
    /// `x + N(0, std)`.
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Fraction of pixels set to 0 or 1.
    pub salt_pepper: f64,
    pub speckle_std: f64,
    pub speckle: SpeckleMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            salt_pepper: 0.04,
            speckle_std: 0.1,
            speckle: SpeckleMode::Multiplicative,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            salt_pepper: 0.0,
            speckle_std: 0.0,
            speckle: SpeckleMode::Multiplicative,
        }
    }
}

/// Inputs and targets derived from one clean grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskSample {
    pub noisy: Vec<f64>,
    /// Reconstruction target: the clean image.
    pub clean: Vec<f64>,
    /// Binary Canny edge map.
    pub edges: Vec<f64>,
}

/// Speckle on every pixel, then salt and pepper on exactly
/// `⌊fraction · h · w⌋` distinct pixels (the first half of them set to 0,
/// the rest to 1), clamped to [0, 1].
pub fn add_noise(image: &[f64], cfg: &NoiseConfig, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = image.to_vec();
    if cfg.speckle_std > 0.0 {
        let normal = Normal::new(0.0, cfg.speckle_std).expect("finite std");
        for v in &mut out {
            let n = normal.sample(rng);
            *v = match cfg.speckle {
                SpeckleMode::Multiplicative => *v * (1.0 + n),
                SpeckleMode::Additive => *v + n,
            }
            .clamp(0.0, 1.0);
        }
    }
    let count = (cfg.salt_pepper * image.len() as f64).floor() as usize;
    if count > 0 {
        let picked = index::sample(rng, image.len(), count.min(image.len()));
        for (k, i) in picked.iter().enumerate() {
            out[i] = if k < count / 2 { 0.0 } else { 1.0 };
        }
    }
    out
}

pub fn multitask_targets(image: &[f64], h: usize, w: usize, cfg: &NoiseConfig, rng: &mut impl Rng) -> MultitaskSample {
    MultitaskSample {
        noisy: add_noise(image, cfg, rng),
        clean: image.to_vec(),
        edges: canny(image, h, w, 1.0, 0.1, 0.2),
    }
}

fn gaussian_blur(image: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * image[r * w + clampi(c as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(r as isize + k as isize - radius, h) * w + c])
                .sum();
        }
    }
    out
}

/// Canny edge detector: Gaussian smoothing, Sobel gradients, non-maximum
/// suppression and hysteresis with thresholds given as fractions of the
/// largest gradient magnitude. Returns a {0, 1} map.
pub fn canny(image: &[f64], h: usize, w: usize, sigma: f64, low: f64, high: f64) -> Vec<f64> {
    let s = gaussian_blur(image, h, w, sigma);
    let at = |r: isize, c: isize| s[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r, c - 1)
                - at(r + 1, c - 1);
            let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                - at(r - 1, c - 1)
                - 2.0 * at(r - 1, c)
                - at(r - 1, c + 1);
            let i = r as usize * w + c as usize;
            mag[i] = gx.hypot(gy);
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let top = mag.iter().cloned().fold(0.0, f64::max);
    if top <= 1e-12 {
        return vec![0.0; h * w];
    }
    let m = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[r as usize * w + c as usize]
        }
    };
    let mut thin = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            let (dr, dc) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            if mag[i] >= m(r + dr, c + dc) && mag[i] >= m(r - dr, c - dc) {
                thin[i] = mag[i];
            }
        }
    }
    let (lo, hi) = (low * top, high * top);
    let mut edges = vec![0.0; h * w];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &v) in thin.iter().enumerate() {
        if v >= hi {
            edges[i] = 1.0;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if edges[j] == 0.0 && thin[j] >= lo {
                    edges[j] = 1.0;
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Zero-pads every channel of a `c × h × w` image by `pad` on each side.
pub fn pad(image: &[f64], c: usize, h: usize, w: usize, pad: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for r in 0..h {
            let src = &image[(ch * h + r) * w..(ch * h + r + 1) * w];
            let dst = (ch * ph + r + pad) * pw + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// `h × w` window of a `c × ph × pw` image at offset (`top`, `left`).
pub fn crop(image: &[f64], c: usize, ph: usize, pw: usize, top: usize, left: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in 0..h {
            let start = (ch * ph + top + r) * pw + left;
            out.extend_from_slice(&image[start..start + w]);
        }
    }
    out
}

pub fn flip_horizontal(image: &[f64], w: usize) -> Vec<f64> {
    image.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Pad, random crop back to `h × w`, and a horizontal flip with
/// probability one half.
pub fn augment(image: &[f64], c: usize, h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let padded = pad(image, c, h, w, cfg.pad);
    let top = rng.random_range(0..=2 * cfg.pad);
    let left = rng.random_range(0..=2 * cfg.pad);
    let out = crop(&padded, c, h + 2 * cfg.pad, w + 2 * cfg.pad, top, left, h, w);
    if cfg.flip && rng.random_bool(0.5) {
        flip_horizontal(&out, w)
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn salt_and_pepper_hits_exactly_four_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let image = vec![0.5; 20 * 15];
        let cfg = NoiseConfig {
            speckle_std: 0.0,
            ..NoiseConfig::default()
        };
        let noisy = add_noise(&image, &cfg, &mut rng);
        let flipped = noisy.iter().filter(|v| **v != 0.5).count();
        assert_eq!(flipped, (0.04f64 * 300.0).floor() as usize);
        assert_eq!(noisy.iter().filter(|v| **v == 0.0).count(), 6);
        assert!(noisy.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let s = multitask_targets(&image, 8, 8, &NoiseConfig::none(), &mut rng);
        assert_eq!(s.noisy, image);
        assert_eq!(s.clean, image);
    }

    #[test]
    fn canny_on_constant_and_step_images() {
        assert!(canny(&[0.7; 100], 10, 10, 1.0, 0.1, 0.2).iter().all(|v| *v == 0.0));
        let step: Vec<f64> = (0..144).map(|i| if i % 12 < 6 { 0.0 } else { 1.0 }).collect();
        let e = canny(&step, 12, 12, 1.0, 0.1, 0.2);
        assert!(e.iter().all(|v| *v == 0.0 || *v == 1.0));
        for r in 0..12 {
            let row = &e[r * 12..(r + 1) * 12];
            assert!(row[5] == 1.0 || row[6] == 1.0, "row {r}: {row:?}");
            assert_eq!(row[0] + row[11], 0.0);
        }
    }

    #[test]
    fn augmentation_contracts() {
        let image: Vec<f64> = (0..2 * 5 * 6).map(|i| i as f64).collect();
        let padded = pad(&image, 2, 5, 6, 4);
        assert_eq!(crop(&padded, 2, 13, 14, 4, 4, 5, 6), image);
        let once = flip_horizontal(&image, 6);
        assert_ne!(once, image);
        assert_eq!(flip_horizontal(&once, 6), image);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(augment(&image, 2, 5, 6, &AugmentConfig::default(), &mut rng).len(), image.len());
        }
        let a = augment(&image, 2, 5, 6, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&image, 2, 5, 6, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
