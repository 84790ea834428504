//! Raw numerical kernels behind the tape operations. Callers validate
//! shapes; these functions assume consistent inputs.

use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub(crate) const KERNEL: usize = 3;
pub(crate) const PAD: usize = 1;

/// Numpy-style broadcast of two shapes (aligned at the trailing axis).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Whether `small` broadcasts to `big` without changing `big`.
pub(crate) fn broadcasts_to(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && broadcast_shape(small, big).as_deref() == Some(big)
}

/// Strides of `small` viewed inside `big`, zero on broadcast axes.
fn broadcast_strides(small: &[usize], big: &[usize]) -> Vec<usize> {
    let offset = big.len() - small.len();
    let mut strides = vec![0; big.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[i + offset] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    strides
}

/// Calls `f(big_index, small_index)` for every element of `big`.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = broadcast_strides(small, big);
    let total = numel(big);
    let rank = big.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    // Innermost axis handled as a tight loop.
    let inner = big[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    let mut i = 0;
    while i < total {
        for j in 0..inner {
            f(i + j, base + j * inner_stride);
        }
        i += inner;
        // advance the outer counter
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            base += strides[d];
            if counter[d] < big[d] {
                break;
            }
            base -= strides[d] * big[d];
            counter[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let src = x.data();
    for_each_broadcast(x.shape(), shape, |bi, si| out[bi] = src[si]);
    Tensor::from_raw(shape.to_vec(), out)
}

pub(crate) fn sum_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if x.shape() == shape {
        return x.clone();
    }
    let mut out = vec![T::zero(); numel(shape)];
    let src = x.data();
    for_each_broadcast(shape, x.shape(), |bi, si| out[si] = out[si] + src[bi]);
    Tensor::from_raw(shape.to_vec(), out)
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::from_raw(vec![m, n], out)
}

pub(crate) fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::from_raw(vec![c, r], out)
}

/// Output spatial size of a 3×3, padding-1 convolution.
pub(crate) fn conv_out(size: usize, stride: usize) -> usize {
    (size + 2 * PAD - KERNEL) / stride + 1
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl ConvGeom {
    fn new(n: usize, ci: usize, h: usize, w: usize, stride: usize) -> Self {
        Self {
            n,
            ci,
            h,
            w,
            oh: conv_out(h, stride),
            ow: conv_out(w, stride),
            stride,
        }
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Column matrix `[ci·9, n·oh·ow]`.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let p = self.positions();
        let cols_w = self.n * p;
        let mut cols = vec![T::zero(); self.ci * KERNEL * KERNEL * cols_w];
        for c in 0..self.ci {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = (c * KERNEL + kh) * KERNEL + kw;
                    let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                    for b in 0..self.n {
                        let plane = &x[(b * self.ci + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + kh) as isize - PAD as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * self.w..][..self.w];
                            let dst_row = &mut dst[b * p + oy * self.ow..][..self.ow];
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kw) as isize - PAD as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst_row[ox] = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatters-adds columns back into an image batch.
    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let p = self.positions();
        let cols_w = self.n * p;
        let mut x = vec![T::zero(); self.n * self.ci * self.h * self.w];
        for c in 0..self.ci {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let row = (c * KERNEL + kh) * KERNEL + kw;
                    let src = &cols[row * cols_w..(row + 1) * cols_w];
                    for b in 0..self.n {
                        let plane =
                            &mut x[(b * self.ci + c) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + kh) as isize - PAD as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &src[b * p + oy * self.ow..][..self.ow];
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kw) as isize - PAD as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    let dst = &mut plane[iy as usize * self.w + ix as usize];
                                    *dst = *dst + src_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `[n, co, p]` <-> `[co, n·p]` layout shuffles.
fn batch_major_to_channel_major<T: Scalar>(g: &[T], n: usize, co: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    for b in 0..n {
        for c in 0..co {
            out[c * n * p + b * p..][..p].copy_from_slice(&g[(b * co + c) * p..][..p]);
        }
    }
    out
}

fn channel_major_to_batch_major<T: Scalar>(y: &[T], n: usize, co: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for b in 0..n {
        for c in 0..co {
            out[(b * co + c) * p..][..p].copy_from_slice(&y[c * n * p + b * p..][..p]);
        }
    }
    out
}

/// `x: [n, ci, h, w]`, `w: [co, ci, 3, 3]` -> `[n, co, oh, ow]`.
pub(crate) fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let s = x.shape();
    let g = ConvGeom::new(s[0], s[1], s[2], s[3], stride);
    let co = w.shape()[0];
    let k = g.ci * KERNEL * KERNEL;
    let cols = g.im2col(x.data());
    let np = g.n * g.positions();
    let mut y = vec![T::zero(); co * np];
    T::gemm(co, k, np, w.data(), false, &cols, false, &mut y, false);
    Tensor::from_raw(
        vec![g.n, co, g.oh, g.ow],
        channel_major_to_batch_major(&y, g.n, co, g.positions()),
    )
}

/// Gradient of `conv2d` with respect to its input: `g: [n, co, oh, ow]`,
/// `w: [co, ci, 3, 3]` -> `[n, ci, h, w]`.
pub(crate) fn conv2d_input_grad<T: Scalar>(
    grad: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    in_hw: (usize, usize),
) -> Tensor<T> {
    let n = grad.shape()[0];
    let co = w.shape()[0];
    let ci = w.shape()[1];
    let g = ConvGeom::new(n, ci, in_hw.0, in_hw.1, stride);
    let k = ci * KERNEL * KERNEL;
    let np = n * g.positions();
    let gm = batch_major_to_channel_major(grad.data(), n, co, g.positions());
    let mut cols = vec![T::zero(); k * np];
    T::gemm(k, co, np, w.data(), true, &gm, false, &mut cols, false);
    Tensor::from_raw(vec![n, ci, in_hw.0, in_hw.1], g.col2im(&cols))
}

/// Gradient of `conv2d` with respect to its weights: `x: [n, ci, h, w]`,
/// `g: [n, co, oh, ow]` -> `[co, ci, 3, 3]`.
pub(crate) fn conv2d_weight_grad<T: Scalar>(
    x: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
) -> Tensor<T> {
    let s = x.shape();
    let g = ConvGeom::new(s[0], s[1], s[2], s[3], stride);
    let co = grad.shape()[1];
    let k = g.ci * KERNEL * KERNEL;
    let np = g.n * g.positions();
    let cols = g.im2col(x.data());
    let gm = batch_major_to_channel_major(grad.data(), g.n, co, g.positions());
    let mut dw = vec![T::zero(); co * k];
    T::gemm(co, np, k, &gm, false, &cols, true, &mut dw, false);
    Tensor::from_raw(vec![co, g.ci, KERNEL, KERNEL], dw)
}

fn last_axis<T: Scalar>(x: &Tensor<T>) -> usize {
    *x.shape().last().unwrap_or(&1)
}

pub(crate) fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = last_axis(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

pub(crate) fn log_softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = last_axis(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

/// (outer, axis, inner) extents of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::from_raw(shape, out)
}

pub(crate) fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, size, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::from_raw(shape, out)
}

/// Adjoint of `slice`: places `x` at `start` along `axis` inside zeros of
/// extent `total`.
pub(crate) fn embed<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, total: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![T::zero(); numel(&shape)];
    for o in 0..outer {
        let base = (o * total + start) * inner;
        out[base..base + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_raw(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let co = w.shape()[0];
        let (oh, ow) = (conv_out(h, stride), conv_out(wd, stride));
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let iy = (oy * stride + kh) as isize - 1;
                                    let ix = (ox * stride + kw) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * ci + c) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * 3 + kh) * 3 + kw];
                                }
                            }
                        }
                        out[((b * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_raw(vec![n, co, oh, ow], out)
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n = numel(shape);
        t(shape, &(0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.5).collect::<Vec<_>>())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for stride in [1, 2] {
            let x = seq(&[2, 3, 5, 6], 0.05);
            let w = seq(&[4, 3, 3, 3], 0.03);
            let a = conv2d(&x, &w, stride);
            let b = conv_direct(&x, &w, stride);
            assert_eq!(a.shape(), b.shape());
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x, w), g> = <x, input_grad(g, w)> = <w, weight_grad(x, g)>
        for stride in [1, 2] {
            let x = seq(&[2, 2, 5, 4], 0.04);
            let w = seq(&[3, 2, 3, 3], 0.02);
            let y = conv2d(&x, &w, stride);
            let g = seq(y.shape(), 0.01);
            let lhs = dot(&y, &g);
            let dx = conv2d_input_grad(&g, &w, stride, (5, 4));
            let dw = conv2d_weight_grad(&x, &g, stride);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-10);
            assert!((lhs - dot(&w, &dw)).abs() < 1e-10);
        }
    }

    #[test]
    fn broadcast_and_sum_to() {
        let b = t(&[3, 1], &[1., 2., 3.]);
        let big = broadcast_to(&b, &[2, 3, 2]);
        assert_eq!(big.data(), &[1., 1., 2., 2., 3., 3., 1., 1., 2., 2., 3., 3.]);
        let back = sum_to(&big, &[3, 1]);
        assert_eq!(back.data(), &[4., 8., 12.]);
        assert_eq!(sum_to(&big, &[]).data(), &[24.]);
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
    }

    #[test]
    fn concat_slice_embed_roundtrip() {
        let a = seq(&[2, 3, 2], 0.1);
        let b = seq(&[2, 1, 2], 0.2);
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 4, 2]);
        assert_eq!(slice(&c, 1, 0, 3), a);
        assert_eq!(slice(&c, 1, 3, 1), b);
        let e = embed(&b, 1, 3, 4);
        assert_eq!(slice(&e, 1, 3, 1), b);
        assert_eq!(slice(&e, 1, 0, 3).max_abs(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[2, 3], &[1000., 1000., 1000., -1., 0., 1.]);
        let s = softmax_last(&x);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let ls = log_softmax_last(&x);
        assert!((ls.data()[0] + 3f64.ln()).abs() < 1e-12);
    }
}
