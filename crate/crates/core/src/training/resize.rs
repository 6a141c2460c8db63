//! Bicubic resampling with the conventions of the standard SR benchmark
//! degradation: Keys kernel with `a = -0.5`, kernel widening when minifying,
//! symmetric (mirror) boundary handling.
//!
//! Two details make the result exactly equivariant under flips and 90 degree
//! rotations, which the data pipeline relies on: each output sample sums its
//! taps in mirrored pairs from the outside in, and the two separable pass
//! orders (rows first, columns first) are averaged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    let a2 = a * a;
    let a3 = a2 * a;
    if a <= 1.0 {
        1.5 * a3 - 2.5 * a2 + 1.0
    } else if a < 2.0 {
        -0.5 * a3 + 2.5 * a2 - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Taps and normalised weights of one output sample.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Taps {
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

/// Sums `f(k)` over `0..n` in mirrored pairs `(0, n-1), (1, n-2), ...`.
fn symmetric_sum(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..n / 2 {
        acc += f(k) + f(n - 1 - k);
    }
    if n % 2 == 1 {
        acc += f(n / 2);
    }
    acc
}

pub(crate) fn contributions(in_len: usize, out_len: usize) -> Vec<Taps> {
    // Ratio of input to output spacing; exact for integer factors.
    let inv = in_len as f64 / out_len as f64;
    let minify = inv > 1.0;
    let width = if minify { 4.0 * inv } else { 4.0 };
    let kernel = |d: f64| if minify { cubic(d / inv) / inv } else { cubic(d) };
    let taps = width.ceil() as isize + 2;
    let period = 2 * in_len as isize;
    (1..=out_len)
        .map(|i| {
            // One-based input coordinate of output sample i.
            let u = i as f64 * inv + 0.5 * (1.0 - inv);
            let left = (u - width / 2.0).floor() as isize;
            let mut index = Vec::new();
            let mut weight = Vec::new();
            for j in left..left + taps {
                let w = kernel(u - j as f64);
                if w == 0.0 {
                    continue;
                }
                let m = (j - 1).rem_euclid(period);
                let src = if m < in_len as isize { m } else { period - 1 - m };
                index.push(src as usize);
                weight.push(w);
            }
            let total = symmetric_sum(weight.len(), |k| weight[k]);
            weight.iter_mut().for_each(|w| *w /= total);
            Taps { index, weight }
        })
        .collect()
}

/// Resamples every row of a `rows x len` row-major plane to `out_len`.
fn resample_rows(src: &[f64], rows: usize, len: usize, taps: &[Taps]) -> Vec<f64> {
    let out_len = taps.len();
    let mut out = vec![0.0; rows * out_len];
    for r in 0..rows {
        let line = &src[r * len..(r + 1) * len];
        for (o, t) in out[r * out_len..(r + 1) * out_len].iter_mut().zip(taps) {
            *o = symmetric_sum(t.index.len(), |k| t.weight[k] * line[t.index[k]]);
        }
    }
    out
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Resizes one `h x w` plane. Works in double precision.
pub fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let taps_w = contributions(w, out_w);
    let taps_h = contributions(h, out_h);
    // Columns first: resample rows along W, then along H.
    let a = resample_rows(src, h, w, &taps_w);
    let a = transpose(&resample_rows(&transpose(&a, h, out_w), out_w, h, &taps_h), out_w, out_h);
    // Rows first: along H, then along W.
    let b = resample_rows(&transpose(src, h, w), w, h, &taps_h);
    let b = resample_rows(&transpose(&b, w, out_h), out_h, w, &taps_w);
    a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Resizes a `[C, H, W]` image to `[C, out_h, out_w]`.
pub fn resize_bicubic(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("resize_bicubic", format!("expected [C, H, W], got {:?}", img.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bicubic", format!("empty output {out_h}x{out_w}")));
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks_exact(h * w) {
        let src: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        out.extend(resize_plane(&src, h, w, out_h, out_w).into_iter().map(|v| v as f32));
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Antialiased downsampling by an integer factor. Extents must divide evenly.
pub fn downsample(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let shape = img.shape();
    if shape.len() != 3 || scale == 0 || shape[1] % scale != 0 || shape[2] % scale != 0 {
        return Err(Error::shape(
            "downsample",
            format!("{shape:?} is not divisible by scale {scale}"),
        ));
    }
    resize_bicubic(img, shape[1] / scale, shape[2] / scale)
}

/// Bicubic upsampling by an integer factor, the classical SR baseline.
pub fn upsample(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let shape = img.shape();
    if shape.len() != 3 || scale == 0 {
        return Err(Error::shape("upsample", format!("{shape:?} by {scale}")));
    }
    resize_bicubic(img, shape[1] * scale, shape[2] * scale)
}
