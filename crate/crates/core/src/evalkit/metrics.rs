use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luma of a `[3, H, W]` RGB image in `[0, 1]` (BT.601, studio swing),
/// returned as `[H, W]` in `[16/255, 235/255]`.
pub fn rgb_to_y(img: &Tensor<f32>) -> Result<Tensor<f64>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("rgb_to_y", format!("expected [3, H, W], got {:?}", img.shape())));
    };
    let d = img.data();
    let n = h * w;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (r, g, b) = (d[i] as f64, d[n + i] as f64, d[2 * n + i] as f64);
        (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    }))
}

/// Removes `border` pixels from every side of an `[H, W]` plane.
pub fn crop_border(x: &Tensor<f64>, border: usize) -> Result<Tensor<f64>> {
    let &[h, w] = x.shape() else {
        return Err(Error::shape("crop_border", format!("expected [H, W], got {:?}", x.shape())));
    };
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::shape("crop_border", format!("border {border} leaves nothing of {h}x{w}")));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let d = x.data();
    Ok(Tensor::from_fn(&[oh, ow], |i| d[(i / ow + border) * w + i % ow + border]))
}

fn cropped_pair(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>, border: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((crop_border(a, border)?, crop_border(b, border)?))
}

/// Peak signal-to-noise ratio in dB for signals with peak 1. Identical
/// inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, border: usize) -> Result<f64> {
    let (a, b) = cropped_pair("psnr", a, b, border)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut taps = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, wt)| wt * x[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, wt)| wt * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM and its contrast-structure factor alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimTerms {
    pub ssim: f64,
    pub contrast_structure: f64,
}

pub fn ssim_terms(a: &Tensor<f64>, b: &Tensor<f64>, border: usize) -> Result<SsimTerms> {
    let (a, b) = cropped_pair("ssim", a, b, border)?;
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let k = 2 * SSIM_RADIUS + 1;
    if h < k || w < k {
        return Err(Error::shape("ssim", format!("{h}x{w} is smaller than the {k}x{k} window")));
    }
    let (x, y) = (a.data(), b.data());
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_x = filter_valid(x, h, w);
    let mu_y = filter_valid(y, h, w);
    let xx = filter_valid(&prod(x, x), h, w);
    let yy = filter_valid(&prod(y, y), h, w);
    let xy = filter_valid(&prod(x, y), h, w);
    let n = mu_x.len();
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        let contrast = (2.0 * cov + C2) / (vx + vy + C2);
        let luminance = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
        ssim += luminance * contrast;
        cs += contrast;
    }
    Ok(SsimTerms { ssim: ssim / n as f64, contrast_structure: cs / n as f64 })
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5) and dynamic
/// range 1.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, border: usize) -> Result<f64> {
    Ok(ssim_terms(a, b, border)?.ssim)
}
