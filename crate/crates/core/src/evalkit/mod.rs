//! Benchmark evaluation on the luma channel.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use metrics::{crop_border, psnr, rgb_to_y, ssim, ssim_terms, SsimTerms};

use crate::error::{Error, Result};
use crate::imageio::{list_pngs, load_rgb, quantize};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::data::{degrade, modcrop};
use crate::training::resize::upsample;

/// What produces the super-resolved image that is scored against HR.
pub enum Method<'a> {
    Model(&'a Model<f32>),
    /// Plain bicubic upsampling of the LR input.
    Bicubic,
    /// The HR image itself, a sanity ceiling.
    Reference,
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Model(_) => "model",
            Method::Bicubic => "bicubic",
            Method::Reference => "reference",
        }
    }

    /// SR output for one LR image, quantised to 8 bits like a saved PNG.
    pub fn super_resolve(&self, lr: &Tensor<f32>, hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
        let out = match self {
            Method::Model(model) => {
                let shape = lr.shape();
                let x = lr.reshape(&[1, shape[0], shape[1], shape[2]])?;
                let y = model.upscale(&x)?;
                let s = y.shape().to_vec();
                y.reshape(&s[1..])?
            }
            Method::Bicubic => upsample(lr, scale)?,
            Method::Reference => hr.clone(),
        };
        Ok(quantize(&out))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub scale: usize,
    pub border: usize,
    /// Sorted by image name.
    pub images: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Files that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Formats a dB value, writing `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn parse_value(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| Error::Data(format!("bad number `{s}` in report"))),
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl EvalReport {
    pub fn from_scores(
        dataset: &str,
        method: &str,
        scale: usize,
        mut images: Vec<ImageScore>,
        failures: Vec<(String, String)>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data(format!("no image of `{dataset}` could be evaluated")));
        }
        images.sort_by(|a, b| a.name.cmp(&b.name));
        let n = images.len() as f64;
        let mean_psnr = images.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|s| s.ssim).sum::<f64>() / n;
        Ok(Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            scale,
            border: scale,
            images,
            mean_psnr,
            mean_ssim,
            failures,
        })
    }

    pub fn summary(&self) -> String {
        format!(
            "{} x{} {}: PSNR {} dB, SSIM {:.4} over {} images",
            self.dataset,
            self.scale,
            self.method,
            format_db(self.mean_psnr),
            self.mean_ssim,
            self.images.len()
        )
    }

    /// Tab-separated text: a commented header, one row per image, a `mean`
    /// row last. Values are written at full precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dataset = {}", self.dataset);
        let _ = writeln!(out, "# method = {}", self.method);
        let _ = writeln!(out, "# scale = {}", self.scale);
        let _ = writeln!(out, "# border = {}", self.border);
        for (name, why) in &self.failures {
            let _ = writeln!(out, "# failed = {name}: {why}");
        }
        out.push_str("name\tpsnr_db\tssim\n");
        for s in &self.images {
            let _ = writeln!(out, "{}\t{}\t{}", s.name, fmt_value(s.psnr), fmt_value(s.ssim));
        }
        let _ = writeln!(out, "mean\t{}\t{}", fmt_value(self.mean_psnr), fmt_value(self.mean_ssim));
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("malformed report: {what}"));
        let mut header = std::collections::BTreeMap::new();
        let mut failures = Vec::new();
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once(" = ").ok_or_else(|| bad(line))?;
                if k == "failed" {
                    let (name, why) = v.split_once(": ").ok_or_else(|| bad(line))?;
                    failures.push((name.to_string(), why.to_string()));
                } else {
                    header.insert(k.to_string(), v.to_string());
                }
            } else if line != "name\tpsnr_db\tssim" {
                let cols: Vec<&str> = line.split('\t').collect();
                let [name, p, s] = cols[..] else { return Err(bad(line)) };
                rows.push((name.to_string(), parse_value(p)?, parse_value(s)?));
            }
        }
        let (last, images) = rows.split_last().ok_or_else(|| bad("no rows"))?;
        if last.0 != "mean" {
            return Err(bad("missing mean row"));
        }
        let field = |k: &str| header.get(k).cloned().ok_or_else(|| bad(k));
        let num = |k: &str| field(k)?.parse::<usize>().map_err(|_| bad(k));
        Ok(Self {
            dataset: field("dataset")?,
            method: field("method")?,
            scale: num("scale")?,
            border: num("border")?,
            images: images
                .iter()
                .map(|(name, psnr, ssim)| ImageScore { name: name.clone(), psnr: *psnr, ssim: *ssim })
                .collect(),
            mean_psnr: last.1,
            mean_ssim: last.2,
            failures,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Scores one SR image against its HR counterpart on luma with a border of
/// `scale` pixels removed.
pub fn score(name: &str, sr: &Tensor<f32>, hr: &Tensor<f32>, scale: usize) -> Result<ImageScore> {
    let (ys, yh) = (rgb_to_y(sr)?, rgb_to_y(hr)?);
    Ok(ImageScore {
        name: name.to_string(),
        psnr: psnr(&ys, &yh, scale)?,
        ssim: ssim(&ys, &yh, scale)?,
    })
}

fn evaluate_one(method: &Method, dir: &Path, hr_path: &Path, scale: usize) -> Result<ImageScore> {
    let name = hr_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let hr = modcrop(&load_rgb(hr_path)?, scale)?;
    let lr_path = dir.join(format!("LR_x{scale}")).join(&name);
    let lr = if lr_path.is_file() {
        let lr = load_rgb(&lr_path)?;
        let expect = [3, hr.shape()[1] / scale, hr.shape()[2] / scale];
        if lr.shape() != expect {
            return Err(Error::Data(format!("LR image is {:?}, expected {expect:?}", lr.shape())));
        }
        lr
    } else {
        degrade(&hr, scale)?
    };
    let sr = method.super_resolve(&lr, &hr, scale)?;
    score(&name, &sr, &hr, scale)
}

/// Evaluates every PNG in `dir` (HR images). LR inputs are read from
/// `dir/LR_x{scale}/` when a file of the same name exists there and are
/// synthesised otherwise. Unreadable files are recorded and skipped.
pub fn evaluate(method: &Method, dir: &Path, scale: usize) -> Result<EvalReport> {
    if scale != 2 && scale != 4 {
        return Err(Error::Config(format!("scale must be 2 or 4, got {scale}")));
    }
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory `{}` does not exist", dir.display())));
    }
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images in `{}`", dir.display())));
    }
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for path in &files {
        match evaluate_one(method, dir, path, scale) {
            Ok(s) => images.push(s),
            Err(e) => {
                let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                log::warn!("{name}: {e}");
                failures.push((name, e.to_string()));
            }
        }
    }
    let dataset = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    EvalReport::from_scores(&dataset, method.name(), scale, images, failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_roundtrip() {
        let images = vec![
            ImageScore { name: "b.png".into(), psnr: 31.25, ssim: 0.875 },
            ImageScore { name: "a.png".into(), psnr: f64::INFINITY, ssim: 1.0 },
        ];
        let r = EvalReport::from_scores("set", "model", 2, images, vec![("c.png".into(), "bad".into())]).unwrap();
        assert_eq!(r.images[0].name, "a.png");
        assert_eq!(r.mean_psnr, f64::INFINITY);
        assert_eq!(EvalReport::parse(&r.to_text()).unwrap(), r);
        assert!(EvalReport::from_scores("set", "model", 2, vec![], vec![]).is_err());
    }
}
