//! 8-bit RGB PNG input and output for `[3, H, W]` images in `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image { path: path.to_path_buf(), detail: "image is empty".into() });
    }
    let raw = img.as_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps every value to the nearest of the 256 representable levels.
pub fn quantize(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| to_u8(v) as f32 / 255.0)
}

pub fn save_rgb(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("save_rgb", format!("expected [3, H, W], got {:?}", img.shape())));
    };
    let mut raw = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            raw[3 * p + c] = to_u8(img.data()[c * h * w + p]);
        }
    }
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, image::ColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
