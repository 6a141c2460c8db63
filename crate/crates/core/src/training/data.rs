//! Paired LR/HR patch sampling.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::resize::downsample;
use crate::error::{Error, Result};
use crate::imageio::{list_pngs, load_rgb, quantize};
use crate::tensor::Tensor;

/// Trims `[C, H, W]` so both extents are multiples of `scale`.
pub fn modcrop(img: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("modcrop", format!("expected [C, H, W], got {:?}", img.shape())));
    };
    let (nh, nw) = (h - h % scale, w - w % scale);
    if nh == 0 || nw == 0 {
        return Err(Error::Data(format!("{h}x{w} image is smaller than scale {scale}")));
    }
    crop(img, 0, 0, nh, nw).map(|t| {
        debug_assert_eq!(t.shape(), &[c, nh, nw]);
        t
    })
}

/// Rectangular crop of a `[C, H, W]` image.
pub fn crop(img: &Tensor<f32>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("crop", format!("expected [C, H, W], got {:?}", img.shape())));
    };
    if top + height > h || left + width > w {
        return Err(Error::shape(
            "crop",
            format!("{height}x{width} at ({top}, {left}) exceeds {h}x{w}"),
        ));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for r in top..top + height {
            let base = (ch * h + r) * w + left;
            out.extend_from_slice(&src[base..base + width]);
        }
    }
    Tensor::new(&[c, height, width], out)
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let &[_, _, w] = img.shape() else { panic!("hflip expects [C, H, W]") };
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Rotates a `[C, H, W]` image by 90 degrees counter-clockwise.
pub fn rot90(img: &Tensor<f32>) -> Tensor<f32> {
    let &[c, h, w] = img.shape() else { panic!("rot90 expects [C, H, W]") };
    let src = img.data();
    Tensor::from_fn(&[c, w, h], |i| {
        let (ch, r, col) = (i / (w * h), i / h % w, i % h);
        src[(ch * h + col) * w + (w - 1 - r)]
    })
}

/// The LR input the benchmark protocol derives from an HR image: bicubic
/// downsampling followed by 8-bit quantisation.
pub fn degrade(hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    Ok(quantize(&downsample(hr, scale)?))
}

/// A whole image and its degraded counterpart.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub name: String,
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

impl ImagePair {
    pub fn from_hr(name: impl Into<String>, hr: &Tensor<f32>, scale: usize) -> Result<Self> {
        let hr = modcrop(hr, scale)?;
        Ok(Self { name: name.into(), lr: degrade(&hr, scale)?, hr })
    }
}

/// One training example: an LR patch and the HR patch it was cut from.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    /// LR crop origin `(top, left)`; the HR origin is `scale` times this.
    pub origin: (usize, usize),
}

/// Augmentation drawn for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub rotate: bool,
}

impl Augment {
    pub fn apply(self, img: &Tensor<f32>) -> Tensor<f32> {
        let img = if self.flip { hflip(img) } else { img.clone() };
        if self.rotate {
            rot90(&img)
        } else {
            img
        }
    }
}

pub struct PairSampler {
    pairs: Vec<ImagePair>,
    scale: usize,
    patch: usize,
    augment: bool,
}

impl PairSampler {
    /// Drops (with a warning) pairs too small for one patch.
    pub fn new(pairs: Vec<ImagePair>, scale: usize, patch: usize, augment: bool) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let total = pairs.len();
        let pairs: Vec<ImagePair> = pairs
            .into_iter()
            .filter(|p| {
                let ok = p.lr.shape()[1] >= patch && p.lr.shape()[2] >= patch;
                if !ok {
                    log::warn!("skipping `{}`: smaller than {}px HR patch", p.name, patch * scale);
                }
                ok
            })
            .collect();
        if pairs.is_empty() {
            return Err(Error::Data(format!(
                "none of {total} images is large enough for a {patch}px LR patch at scale {scale}"
            )));
        }
        Ok(Self { pairs, scale, patch, augment })
    }

    /// Loads every PNG in `dir` as an HR image.
    pub fn from_dir(dir: &Path, scale: usize, patch: usize, augment: bool) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Data(format!("data directory `{}` does not exist", dir.display())));
        }
        let files = list_pngs(dir)?;
        if files.is_empty() {
            return Err(Error::Data(format!("no PNG images in `{}`", dir.display())));
        }
        let mut pairs = Vec::with_capacity(files.len());
        for path in files {
            let hr = load_rgb(&path)?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            match ImagePair::from_hr(name.clone(), &hr, scale) {
                Ok(pair) => pairs.push(pair),
                Err(e) => log::warn!("skipping `{name}`: {e}"),
            }
        }
        Self::new(pairs, scale, patch, augment)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<SamplePair> {
        let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
        let (p, s) = (self.patch, self.scale);
        let top = rng.random_range(0..=pair.lr.shape()[1] - p);
        let left = rng.random_range(0..=pair.lr.shape()[2] - p);
        let aug = if self.augment {
            Augment { flip: rng.random_bool(0.5), rotate: rng.random_bool(0.5) }
        } else {
            Augment::default()
        };
        let lr = crop(&pair.lr, top, left, p, p)?;
        let hr = crop(&pair.hr, s * top, s * left, s * p, s * p)?;
        Ok(SamplePair { lr: aug.apply(&lr), hr: aug.apply(&hr), origin: (top, left) })
    }

    /// Stacks `batch` samples into `[B, 3, p, p]` and `[B, 3, sp, sp]`.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R, batch: usize) -> Result<Batch> {
        let mut lr = Vec::new();
        let mut hr = Vec::new();
        for _ in 0..batch {
            let s = self.sample(rng)?;
            lr.extend_from_slice(s.lr.data());
            hr.extend_from_slice(s.hr.data());
        }
        Ok(Batch { lr, hr, batch, patch: self.patch, scale: self.scale })
    }
}

/// A stacked batch held as plain buffers so it can cross threads without
/// touching the engine's per-thread memory accounting.
pub struct Batch {
    lr: Vec<f32>,
    hr: Vec<f32>,
    batch: usize,
    patch: usize,
    scale: usize,
}

impl Batch {
    pub fn into_tensors(self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (b, p, s) = (self.batch, self.patch, self.scale);
        Ok((Tensor::new(&[b, 3, p, p], self.lr)?, Tensor::new(&[b, 3, s * p, s * p], self.hr)?))
    }
}

/// Endless batch source. With prefetching a worker thread fills a bounded
/// queue; both modes draw from the same RNG sequence, so they yield
/// identical batches.
pub enum BatchStream {
    Inline { sampler: Arc<PairSampler>, rng: ChaCha8Rng, batch: usize },
    Prefetch { rx: Receiver<Result<Batch>>, worker: Option<JoinHandle<()>> },
}

impl BatchStream {
    pub fn new(sampler: PairSampler, seed: u64, batch: usize, prefetch: Option<usize>) -> Self {
        let sampler = Arc::new(sampler);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match prefetch {
            None => BatchStream::Inline { sampler, rng, batch },
            Some(depth) => {
                let (tx, rx) = sync_channel(depth.max(1));
                let worker = std::thread::spawn(move || loop {
                    let next = sampler.sample_batch(&mut rng, batch);
                    if tx.send(next).is_err() {
                        break;
                    }
                });
                BatchStream::Prefetch { rx, worker: Some(worker) }
            }
        }
    }

    pub fn next_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        match self {
            BatchStream::Inline { sampler, rng, batch } => sampler.sample_batch(rng, *batch)?.into_tensors(),
            BatchStream::Prefetch { rx, .. } => rx
                .recv()
                .map_err(|_| Error::Data("data worker stopped".into()))??
                .into_tensors(),
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        if let BatchStream::Prefetch { rx, worker } = self {
            // Closing the receiver makes the worker's next send fail.
            let (_, dead) = sync_channel(0);
            drop(std::mem::replace(rx, dead));
            if let Some(h) = worker.take() {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |i| ((i * 7919) % 251) as f32 / 250.0)
    }

    #[test]
    fn flips_and_rotations() {
        let img = ramp(4, 6);
        assert_eq!(hflip(&hflip(&img)), img);
        let r = rot90(&img);
        assert_eq!(r.shape(), &[3, 6, 4]);
        // Top-right corner moves to top-left.
        assert_eq!(r.at(&[1, 0, 0]), img.at(&[1, 0, 5]));
        assert_eq!(rot90(&rot90(&rot90(&r))), img);
    }

    #[test]
    fn identity_augment_is_plain_crop() {
        let img = ramp(8, 8);
        assert_eq!(Augment::default().apply(&img), img);
    }

    #[test]
    fn samples_are_aligned() {
        let pair = ImagePair::from_hr("a", &ramp(40, 34), 2).unwrap();
        let sampler = PairSampler::new(vec![pair.clone()], 2, 6, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = sampler.sample(&mut rng).unwrap();
            let (t, l) = s.origin;
            assert_eq!(s.lr, crop(&pair.lr, t, l, 6, 6).unwrap());
            assert_eq!(s.hr, crop(&pair.hr, 2 * t, 2 * l, 12, 12).unwrap());
        }
    }

    #[test]
    fn small_images_are_skipped() {
        let small = ImagePair::from_hr("s", &ramp(8, 8), 2).unwrap();
        let big = ImagePair::from_hr("b", &ramp(20, 20), 2).unwrap();
        assert_eq!(PairSampler::new(vec![small.clone(), big], 2, 6, true).unwrap().len(), 1);
        assert!(PairSampler::new(vec![small], 2, 6, true).is_err());
    }

    #[test]
    fn prefetch_matches_inline() {
        let make = || PairSampler::new(vec![ImagePair::from_hr("a", &ramp(30, 30), 2).unwrap()], 2, 5, true).unwrap();
        let mut a = BatchStream::new(make(), 3, 2, None);
        let mut b = BatchStream::new(make(), 3, 2, Some(2));
        for _ in 0..5 {
            assert_eq!(a.next_batch().unwrap(), b.next_batch().unwrap());
        }
    }
}
