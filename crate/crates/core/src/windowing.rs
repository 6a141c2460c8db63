//! Window partitioning, cyclic shifts, shifted-window masks and relative
//! position indexing.
//!
//! Feature maps are channels-last (`[B, H, W, C]`) throughout this module.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_NEG: f64 = -100.0;

/// Cyclic shift used by the shifted layers of a window size.
pub fn shift_for(window: usize) -> usize {
    window / 2
}

/// Spatial extents, window size and shift of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::Config(format!(
                "{height}x{width} is not a multiple of window {window}"
            )));
        }
        if shift != 0 && shift != shift_for(window) {
            return Err(Error::Config(format!(
                "shift must be 0 or {}, got {shift}",
                shift_for(window)
            )));
        }
        Ok(Self {
            height,
            width,
            window,
            shift,
        })
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

/// Smallest multiple of `window` that is at least `n`.
pub fn padded_extent(n: usize, window: usize) -> usize {
    n.div_ceil(window) * window
}

fn check_nhwc<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::shape(op, format!("expected [B,H,W,C], got {:?}", x.shape()))),
    }
}

/// `[B, H, W, C] -> [B * nW, M*M, C]`, windows and positions in row-major order.
pub fn window_partition<T: Element>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    window_partition_shifted(x, window, 0)
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(
    wins: &Tensor<T>,
    window: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    window_reverse_shifted(wins, window, height, width, 0)
}

/// Copies `m` positions of `c` channels starting at column `start` of a
/// torus row of `w` positions, wrapping at the end.
fn row_segment(width: usize, c: usize, start: usize, m: usize) -> [(usize, usize); 2] {
    let first = m.min(width - start);
    [(start * c, first * c), (0, (m - first) * c)]
}

/// [`window_partition`] of the map cyclically shifted by `shift` (see
/// [`cyclic_shift`]), without materialising the shifted map.
pub fn window_partition_shifted<T: Element>(x: &Tensor<T>, window: usize, shift: usize) -> Result<Tensor<T>> {
    let [b, h, w, c] = check_nhwc("window_partition", x)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("{h}x{w} not divisible by window {window}"),
        ));
    }
    let m = window;
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    for bi in 0..b {
        for wr in 0..h / m {
            for wc in 0..w / m {
                let col = (wc * m + shift) % w;
                for i in 0..m {
                    let row = (bi * h + (wr * m + i + shift) % h) * w * c;
                    for (off, len) in row_segment(w, c, col, m) {
                        out.extend_from_slice(&src[row + off..row + off + len]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b * (h / m) * (w / m), m * m, c], out))
}

/// Inverse of [`window_partition_shifted`]: reassembles the map and undoes
/// the shift.
pub fn window_reverse_shifted<T: Element>(
    wins: &Tensor<T>,
    window: usize,
    height: usize,
    width: usize,
    shift: usize,
) -> Result<Tensor<T>> {
    let m = window;
    let bad = || {
        Error::shape(
            "window_reverse",
            format!("{:?} for {height}x{width} with window {m}", wins.shape()),
        )
    };
    let [nw_total, n, c] = *wins.shape() else {
        return Err(bad());
    };
    if m == 0 || height % m != 0 || width % m != 0 || n != m * m {
        return Err(bad());
    }
    let per_image = (height / m) * (width / m);
    if nw_total % per_image != 0 {
        return Err(bad());
    }
    let b = nw_total / per_image;
    let src = wins.data();
    let mut out = vec![T::zero(); wins.numel()];
    let mut k = 0;
    for bi in 0..b {
        for wr in 0..height / m {
            for wc in 0..width / m {
                let col = (wc * m + shift) % width;
                for i in 0..m {
                    let row = (bi * height + (wr * m + i + shift) % height) * width * c;
                    for (off, len) in row_segment(width, c, col, m) {
                        out[row + off..row + off + len].copy_from_slice(&src[k..k + len]);
                        k += len;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, height, width, c], out))
}

fn rolled(n: usize, shift: isize) -> Vec<usize> {
    let s = shift.rem_euclid(n as isize) as usize;
    (0..n).map(|i| (i + s) % n).collect()
}

/// Torus translation of a `[B, H, W, C]` map:
/// `out[i][j] = x[(i + s) mod H][(j + s) mod W]`. A positive `s` moves
/// content up and left; `-s` undoes it.
pub fn cyclic_shift<T: Element, G: Graph<T>>(g: &mut G, x: &G::V, shift: isize) -> Result<G::V> {
    let [_, h, w, _] = check_nhwc("cyclic_shift", g.value(x))?;
    g.remap(x, 1, rolled(h, shift), rolled(w, shift))
}

/// Mirror index without edge repetition, extended periodically so any pad
/// width is valid (a single row reflects onto itself).
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Reflection-pads the spatial axes at `axis, axis + 1` on the bottom and
/// right to `rows x cols`.
pub fn reflect_pad<T: Element, G: Graph<T>>(
    g: &mut G,
    x: &G::V,
    axis: usize,
    rows: usize,
    cols: usize,
) -> Result<G::V> {
    let s = g.shape_of(x);
    if axis + 2 > s.len() || rows < s[axis] || cols < s[axis + 1] {
        return Err(Error::shape(
            "reflect_pad",
            format!("{s:?} to {rows}x{cols} at axis {axis}"),
        ));
    }
    let (h, w) = (s[axis], s[axis + 1]);
    g.remap(
        x,
        axis,
        (0..rows).map(|i| reflect_index(i, h)).collect(),
        (0..cols).map(|j| reflect_index(j, w)).collect(),
    )
}

/// Keeps the top-left `rows x cols` of the spatial axes at `axis, axis + 1`.
pub fn crop<T: Element, G: Graph<T>>(
    g: &mut G,
    x: &G::V,
    axis: usize,
    rows: usize,
    cols: usize,
) -> Result<G::V> {
    let s = g.shape_of(x);
    if axis + 2 > s.len() || rows > s[axis] || cols > s[axis + 1] || rows == 0 || cols == 0 {
        return Err(Error::shape("crop", format!("{s:?} to {rows}x{cols} at axis {axis}")));
    }
    g.remap(x, axis, (0..rows).collect(), (0..cols).collect())
}

/// Region labels (row band * 3 + column band) of the shifted frame. Bands
/// on each axis are `[0, n-M)`, `[n-M, n-shift)` and `[n-shift, n)`.
pub fn region_id(height: usize, width: usize, window: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n.saturating_sub(window) {
            0
        } else if i < n.saturating_sub(shift) {
            1
        } else {
            2
        }
    };
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            out.push(band(i, height) * 3 + band(j, width));
        }
    }
    out
}

/// Additive mask `[nW, M*M, M*M]`: 0 where two tokens of a shifted window
/// share a region label, [`MASK_NEG`] otherwise. All zeros when `shift == 0`.
pub fn build_attn_mask<T: Element>(layout: &WindowLayout) -> Tensor<T> {
    let WindowLayout {
        height,
        width,
        window: m,
        shift,
    } = *layout;
    let n = m * m;
    let nw = layout.num_windows();
    let mut mask = Tensor::zeros(&[nw, n, n]);
    if shift == 0 {
        return mask;
    }
    let labels = region_id(height, width, m, shift);
    let neg = T::of(MASK_NEG);
    let data = mask.data_mut();
    let mut win = vec![0; n];
    for wr in 0..height / m {
        for wc in 0..width / m {
            let w = wr * (width / m) + wc;
            for i in 0..m {
                for j in 0..m {
                    win[i * m + j] = labels[(wr * m + i) * width + wc * m + j];
                }
            }
            for p in 0..n {
                for q in 0..n {
                    if win[p] != win[q] {
                        data[(w * n + p) * n + q] = neg;
                    }
                }
            }
        }
    }
    mask
}

/// `index[p * M*M + q]` selects the bias-table entry for the offset between
/// positions `p` and `q` of a window.
pub fn build_rel_index(window: usize) -> Vec<usize> {
    let m = window;
    let n = m * m;
    let span = 2 * m - 1;
    let mut out = Vec::with_capacity(n * n);
    for p in 0..n {
        let (pr, pc) = (p / m, p % m);
        for q in 0..n {
            let (qr, qc) = (q / m, q % m);
            out.push((pr + m - 1 - qr) * span + (pc + m - 1 - qc));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;

    #[test]
    fn partition_single_window_is_flattening() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 4, 2], |i| i as f32);
        let w = window_partition(&x, 4).unwrap();
        assert_eq!(w.shape(), &[1, 16, 2]);
        assert_eq!(w.data(), x.data());
    }

    #[test]
    fn partition_first_window_is_top_left_block() {
        let x = Tensor::<f32>::from_fn(&[1, 24, 24, 1], |i| i as f32);
        let w = window_partition(&x, 12).unwrap();
        assert_eq!(w.shape(), &[4, 144, 1]);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(w.at(&[0, i * 12 + j, 0]), x.at(&[0, i, j, 0]));
                assert_eq!(w.at(&[3, i * 12 + j, 0]), x.at(&[0, 12 + i, 12 + j, 0]));
            }
        }
        assert!(window_partition(&x, 7).is_err());
    }

    #[test]
    fn reverse_rejects_inconsistent_counts() {
        let w = Tensor::<f32>::zeros(&[3, 4, 1]);
        assert!(window_reverse(&w, 2, 4, 4).is_err());
        let zeros = window_reverse(&Tensor::<f32>::zeros(&[8, 4, 1]), 2, 4, 4).unwrap();
        assert_eq!(zeros, Tensor::zeros(&[2, 4, 4, 1]));
    }

    #[test]
    fn shift_hand_example() {
        // [[a,b],[c,d]] with s=1 -> [[d,c],[b,a]]
        let x = Tensor::<f32>::from_f64(&[1, 2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        let y = cyclic_shift(&mut Eager, &x, 1).unwrap();
        assert_eq!(y.data(), &[4., 3., 2., 1.]);
        assert_eq!(cyclic_shift(&mut Eager, &x, 0).unwrap(), x);
    }

    #[test]
    fn reflect_pad_handles_single_pixel_and_long_pads() {
        let x = Tensor::<f32>::from_f64(&[1, 1, 3, 1], &[1., 2., 3.]).unwrap();
        let y = reflect_pad(&mut Eager, &x, 1, 2, 8).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 1]);
        assert_eq!(&y.data()[..8], &[1., 2., 3., 2., 1., 2., 3., 2.]);
        assert_eq!(&y.data()[8..], &y.data()[..8]);
        let back = crop(&mut Eager, &y, 1, 1, 3).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn region_labels() {
        let single = region_id(12, 12, 12, 6);
        let mut distinct = single.clone();
        distinct.sort_unstable();
        distinct.dedup();
        // With H == M the first band is empty: 4 labels remain.
        assert!(distinct.len() <= 9 && distinct.len() >= 4);
        let mut labels = region_id(24, 24, 12, 6);
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 9);
    }

    #[test]
    fn mask_windows() {
        let layout = WindowLayout::new(24, 24, 12, 6).unwrap();
        let mask = build_attn_mask::<f32>(&layout);
        assert_eq!(mask.shape(), &[4, 144, 144]);
        let n = 144 * 144;
        assert!(mask.data()[..n].iter().all(|&v| v == 0.0));
        let last = &mask.data()[3 * n..];
        assert!(last.iter().any(|&v| v == 0.0));
        assert!(last.iter().any(|&v| v == MASK_NEG as f32));
        let flat = build_attn_mask::<f32>(&WindowLayout::new(24, 24, 12, 0).unwrap());
        assert!(flat.data().iter().all(|&v| v == 0.0));
        for row in mask.data().chunks_exact(144) {
            assert!(row.iter().any(|&v| v == 0.0));
        }
    }

    #[test]
    fn rel_index_examples() {
        assert_eq!(build_rel_index(1), vec![0]);
        let idx = build_rel_index(2);
        for p in 0..4 {
            assert_eq!(idx[p * 4 + p], 4);
        }
        assert_eq!(idx[3], 0);
        assert_eq!(idx[3 * 4], 8);
    }

    #[test]
    fn layout_validation() {
        assert!(WindowLayout::new(24, 24, 12, 6).is_ok());
        assert!(WindowLayout::new(24, 20, 12, 0).is_err());
        assert!(WindowLayout::new(24, 24, 12, 5).is_err());
        assert_eq!(padded_extent(25, 12), 36);
        assert_eq!(padded_extent(24, 12), 24);
    }
}
