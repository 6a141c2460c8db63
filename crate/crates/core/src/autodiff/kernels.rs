//! Forward and backward kernels for every differentiable op.
//!
//! Kernels are plain functions over [`Tensor`]s. The tape and the eager
//! executor both call [`forward`]; only the tape calls [`backward`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// An operation together with its non-tensor arguments.
#[derive(Clone, Debug)]
pub enum Op<T: Element> {
    /// `[.., m, k] x [.., k, n]` with broadcast batch prefixes.
    Matmul,
    /// `x W + b` with `W: [in, out]` and `b: [out]`.
    Affine,
    /// `a + b` where `b` broadcasts to the shape of `a`.
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Gelu,
    Sqrt,
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    ConcatLastDim,
    SliceLastDim { start: usize, len: usize },
    Sum,
    Mean,
    SoftmaxLastDim,
    /// Inputs: `x, gamma, beta`.
    LayerNorm { eps: f64 },
    /// Inputs: `x [B,Cin,H,W], w [Cout,Cin,3,3], b [Cout]`; stride 1, padding 1.
    Conv3x3,
    PixelShuffle(usize),
    /// `out[i] = table[index[i]]`, reshaped to `shape`.
    Gather {
        index: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    /// Inputs: `q [Bw,N,dk], k [Bw,N,dk], v [Bw,N,dv], bias [N,N]`.
    /// Window `w` adds `mask[w % nW]` when a mask is present.
    WindowAttention {
        scale: f64,
        mask: Option<Arc<Tensor<T>>>,
    },
    WindowPartition { window: usize, shift: usize },
    WindowReverse { window: usize, height: usize, width: usize, shift: usize },
    /// Gathers two adjacent axes starting at `axis`:
    /// `out[.., i, j, ..] = x[.., rows[i], cols[j], ..]`.
    Remap {
        axis: usize,
        rows: Arc<Vec<usize>>,
        cols: Arc<Vec<usize>>,
    },
}

impl<T: Element> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Affine => "affine",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Gelu => "gelu",
            Op::Sqrt => "sqrt",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::ConcatLastDim => "concat_lastdim",
            Op::SliceLastDim { .. } => "slice_lastdim",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SoftmaxLastDim => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv3x3 => "conv2d_3x3",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::Gather { .. } => "gather",
            Op::WindowAttention { .. } => "window_attention",
            Op::WindowPartition { .. } => "window_partition",
            Op::WindowReverse { .. } => "window_reverse",
            Op::Remap { .. } => "remap",
        }
    }
}

/// Intermediate results a backward rule needs beyond inputs and output.
pub(crate) enum Saved<T: Element> {
    None,
    Stats { mean: Tensor<T>, rstd: Tensor<T> },
    Probs(Tensor<T>),
}

impl<T: Element> Saved<T> {
    pub fn nbytes(&self) -> usize {
        match self {
            Saved::None => 0,
            Saved::Stats { mean, rstd } => mean.nbytes() + rstd.nbytes(),
            Saved::Probs(p) => p.nbytes(),
        }
    }
}

fn arity<T: Element>(op: &Op<T>, xs: &[&Tensor<T>], n: usize) -> Result<()> {
    if xs.len() != n {
        return Err(Error::shape(
            op.name(),
            format!("expected {n} inputs, got {}", xs.len()),
        ));
    }
    Ok(())
}

pub(crate) fn forward<T: Element>(
    op: &Op<T>,
    xs: &[&Tensor<T>],
    keep: bool,
) -> Result<(Tensor<T>, Saved<T>)> {
    let out = match op {
        Op::Matmul => {
            arity(op, xs, 2)?;
            matmul(xs[0], xs[1])?
        }
        Op::Affine => {
            arity(op, xs, 3)?;
            affine(xs[0], xs[1], xs[2])?
        }
        Op::Add => {
            arity(op, xs, 2)?;
            let bc = Broadcast::new(xs[0].shape(), xs[1].shape())?;
            let b = xs[1].data();
            let mut out = xs[0].clone();
            bc.for_each(|i, j| out.data_mut()[i] += b[j]);
            out
        }
        Op::Sub => {
            arity(op, xs, 2)?;
            same_shape(op, xs[0], xs[1])?;
            xs[0].zip_map(xs[1], |a, b| a - b)?
        }
        Op::Mul => {
            arity(op, xs, 2)?;
            same_shape(op, xs[0], xs[1])?;
            xs[0].zip_map(xs[1], |a, b| a * b)?
        }
        Op::Scale(s) => {
            arity(op, xs, 1)?;
            let s = T::of(*s);
            xs[0].map(|v| v * s)
        }
        Op::AddScalar(s) => {
            arity(op, xs, 1)?;
            let s = T::of(*s);
            xs[0].map(|v| v + s)
        }
        Op::Gelu => {
            arity(op, xs, 1)?;
            xs[0].map(gelu)
        }
        Op::Sqrt => {
            arity(op, xs, 1)?;
            xs[0].map(|v| v.sqrt())
        }
        Op::Reshape(shape) => {
            arity(op, xs, 1)?;
            xs[0].reshape(shape)?
        }
        Op::Permute(perm) => {
            arity(op, xs, 1)?;
            permute(xs[0], perm)?
        }
        Op::ConcatLastDim => concat_lastdim(xs)?,
        Op::SliceLastDim { start, len } => {
            arity(op, xs, 1)?;
            slice_lastdim(xs[0], *start, *len)?
        }
        Op::Sum => {
            arity(op, xs, 1)?;
            Tensor::scalar(T::of(sum_f64(xs[0].data())))
        }
        Op::Mean => {
            arity(op, xs, 1)?;
            Tensor::scalar(T::of(sum_f64(xs[0].data()) / xs[0].numel() as f64))
        }
        Op::SoftmaxLastDim => {
            arity(op, xs, 1)?;
            softmax_lastdim(xs[0])
        }
        Op::LayerNorm { eps } => {
            arity(op, xs, 3)?;
            let (out, mean, rstd) = layer_norm(xs[0], xs[1], xs[2], *eps)?;
            let saved = if keep {
                Saved::Stats { mean, rstd }
            } else {
                Saved::None
            };
            return finish(op, out, saved);
        }
        Op::Conv3x3 => {
            arity(op, xs, 3)?;
            conv3x3(xs[0], xs[1], xs[2])?
        }
        Op::PixelShuffle(s) => {
            arity(op, xs, 1)?;
            pixel_shuffle(xs[0], *s)?
        }
        Op::Gather { index, shape } => {
            arity(op, xs, 1)?;
            gather(xs[0], index, shape)?
        }
        Op::WindowAttention { scale, mask } => {
            arity(op, xs, 4)?;
            let (out, probs) =
                window_attention(xs[0], xs[1], xs[2], xs[3], mask.as_deref(), *scale, keep)?;
            let saved = probs.map_or(Saved::None, Saved::Probs);
            return finish(op, out, saved);
        }
        Op::WindowPartition { window, shift } => {
            arity(op, xs, 1)?;
            crate::windowing::window_partition_shifted(xs[0], *window, *shift)?
        }
        Op::WindowReverse {
            window,
            height,
            width,
            shift,
        } => {
            arity(op, xs, 1)?;
            crate::windowing::window_reverse_shifted(xs[0], *window, *height, *width, *shift)?
        }
        Op::Remap { axis, rows, cols } => {
            arity(op, xs, 1)?;
            remap(xs[0], *axis, rows, cols)?
        }
    };
    finish(op, out, Saved::None)
}

fn finish<T: Element>(
    op: &Op<T>,
    out: Tensor<T>,
    saved: Saved<T>,
) -> Result<(Tensor<T>, Saved<T>)> {
    if !out.all_finite() {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok((out, saved))
}

/// Gradients of the op's inputs given the gradient of its output. Entries
/// for inputs with `needs[i] == false` may be `None`.
pub(crate) fn backward<T: Element>(
    op: &Op<T>,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Matmul => {
            let (ga, gb) = matmul_backward(xs[0], xs[1], g, needs[0], needs[1]);
            vec![ga, gb]
        }
        Op::Affine => {
            let (gx, gw) = matmul_backward(xs[0], xs[1], g, needs[0], needs[1]);
            let gb = needs[2].then(|| {
                let n = xs[2].numel();
                let mut gb = vec![T::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor::from_parts(vec![n], gb)
            });
            vec![gx, gw, gb]
        }
        Op::Add => {
            let gb = needs[1].then(|| {
                let bc = Broadcast::new(xs[0].shape(), xs[1].shape())
                    .expect("validated in forward");
                let mut gb = Tensor::zeros(xs[1].shape());
                let gd = g.data();
                bc.for_each(|i, j| gb.data_mut()[j] += gd[i]);
                gb
            });
            vec![needs[0].then(|| g.clone()), gb]
        }
        Op::Sub => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))],
        Op::Mul => vec![
            needs[0].then(|| g.zip_map(xs[1], |a, b| a * b).unwrap()),
            needs[1].then(|| g.zip_map(xs[0], |a, b| a * b).unwrap()),
        ],
        Op::Scale(s) => {
            let s = T::of(*s);
            vec![Some(g.map(|v| v * s))]
        }
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Gelu => vec![Some(g.zip_map(xs[0], |gv, x| gv * gelu_grad(x)).unwrap())],
        Op::Sqrt => {
            let half = T::of(0.5);
            vec![Some(g.zip_map(out, |gv, y| gv * half / y).unwrap())]
        }
        Op::Reshape(_) => vec![Some(g.reshape(xs[0].shape()).unwrap())],
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute(g, &inv).unwrap())]
        }
        Op::ConcatLastDim => {
            let mut start = 0;
            xs.iter()
                .zip(needs)
                .map(|(x, &need)| {
                    let w = x.last_dim();
                    let part = need.then(|| slice_lastdim(g, start, w).unwrap());
                    start += w;
                    part
                })
                .collect()
        }
        Op::SliceLastDim { start, len } => {
            let width = xs[0].last_dim();
            let rows = xs[0].numel() / width;
            let mut gx = Tensor::zeros(xs[0].shape());
            let gd = g.data();
            for r in 0..rows {
                gx.data_mut()[r * width + start..r * width + start + len]
                    .copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            vec![Some(gx)]
        }
        Op::Sum => vec![Some(Tensor::full(xs[0].shape(), g.data()[0]))],
        Op::Mean => {
            let v = g.data()[0] / T::of(xs[0].numel() as f64);
            vec![Some(Tensor::full(xs[0].shape(), v))]
        }
        Op::SoftmaxLastDim => vec![Some(softmax_backward(out, g))],
        Op::LayerNorm { .. } => {
            let Saved::Stats { mean, rstd } = saved else {
                unreachable!("layer_norm recorded without statistics")
            };
            let (gx, gg, gb) = layer_norm_backward(xs[0], xs[1], mean, rstd, g);
            vec![Some(gx), needs[1].then_some(gg), needs[2].then_some(gb)]
        }
        Op::Conv3x3 => {
            let (gx, gw, gb) = conv3x3_backward(xs[0], xs[1], g, needs[0], needs[1] || needs[2]);
            vec![gx, gw, needs[2].then_some(gb)]
        }
        Op::PixelShuffle(s) => vec![Some(pixel_unshuffle(g, *s).unwrap())],
        Op::Gather { index, .. } => {
            let mut gt = Tensor::zeros(xs[0].shape());
            for (&i, &gv) in index.iter().zip(g.data()) {
                gt.data_mut()[i] += gv;
            }
            vec![Some(gt)]
        }
        Op::WindowAttention { scale, .. } => {
            let Saved::Probs(probs) = saved else {
                unreachable!("window_attention recorded without probabilities")
            };
            let (gq, gk, gv, gbias) =
                window_attention_backward(xs[0], xs[1], xs[2], probs, g, *scale);
            vec![Some(gq), Some(gk), Some(gv), needs[3].then_some(gbias)]
        }
        Op::WindowPartition { window, shift } => {
            let s = xs[0].shape();
            vec![Some(crate::windowing::window_reverse_shifted(g, *window, s[1], s[2], *shift).unwrap())]
        }
        Op::WindowReverse { window, shift, .. } => {
            vec![Some(crate::windowing::window_partition_shifted(g, *window, *shift).unwrap())]
        }
        Op::Remap { axis, rows, cols } => vec![Some(remap_backward(xs[0].shape(), g, *axis, rows, cols))],
    }
}

fn affine<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[_, out], &[nb]) = (w.shape(), b.shape()) else {
        return Err(Error::shape("affine", format!("weight {:?}, bias {:?}", w.shape(), b.shape())));
    };
    if nb != out {
        return Err(Error::shape("affine", format!("bias {nb} for {out} outputs")));
    }
    let mut y = matmul(x, w)?;
    for row in y.data_mut().chunks_exact_mut(out) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

fn same_shape<T: Element>(op: &Op<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sum_f64<T: Element>(data: &[T]) -> f64 {
    data.iter().map(|v| v.as_f64()).sum()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn gelu<T: Element>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-T::of(0.5) * x * x).exp();
    cdf + x * pdf
}

// ---------------------------------------------------------------------------
// Broadcasting

/// Maps every element of an output (shape `a`) to the element of `b` it reads.
enum Broadcast {
    Same(usize),
    /// `b` is a trailing block repeated along leading axes.
    Suffix { n: usize, block: usize },
    General {
        shape: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same(a.iter().product()));
        }
        let trimmed: &[usize] = {
            let lead = b.iter().take_while(|&&d| d == 1).count();
            &b[lead.min(b.len().saturating_sub(1))..]
        };
        if trimmed.len() > a.len() {
            return Err(Error::shape("add", format!("{b:?} does not broadcast to {a:?}")));
        }
        if a.ends_with(trimmed) {
            return Ok(Broadcast::Suffix {
                n: a.iter().product(),
                block: trimmed.iter().product(),
            });
        }
        if b.len() > a.len() {
            return Err(Error::shape("add", format!("{b:?} does not broadcast to {a:?}")));
        }
        let offset = a.len() - b.len();
        let mut strides = vec![0; a.len()];
        let mut stride = 1;
        for i in (0..b.len()).rev() {
            let (ad, bd) = (a[offset + i], b[i]);
            if bd == ad {
                strides[offset + i] = stride;
            } else if bd != 1 {
                return Err(Error::shape("add", format!("{b:?} does not broadcast to {a:?}")));
            }
            stride *= bd;
        }
        Ok(Broadcast::General {
            shape: a.to_vec(),
            strides,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match self {
            Broadcast::Same(n) => (0..*n).for_each(|i| f(i, i)),
            Broadcast::Suffix { n, block } => {
                for start in (0..*n).step_by(*block) {
                    for j in 0..*block {
                        f(start + j, j);
                    }
                }
            }
            Broadcast::General { shape, strides } => {
                let n: usize = shape.iter().product();
                let mut idx = vec![0; shape.len()];
                let mut j = 0;
                for i in 0..n {
                    f(i, j);
                    for ax in (0..shape.len()).rev() {
                        idx[ax] += 1;
                        j += strides[ax];
                        if idx[ax] < shape[ax] {
                            break;
                        }
                        j -= strides[ax] * shape[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Matmul

struct MatmulLayout {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// `(batch of a, batch of b)` for each output batch.
    pairs: Vec<(usize, usize)>,
    /// `b` has no batch prefix: the product is a single GEMM over all rows of `a`.
    flat: bool,
}

fn matmul_layout(a: &[usize], b: &[usize]) -> Result<MatmulLayout> {
    let err = || Error::shape("matmul", format!("{a:?} x {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let pa = &a[..a.len() - 2];
    let pb = &b[..b.len() - 2];
    if pb.iter().product::<usize>() == 1 && pb.len() <= pa.len() {
        let mut out_shape = pa.to_vec();
        out_shape.extend([m, n]);
        let batches = pa.iter().product();
        return Ok(MatmulLayout {
            m,
            k,
            n,
            out_shape,
            pairs: (0..batches).map(|i| (i, 0)).collect(),
            flat: true,
        });
    }
    let rank = pa.len().max(pb.len());
    let dim = |p: &[usize], i: usize| {
        let off = rank - p.len();
        if i < off {
            1
        } else {
            p[i - off]
        }
    };
    let mut po = Vec::with_capacity(rank);
    for i in 0..rank {
        let (da, db) = (dim(pa, i), dim(pb, i));
        if da != db && da != 1 && db != 1 {
            return Err(err());
        }
        po.push(da.max(db));
    }
    let strides = |p: &[usize]| {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            let d = dim(p, i);
            if d != 1 {
                s[i] = acc;
            }
            acc *= d;
        }
        s
    };
    let (sa, sb) = (strides(pa), strides(pb));
    let total: usize = po.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0; rank];
    for _ in 0..total {
        let ia = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ib = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((ia, ib));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < po[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = po;
    out_shape.extend([m, n]);
    Ok(MatmulLayout {
        m,
        k,
        n,
        out_shape,
        pairs,
        flat: false,
    })
}

pub(crate) fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let l = matmul_layout(a.shape(), b.shape())?;
    let (m, k, n) = (l.m, l.k, l.n);
    let mut out = vec![T::zero(); l.pairs.len() * m * n];
    if l.flat {
        let rows = l.pairs.len() * m;
        gemm(
            rows,
            k,
            n,
            T::one(),
            MatRef::rm(a.data(), k),
            MatRef::rm(b.data(), n),
            T::zero(),
            &mut out,
        );
    } else {
        for (o, &(ia, ib)) in l.pairs.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                T::one(),
                MatRef::rm(&a.data()[ia * m * k..(ia + 1) * m * k], k),
                MatRef::rm(&b.data()[ib * k * n..(ib + 1) * k * n], n),
                T::zero(),
                &mut out[o * m * n..(o + 1) * m * n],
            );
        }
    }
    Ok(Tensor::from_parts(l.out_shape, out))
}

fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let l = matmul_layout(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (l.m, l.k, l.n);
    let gd = g.data();
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    if l.flat {
        let rows = l.pairs.len() * m;
        if let Some(ga) = ga.as_mut() {
            gemm(
                rows,
                n,
                k,
                T::one(),
                MatRef::rm(gd, n),
                MatRef::rm_t(b.data(), n),
                T::zero(),
                ga.data_mut(),
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm(
                k,
                rows,
                n,
                T::one(),
                MatRef::rm_t(a.data(), k),
                MatRef::rm(gd, n),
                T::zero(),
                gb.data_mut(),
            );
        }
        return (ga, gb);
    }
    for (o, &(ia, ib)) in l.pairs.iter().enumerate() {
        let go = &gd[o * m * n..(o + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            gemm(
                m,
                n,
                k,
                T::one(),
                MatRef::rm(go, n),
                MatRef::rm_t(&b.data()[ib * k * n..(ib + 1) * k * n], n),
                T::one(),
                &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k],
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm(
                k,
                m,
                n,
                T::one(),
                MatRef::rm_t(&a.data()[ia * m * k..(ia + 1) * m * k], k),
                MatRef::rm(go, n),
                T::one(),
                &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n],
            );
        }
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// Layout ops

pub(crate) fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::shape(
            "permute",
            format!("{perm:?} is not a permutation of {nd} axes"),
        ));
    }
    let shape = x.shape();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(x.numel());
    let inner = out_shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    let mut idx = vec![0; nd.saturating_sub(1)];
    let mut base = 0;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn concat_lastdim<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_lastdim", "no inputs"))?;
    let lead = &first.shape()[..first.ndim() - 1];
    for x in xs {
        if &x.shape()[..x.ndim() - 1] != lead {
            return Err(Error::shape(
                "concat_lastdim",
                format!("{:?} vs {:?}", first.shape(), x.shape()),
            ));
        }
    }
    let rows: usize = lead.iter().product();
    let width: usize = xs.iter().map(|x| x.last_dim()).sum();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for x in xs {
            let w = x.last_dim();
            out.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(width);
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice_lastdim<T: Element>(
    x: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let width = x.last_dim();
    if len == 0 || start + len > width {
        return Err(Error::shape(
            "slice_lastdim",
            format!("[{start}, {}) out of width {width}", start + len),
        ));
    }
    let rows = x.numel() / width;
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x.data()[r * width + start..r * width + start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn remap<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    rows: &[usize],
    cols: &[usize],
) -> Result<Tensor<T>> {
    let s = x.shape();
    if axis + 2 > s.len() {
        return Err(Error::shape("remap", format!("axis {axis} for shape {s:?}")));
    }
    let (h, w) = (s[axis], s[axis + 1]);
    if rows.iter().any(|&r| r >= h) || cols.iter().any(|&c| c >= w) || rows.is_empty() || cols.is_empty() {
        return Err(Error::shape("remap", format!("index out of range for {s:?}")));
    }
    let pre: usize = s[..axis].iter().product();
    let post: usize = s[axis + 2..].iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(pre * rows.len() * cols.len() * post);
    for p in 0..pre {
        for &r in rows {
            let row_base = (p * h + r) * w;
            if post == 1 {
                out.extend(cols.iter().map(|&c| src[row_base + c]));
            } else {
                for &c in cols {
                    let at = (row_base + c) * post;
                    out.extend_from_slice(&src[at..at + post]);
                }
            }
        }
    }
    let mut shape = s.to_vec();
    shape[axis] = rows.len();
    shape[axis + 1] = cols.len();
    Ok(Tensor::from_parts(shape, out))
}

fn remap_backward<T: Element>(
    in_shape: &[usize],
    g: &Tensor<T>,
    axis: usize,
    rows: &[usize],
    cols: &[usize],
) -> Tensor<T> {
    let (h, w) = (in_shape[axis], in_shape[axis + 1]);
    let pre: usize = in_shape[..axis].iter().product();
    let post: usize = in_shape[axis + 2..].iter().product();
    let mut gx = Tensor::zeros(in_shape);
    let dst = gx.data_mut();
    let mut src = g.data().chunks_exact(post);
    for p in 0..pre {
        for &r in rows {
            for &c in cols {
                let at = ((p * h + r) * w + c) * post;
                let chunk = src.next().expect("gradient has output shape");
                for (d, &v) in dst[at..at + post].iter_mut().zip(chunk) {
                    *d += v;
                }
            }
        }
    }
    gx
}

pub(crate) fn pixel_shuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || s == 0 || sh[1] % (s * s) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels of {sh:?} not divisible by {s}^2"),
        ));
    }
    let (b, cs, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let c = cs / (s * s);
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let plane = ((bi * cs) + ci * s * s + i * s + j) * h * w;
                    for y in 0..h {
                        let orow = ((bi * c + ci) * h * s + y * s + i) * w * s;
                        for xx in 0..w {
                            out[orow + xx * s + j] = src[plane + y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h * s, w * s], out))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Element>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || s == 0 || sh[2] % s != 0 || sh[3] % s != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial extents of {sh:?} not divisible by {s}"),
        ));
    }
    let (b, c, hs, ws) = (sh[0], sh[1], sh[2], sh[3]);
    let (h, w) = (hs / s, ws / s);
    let cs = c * s * s;
    let src = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..s {
                for j in 0..s {
                    let plane = ((bi * cs) + ci * s * s + i * s + j) * h * w;
                    for y in 0..h {
                        let irow = ((bi * c + ci) * hs + y * s + i) * ws;
                        for xx in 0..w {
                            out[plane + y * w + xx] = src[irow + xx * s + j];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, cs, h, w], out))
}

fn gather<T: Element>(table: &Tensor<T>, index: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != index.len() {
        return Err(Error::shape(
            "gather",
            format!("{} indices for shape {shape:?}", index.len()),
        ));
    }
    let t = table.data();
    assert!(
        index.iter().all(|&i| i < t.len()),
        "gather index out of range for table of {}",
        t.len()
    );
    Ok(Tensor::from_parts(
        shape.to_vec(),
        index.iter().map(|&i| t[i]).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Normalisation and softmax

const LANES: usize = 8;

/// Sum with eight independent accumulators, which the compiler can keep in
/// one vector register.
fn lane_sum<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    acc.iter().chain(tail).fold(T::zero(), |s, &v| s + v)
}

fn lane_dot<T: Element>(xs: &[T], ys: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (cx, cy) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let tail: T = cx.remainder().iter().zip(cy.remainder()).map(|(&a, &b)| a * b).sum();
    for (a8, b8) in cx.zip(cy) {
        for i in 0..LANES {
            acc[i] += a8[i] * b8[i];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

fn lane_max<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = if v > *a { v } else { *a };
        }
    }
    acc.iter().chain(tail).fold(T::neg_infinity(), |m, &v| if v > m { v } else { m })
}

fn softmax_rows<T: Element>(row: &mut [T]) {
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v = (*v - max).softmax_exp();
    }
    let inv = T::one() / lane_sum(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn softmax_lastdim<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let w = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(w) {
        softmax_rows(row);
    }
    out
}

fn softmax_row_backward<T: Element>(y: &[T], g: &[T], gx: &mut [T]) {
    let dot = lane_dot(y, g);
    for ((o, &yv), &gv) in gx.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
    }
}

fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let w = y.last_dim();
    let mut gx = Tensor::zeros(y.shape());
    for ((yr, gr), or) in y
        .data()
        .chunks_exact(w)
        .zip(g.data().chunks_exact(w))
        .zip(gx.data_mut().chunks_exact_mut(w))
    {
        softmax_row_backward(yr, gr, or);
    }
    gx
}

type NormOut<T> = (Tensor<T>, Tensor<T>, Tensor<T>);

fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<NormOut<T>> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} for channels {c}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let rows = x.numel() / c;
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.numel()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(eps);
    for (xr, or) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = xr.iter().copied().sum::<T>() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rstd = T::one() / (var + eps).sqrt();
        for i in 0..c {
            or[i] = (xr[i] - mean) * rstd * gd[i] + bd[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        Tensor::from_parts(vec![rows], means),
        Tensor::from_parts(vec![rows], rstds),
    ))
}

fn layer_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    rstd: &Tensor<T>,
    g: &Tensor<T>,
) -> NormOut<T> {
    let c = x.last_dim();
    let gd = gamma.data();
    let mut gx = vec![T::zero(); x.numel()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    let inv_c = T::of(1.0 / c as f64);
    let mut xhat = vec![T::zero(); c];
    let mut gxhat = vec![T::zero(); c];
    for (r, ((xr, gr), gxr)) in x
        .data()
        .chunks_exact(c)
        .zip(g.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
        .enumerate()
    {
        let (mu, rs) = (mean.data()[r], rstd.data()[r]);
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for i in 0..c {
            xhat[i] = (xr[i] - mu) * rs;
            gxhat[i] = gr[i] * gd[i];
            ggamma[i] += gr[i] * xhat[i];
            gbeta[i] += gr[i];
            mean_g += gxhat[i];
            mean_gx += gxhat[i] * xhat[i];
        }
        mean_g *= inv_c;
        mean_gx *= inv_c;
        for i in 0..c {
            gxr[i] = rs * (gxhat[i] - mean_g - xhat[i] * mean_gx);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

// ---------------------------------------------------------------------------
// Convolution

/// Rows of the im2col buffer processed per GEMM, bounding scratch memory.
const CONV_CHUNK_ELEMS: usize = 1 << 22;

fn conv_dims<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<[usize; 5]> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[1] != xs[1] || b.shape() != [ws[0]] {
        return Err(Error::shape(
            "conv2d_3x3",
            format!("input {xs:?}, weight {ws:?}, bias {:?}", b.shape()),
        ));
    }
    Ok([xs[0], xs[1], ws[0], xs[2], xs[3]])
}

/// Fills `cols[(ci*9 + ky*3 + kx), (y - y0)*w + x]` for rows `y0..y1`.
fn im2col<T: Element>(plane: &[T], cin: usize, h: usize, w: usize, y0: usize, y1: usize, cols: &mut [T]) {
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let src = &plane[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], cin: usize, h: usize, w: usize, y0: usize, y1: usize, plane: &mut [T]) {
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let dst = &mut plane[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                for y in y0..y1 {
                    let src = &row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in drow.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn row_chunks(h: usize, w: usize, cin: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (CONV_CHUNK_ELEMS / (cin * 9 * w).max(1)).clamp(1, h);
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

fn conv3x3<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [bn, cin, cout, h, wd] = conv_dims(x, w, b)?;
    let k = cin * 9;
    let mut out = vec![T::zero(); bn * cout * h * wd];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    for bi in 0..bn {
        let plane = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let oplane = &mut out[bi * cout * h * wd..(bi + 1) * cout * h * wd];
        for (y0, y1) in row_chunks(h, wd, cin) {
            let n = (y1 - y0) * wd;
            cols.resize(k * n, T::zero());
            im2col(plane, cin, h, wd, y0, y1, &mut cols);
            if n == h * wd {
                gemm(cout, k, n, T::one(), MatRef::rm(w.data(), k), MatRef::rm(&cols, n), T::zero(), oplane);
            } else {
                tmp.resize(cout * n, T::zero());
                gemm(cout, k, n, T::one(), MatRef::rm(w.data(), k), MatRef::rm(&cols, n), T::zero(), &mut tmp);
                for co in 0..cout {
                    oplane[co * h * wd + y0 * wd..co * h * wd + y1 * wd]
                        .copy_from_slice(&tmp[co * n..(co + 1) * n]);
                }
            }
        }
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut oplane[co * h * wd..(co + 1) * h * wd] {
                *v += bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![bn, cout, h, wd], out))
}

fn conv3x3_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let k = cin * 9;
    let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_w.then(|| vec![T::zero(); w.numel()]);
    let mut gb = vec![T::zero(); cout];
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    let mut gchunk = Vec::new();
    for bi in 0..bn {
        let plane = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
        let gplane = &g.data()[bi * cout * h * wd..(bi + 1) * cout * h * wd];
        for (co, gbv) in gb.iter_mut().enumerate() {
            *gbv += gplane[co * h * wd..(co + 1) * h * wd].iter().copied().sum();
        }
        for (y0, y1) in row_chunks(h, wd, cin) {
            let n = (y1 - y0) * wd;
            let gsub: &[T] = if n == h * wd {
                gplane
            } else {
                gchunk.clear();
                for co in 0..cout {
                    gchunk.extend_from_slice(&gplane[co * h * wd + y0 * wd..co * h * wd + y1 * wd]);
                }
                &gchunk
            };
            if let Some(gw) = gw.as_mut() {
                cols.resize(k * n, T::zero());
                im2col(plane, cin, h, wd, y0, y1, &mut cols);
                gemm(cout, n, k, T::one(), MatRef::rm(gsub, n), MatRef::rm_t(&cols, n), T::one(), gw);
            }
            if let Some(gx) = gx.as_mut() {
                gcols.resize(k * n, T::zero());
                gemm(k, cout, n, T::one(), MatRef::rm_t(w.data(), k), MatRef::rm(gsub, n), T::zero(), &mut gcols);
                col2im(&gcols, cin, h, wd, y0, y1, &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd]);
            }
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        Tensor::from_parts(vec![cout], gb),
    )
}

// ---------------------------------------------------------------------------
// Window attention

fn attention_dims<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<[usize; 4]> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let bad = |detail: String| Err(Error::shape("window_attention", detail));
    if qs.len() != 3 || qs != ks || vs.len() != 3 || vs[..2] != qs[..2] {
        return bad(format!("q {qs:?}, k {ks:?}, v {vs:?}"));
    }
    let (bw, n, dk, dv) = (qs[0], qs[1], qs[2], vs[2]);
    if bias.shape() != [n, n] {
        return bad(format!("bias {:?} for {n} tokens", bias.shape()));
    }
    if let Some(m) = mask {
        let ms = m.shape();
        if ms.len() != 3 || ms[1..] != [n, n] || bw % ms[0] != 0 {
            return bad(format!("mask {ms:?} for {bw} windows of {n} tokens"));
        }
    }
    Ok([bw, n, dk, dv])
}

type AttnOut<T> = (Tensor<T>, Option<Tensor<T>>);

fn window_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    scale: f64,
    keep: bool,
) -> Result<AttnOut<T>> {
    let [bw, n, dk, dv] = attention_dims(q, k, v, bias, mask)?;
    let scale = T::of(scale);
    let mut out = vec![T::zero(); bw * n * dv];
    let mut probs = if keep { vec![T::zero(); bw * n * n] } else { Vec::new() };
    let mut scratch = vec![T::zero(); if keep { 0 } else { n * n }];
    for w in 0..bw {
        let p: &mut [T] = if keep {
            &mut probs[w * n * n..(w + 1) * n * n]
        } else {
            &mut scratch
        };
        gemm(
            n,
            dk,
            n,
            scale,
            MatRef::rm(&q.data()[w * n * dk..(w + 1) * n * dk], dk),
            MatRef::rm_t(&k.data()[w * n * dk..(w + 1) * n * dk], dk),
            T::zero(),
            p,
        );
        for (pv, &bv) in p.iter_mut().zip(bias.data()) {
            *pv += bv;
        }
        if let Some(m) = mask {
            let nm = m.shape()[0];
            let mw = &m.data()[(w % nm) * n * n..(w % nm + 1) * n * n];
            for (pv, &mv) in p.iter_mut().zip(mw) {
                *pv += mv;
            }
        }
        for row in p.chunks_exact_mut(n) {
            softmax_rows(row);
        }
        gemm(
            n,
            n,
            dv,
            T::one(),
            MatRef::rm(p, n),
            MatRef::rm(&v.data()[w * n * dv..(w + 1) * n * dv], dv),
            T::zero(),
            &mut out[w * n * dv..(w + 1) * n * dv],
        );
    }
    let out = Tensor::from_parts(vec![bw, n, dv], out);
    let probs = keep.then(|| Tensor::from_parts(vec![bw, n, n], probs));
    Ok((out, probs))
}

type AttnGrads<T> = (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>);

fn window_attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    g: &Tensor<T>,
    scale: f64,
) -> AttnGrads<T> {
    let (bw, n, dk, dv) = (q.shape()[0], q.shape()[1], q.shape()[2], v.shape()[2]);
    let scale = T::of(scale);
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut gv = vec![T::zero(); v.numel()];
    let mut gbias = vec![T::zero(); n * n];
    let mut gp = vec![T::zero(); n * n];
    let mut gs = vec![T::zero(); n * n];
    for w in 0..bw {
        let p = &probs.data()[w * n * n..(w + 1) * n * n];
        let go = &g.data()[w * n * dv..(w + 1) * n * dv];
        let (qw, kw) = (
            &q.data()[w * n * dk..(w + 1) * n * dk],
            &k.data()[w * n * dk..(w + 1) * n * dk],
        );
        let vw = &v.data()[w * n * dv..(w + 1) * n * dv];
        gemm(n, n, dv, T::one(), MatRef::rm_t(p, n), MatRef::rm(go, dv), T::zero(), &mut gv[w * n * dv..(w + 1) * n * dv]);
        gemm(n, dv, n, T::one(), MatRef::rm(go, dv), MatRef::rm_t(vw, dv), T::zero(), &mut gp);
        for ((pr, gpr), gsr) in p.chunks_exact(n).zip(gp.chunks_exact(n)).zip(gs.chunks_exact_mut(n)) {
            softmax_row_backward(pr, gpr, gsr);
        }
        for (b, &s) in gbias.iter_mut().zip(&gs) {
            *b += s;
        }
        gemm(n, n, dk, scale, MatRef::rm(&gs, n), MatRef::rm(kw, dk), T::zero(), &mut gq[w * n * dk..(w + 1) * n * dk]);
        gemm(n, n, dk, scale, MatRef::rm_t(&gs, n), MatRef::rm(qw, dk), T::zero(), &mut gk[w * n * dk..(w + 1) * n * dk]);
    }
    (
        Tensor::from_parts(q.shape().to_vec(), gq),
        Tensor::from_parts(k.shape().to_vec(), gk),
        Tensor::from_parts(v.shape().to_vec(), gv),
        Tensor::from_parts(vec![n, n], gbias),
    )
}
