//! Direct per-token attention oracles, shared by the core tests and the
//! acceptance run.

#![allow(dead_code)]

use std::sync::Arc;

use agileir::gswa::{AttentionKind, GswaConfig, GswaLayer};
use agileir::windowing::{build_attn_mask, build_rel_index, WindowLayout};
use agileir::{Eager, Element, Graph, Initializer, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Windowed attention of `[1, H, W, d]` maps through the engine: shifted
/// partition, masked attention with a gathered bias, reverse.
pub fn engine_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    table: &Tensor<T>,
    m: usize,
    shift: usize,
    scale: f64,
) -> Tensor<T> {
    let [_, h, w, _] = *q.shape() else { panic!("rank") };
    let g = &mut Eager;
    let part = |g: &mut Eager, x: &Tensor<T>| g.window_partition(x, m, shift).unwrap();
    let (qw, kw, vw) = (part(g, q), part(g, k), part(g, v));
    let bias = g.gather(table, Arc::new(build_rel_index(m)), &[m * m, m * m]).unwrap();
    let layout = WindowLayout::new(h, w, m, shift).unwrap();
    let mask = (shift > 0).then(|| Arc::new(build_attn_mask::<T>(&layout)));
    let out = g.window_attention(&qw, &kw, &vw, &bias, mask, scale).unwrap();
    g.window_reverse(&out, m, h, w, shift).unwrap()
}

/// Each token attends to the tokens of its shifted window that were within
/// `m - 1` rows and columns of it before the shift, i.e. the ones the torus
/// wrap did not bring in from the far side of the image.
pub fn region_oracle(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    table: &[f64],
    m: usize,
    shift: usize,
    scale: f64,
) -> Vec<f64> {
    let [_, h, w, d] = *q.shape() else { panic!("rank") };
    let span = 2 * m - 1;
    let frame = |r: usize, n: usize| (r + n - shift) % n;
    let mut out = vec![0.0; h * w * d];
    for pr in 0..h {
        for pc in 0..w {
            let win = (frame(pr, h) / m, frame(pc, w) / m);
            let mut partners = Vec::new();
            for qr in 0..h {
                for qc in 0..w {
                    let same_window = (frame(qr, h) / m, frame(qc, w) / m) == win;
                    let near = pr.abs_diff(qr) < m && pc.abs_diff(qc) < m;
                    if same_window && near {
                        partners.push((qr, qc));
                    }
                }
            }
            let logits: Vec<f64> = partners
                .iter()
                .map(|&(qr, qc)| {
                    let dot: f64 = (0..d).map(|c| q.at(&[0, pr, pc, c]) * k.at(&[0, qr, qc, c])).sum();
                    let rel = (pr + m - 1 - qr) * span + (pc + m - 1 - qc);
                    dot * scale + table[rel]
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (&(qr, qc), wgt) in partners.iter().zip(&weights) {
                for c in 0..d {
                    out[(pr * w + pc) * d + c] += wgt / total * v.at(&[0, qr, qc, c]);
                }
            }
        }
    }
    out
}

pub fn single_group(channels: usize, qk_dim: usize, window: usize, shifted: bool, kind: AttentionKind) -> GswaConfig {
    GswaConfig {
        channels,
        heads: 1,
        qk_dim,
        window,
        shifted,
        kind,
        cascade: true,
        qkv_bias: true,
    }
}

/// Overwrites every buffer of `store` with uniform noise.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, t) in store.tensors_mut() {
        *t = random(rng, &t.shape().to_vec());
    }
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks_exact(t.last_dim()).map(<[f64]>::to_vec).collect()
}

pub fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    (0..fan_out)
        .map(|o| b.data()[o] + (0..fan_in).map(|i| x[i] * w.at(&[i, o])).sum::<f64>())
        .collect()
}

/// Textbook single-head window attention over `[nW, n, C]` tokens.
pub fn single_head_oracle(store: &ParamStore<f64>, x: &Tensor<f64>, mask: Option<&Tensor<f64>>, window: usize) -> Vec<f64> {
    let p = |name: &str| store.get(store.find(name).unwrap_or_else(|| panic!("{name}")));
    let [nw, n, c] = *x.shape() else { panic!("rank") };
    let dk = p("a.q.0.weight").shape()[1];
    let table = p("a.bias_table").data();
    let rel = build_rel_index(window);
    let tokens = rows(x);
    let mut out = Vec::with_capacity(nw * n * c);
    for wi in 0..nw {
        let win = &tokens[wi * n..(wi + 1) * n];
        let qs: Vec<_> = win.iter().map(|t| affine(t, p("a.q.0.weight"), p("a.q.0.bias"))).collect();
        let ks: Vec<_> = win.iter().map(|t| affine(t, p("a.k.0.weight"), p("a.k.0.bias"))).collect();
        let vs: Vec<_> = win.iter().map(|t| affine(t, p("a.v.0.weight"), p("a.v.0.bias"))).collect();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum();
                    let masked = mask.map_or(0.0, |mk| mk.at(&[wi, i, j]));
                    dot / (dk as f64).sqrt() + table[rel[i * n + j]] + masked
                })
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..c)
                .map(|ch| (0..n).map(|j| e[j] / total * vs[j][ch]).sum())
                .collect();
            out.extend(affine(&mixed, p("a.proj.weight"), p("a.proj.bias")));
        }
    }
    out
}

pub fn max_abs_err<T: Element>(got: &Tensor<T>, want: &[f64]) -> f64 {
    got.data().iter().zip(want).map(|(a, b)| (a.as_f64() - b).abs()).fold(0.0, f64::max)
}

/// Max error of the engine's masked shifted-window attention, in double and
/// single precision, against [`region_oracle`] for one random draw.
pub fn mask_oracle_errors(seed: u64, h: usize, w: usize, m: usize, shift: usize) -> (f64, f64) {
    let d = 4;
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random::<f64>(&mut rng, &[1, h, w, d]);
    let k = random::<f64>(&mut rng, &[1, h, w, d]);
    let v = random::<f64>(&mut rng, &[1, h, w, d]);
    let table = random::<f64>(&mut rng, &[(2 * m - 1) * (2 * m - 1)]);
    let want = region_oracle(&q, &k, &v, table.data(), m, shift, scale);
    let got = engine_attention(&q, &k, &v, &table, m, shift, scale);
    let got32 = engine_attention(&q.cast::<f32>(), &k.cast(), &v.cast(), &table.cast(), m, shift, scale);
    (max_abs_err(&got, &want), max_abs_err(&got32, &want))
}

/// Max error of a one-group attention layer (8 channels, query/key width 4,
/// 4x4 windows on an 8x8 map) against [`single_head_oracle`].
pub fn single_group_error(seed: u64, shifted: bool) -> f64 {
    let (c, dk, m) = (8, 4, 4);
    let layout = WindowLayout::new(8, 8, m, m / 2).unwrap();
    let mask = build_attn_mask::<f64>(&layout);
    let cfg = single_group(c, dk, m, shifted, AttentionKind::Grouped);
    let mut store = ParamStore::<f64>::new();
    let layer = GswaLayer::new(cfg, &mut store, &mut Initializer::new(seed), "a").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    randomize(&mut store, &mut rng);
    let x = random::<f64>(&mut rng, &[layout.num_windows(), m * m, c]);
    let params = store.bind(&mut Eager);
    let got = layer
        .forward(&mut Eager, &params, &x, shifted.then(|| Arc::new(mask.clone())))
        .unwrap();
    let want = single_head_oracle(&store, &x, shifted.then_some(&mask), m);
    max_abs_err(&got, &want)
}
