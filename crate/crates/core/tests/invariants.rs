//! Structural invariants of windowing, resampling, metrics and the data
//! pipeline, plus golden values from independent implementations.

use std::path::PathBuf;

use agileir::evalkit::{psnr, ssim, ssim_terms, EvalReport, ImageScore};
use agileir::training::data::{crop, hflip, rot90, Augment, ImagePair, PairSampler};
use agileir::training::resize::{downsample, resize_plane};
use agileir::training::LrSchedule;
use agileir::windowing::{build_attn_mask, cyclic_shift, shift_for, window_partition_shifted, window_reverse_shifted, WindowLayout};
use agileir::{Eager, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn noise(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

/// `case ...` header followed by whitespace-separated value lines.
fn golden_cases(name: &str, lines_per_case: usize) -> Vec<(Vec<f64>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(fixture(name)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    lines
        .chunks(lines_per_case + 1)
        .map(|c| {
            let head = c[0].split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
            let body = c[1..]
                .iter()
                .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
                .collect();
            (head, body)
        })
        .collect()
}

fn small_config() -> ProptestConfig {
    ProptestConfig { cases: 48, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(small_config())]

    #[test]
    fn partition_reverse_roundtrip(b in 1usize..3, wr in 1usize..4, wc in 1usize..4, m in 1usize..6, c in 1usize..4, shifted: bool, seed: u64) {
        let (h, w) = (wr * m, wc * m);
        let shift = if shifted { shift_for(m) } else { 0 };
        let x = noise(seed, &[b, h, w, c]);
        let wins = window_partition_shifted(&x, m, shift).unwrap();
        prop_assert_eq!(wins.shape(), &[b * wr * wc, m * m, c][..]);
        prop_assert_eq!(window_reverse_shifted(&wins, m, h, w, shift).unwrap(), x);
    }

    #[test]
    fn fused_shift_matches_explicit_shift(wr in 1usize..4, wc in 1usize..4, m in 2usize..6, c in 1usize..3, seed: u64) {
        let (h, w) = (wr * m, wc * m);
        let s = shift_for(m);
        let x = noise(seed, &[2, h, w, c]);
        let shifted = cyclic_shift(&mut Eager, &x, s as isize).unwrap();
        prop_assert_eq!(&cyclic_shift(&mut Eager, &shifted, -(s as isize)).unwrap(), &x);
        let explicit = window_partition_shifted(&shifted, m, 0).unwrap();
        prop_assert_eq!(window_partition_shifted(&x, m, s).unwrap(), explicit);
    }

    #[test]
    fn mask_is_symmetric_with_free_diagonal(wr in 1usize..4, wc in 1usize..4, m in 2usize..6) {
        let layout = WindowLayout::new(wr * m, wc * m, m, shift_for(m)).unwrap();
        let mask = build_attn_mask::<f32>(&layout);
        let n = m * m;
        for wi in 0..layout.num_windows() {
            for p in 0..n {
                prop_assert_eq!(mask.at(&[wi, p, p]), 0.0);
                for q in 0..n {
                    prop_assert_eq!(mask.at(&[wi, p, q]), mask.at(&[wi, q, p]));
                }
            }
        }
        // Top-left windows never see wrapped content.
        prop_assert!((0..n * n).all(|i| mask.data()[i] == 0.0) || wr == 1 || wc == 1);
        let unshifted = build_attn_mask::<f32>(&WindowLayout::new(wr * m, wc * m, m, 0).unwrap());
        prop_assert!(unshifted.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsampling_commutes_with_flips_and_rotations(hs in 2usize..6, ws in 2usize..6, four: bool, seed: u64) {
        let s = if four { 4 } else { 2 };
        let hr = noise(seed, &[3, hs * s, ws * s]);
        prop_assert_eq!(downsample(&hflip(&hr), s).unwrap(), hflip(&downsample(&hr, s).unwrap()));
        prop_assert_eq!(downsample(&rot90(&hr), s).unwrap(), rot90(&downsample(&hr, s).unwrap()));
    }

    #[test]
    fn constant_shift_leaves_contrast_structure(seed: u64, offset in -0.2f64..0.2) {
        let a = noise(seed, &[1, 16, 16]).cast::<f64>().reshape(&[16, 16]).unwrap();
        let b = noise(seed ^ 1, &[1, 16, 16]).cast::<f64>().reshape(&[16, 16]).unwrap();
        let base = ssim_terms(&a, &b, 0).unwrap();
        let moved = ssim_terms(&a.map(|v| v + offset), &b.map(|v| v + offset), 0).unwrap();
        prop_assert!((base.contrast_structure - moved.contrast_structure).abs() < 1e-9);
        prop_assert!((ssim(&a, &b, 0).unwrap() - ssim(&b, &a, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_ignores_image_order(psnrs in prop::collection::vec(10.0f64..50.0, 1..8), seed: u64) {
        let scores: Vec<ImageScore> = psnrs
            .iter()
            .enumerate()
            .map(|(i, &p)| ImageScore { name: format!("img{i:02}"), psnr: p, ssim: p / 60.0 })
            .collect();
        let mut shuffled = scores.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = EvalReport::from_scores("set", "bicubic", 2, scores, vec![]).unwrap();
        let b = EvalReport::from_scores("set", "bicubic", 2, shuffled, vec![]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn schedule_never_increases(base in 1e-6f64..1e-2, iters in 8usize..5000) {
        let s = LrSchedule::new(base, LrSchedule::default_milestones(iters));
        let mut prev = s.lr(0);
        prop_assert_eq!(prev, base);
        for step in 1..iters {
            let cur = s.lr(step);
            prop_assert!(cur == prev || cur == prev / 2.0);
            prev = cur;
        }
        prop_assert_eq!(s.lr(iters - 1), base / 8.0);
    }
}

#[test]
fn resize_matches_dense_matrix_port() {
    let cases = golden_cases("resize_golden.txt", 2);
    assert_eq!(cases.len(), 5);
    for (head, body) in cases {
        let [h, w, oh, ow] = [0, 1, 2, 3].map(|i| head[i] as usize);
        let got = resize_plane(&body[0], h, w, oh, ow);
        let err = got.iter().zip(&body[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{h}x{w} -> {oh}x{ow}: max error {err:e}");
    }
}

#[test]
fn ssim_matches_reference_implementation() {
    let cases = golden_cases("ssim_golden.txt", 2);
    assert_eq!(cases.len(), 4);
    for (head, body) in cases {
        let (h, w, want) = (head[0] as usize, head[1] as usize, head[2]);
        let a = Tensor::new(&[h, w], body[0].clone()).unwrap();
        let b = Tensor::new(&[h, w], body[1].clone()).unwrap();
        let got = ssim(&a, &b, 0).unwrap();
        assert!((got - want).abs() < 1e-10, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let clean = noise(1, &[32, 32]).cast::<f64>();
    let pattern = noise(2, &[32, 32]).cast::<f64>().map(|v| v - 0.5);
    let mut prev = f64::INFINITY;
    for sigma in [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
        let noisy = clean.zip_map(&pattern, |c, p| c + sigma * p).unwrap();
        let p = psnr(&clean, &noisy, 0).unwrap();
        assert!(p < prev || sigma == 0.0 && p.is_infinite(), "sigma {sigma}: {p} after {prev}");
        prev = p;
    }
}

#[test]
fn sampled_patches_stay_aligned() {
    let scale = 2;
    let hr = noise(3, &[3, 40, 52]);
    let pair = ImagePair::from_hr("a", &hr, scale).unwrap();
    let sampler = PairSampler::new(vec![pair.clone()], scale, 8, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let augments: Vec<Augment> = [(false, false), (true, false), (false, true), (true, true)]
        .iter()
        .map(|&(flip, rotate)| Augment { flip, rotate })
        .collect();
    let mut seen = [0usize; 4];
    for _ in 0..1000 {
        let s = sampler.sample(&mut rng).unwrap();
        let (top, left) = s.origin;
        let lr = crop(&pair.lr, top, left, 8, 8).unwrap();
        let hr = crop(&pair.hr, scale * top, scale * left, 16, 16).unwrap();
        let which = augments
            .iter()
            .position(|a| a.apply(&lr) == s.lr && a.apply(&hr) == s.hr)
            .expect("LR and HR patches share origin and augmentation");
        seen[which] += 1;
    }
    assert!(seen.iter().all(|&n| n > 150), "augmentations drawn unevenly: {seen:?}");
}
