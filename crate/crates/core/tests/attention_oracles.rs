//! Shifted-window attention against direct per-token oracles.

#[path = "common/oracles.rs"]
mod oracles;

use agileir::gswa::{AttentionKind, GswaLayer};
use agileir::{Eager, Initializer, ParamStore, Tensor};
use oracles::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn shifted_window_mask_matches_region_oracle() {
    for seed in 0..20 {
        let (e64, e32) = mask_oracle_errors(seed, 24, 24, 12, 6);
        assert!(e64 < 1e-5, "seed {seed}: f64 max error {e64:e}");
        assert!(e32 < 1e-5, "seed {seed}: f32 max error {e32:e}");
    }
}

#[test]
fn unshifted_windows_match_oracle() {
    // With no shift every token of a window is a partner.
    let (e64, _) = mask_oracle_errors(77, 8, 12, 4, 0);
    assert!(e64 < 1e-12, "max error {e64:e}");
}

#[test]
fn one_group_reduces_to_single_head_attention() {
    for seed in 0..10 {
        for shifted in [false, true] {
            let err = single_group_error(seed, shifted);
            assert!(err < 1e-5, "seed {seed} shifted {shifted}: max error {err:e}");
        }
    }
}

#[test]
fn one_full_width_group_equals_fused_single_head() {
    let (c, m) = (6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut grouped = ParamStore::<f64>::new();
    let g_layer = GswaLayer::new(
        single_group(c, c, m, false, AttentionKind::Grouped),
        &mut grouped,
        &mut Initializer::new(0),
        "a",
    )
    .unwrap();
    randomize(&mut grouped, &mut rng);
    let mut fused = ParamStore::<f64>::new();
    let f_layer = GswaLayer::new(
        single_group(c, c, m, false, AttentionKind::Fused),
        &mut fused,
        &mut Initializer::new(0),
        "a",
    )
    .unwrap();
    let g = |name: &str| grouped.get(grouped.find(name).unwrap()).clone();
    let (wq, wk, wv) = (g("a.q.0.weight"), g("a.k.0.weight"), g("a.v.0.weight"));
    let qkv_w = Tensor::from_fn(&[c, 3 * c], |i| {
        let (r, col) = (i / (3 * c), i % (3 * c));
        [&wq, &wk, &wv][col / c].at(&[r, col % c])
    });
    let qkv_b = Tensor::new(
        &[3 * c],
        [g("a.q.0.bias"), g("a.k.0.bias"), g("a.v.0.bias")]
            .iter()
            .flat_map(|b| b.data().to_vec())
            .collect(),
    )
    .unwrap();
    for (name, t) in [
        ("a.qkv.weight", qkv_w),
        ("a.qkv.bias", qkv_b),
        ("a.proj.weight", g("a.proj.weight")),
        ("a.proj.bias", g("a.proj.bias")),
        ("a.bias_table", g("a.bias_table")),
    ] {
        let id = fused.find(name).unwrap();
        *fused.get_mut(id) = t;
    }
    let x = random::<f64>(&mut rng, &[3, m * m, c]);
    let a = g_layer.forward(&mut Eager, &grouped.bind(&mut Eager), &x, None).unwrap();
    let b = f_layer.forward(&mut Eager, &fused.bind(&mut Eager), &x, None).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

