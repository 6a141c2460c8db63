//! Finite-difference verification of every backward rule.
//!
//! A target is a small double-precision program over a few input tensors.
//! Its output is reduced to a scalar with a fixed random projection, then
//! the tape gradient of every input is compared with central differences.
//! The error of one input is `|a - n| / max(|a|, |n|, GRAD_FLOOR)` over the
//! whole gradient vector (Euclidean norms); a target reports the worst
//! input.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::gswa::{AttentionKind, GswaConfig, GswaLayer};
use crate::model::{Astl, Model, ModelConfig};
use crate::params::{Initializer, ParamStore};
use crate::tensor::Tensor;
use crate::training::charbonnier;
use crate::windowing::{self, build_attn_mask, build_rel_index, WindowLayout};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Norm below which a gradient counts as zero when forming the ratio.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Op,
    Layer,
    Model,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Op => "op",
            Scope::Layer => "layer",
            Scope::Model => "model",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "layer" => Ok(Scope::Layer),
            "model" => Ok(Scope::Model),
            _ => Err(Error::Config(format!("unknown scope `{s}` (expected op, layer or model)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

type Program = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One program to check.
pub struct Target {
    pub name: String,
    pub scope: Scope,
    inputs: Vec<Tensor<f64>>,
    program: Program,
}

impl Target {
    fn new(
        name: &str,
        scope: Scope,
        inputs: Vec<Tensor<f64>>,
        program: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            scope,
            inputs,
            program: Box::new(program),
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub scope: Scope,
    pub max_rel_err: f64,
    /// Scalars perturbed.
    pub perturbed: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Replaces default initial values (zero tables, unit norms) by random ones
/// so every gradient path carries signal.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.tensors_mut() {
        let centre = if name.contains("norm") && name.ends_with(".weight") { 1.0 } else { 0.0 };
        let std = if name.contains("norm") { 0.2 } else { 0.4 };
        for v in t.data_mut() {
            *v = centre + std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn sample_mask(rng: &mut ChaCha8Rng, windows: usize, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[windows, n, n], |i| {
        let (p, q) = ((i / n) % n, i % n);
        if p != q && rng.random_bool(0.4) {
            windowing::MASK_NEG
        } else {
            0.0
        }
    })
}

fn attention_cfg(shifted: bool, kind: AttentionKind) -> GswaConfig {
    GswaConfig {
        channels: 4,
        heads: 2,
        qk_dim: 2,
        window: 2,
        shifted,
        kind,
        cascade: true,
        qkv_bias: kind == AttentionKind::Fused,
    }
}

fn layer_target(name: &str, cfg: GswaConfig, rng: &mut ChaCha8Rng) -> Result<Target> {
    let mut store = ParamStore::<f64>::new();
    let layer = GswaLayer::new(cfg, &mut store, &mut Initializer::new(rng.random()), "attn")?;
    randomize(&mut store, rng);
    // Four 2x2 windows of a 4x4 map.
    let mask = cfg
        .shifted
        .then(|| Arc::new(build_attn_mask::<f64>(&WindowLayout::new(4, 4, 2, 1).unwrap())));
    let mut inputs = vec![randn(rng, &[4, 4, 4], 1.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    Ok(Target::new(name, Scope::Layer, inputs, move |g, v| {
        layer.forward(g, &v[1..], &v[0], mask.clone())
    }))
}

fn astl_target(rng: &mut ChaCha8Rng) -> Result<Target> {
    let cfg = ModelConfig {
        channels: 4,
        heads: 2,
        qk_dim: 2,
        window: 2,
        ..ModelConfig::tiny()
    };
    let mut store = ParamStore::<f64>::new();
    let layer = Astl::new(&cfg, true, &mut store, &mut Initializer::new(rng.random()), "astl")?;
    randomize(&mut store, rng);
    let mask = Arc::new(build_attn_mask::<f64>(&WindowLayout::new(4, 4, 2, 1).unwrap()));
    let mut inputs = vec![randn(rng, &[1, 4, 4, 4], 1.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    Ok(Target::new("astl", Scope::Layer, inputs, move |g, v| {
        layer.forward(g, &v[1..], &v[0], Some(mask.clone()))
    }))
}

fn model_target(name: &str, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<Target> {
    let mut model = Model::<f64>::new(ModelConfig::tiny(), rng.random())?;
    randomize(model.params_mut(), rng);
    let mut inputs = vec![uniform(rng, &[1, 3, h, w], 0.0, 1.0)];
    inputs.extend(model.params().iter().map(|(_, t)| t.clone()));
    Ok(Target::new(name, Scope::Model, inputs, move |g, v| {
        model.forward(g, &v[1..], &v[0])
    }))
}

/// Every target, built from `seed`.
pub fn targets(seed: u64) -> Result<Vec<Target>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let op = Scope::Op;
    let mut out = vec![
        Target::new("matmul", op, vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[4, 5], 1.0)], |g, v| {
            g.matmul(&v[0], &v[1])
        }),
        Target::new(
            "matmul_broadcast",
            op,
            vec![randn(r, &[2, 1, 3, 4], 1.0), randn(r, &[3, 4, 2], 1.0)],
            |g, v| g.matmul(&v[0], &v[1]),
        ),
        Target::new(
            "affine",
            op,
            vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[4, 5], 1.0), randn(r, &[5], 1.0)],
            |g, v| g.affine(&v[0], &v[1], &v[2]),
        ),
        Target::new("add_suffix", op, vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[4], 1.0)], |g, v| {
            g.add(&v[0], &v[1])
        }),
        Target::new("add_broadcast", op, vec![randn(r, &[2, 3, 4], 1.0), randn(r, &[3, 1], 1.0)], |g, v| {
            g.add(&v[0], &v[1])
        }),
        Target::new("sub", op, vec![randn(r, &[3, 4], 1.0), randn(r, &[3, 4], 1.0)], |g, v| g.sub(&v[0], &v[1])),
        Target::new("mul", op, vec![randn(r, &[3, 4], 1.0), randn(r, &[3, 4], 1.0)], |g, v| g.mul(&v[0], &v[1])),
        Target::new("scale", op, vec![randn(r, &[3, 4], 1.0)], |g, v| g.scale(&v[0], -1.7)),
        Target::new("add_scalar", op, vec![randn(r, &[3, 4], 1.0)], |g, v| g.add_scalar(&v[0], 0.3)),
        Target::new("gelu", op, vec![randn(r, &[4, 5], 1.5)], |g, v| g.gelu(&v[0])),
        Target::new("sqrt", op, vec![uniform(r, &[4, 5], 0.5, 2.0)], |g, v| g.sqrt(&v[0])),
        Target::new("reshape", op, vec![randn(r, &[2, 3, 4], 1.0)], |g, v| g.reshape(&v[0], &[4, 6])),
        Target::new("permute", op, vec![randn(r, &[2, 3, 4], 1.0)], |g, v| g.permute(&v[0], &[2, 0, 1])),
        Target::new(
            "concat_lastdim",
            op,
            vec![randn(r, &[2, 3, 2], 1.0), randn(r, &[2, 3, 1], 1.0), randn(r, &[2, 3, 3], 1.0)],
            |g, v| g.concat_lastdim(&[&v[0], &v[1], &v[2]]),
        ),
        Target::new("slice_lastdim", op, vec![randn(r, &[3, 6], 1.0)], |g, v| g.slice_lastdim(&v[0], 2, 3)),
        Target::new("sum", op, vec![randn(r, &[3, 4], 1.0)], |g, v| g.sum(&v[0])),
        Target::new("mean", op, vec![randn(r, &[3, 4], 1.0)], |g, v| g.mean(&v[0])),
        Target::new("softmax_lastdim", op, vec![randn(r, &[3, 5], 2.0)], |g, v| g.softmax_lastdim(&v[0])),
        Target::new(
            "layer_norm",
            op,
            vec![randn(r, &[3, 5], 1.0), uniform(r, &[5], 0.5, 1.5), randn(r, &[5], 1.0)],
            |g, v| g.layer_norm(&v[0], &v[1], &v[2], 1e-5),
        ),
        Target::new(
            "conv2d_3x3",
            op,
            vec![randn(r, &[2, 3, 5, 4], 1.0), randn(r, &[2, 3, 3, 3], 1.0), randn(r, &[2], 1.0)],
            |g, v| g.conv2d_3x3(&v[0], &v[1], &v[2]),
        ),
        Target::new("pixel_shuffle", op, vec![randn(r, &[1, 8, 2, 3], 1.0)], |g, v| g.pixel_shuffle(&v[0], 2)),
        {
            let index = Arc::new(build_rel_index(2));
            Target::new("gather", op, vec![randn(r, &[9], 1.0)], move |g, v| {
                g.gather(&v[0], index.clone(), &[4, 4])
            })
        },
        {
            let mask = Arc::new(sample_mask(r, 2, 4));
            Target::new(
                "window_attention",
                op,
                vec![
                    randn(r, &[4, 4, 3], 1.0),
                    randn(r, &[4, 4, 3], 1.0),
                    randn(r, &[4, 4, 2], 1.0),
                    randn(r, &[4, 4], 1.0),
                ],
                move |g, v| g.window_attention(&v[0], &v[1], &v[2], &v[3], Some(mask.clone()), 0.6),
            )
        },
        Target::new("window_partition", op, vec![randn(r, &[1, 4, 6, 2], 1.0)], |g, v| {
            g.window_partition(&v[0], 2, 0)
        }),
        Target::new("window_partition_shifted", op, vec![randn(r, &[2, 4, 6, 2], 1.0)], |g, v| {
            g.window_partition(&v[0], 2, 1)
        }),
        Target::new("window_reverse", op, vec![randn(r, &[6, 4, 2], 1.0)], |g, v| {
            g.window_reverse(&v[0], 2, 4, 6, 0)
        }),
        Target::new("window_reverse_shifted", op, vec![randn(r, &[12, 4, 2], 1.0)], |g, v| {
            g.window_reverse(&v[0], 2, 4, 6, 1)
        }),
        Target::new("cyclic_shift", op, vec![randn(r, &[1, 4, 5, 2], 1.0)], |g, v| {
            windowing::cyclic_shift(g, &v[0], 2)
        }),
        Target::new("reflect_pad", op, vec![randn(r, &[1, 2, 3, 2], 1.0)], |g, v| {
            windowing::reflect_pad(g, &v[0], 2, 4, 6)
        }),
        Target::new("crop", op, vec![randn(r, &[1, 2, 4, 5], 1.0)], |g, v| windowing::crop(g, &v[0], 2, 3, 2)),
        Target::new(
            "charbonnier",
            op,
            vec![randn(r, &[2, 3, 4], 0.01), randn(r, &[2, 3, 4], 0.01)],
            |g, v| charbonnier(g, &v[0], &v[1], 1e-3),
        ),
    ];
    out.push(layer_target("gswa", attention_cfg(false, AttentionKind::Grouped), r)?);
    out.push(layer_target("gswa_shifted", attention_cfg(true, AttentionKind::Grouped), r)?);
    out.push(layer_target("fused_attention", attention_cfg(true, AttentionKind::Fused), r)?);
    out.push(astl_target(r)?);
    out.push(model_target("model", 12, 12, r)?);
    out.push(model_target("model_padded", 5, 7, r)?);
    Ok(out)
}

fn projected(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

fn evaluate(target: &Target, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = (target.program)(&mut tape, &vars)?;
    Ok(projected(tape.value(&out), proj))
}

/// Compares tape gradients with central differences for one target.
/// `fault` names an op whose backward rule is sign-flipped.
pub fn check(target: &Target, fault: Option<&str>, seed: u64) -> Result<CheckOutcome> {
    let mut tape = Tape::<f64>::new();
    if let Some(op) = fault {
        tape.inject_fault(op);
    }
    let vars: Vec<Var> = target.inputs.iter().map(|t| tape.param(t)).collect();
    let out = (target.program)(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = randn(&mut rng, tape.value(&out).shape(), 1.0);
    let pv = tape.input(proj.clone());
    let prod = tape.mul(&out, &pv)?;
    let loss = tape.sum(&prod)?;
    tape.backward(loss)?;

    let mut inputs = target.inputs.clone();
    let mut worst: f64 = 0.0;
    let mut perturbed = 0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let up = evaluate(target, &inputs, &proj)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let down = evaluate(target, &inputs, &proj)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            perturbed += 1;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(CheckOutcome {
        name: target.name.clone(),
        scope: target.scope,
        max_rel_err: worst,
        perturbed,
    })
}

/// Runs the targets selected by `scope` (all when `None`) and, when `only`
/// is non-empty, by name.
pub fn run(scope: Option<Scope>, only: &[String], fault: Option<&str>, seed: u64) -> Result<Vec<CheckOutcome>> {
    let selected: Vec<Target> = targets(seed)?
        .into_iter()
        .filter(|t| scope.is_none_or(|s| s == t.scope))
        .filter(|t| only.is_empty() || only.iter().any(|n| *n == t.name))
        .collect();
    if selected.is_empty() {
        return Err(Error::Config("no gradient-check target matches the selection".into()));
    }
    selected
        .iter()
        .enumerate()
        .map(|(i, t)| check(t, fault, seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_target_passes() {
        for outcome in run(Some(Scope::Op), &[], None, 0).unwrap() {
            assert!(outcome.passed(), "{} rel err {}", outcome.name, outcome.max_rel_err);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let only = vec!["softmax_lastdim".to_string()];
        let out = run(None, &only, Some("softmax_lastdim"), 0).unwrap();
        assert!(!out[0].passed());
    }

    #[test]
    fn unknown_selection_is_an_error() {
        assert!(run(None, &["nope".to_string()], None, 0).is_err());
    }
}
