//! Closed-form training-memory model and an empirical cross-check.
//!
//! Activations are the tensors a reverse pass must keep: inputs of matmuls,
//! convolutions and normalisations, attention probability maps and GELU
//! pre-activations. Index shuffles (shifts, window partitioning, padding)
//! and additions retain nothing. Parameter-sized terms follow the usual
//! composition of training memory: weights, one gradient copy and two
//! optimiser moments.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Tape};
use crate::error::{Error, Result};
use crate::gswa::{gswa_param_count, AttentionKind};
use crate::model::{count_params, Model, ModelConfig};
use crate::tensor::{memtrack, Tensor};
use crate::training::charbonnier;
use crate::windowing::padded_extent;

/// Externally measured ratio of total training memory between the baseline
/// and the grouped model at batch 256, printed beside the analytic value.
pub const REFERENCE_RATIO: f64 = 2.23;

/// Element counts retained by one attention layer (ASTL), per token unless
/// noted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerTerms {
    /// Normalisation inputs plus their mean and reciprocal deviation.
    pub norms: usize,
    /// Inputs of the Q/K/V projections.
    pub projection_inputs: usize,
    /// Queries and keys.
    pub qk: usize,
    pub values: usize,
    /// Attention outputs, the input of the output projection.
    pub outputs: usize,
    /// Attention probability maps.
    pub maps: usize,
    /// fc1 input, GELU pre-activation and fc2 input.
    pub mlp: usize,
}

impl LayerTerms {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let h = cfg.heads;
        let n = cfg.window * cfg.window;
        let hidden = cfg.hidden_width();
        let qk_width = match cfg.attention {
            AttentionKind::Grouped => cfg.qk_dim * h,
            AttentionKind::Fused => c,
        };
        Self {
            norms: 2 * (c + 2),
            projection_inputs: c,
            qk: 2 * qk_width,
            values: c,
            outputs: c,
            maps: h * n,
            mlp: c + 2 * hidden,
        }
    }

    pub fn per_token(&self) -> usize {
        self.norms + self.projection_inputs + self.qk + self.values + self.outputs + self.maps + self.mlp
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemRow {
    pub name: String,
    pub param_bytes: usize,
    pub activation_bytes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemReport {
    pub config: ModelConfig,
    pub batch: usize,
    /// LR input extents.
    pub height: usize,
    pub width: usize,
    pub bytes_per_element: usize,
    pub rows: Vec<MemRow>,
}

impl MemReport {
    pub fn param_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.param_bytes).sum()
    }

    pub fn grad_bytes(&self) -> usize {
        self.param_bytes()
    }

    /// Two AdamW moment buffers.
    pub fn optimizer_bytes(&self) -> usize {
        2 * self.param_bytes()
    }

    pub fn activation_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.activation_bytes).sum()
    }

    /// Weights, gradients, optimiser state and activations.
    pub fn total_bytes(&self) -> usize {
        self.param_bytes() + self.grad_bytes() + self.optimizer_bytes() + self.activation_bytes()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "batch {} input {}x{} ({} bytes/element)",
            self.batch, self.height, self.width, self.bytes_per_element
        );
        let _ = writeln!(out, "{:<24} {:>14} {:>16}", "layer", "param_bytes", "activation_bytes");
        for r in &self.rows {
            let _ = writeln!(out, "{:<24} {:>14} {:>16}", r.name, r.param_bytes, r.activation_bytes);
        }
        let _ = writeln!(out, "{:<24} {:>14} {:>16}", "sum", self.param_bytes(), self.activation_bytes());
        let _ = writeln!(out, "gradients    {:>16}", self.grad_bytes());
        let _ = writeln!(out, "optimizer    {:>16}", self.optimizer_bytes());
        let _ = writeln!(out, "total        {:>16} ({})", self.total_bytes(), human(self.total_bytes()));
        out
    }

    /// One `key=value` record per line.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{prefix}row name={} param_bytes={} activation_bytes={}",
                r.name, r.param_bytes, r.activation_bytes
            );
        }
        let _ = writeln!(
            out,
            "{prefix}totals batch={} height={} width={} bytes_per_element={} param_bytes={} grad_bytes={} \
             optimizer_bytes={} activation_bytes={} total_bytes={}",
            self.batch,
            self.height,
            self.width,
            self.bytes_per_element,
            self.param_bytes(),
            self.grad_bytes(),
            self.optimizer_bytes(),
            self.activation_bytes(),
            self.total_bytes()
        );
        out
    }
}

pub fn human(bytes: usize) -> String {
    let b = bytes as f64;
    if b >= 1e9 {
        format!("{:.2} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("{:.2} MB", b / 1e6)
    } else {
        format!("{:.1} kB", b / 1e3)
    }
}

fn conv_params(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}

/// Per-layer closed forms for one training step on `batch` LR inputs of
/// `height x width`.
pub fn activation_cost(
    cfg: &ModelConfig,
    batch: usize,
    height: usize,
    width: usize,
    bytes_per_element: usize,
) -> Result<MemReport> {
    cfg.validate()?;
    if batch == 0 || height == 0 || width == 0 {
        return Err(Error::Config("batch and extents must be positive".into()));
    }
    let c = cfg.channels;
    let bpe = bytes_per_element;
    let pixels = batch * height * width;
    let (hp, wp) = (padded_extent(height, cfg.window), padded_extent(width, cfg.window));
    let tokens = batch * hp * wp;
    let terms = LayerTerms::new(cfg);
    let hidden = cfg.hidden_width();
    let mlp_params = c * hidden + hidden + hidden * c + c;
    let layer_params = 2 * (2 * c) + mlp_params + gswa_param_count(&cfg.attention_config(false))?;

    let mut rows = vec![MemRow {
        name: "conv_first".into(),
        param_bytes: conv_params(3, c) * bpe,
        activation_bytes: 3 * pixels * bpe,
    }];
    for b in 0..cfg.num_blocks {
        for l in 0..cfg.layers_per_block {
            rows.push(MemRow {
                name: format!("blocks.{b}.layers.{l}"),
                param_bytes: layer_params * bpe,
                activation_bytes: tokens * terms.per_token() * bpe,
            });
        }
        rows.push(MemRow {
            name: format!("blocks.{b}.conv"),
            param_bytes: conv_params(c, c) * bpe,
            activation_bytes: c * tokens * bpe,
        });
    }
    let mut side = 1;
    for i in 0..cfg.upsample_stages() {
        rows.push(MemRow {
            name: format!("upsample.{i}"),
            param_bytes: conv_params(c, 4 * c) * bpe,
            activation_bytes: c * pixels * side * side * bpe,
        });
        side *= 2;
    }
    let out_pixels = pixels * cfg.scale * cfg.scale;
    rows.push(MemRow {
        name: "conv_last".into(),
        param_bytes: conv_params(c, 3) * bpe,
        activation_bytes: c * out_pixels * bpe,
    });
    // Residual and square root of the Charbonnier loss.
    rows.push(MemRow {
        name: "loss".into(),
        param_bytes: 0,
        activation_bytes: 2 * 3 * out_pixels * bpe,
    });
    let report = MemReport { config: cfg.clone(), batch, height, width, bytes_per_element: bpe, rows };
    debug_assert_eq!(report.param_bytes(), count_params(cfg)? * bpe);
    Ok(report)
}

/// Difference `total(a) - total(b)` split into named causes; the parts sum
/// to the difference exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub a: MemReport,
    pub b: MemReport,
    pub ratio: f64,
    pub breakdown: Vec<(String, i64)>,
}

impl Comparison {
    pub fn to_text(&self, name_a: &str, name_b: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{name_a}: {} ({} B)", human(self.a.total_bytes()), self.a.total_bytes());
        let _ = writeln!(out, "{name_b}: {} ({} B)", human(self.b.total_bytes()), self.b.total_bytes());
        let _ = writeln!(out, "ratio {name_a}/{name_b}: {:.2}", self.ratio);
        let _ = writeln!(out, "savings of {name_b} relative to {name_a}:");
        for (what, bytes) in &self.breakdown {
            let _ = writeln!(out, "  {what:<28} {:>16} B", bytes);
        }
        let _ = writeln!(out, "reference measured ratio: {REFERENCE_RATIO:.2}");
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = self.a.to_kv("a.");
        out.push_str(&self.b.to_kv("b."));
        for (what, bytes) in &self.breakdown {
            let _ = writeln!(out, "saving term={} bytes={bytes}", what.replace(' ', "_"));
        }
        let _ = writeln!(out, "ratio value={:.6} reference={REFERENCE_RATIO}", self.ratio);
        out
    }
}

pub fn compare(a: &ModelConfig, b: &ModelConfig, batch: usize, height: usize, width: usize) -> Result<Comparison> {
    let bpe = 4;
    let ra = activation_cost(a, batch, height, width, bpe)?;
    let rb = activation_cost(b, batch, height, width, bpe)?;
    // Walk from `a` to `b` one group of fields at a time; activation deltas
    // are attributed to the group that changed.
    let steps: [(&str, fn(&mut ModelConfig, &ModelConfig)); 3] = [
        ("fewer blocks", |x, y| {
            x.num_blocks = y.num_blocks;
            x.layers_per_block = y.layers_per_block;
        }),
        ("narrower Q/K", |x, y| {
            x.attention = y.attention;
            x.heads = y.heads;
            x.qk_dim = y.qk_dim;
            x.cascade = y.cascade;
            x.qkv_bias = y.qkv_bias;
        }),
        ("window size", |x, y| x.window = y.window),
    ];
    let mut cur = a.clone();
    let mut cur_act = ra.activation_bytes() as i64;
    let mut breakdown = Vec::new();
    for (name, apply) in steps {
        apply(&mut cur, b);
        // An invalid intermediate leaves its delta to the next step.
        if let Ok(r) = activation_cost(&cur, batch, height, width, bpe) {
            let act = r.activation_bytes() as i64;
            breakdown.push((format!("activations: {name}"), cur_act - act));
            cur_act = act;
        }
    }
    breakdown.push((
        "activations: other".to_string(),
        cur_act - rb.activation_bytes() as i64,
    ));
    let params_a = (ra.total_bytes() - ra.activation_bytes()) as i64;
    let params_b = (rb.total_bytes() - rb.activation_bytes()) as i64;
    breakdown.push(("parameters, grads, moments".to_string(), params_a - params_b));
    Ok(Comparison {
        ratio: ra.total_bytes() as f64 / rb.total_bytes() as f64,
        a: ra,
        b: rb,
        breakdown,
    })
}

/// Engine high-water marks around one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeakMeasurement {
    /// Live bytes before the step: parameters and the input batch.
    pub baseline_bytes: usize,
    pub peak_bytes: usize,
}

impl PeakMeasurement {
    /// Bytes the step itself added at its peak.
    pub fn step_bytes(&self) -> usize {
        self.peak_bytes - self.baseline_bytes
    }
}

/// Runs one forward and backward pass on random data and reads the engine's
/// allocation counters. Refuses to start when the analytic estimate exceeds
/// `limit_bytes`.
pub fn measure_peak(
    cfg: &ModelConfig,
    batch: usize,
    height: usize,
    width: usize,
    limit_bytes: Option<usize>,
) -> Result<PeakMeasurement> {
    let estimate = activation_cost(cfg, batch, height, width, 4)?;
    let need = estimate.param_bytes() * 2 + estimate.activation_bytes();
    if let Some(limit) = limit_bytes {
        // Index shuffles and temporaries are not in the model; allow 3x.
        if need.saturating_mul(3) > limit {
            return Err(Error::Data(format!(
                "estimated {} exceeds the {} limit; analytic report:\n{}",
                human(need * 3),
                human(limit),
                estimate.to_table()
            )));
        }
    }
    let model = Model::<f32>::new(cfg.clone(), 0)?;
    let s = cfg.scale;
    let x = Tensor::<f32>::from_fn(&[batch, 3, height, width], |i| ((i * 7919) % 256) as f32 / 255.0);
    let y = Tensor::<f32>::from_fn(&[batch, 3, s * height, s * width], |i| ((i * 104_729) % 256) as f32 / 255.0);
    memtrack::reset_peak();
    let baseline = memtrack::live_bytes();
    {
        let mut tape = Tape::<f32>::new();
        let p = model.params().bind(&mut tape);
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let pred = model.forward(&mut tape, &p, &xv)?;
        let loss = charbonnier(&mut tape, &pred, &yv, 1e-3)?;
        tape.backward_release(loss)?;
    }
    Ok(PeakMeasurement { baseline_bytes: baseline, peak_bytes: memtrack::peak_bytes() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> ModelConfig {
        ModelConfig::preset(name).unwrap()
    }

    #[test]
    fn attention_map_term() {
        // One 96x96 input with M = 12 has 64 windows of 144 tokens.
        let cfg = preset("agileir");
        let t = LayerTerms::new(&cfg);
        assert_eq!(64 * 144 * t.maps, 5_308_416);
    }

    #[test]
    fn qk_term_scales_with_width() {
        let mut narrow = preset("agileir");
        narrow.qk_dim = 4;
        let mut wide = narrow.clone();
        wide.qk_dim = 15;
        assert_eq!(LayerTerms::new(&wide).qk * 4, LayerTerms::new(&narrow).qk * 15);
    }

    #[test]
    fn batch_linearity_and_self_comparison() {
        for name in ["agileir", "swinir_light_ref"] {
            let cfg = preset(name);
            let one = activation_cost(&cfg, 3, 40, 52, 4).unwrap();
            let two = activation_cost(&cfg, 6, 40, 52, 4).unwrap();
            assert_eq!(two.activation_bytes(), 2 * one.activation_bytes());
            assert_eq!(one.param_bytes(), two.param_bytes());
            let cmp = compare(&cfg, &cfg, 4, 64, 64).unwrap();
            assert_eq!(cmp.ratio, 1.0);
            assert!(cmp.breakdown.iter().all(|(_, b)| *b == 0));
        }
    }

    #[test]
    fn breakdown_sums_to_difference() {
        let (a, b) = (preset("swinir_light_ref"), preset("agileir"));
        let cmp = compare(&a, &b, 8, 64, 64).unwrap();
        let sum: i64 = cmp.breakdown.iter().map(|(_, v)| v).sum();
        assert_eq!(sum, cmp.a.total_bytes() as i64 - cmp.b.total_bytes() as i64);
    }

    #[test]
    fn params_match_model() {
        for name in ["agileir", "agileir_plus", "swinir_light_ref", "tiny"] {
            let cfg = preset(name);
            let r = activation_cost(&cfg, 1, 12, 12, 4).unwrap();
            let model = Model::<f32>::new(cfg, 0).unwrap();
            assert_eq!(r.param_bytes(), model.params().numel() * 4);
        }
    }
}
