//! Group shifted window attention and the fused multi-head baseline.
//!
//! Grouped attention splits the channels into `heads` slices. Each slice has
//! its own narrow query/key projection (`qk_dim` wide) and a value
//! projection that keeps the slice width. With `cascade` on, every group
//! after the first adds the previous group's output to its own slice before
//! projecting. Group outputs are concatenated and mixed by a shared output
//! projection. One relative-position bias table serves all groups.

use std::sync::Arc;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::params::{Initializer, Linear, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::windowing::build_rel_index;

/// Which attention block a layer uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Per-group projections with optional cascading.
    Grouped,
    /// One `C -> 3C` projection split into heads, one bias table per head.
    Fused,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Grouped => "grouped",
            AttentionKind::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "grouped" => Ok(AttentionKind::Grouped),
            "fused" => Ok(AttentionKind::Fused),
            _ => Err(Error::Config(format!(
                "unknown attention kind `{s}` (expected grouped or fused)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GswaConfig {
    pub channels: usize,
    pub heads: usize,
    /// Query/key width of one group. Ignored by [`AttentionKind::Fused`],
    /// which always uses `channels / heads`.
    pub qk_dim: usize,
    pub window: usize,
    pub shifted: bool,
    pub kind: AttentionKind,
    pub cascade: bool,
    /// Additive bias on the query/key/value projections.
    pub qkv_bias: bool,
}

impl GswaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible into {} groups",
                self.channels, self.heads
            )));
        }
        if self.qk_dim == 0 {
            return Err(Error::Config("query/key width must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        Ok(())
    }

    /// Width of one group's values and output.
    pub fn group_width(&self) -> usize {
        self.channels / self.heads
    }

    /// Query/key width per group as actually used.
    pub fn effective_qk_dim(&self) -> usize {
        match self.kind {
            AttentionKind::Grouped => self.qk_dim,
            AttentionKind::Fused => self.group_width(),
        }
    }

    pub fn table_len(&self) -> usize {
        (2 * self.window - 1).pow(2)
    }
}

/// Number of trainable scalars in one attention layer.
pub fn gswa_param_count(cfg: &GswaConfig) -> Result<usize> {
    cfg.validate()?;
    let c = cfg.channels;
    let h = cfg.heads;
    let dv = cfg.group_width();
    let proj = c * c + c;
    Ok(match cfg.kind {
        AttentionKind::Grouped => {
            let dk = cfg.qk_dim;
            let bias = if cfg.qkv_bias { 2 * dk + dv } else { 0 };
            h * (2 * dv * dk + dv * dv + bias) + proj + cfg.table_len()
        }
        AttentionKind::Fused => {
            let bias = if cfg.qkv_bias { 3 * c } else { 0 };
            3 * c * c + bias + proj + h * cfg.table_len()
        }
    })
}

enum Heads {
    Grouped {
        q: Vec<Linear>,
        k: Vec<Linear>,
        v: Vec<Linear>,
    },
    Fused {
        qkv: Linear,
    },
}

/// One attention layer's parameters and forward rule.
pub struct GswaLayer {
    cfg: GswaConfig,
    heads: Heads,
    proj: Linear,
    table: ParamId,
    rel_index: Arc<Vec<usize>>,
    /// Per-head gather indices into the flattened `[heads, table_len]` table.
    head_index: Vec<Arc<Vec<usize>>>,
}

impl GswaLayer {
    /// Registers the layer's buffers under `prefix` (e.g. `layers.0.attn`).
    pub fn new<T: Element>(
        cfg: GswaConfig,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        let (c, h, dv) = (cfg.channels, cfg.heads, cfg.group_width());
        let heads = match cfg.kind {
            AttentionKind::Grouped => {
                let dk = cfg.qk_dim;
                let mut make = |role: &str, width: usize| -> Vec<Linear> {
                    (0..h)
                        .map(|i| {
                            Linear::new(store, init, &format!("{prefix}.{role}.{i}"), dv, width, cfg.qkv_bias)
                        })
                        .collect()
                };
                let q = make("q", dk);
                let k = make("k", dk);
                let v = make("v", dv);
                Heads::Grouped { q, k, v }
            }
            AttentionKind::Fused => Heads::Fused {
                qkv: Linear::new(store, init, &format!("{prefix}.qkv"), c, 3 * c, cfg.qkv_bias),
            },
        };
        let proj = Linear::new(store, init, &format!("{prefix}.proj"), c, c, true);
        let tables = match cfg.kind {
            AttentionKind::Grouped => 1,
            AttentionKind::Fused => h,
        };
        let table = store.add(
            format!("{prefix}.bias_table"),
            Tensor::zeros(&[tables, cfg.table_len()]),
        );
        let rel_index = Arc::new(build_rel_index(cfg.window));
        let head_index = (0..tables)
            .map(|i| Arc::new(rel_index.iter().map(|&r| r + i * cfg.table_len()).collect()))
            .collect();
        Ok(Self {
            cfg,
            heads,
            proj,
            table,
            rel_index,
            head_index,
        })
    }

    pub fn config(&self) -> &GswaConfig {
        &self.cfg
    }

    pub fn table_id(&self) -> ParamId {
        self.table
    }

    pub fn rel_index(&self) -> &Arc<Vec<usize>> {
        &self.rel_index
    }

    /// `x: [nW, M*M, C]` (already shifted when the layer is shifted).
    /// `params` are the store's buffers bound into `g`.
    pub fn forward<T: Element, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &[G::V],
        x: &G::V,
        mask: Option<Arc<Tensor<T>>>,
    ) -> Result<G::V> {
        let cfg = &self.cfg;
        let shape = g.shape_of(x);
        let n = cfg.window * cfg.window;
        if shape.len() != 3 || shape[1] != n || shape[2] != cfg.channels {
            return Err(Error::shape(
                "gswa",
                format!("expected [nW, {n}, {}], got {shape:?}", cfg.channels),
            ));
        }
        if mask.is_some() != cfg.shifted {
            return Err(Error::Config(format!(
                "attention mask must be given iff the layer is shifted (shifted = {})",
                cfg.shifted
            )));
        }
        let scale = 1.0 / (cfg.effective_qk_dim() as f64).sqrt();
        let dv = cfg.group_width();
        let table = &params[self.table.index()];
        let mut outputs: Vec<G::V> = Vec::with_capacity(cfg.heads);
        match &self.heads {
            Heads::Grouped { q, k, v } => {
                let bias = g.gather(table, self.head_index[0].clone(), &[n, n])?;
                for i in 0..cfg.heads {
                    let slice = g.slice_lastdim(x, i * dv, dv)?;
                    let input = match outputs.last() {
                        Some(prev) if cfg.cascade => g.add(&slice, prev)?,
                        _ => slice,
                    };
                    let qi = q[i].apply(g, params, &input)?;
                    let ki = k[i].apply(g, params, &input)?;
                    let vi = v[i].apply(g, params, &input)?;
                    let out = g.window_attention(&qi, &ki, &vi, &bias, mask.clone(), scale)?;
                    outputs.push(out);
                }
            }
            Heads::Fused { qkv } => {
                let c = cfg.channels;
                let fused = qkv.apply(g, params, x)?;
                for i in 0..cfg.heads {
                    let qi = g.slice_lastdim(&fused, i * dv, dv)?;
                    let ki = g.slice_lastdim(&fused, c + i * dv, dv)?;
                    let vi = g.slice_lastdim(&fused, 2 * c + i * dv, dv)?;
                    let bias = g.gather(table, self.head_index[i].clone(), &[n, n])?;
                    let out = g.window_attention(&qi, &ki, &vi, &bias, mask.clone(), scale)?;
                    outputs.push(out);
                }
            }
        }
        let refs: Vec<&G::V> = outputs.iter().collect();
        let joined = if refs.len() == 1 {
            outputs.pop().expect("one group")
        } else {
            g.concat_lastdim(&refs)?
        };
        self.proj.apply(g, params, &joined)
    }
}
