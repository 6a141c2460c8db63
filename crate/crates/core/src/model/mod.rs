//! The super-resolution network: shallow convolution, a stack of attention
//! blocks with a global residual, and a pixel-shuffle reconstruction head.

mod checkpoint;
mod config;

use std::sync::Arc;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint};
pub use config::{count_params, ModelConfig, PRESETS};

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::gswa::GswaLayer;
use crate::params::{Initializer, Linear, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::windowing::{self, build_attn_mask, padded_extent, shift_for, WindowLayout};

/// Per-channel RGB mean subtracted before the first convolution.
pub const RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

const NORM_EPS: f64 = 1e-5;

/// Name prefix of the buffers that ×2 → ×4 reuse re-initialises.
pub const UPSAMPLER_PREFIX: &str = "upsample.";

struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let bound = 1.0 / ((cin * 9) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.uniform(&[cout, cin, 3, 3], bound));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias }
    }

    fn apply<T: Element, G: Graph<T>>(&self, g: &mut G, p: &[G::V], x: &G::V) -> Result<G::V> {
        g.conv2d_3x3(x, &p[self.weight.index()], &p[self.bias.index()])
    }
}

struct Norm {
    weight: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::ones(&[c])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c])),
        }
    }

    fn apply<T: Element, G: Graph<T>>(&self, g: &mut G, p: &[G::V], x: &G::V) -> Result<G::V> {
        g.layer_norm(x, &p[self.weight.index()], &p[self.bias.index()], NORM_EPS)
    }
}

/// One transformer layer: windowed attention and an MLP, each behind a
/// layer norm and a residual connection. Operates on `[B, H, W, C]`.
pub struct Astl {
    norm1: Norm,
    attn: GswaLayer,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shift: usize,
}

impl Astl {
    pub fn new<T: Element>(
        cfg: &ModelConfig,
        shifted: bool,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self> {
        let c = cfg.channels;
        let hidden = cfg.hidden_width();
        let norm1 = Norm::new(store, &format!("{prefix}.norm1"), c);
        let attn = GswaLayer::new(cfg.attention_config(shifted), store, init, &format!("{prefix}.attn"))?;
        let norm2 = Norm::new(store, &format!("{prefix}.norm2"), c);
        let fc1 = Linear::new(store, init, &format!("{prefix}.mlp.fc1"), c, hidden, true);
        let fc2 = Linear::new(store, init, &format!("{prefix}.mlp.fc2"), hidden, c, true);
        Ok(Self {
            norm1,
            attn,
            norm2,
            fc1,
            fc2,
            window: cfg.window,
            shift: if shifted { shift_for(cfg.window) } else { 0 },
        })
    }

    pub fn is_shifted(&self) -> bool {
        self.shift != 0
    }

    /// `x: [B, H, W, C]` with `H` and `W` multiples of the window. `mask`
    /// must be the shifted-window mask for `H x W` when the layer is shifted.
    pub fn forward<T: Element, G: Graph<T>>(
        &self,
        g: &mut G,
        p: &[G::V],
        x: &G::V,
        mask: Option<Arc<Tensor<T>>>,
    ) -> Result<G::V> {
        let shape = g.shape_of(x);
        let [_, h, w, _] = shape[..] else {
            return Err(Error::shape("astl", format!("expected [B,H,W,C], got {shape:?}")));
        };
        let y = self.norm1.apply(g, p, x)?;
        let wins = g.window_partition(&y, self.window, self.shift)?;
        let mask = if self.shift != 0 { mask } else { None };
        let attended = self.attn.forward(g, p, &wins, mask)?;
        let y = g.window_reverse(&attended, self.window, h, w, self.shift)?;
        let x = g.add(x, &y)?;
        let y = self.norm2.apply(g, p, &x)?;
        let y = self.fc1.apply(g, p, &y)?;
        let y = g.gelu(&y)?;
        let y = self.fc2.apply(g, p, &y)?;
        g.add(&x, &y)
    }
}

struct Astb {
    layers: Vec<Astl>,
    conv: Conv,
}

/// The full network. Parameters live in a [`ParamStore`]; layers refer to
/// them by id, so one set of buffers serves any executor.
pub struct Model<T: Element = f32> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    conv_first: Conv,
    blocks: Vec<Astb>,
    upsample: Vec<Conv>,
    conv_last: Conv,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let c = cfg.channels;
        let conv_first = Conv::new(&mut store, &mut init, "conv_first", 3, c);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let layers = (0..cfg.layers_per_block)
                .map(|l| {
                    Astl::new(&cfg, l % 2 == 1, &mut store, &mut init, &format!("blocks.{b}.layers.{l}"))
                })
                .collect::<Result<_>>()?;
            let conv = Conv::new(&mut store, &mut init, &format!("blocks.{b}.conv"), c, c);
            blocks.push(Astb { layers, conv });
        }
        let upsample = (0..cfg.upsample_stages())
            .map(|i| Conv::new(&mut store, &mut init, &format!("{UPSAMPLER_PREFIX}{i}"), c, 4 * c))
            .collect();
        let conv_last = Conv::new(&mut store, &mut init, "conv_last", c, 3);
        Ok(Self {
            cfg,
            params: store,
            conv_first,
            blocks,
            upsample,
            conv_last,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same network with parameters converted to another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.cfg.clone(), 0).expect("config already validated");
        out.params = self.params.cast();
        out
    }

    /// `[B, 3, H, W]` in `[0, 1]` to `[B, C, H, W]`.
    pub fn shallow_extract<G: Graph<T>>(&self, g: &mut G, p: &[G::V], x: &G::V) -> Result<G::V> {
        let shape = g.shape_of(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("shallow_extract", format!("expected [B,3,H,W], got {shape:?}")));
        }
        let r = self.cfg.img_range;
        let offset = g.input(Tensor::from_fn(&[1, 3, 1, 1], |c| T::of(-RGB_MEAN[c] * r)));
        let scaled = g.scale(x, r)?;
        let normed = g.add(&scaled, &offset)?;
        self.conv_first.apply(g, p, &normed)
    }

    /// Attention blocks with block-level residuals. Extents that are not
    /// window multiples are reflection-padded and cropped back.
    pub fn deep_extract<G: Graph<T>>(&self, g: &mut G, p: &[G::V], f: &G::V) -> Result<G::V> {
        let shape = g.shape_of(f);
        let [_, c, h, w] = shape[..] else {
            return Err(Error::shape("deep_extract", format!("expected [B,C,H,W], got {shape:?}")));
        };
        if c != self.cfg.channels {
            return Err(Error::shape("deep_extract", format!("{c} channels, model has {}", self.cfg.channels)));
        }
        let m = self.cfg.window;
        let (hp, wp) = (padded_extent(h, m), padded_extent(w, m));
        let padded = (hp, wp) != (h, w);
        let mut cur = if padded {
            windowing::reflect_pad(g, f, 2, hp, wp)?
        } else {
            f.clone()
        };
        let mask: Arc<Tensor<T>> = Arc::new(build_attn_mask(&WindowLayout::new(hp, wp, m, shift_for(m))?));
        for block in &self.blocks {
            let mut t = g.permute(&cur, &[0, 2, 3, 1])?;
            for layer in &block.layers {
                let layer_mask = layer.is_shifted().then(|| mask.clone());
                t = layer.forward(g, p, &t, layer_mask)?;
            }
            let back = g.permute(&t, &[0, 3, 1, 2])?;
            let conv = block.conv.apply(g, p, &back)?;
            cur = g.add(&conv, &cur)?;
        }
        if padded {
            windowing::crop(g, &cur, 2, h, w)
        } else {
            Ok(cur)
        }
    }

    /// Sum of shallow and deep features to `[B, 3, sH, sW]` in `[0, 1]`.
    pub fn reconstruct<G: Graph<T>>(
        &self,
        g: &mut G,
        p: &[G::V],
        shallow: &G::V,
        deep: &G::V,
    ) -> Result<G::V> {
        let mut y = g.add(shallow, deep)?;
        for stage in &self.upsample {
            let wide = stage.apply(g, p, &y)?;
            y = g.pixel_shuffle(&wide, 2)?;
        }
        let y = self.conv_last.apply(g, p, &y)?;
        let r = self.cfg.img_range;
        let y = g.scale(&y, 1.0 / r)?;
        let mean = g.input(Tensor::from_fn(&[1, 3, 1, 1], |c| T::of(RGB_MEAN[c])));
        g.add(&y, &mean)
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, p: &[G::V], x: &G::V) -> Result<G::V> {
        let shallow = self.shallow_extract(g, p, x)?;
        let deep = self.deep_extract(g, p, &shallow)?;
        self.reconstruct(g, p, &shallow, &deep)
    }

    /// Inference without recording: `[B, 3, H, W] -> [B, 3, sH, sW]`.
    pub fn upscale(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager;
        let p = self.params.bind(&mut g);
        self.forward(&mut g, &p, x)
    }

    /// Copies every buffer from `other` except the upsampler, which keeps
    /// its fresh initialisation. Used to start ×4 training from ×2 weights.
    /// Fails on the first buffer that is missing or shaped differently.
    pub fn load_except_upsampler(&mut self, other: &ParamStore<T>) -> Result<Vec<String>> {
        let mut reinit = Vec::new();
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if name.starts_with(UPSAMPLER_PREFIX) {
                reinit.push(name);
                continue;
            }
            let src = other
                .find(&name)
                .map(|sid| other.get(sid))
                .ok_or_else(|| Error::IncompatibleCheckpoint {
                    name: name.clone(),
                    detail: "missing from checkpoint".into(),
                })?;
            let dst = self.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::IncompatibleCheckpoint {
                    name,
                    detail: format!("shape {:?} in checkpoint, model expects {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(reinit)
    }

    /// Replaces all buffers; names and shapes must match exactly.
    pub fn load_params(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::IncompatibleCheckpoint {
                name: "*".into(),
                detail: format!("{} buffers in checkpoint, model has {}", other.len(), self.params.len()),
            });
        }
        for ((name, dst), (src_name, src)) in self.params.tensors_mut().zip(other.iter()) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::IncompatibleCheckpoint {
                    name: name.to_string(),
                    detail: format!("checkpoint has `{src_name}` {:?}, model expects {:?}", src.shape(), dst.shape()),
                });
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn buffer_enumeration_matches_closed_form() {
        for name in ["tiny", "agileir", "agileir_plus", "swinir_light_ref"] {
            let mut cfg = ModelConfig::preset(name).unwrap();
            for scale in [2, 4] {
                cfg.scale = scale;
                let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
                assert_eq!(model.params().numel(), count_params(&cfg).unwrap(), "{name} x{scale}");
            }
        }
    }

    #[test]
    fn output_extents() {
        let model = Model::<f32>::new(ModelConfig::tiny(), 1).unwrap();
        let x = Tensor::<f32>::full(&[2, 3, 5, 7], 0.5);
        assert_eq!(model.upscale(&x).unwrap().shape(), &[2, 3, 10, 14]);
        let mut cfg = ModelConfig::tiny();
        cfg.scale = 4;
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let x = Tensor::<f32>::full(&[1, 3, 1, 1], 0.5);
        assert_eq!(model.upscale(&x).unwrap().shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn deep_extract_is_identity_with_zero_branches() {
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        for (name, t) in model.params_mut().tensors_mut() {
            if name.starts_with("blocks.") && !name.contains("norm") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let f = Tensor::<f64>::from_fn(&[1, 8, 9, 6], |i| (i as f64 * 0.37).sin());
        let mut g = Eager;
        let p = model.params().bind(&mut g);
        let out = model.deep_extract(&mut g, &p, &f).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn shallow_extract_of_mean_image_with_zero_bias_is_zero() {
        let model = Model::<f64>::new(ModelConfig::tiny(), 2).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| RGB_MEAN[i / 16]);
        let mut g = Eager;
        let p = model.params().bind(&mut g);
        let f = model.shallow_extract(&mut g, &p, &x).unwrap();
        assert!(f.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn tape_and_eager_agree() {
        let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
        let x = Tensor::<f32>::from_fn(&[1, 3, 8, 8], |i| ((i * 13) % 17) as f32 / 17.0);
        let eager = model.upscale(&x).unwrap();
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape);
        let xv = tape.input(x.clone());
        let y = model.forward(&mut tape, &p, &xv).unwrap();
        assert_eq!(tape.value(&y), &eager);
    }

    #[test]
    fn upsampler_reuse() {
        let x2 = Model::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.scale = 4;
        let mut x4 = Model::<f32>::new(cfg, 5).unwrap();
        let reinit = x4.load_except_upsampler(x2.params()).unwrap();
        assert_eq!(reinit, vec!["upsample.0.weight", "upsample.0.bias", "upsample.1.weight", "upsample.1.bias"]);
        for (name, t) in x4.params().iter() {
            if !name.starts_with(UPSAMPLER_PREFIX) {
                assert_eq!(t, x2.params().get(x2.params().find(name).unwrap()), "{name}");
            }
        }
        let mut wide = ModelConfig::tiny();
        wide.channels = 12;
        let mut other = Model::<f32>::new(wide, 0).unwrap();
        let err = other.load_except_upsampler(x2.params()).unwrap_err();
        assert!(err.to_string().contains("conv_first.weight"), "{err}");
    }
}
