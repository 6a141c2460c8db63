use crate::error::{Error, Result};
use crate::gswa::{gswa_param_count, AttentionKind, GswaConfig};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_blocks: usize,
    /// Attention layers per block; consecutive layers alternate between
    /// unshifted and shifted windows.
    pub layers_per_block: usize,
    pub heads: usize,
    /// Query/key width of one attention group.
    pub qk_dim: usize,
    pub window: usize,
    pub mlp_ratio: f64,
    pub scale: usize,
    /// Multiplier applied to mean-subtracted pixels in `[0, 1]`.
    pub img_range: f64,
    pub attention: AttentionKind,
    pub cascade: bool,
    pub qkv_bias: bool,
}

pub const PRESETS: [&str; 3] = ["agileir", "agileir_plus", "swinir_light_ref"];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig {
            channels: 60,
            num_blocks: 3,
            layers_per_block: 6,
            heads: 4,
            qk_dim: 4,
            window: 12,
            mlp_ratio: 2.0,
            scale: 2,
            img_range: 1.0,
            attention: AttentionKind::Grouped,
            cascade: true,
            qkv_bias: false,
        };
        match name {
            "agileir" => Ok(base),
            "agileir_plus" => Ok(ModelConfig {
                num_blocks: 4,
                heads: 6,
                qk_dim: 3,
                ..base
            }),
            "swinir_light_ref" => Ok(ModelConfig {
                num_blocks: 4,
                heads: 6,
                qk_dim: 10,
                window: 8,
                attention: AttentionKind::Fused,
                cascade: false,
                qkv_bias: true,
                ..base
            }),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// A few-thousand-parameter network for gradient checks and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 8,
            num_blocks: 1,
            layers_per_block: 2,
            heads: 2,
            qk_dim: 2,
            window: 4,
            mlp_ratio: 2.0,
            scale: 2,
            img_range: 1.0,
            attention: AttentionKind::Grouped,
            cascade: true,
            qkv_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        if self.layers_per_block == 0 || self.layers_per_block % 2 != 0 {
            return Err(Error::Config(format!(
                "layers_per_block must be even and positive, got {}",
                self.layers_per_block
            )));
        }
        if self.scale != 2 && self.scale != 4 {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_width() == 0 {
            return Err(Error::Config(format!("invalid mlp_ratio {}", self.mlp_ratio)));
        }
        if !(self.img_range > 0.0) || !self.img_range.is_finite() {
            return Err(Error::Config(format!("invalid img_range {}", self.img_range)));
        }
        self.attention_config(false).validate()
    }

    pub fn hidden_width(&self) -> usize {
        (self.channels as f64 * self.mlp_ratio).round() as usize
    }

    pub fn attention_config(&self, shifted: bool) -> GswaConfig {
        GswaConfig {
            channels: self.channels,
            heads: self.heads,
            qk_dim: self.qk_dim,
            window: self.window,
            shifted,
            kind: self.attention,
            cascade: self.cascade,
            qkv_bias: self.qkv_bias,
        }
    }

    /// Number of x2 pixel-shuffle stages in the upsampler.
    pub fn upsample_stages(&self) -> usize {
        match self.scale {
            4 => 2,
            _ => 1,
        }
    }

    /// `key = value` lines, the form stored in checkpoint headers.
    pub fn to_kv(&self) -> String {
        format!(
            "channels = {}\nnum_blocks = {}\nlayers_per_block = {}\nheads = {}\nqk_dim = {}\n\
             window = {}\nmlp_ratio = {}\nscale = {}\nimg_range = {}\nattention = {}\n\
             cascade = {}\nqkv_bias = {}\n",
            self.channels,
            self.num_blocks,
            self.layers_per_block,
            self.heads,
            self.qk_dim,
            self.window,
            self.mlp_ratio,
            self.scale,
            self.img_range,
            self.attention.as_str(),
            self.cascade,
            self.qkv_bias
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::tiny();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
            match key {
                "channels" => cfg.channels = value.parse().map_err(|_| bad())?,
                "num_blocks" => cfg.num_blocks = value.parse().map_err(|_| bad())?,
                "layers_per_block" => cfg.layers_per_block = value.parse().map_err(|_| bad())?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad())?,
                "qk_dim" => cfg.qk_dim = value.parse().map_err(|_| bad())?,
                "window" => cfg.window = value.parse().map_err(|_| bad())?,
                "mlp_ratio" => cfg.mlp_ratio = value.parse().map_err(|_| bad())?,
                "scale" => cfg.scale = value.parse().map_err(|_| bad())?,
                "img_range" => cfg.img_range = value.parse().map_err(|_| bad())?,
                "attention" => cfg.attention = AttentionKind::parse(value)?,
                "cascade" => cfg.cascade = value.parse().map_err(|_| bad())?,
                "qkv_bias" => cfg.qkv_bias = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            seen.push(key.to_string());
        }
        const KEYS: usize = 12;
        seen.sort();
        seen.dedup();
        if seen.len() != KEYS {
            return Err(Error::Config(format!(
                "model header lists {} of {KEYS} keys",
                seen.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn conv_params(cin: usize, cout: usize) -> usize {
    cout * cin * 9 + cout
}

/// Closed-form parameter count of the network described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let c = cfg.channels;
    let hidden = cfg.hidden_width();
    let norms = 2 * (2 * c);
    let mlp = c * hidden + hidden + hidden * c + c;
    let layer = norms + mlp + gswa_param_count(&cfg.attention_config(false))?;
    let block = cfg.layers_per_block * layer + conv_params(c, c);
    let head = cfg.upsample_stages() * conv_params(c, 4 * c) + conv_params(c, 3);
    Ok(conv_params(3, c) + cfg.num_blocks * block + head)
}
