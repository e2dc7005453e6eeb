//! Hyperparameters and the plain-text `key = value` configuration format.
//!
//! ```text
//! # comments and blank lines are ignored
//! preset = micro            # optional, must come first; later keys override it
//! model_dim = 32            # shared by encoder and decoder
//! ffn_dim = 64
//! dropout = 0.0
//! fusion_strategy = parallel
//! ```
//!
//! Keys: `model_dim ffn_dim dropout encoder_layers encoder_heads gat_layers
//! gat_heads relation_embed_dim max_positions reverse_discourse_edges
//! decoder_layers decoder_heads graph_attn_heads fusion_strategy rezero_init
//! base_lr new_module_lr base_warmup_steps new_warmup_steps max_steps
//! batch_size seed grad_clip_norm eval_every min_freq max_decode_len`.
//! Presets: `micro`, `desk`, `paper-scale`.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("`preset` must be the first key")]
    LatePreset,
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Parallel,
    SequentialDiscourseFirst,
    SequentialActionFirst,
    DiscourseOnly,
    ActionOnly,
    None,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        Self::Parallel,
        Self::SequentialDiscourseFirst,
        Self::SequentialActionFirst,
        Self::DiscourseOnly,
        Self::ActionOnly,
        Self::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parallel => "parallel",
            Self::SequentialDiscourseFirst => "sequential-discourse-first",
            Self::SequentialActionFirst => "sequential-action-first",
            Self::DiscourseOnly => "discourse-only",
            Self::ActionOnly => "action-only",
            Self::None => "none",
        }
    }

    pub fn uses_discourse(self) -> bool {
        !matches!(self, Self::ActionOnly | Self::None)
    }

    pub fn uses_action(self) -> bool {
        !matches!(self, Self::DiscourseOnly | Self::None)
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .ok_or_else(|| format!("unknown fusion strategy `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub ffn_dim: usize,
    /// Zero is allowed: token states are then the normalized embeddings.
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    pub relation_embed_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Adds reverse discourse edges with their own relation ids.
    pub reverse_discourse_edges: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub graph_attn_heads: usize,
    pub fusion_strategy: FusionStrategy,
    pub rezero_init: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub new_module_lr: f64,
    pub base_warmup_steps: usize,
    pub new_warmup_steps: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub eval_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub min_freq: usize,
    pub max_decode_len: usize,
}

impl Config {
    /// Small, dropout-free model with fast learning rates, sized to memorize
    /// a toy corpus in a few minutes of CPU time.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderConfig {
                model_dim: 32,
                ffn_dim: 64,
                encoder_layers: 2,
                encoder_heads: 2,
                gat_layers: 2,
                gat_heads: 2,
                relation_embed_dim: 8,
                dropout: 0.0,
                max_positions: 512,
                reverse_discourse_edges: false,
            },
            decoder: DecoderConfig {
                model_dim: 32,
                ffn_dim: 64,
                decoder_layers: 2,
                decoder_heads: 2,
                graph_attn_heads: 2,
                fusion_strategy: FusionStrategy::Parallel,
                rezero_init: 1.0,
                dropout: 0.0,
            },
            train: TrainConfig {
                base_lr: 3e-3,
                new_module_lr: 3e-3,
                base_warmup_steps: 40,
                new_warmup_steps: 20,
                max_steps: 2000,
                batch_size: 4,
                seed: 17,
                grad_clip_norm: 1.0,
                eval_every: 50,
            },
            min_freq: 1,
            max_decode_len: 40,
        }
    }

    /// Desk-scale defaults.
    pub fn desk() -> Self {
        let mut c = Self::micro();
        c.set_shared_dims(64, 256, 0.1);
        c.encoder.relation_embed_dim = 16;
        c.train.base_lr = 3e-4;
        c.train.new_module_lr = 1e-3;
        c.train.base_warmup_steps = 120;
        c.train.new_warmup_steps = 60;
        c.train.max_steps = 5000;
        c.train.batch_size = 8;
        c.train.eval_every = 100;
        c.min_freq = 2;
        c.max_decode_len = 60;
        c
    }

    /// Published widths, head and layer counts, dropout, learning rates and
    /// warmups.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.set_shared_dims(768, 3072, 0.2);
        c.encoder.max_positions = 1024;
        c.train.base_lr = 3e-5;
        c.train.new_module_lr = 3e-4;
        c.train.base_warmup_steps = 120;
        c.train.new_warmup_steps = 60;
        c
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "micro" => Ok(Self::micro()),
            "desk" => Ok(Self::desk()),
            "paper-scale" | "paper_scale" => Ok(Self::paper_scale()),
            _ => Err(ConfigError::UnknownPreset(name.to_string())),
        }
    }

    pub fn set_shared_dims(&mut self, model_dim: usize, ffn_dim: usize, dropout: f64) {
        self.encoder.model_dim = model_dim;
        self.decoder.model_dim = model_dim;
        self.encoder.ffn_dim = ffn_dim;
        self.decoder.ffn_dim = ffn_dim;
        self.encoder.dropout = dropout;
        self.decoder.dropout = dropout;
    }

    /// Parses a config file; unspecified keys keep the `desk` defaults unless
    /// a `preset` line selects another base.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk();
        let mut any_key = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or(ConfigError::Syntax { line })?;
            if key == "preset" {
                if any_key {
                    return Err(ConfigError::LatePreset);
                }
                cfg = Self::preset(value)?;
            } else {
                cfg.set(key, value, line)?;
            }
            any_key = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<T, ConfigError> {
            v.parse().map_err(|_| bad())
        }
        let (e, d, t) = (&mut self.encoder, &mut self.decoder, &mut self.train);
        match key {
            "model_dim" => {
                e.model_dim = num(value, bad)?;
                d.model_dim = e.model_dim;
            }
            "ffn_dim" => {
                e.ffn_dim = num(value, bad)?;
                d.ffn_dim = e.ffn_dim;
            }
            "dropout" => {
                e.dropout = num(value, bad)?;
                d.dropout = e.dropout;
            }
            "encoder_layers" => e.encoder_layers = num(value, bad)?,
            "encoder_heads" => e.encoder_heads = num(value, bad)?,
            "gat_layers" => e.gat_layers = num(value, bad)?,
            "gat_heads" => e.gat_heads = num(value, bad)?,
            "relation_embed_dim" => e.relation_embed_dim = num(value, bad)?,
            "max_positions" => e.max_positions = num(value, bad)?,
            "reverse_discourse_edges" => e.reverse_discourse_edges = num(value, bad)?,
            "decoder_layers" => d.decoder_layers = num(value, bad)?,
            "decoder_heads" => d.decoder_heads = num(value, bad)?,
            "graph_attn_heads" => d.graph_attn_heads = num(value, bad)?,
            "fusion_strategy" => d.fusion_strategy = value.parse().map_err(|_| bad())?,
            "rezero_init" => d.rezero_init = num(value, bad)?,
            "base_lr" => t.base_lr = num(value, bad)?,
            "new_module_lr" => t.new_module_lr = num(value, bad)?,
            "base_warmup_steps" => t.base_warmup_steps = num(value, bad)?,
            "new_warmup_steps" => t.new_warmup_steps = num(value, bad)?,
            "max_steps" => t.max_steps = num(value, bad)?,
            "batch_size" => t.batch_size = num(value, bad)?,
            "seed" => t.seed = num(value, bad)?,
            "grad_clip_norm" => t.grad_clip_norm = num(value, bad)?,
            "eval_every" => t.eval_every = num(value, bad)?,
            "min_freq" => self.min_freq = num(value, bad)?,
            "max_decode_len" => self.max_decode_len = num(value, bad)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (e, d, t) = (&self.encoder, &self.decoder, &self.train);
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if e.model_dim == 0 || e.model_dim != d.model_dim {
            return fail("model_dim must be positive and shared");
        }
        if e.ffn_dim == 0 || e.encoder_heads == 0 || d.decoder_heads == 0 || d.graph_attn_heads == 0 {
            return fail("ffn_dim and head counts must be at least 1");
        }
        for (name, h) in [
            ("encoder_heads", e.encoder_heads),
            ("decoder_heads", d.decoder_heads),
            ("graph_attn_heads", d.graph_attn_heads),
        ] {
            if e.model_dim % h != 0 {
                return Err(ConfigError::Invalid(format!("model_dim not divisible by {name}")));
            }
        }
        if e.gat_layers == 0 || e.gat_heads == 0 || e.relation_embed_dim == 0 {
            return fail("gat_layers, gat_heads and relation_embed_dim must be at least 1");
        }
        if e.gat_layers > 1 && e.model_dim % e.gat_heads != 0 {
            return fail("model_dim not divisible by gat_heads");
        }
        if d.decoder_layers == 0 || e.max_positions == 0 {
            return fail("decoder_layers and max_positions must be at least 1");
        }
        if !(0.0..1.0).contains(&e.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if d.rezero_init != 0.0 && d.rezero_init != 1.0 {
            return fail("rezero_init must be 0 or 1");
        }
        if !(t.base_lr > 0.0 && t.new_module_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if t.batch_size == 0 || t.eval_every == 0 || self.min_freq == 0 || self.max_decode_len == 0 {
            return fail("batch_size, eval_every, min_freq and max_decode_len must be at least 1");
        }
        if t.grad_clip_norm.is_nan() || t.grad_clip_norm <= 0.0 {
            return fail("grad_clip_norm must be positive");
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing this text yields `self`.
    pub fn to_text(&self) -> String {
        let (e, d, t) = (&self.encoder, &self.decoder, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model_dim", &e.model_dim);
        kv("ffn_dim", &e.ffn_dim);
        kv("dropout", &e.dropout);
        kv("encoder_layers", &e.encoder_layers);
        kv("encoder_heads", &e.encoder_heads);
        kv("gat_layers", &e.gat_layers);
        kv("gat_heads", &e.gat_heads);
        kv("relation_embed_dim", &e.relation_embed_dim);
        kv("max_positions", &e.max_positions);
        kv("reverse_discourse_edges", &e.reverse_discourse_edges);
        kv("decoder_layers", &d.decoder_layers);
        kv("decoder_heads", &d.decoder_heads);
        kv("graph_attn_heads", &d.graph_attn_heads);
        kv("fusion_strategy", &d.fusion_strategy);
        kv("rezero_init", &d.rezero_init);
        kv("base_lr", &t.base_lr);
        kv("new_module_lr", &t.new_module_lr);
        kv("base_warmup_steps", &t.base_warmup_steps);
        kv("new_warmup_steps", &t.new_warmup_steps);
        kv("max_steps", &t.max_steps);
        kv("batch_size", &t.batch_size);
        kv("seed", &t.seed);
        kv("grad_clip_norm", &t.grad_clip_norm);
        kv("eval_every", &t.eval_every);
        kv("min_freq", &self.min_freq);
        kv("max_decode_len", &self.max_decode_len);
        s
    }

    /// SHA-256 of [`Config::to_text`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}
