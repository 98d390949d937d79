use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which modalities reach the encoders. Ablations zero the other modality's
/// fused embeddings in both streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Modality {
    #[default]
    Both,
    TextOnly,
    VisualOnly,
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modality::Both),
            "text" => Ok(Modality::TextOnly),
            "visual" => Ok(Modality::VisualOnly),
            other => Err(Error::Config(format!(
                "unknown modality {other:?} (expected both, text or visual)"
            ))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Both => "both",
            Modality::TextOnly => "text",
            Modality::VisualOnly => "visual",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub single_layers: usize,
    pub text_layers: usize,
    pub visual_layers: usize,
    pub co_layers: usize,
    pub max_text_len: usize,
    pub max_rois: usize,
    pub visual_dim: usize,
    pub vocab_size: usize,
    /// When false the keyword-channel tables are zero and frozen.
    pub use_sembedding: bool,
    pub modality: Modality,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            single_layers: 2,
            text_layers: 1,
            visual_layers: 1,
            co_layers: 1,
            max_text_len: 24,
            max_rois: 8,
            visual_dim: 32,
            vocab_size: 128,
            use_sembedding: true,
            modality: Modality::Both,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
        }
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "hidden",
    "heads",
    "single_layers",
    "text_layers",
    "visual_layers",
    "co_layers",
    "max_text_len",
    "max_rois",
    "visual_dim",
    "vocab_size",
    "use_sembedding",
    "modality",
    "init_std",
    "layer_norm_eps",
];

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

impl ModelConfig {
    /// The width used in the original large-scale setting; expressible but
    /// far too slow for this engine's tests.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            hidden: 768,
            heads: 12,
            single_layers: 12,
            text_layers: 12,
            visual_layers: 6,
            co_layers: 6,
            max_text_len: 64,
            max_rois: 100,
            visual_dim: 2048,
            vocab_size,
            ..Self::default()
        }
    }

    /// Sets one key; returns `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "single_layers" => self.single_layers = parse(key, value)?,
            "text_layers" => self.text_layers = parse(key, value)?,
            "visual_layers" => self.visual_layers = parse(key, value)?,
            "co_layers" => self.co_layers = parse(key, value)?,
            "max_text_len" => self.max_text_len = parse(key, value)?,
            "max_rois" => self.max_rois = parse(key, value)?,
            "visual_dim" => self.visual_dim = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "use_sembedding" => self.use_sembedding = parse(key, value)?,
            "modality" => self.modality = value.trim().parse()?,
            "init_std" => self.init_std = parse(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Key/value snapshot; floats use the shortest round-trip spelling.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let pairs = [
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("single_layers", self.single_layers.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("visual_layers", self.visual_layers.to_string()),
            ("co_layers", self.co_layers.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("max_rois", self.max_rois.to_string()),
            ("visual_dim", self.visual_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("use_sembedding", self.use_sembedding.to_string()),
            ("modality", self.modality.to_string()),
            ("init_std", self.init_std.to_string()),
            ("layer_norm_eps", self.layer_norm_eps.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_pairs<'k>(pairs: impl IntoIterator<Item = (&'k str, &'k str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.hidden < 2 {
            return fail("hidden must be at least 2".into());
        }
        if self.max_text_len < 3 {
            return fail("max_text_len must be at least 3".into());
        }
        if self.max_rois == 0 || self.visual_dim == 0 {
            return fail("max_rois and visual_dim must be positive".into());
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must cover the five reserved tokens".into());
        }
        if !(self.init_std > 0.0 && self.layer_norm_eps > 0.0) {
            return fail("init_std and layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}
