use std::collections::BTreeMap;

use crate::error::{config_err, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub heads: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub d_embed: usize,
    pub vocab_size: usize,
    pub ffn_audio: usize,
    pub ffn_visual: usize,
    pub ffn_embed: usize,
    pub det_kernel: usize,
    pub det_channels: usize,
    pub det_hidden: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_enc: 2,
            n_dec: 2,
            heads: 4,
            d_audio: 16,
            d_visual: 32,
            d_embed: 32,
            vocab_size: 0,
            ffn_audio: 64,
            ffn_visual: 128,
            ffn_embed: 128,
            det_kernel: 3,
            det_channels: 64,
            det_hidden: 32,
            dropout: 0.1,
            max_decode_len: 30,
        }
    }
}

const KEYS: [&str; 15] = [
    "n_enc",
    "n_dec",
    "heads",
    "d_audio",
    "d_visual",
    "d_embed",
    "vocab_size",
    "ffn_audio",
    "ffn_visual",
    "ffn_embed",
    "det_kernel",
    "det_channels",
    "det_hidden",
    "dropout",
    "max_decode_len",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_enc == 0 || self.n_dec == 0 {
            return Err(config_err!("need at least one encoder and one decoder block"));
        }
        if self.heads == 0 {
            return Err(config_err!("heads must be positive"));
        }
        for (name, d) in [
            ("d_audio", self.d_audio),
            ("d_visual", self.d_visual),
            ("d_embed", self.d_embed),
        ] {
            if d == 0 || d % self.heads != 0 {
                return Err(config_err!("{name}={d} must be a positive multiple of heads={}", self.heads));
            }
        }
        if self.vocab_size <= super::RESERVED {
            return Err(config_err!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.ffn_audio == 0 || self.ffn_visual == 0 || self.ffn_embed == 0 {
            return Err(config_err!("ffn widths must be positive"));
        }
        if self.det_kernel % 2 == 0 || self.det_channels == 0 || self.det_hidden == 0 {
            return Err(config_err!("detector needs an odd kernel and positive widths"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0,1)", self.dropout));
        }
        if self.max_decode_len == 0 {
            return Err(config_err!("max_decode_len must be positive"));
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let vals = [
            self.n_enc.to_string(),
            self.n_dec.to_string(),
            self.heads.to_string(),
            self.d_audio.to_string(),
            self.d_visual.to_string(),
            self.d_embed.to_string(),
            self.vocab_size.to_string(),
            self.ffn_audio.to_string(),
            self.ffn_visual.to_string(),
            self.ffn_embed.to_string(),
            self.det_kernel.to_string(),
            self.det_channels.to_string(),
            self.det_hidden.to_string(),
            self.dropout.to_string(),
            self.max_decode_len.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(vals).collect()
    }

    /// Applies one `key=value` setting; returns `false` for keys this config
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| config_err!("bad value {v:?} for {key}"))
        }
        match key {
            "n_enc" => self.n_enc = num(key, value)?,
            "n_dec" => self.n_dec = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_audio" => self.d_audio = num(key, value)?,
            "d_visual" => self.d_visual = num(key, value)?,
            "d_embed" => self.d_embed = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "ffn_audio" => self.ffn_audio = num(key, value)?,
            "ffn_visual" => self.ffn_visual = num(key, value)?,
            "ffn_embed" => self.ffn_embed = num(key, value)?,
            "det_kernel" => self.det_kernel = num(key, value)?,
            "det_channels" => self.det_channels = num(key, value)?,
            "det_hidden" => self.det_hidden = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "max_decode_len" => self.max_decode_len = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Builds a config from pairs, requiring every key and ignoring none.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for k in KEYS {
            let v = map
                .get(k)
                .ok_or_else(|| config_err!("model config is missing {k}"))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}
