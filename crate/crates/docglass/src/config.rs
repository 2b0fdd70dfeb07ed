//! Model configuration, presets, and the versioned JSON config format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    /// Hidden size.
    pub d: usize,
    /// Attention head count; must divide `d`.
    pub heads: usize,
    /// Feed-forward inner size.
    pub d_ffn: usize,
    /// Shortening factor: tokens merged per group at each M-Block entry.
    pub k: usize,
    /// Number of M-Block/E-Block pairs.
    pub n_stages: usize,
    /// Padded text stream length; must be divisible by `k^n_stages` and by `l_v`.
    pub l_t: usize,
    /// Padded visual stream length; must be divisible by `k^n_stages`.
    pub l_v: usize,
    /// Vocabulary size (ids 0..3 are reserved specials).
    pub vocab: usize,
    /// Quantization bins for box coordinates.
    pub coord_buckets: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small trainable configuration; the default for training and the CLI.
    pub fn desk() -> Self {
        ModelConfig {
            format_version: FORMAT_VERSION,
            d: 64,
            heads: 4,
            d_ffn: 256,
            k: 2,
            n_stages: 3,
            l_t: 128,
            l_v: 32,
            vocab: 1024,
            coord_buckets: 64,
            seed: 42,
        }
    }

    /// Full-size configuration (12 layers, hidden 768, FFN 3072, 12 heads,
    /// lengths 512/128). Used by the MAC counter; far too slow to train here.
    pub fn paper() -> Self {
        ModelConfig {
            format_version: FORMAT_VERSION,
            d: 768,
            heads: 12,
            d_ffn: 3072,
            k: 2,
            n_stages: 3,
            l_t: 512,
            l_v: 128,
            vocab: 1024,
            coord_buckets: 64,
            seed: 42,
        }
    }

    /// Same model at a different text length, keeping the 4:1 text/visual ratio.
    pub fn with_text_len(&self, l_t: usize) -> Result<Self> {
        if l_t % 4 != 0 {
            return Err(Error::Config(format!(
                "text length {l_t} does not keep the 4:1 stream ratio"
            )));
        }
        let mut cfg = self.clone();
        cfg.l_t = l_t;
        cfg.l_v = l_t / 4;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Total transformer layer count: each of the `2 * n_stages` blocks is one
    /// SA layer plus one SCA layer.
    pub fn layers(&self) -> usize {
        4 * self.n_stages
    }

    /// Total shortening `k^n_stages`.
    pub fn shorten_total(&self) -> Result<usize> {
        (self.k as u64)
            .checked_pow(self.n_stages as u32)
            .filter(|&v| v <= usize::MAX as u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Config(format!("k^n_stages overflows: k={}, n_stages={}", self.k, self.n_stages)))
    }

    /// (text, visual) lengths at which each block's layers run, M-Blocks first
    /// then E-Blocks. Merging happens at block entry, so the first M-Block
    /// already runs shortened; the last E-Block runs at full length.
    pub fn stage_lengths(&self) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let mut lens = Vec::with_capacity(2 * self.n_stages);
        let (mut t, mut v) = (self.l_t, self.l_v);
        for _ in 0..self.n_stages {
            t /= self.k;
            v /= self.k;
            lens.push((t, v));
        }
        for _ in 0..self.n_stages {
            t *= self.k;
            v *= self.k;
            lens.push((t, v));
        }
        Ok(lens)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        for (v, name) in [
            (self.d, "d"),
            (self.heads, "heads"),
            (self.d_ffn, "d_ffn"),
            (self.k, "k"),
            (self.n_stages, "n_stages"),
            (self.l_t, "l_t"),
            (self.l_v, "l_v"),
            (self.coord_buckets, "coord_buckets"),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide hidden size {}",
                self.heads, self.d
            )));
        }
        let total = self.shorten_total()?;
        if self.l_t % total != 0 || self.l_v % total != 0 {
            return Err(Error::Config(format!(
                "stream lengths ({}, {}) must be divisible by k^n_stages = {total}",
                self.l_t, self.l_v
            )));
        }
        if self.l_t % self.l_v != 0 {
            return Err(Error::Config(format!(
                "text length {} must be an integral multiple of visual length {}",
                self.l_t, self.l_v
            )));
        }
        if self.vocab < 16 {
            return Err(Error::Config(format!(
                "vocab {} too small (needs the 4 specials plus at least 12 word ids)",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}
