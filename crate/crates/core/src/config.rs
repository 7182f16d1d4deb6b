//! Run configuration and its flat `key=value` file form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Where the temporal self-attention sublayer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Inside every perceiver layer, between cross-attention and feed-forward.
    PerLayer,
    /// Once, after the whole layer stack.
    Final,
    /// Disabled.
    Off,
}

/// How a frame's `W` memory tokens become one candidate vector for clustering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZRepr {
    Mean,
    Concat,
}

impl FromStr for TemporalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_layer" => Ok(TemporalMode::PerLayer),
            "final" => Ok(TemporalMode::Final),
            "off" => Ok(TemporalMode::Off),
            other => Err(Error::Config(format!("mode.temporal: unknown value {other:?}"))),
        }
    }
}

impl TemporalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TemporalMode::PerLayer => "per_layer",
            TemporalMode::Final => "final",
            TemporalMode::Off => "off",
        }
    }
}

impl FromStr for ZRepr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ZRepr::Mean),
            "concat" => Ok(ZRepr::Concat),
            other => Err(Error::Config(format!("mode.z_repr: unknown value {other:?}"))),
        }
    }
}

impl ZRepr {
    pub fn as_str(self) -> &'static str {
        match self {
            ZRepr::Mean => "mean",
            ZRepr::Concat => "concat",
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Read-query count; also the perceiver query count.
    pub n_read: usize,
    /// Write queries, i.e. memory tokens per frame.
    pub n_write: usize,
    pub subclip_frames: usize,
    /// Candidates kept by instruction relevance.
    pub top_l: usize,
    /// Neighbour count for local density.
    pub knn_k: usize,
    /// Cluster centres kept.
    pub centers: usize,
    /// Tokens per selected frame after pooling.
    pub pool_tokens: usize,
    pub seed: u64,
    pub residual_read: bool,
    pub temporal: TemporalMode,
    pub z_repr: ZRepr,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 64,
            heads: 4,
            layers: 8,
            n_read: 32,
            n_write: 2,
            subclip_frames: 16,
            top_l: 64,
            knn_k: 5,
            centers: 8,
            pool_tokens: 32,
            seed: 0,
            residual_read: true,
            temporal: TemporalMode::PerLayer,
            z_repr: ZRepr::Mean,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model.d", self.dim),
            ("model.heads", self.heads),
            ("model.layers", self.layers),
            ("memory.n_read", self.n_read),
            ("memory.n_write", self.n_write),
            ("stream.subclip_frames", self.subclip_frames),
            ("dfs.L", self.top_l),
            ("dfs.knn_k", self.knn_k),
            ("dfs.Kc", self.centers),
            ("dfs.pool_tokens", self.pool_tokens),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be >= 1")));
            }
            if u32::try_from(v).is_err() {
                return Err(Error::Config(format!("{key} = {v} is too large")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.heads = {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Parses `key=value` lines; `#` starts a comment. Unset keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn count(key: &str, v: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{key}: {v:?} is not a count")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: {v:?} is not a boolean"))),
            }
        }
        match key {
            "model.d" => self.dim = count(key, value)?,
            "model.heads" => self.heads = count(key, value)?,
            "model.layers" => self.layers = count(key, value)?,
            "memory.n_read" => self.n_read = count(key, value)?,
            "memory.n_write" => self.n_write = count(key, value)?,
            "stream.subclip_frames" => self.subclip_frames = count(key, value)?,
            "dfs.L" => self.top_l = count(key, value)?,
            "dfs.knn_k" => self.knn_k = count(key, value)?,
            "dfs.Kc" => self.centers = count(key, value)?,
            "dfs.pool_tokens" => self.pool_tokens = count(key, value)?,
            "mode.residual_read" => self.residual_read = flag(key, value)?,
            "mode.temporal" => self.temporal = value.parse()?,
            "mode.z_repr" => self.z_repr = value.parse()?,
            "seed" => {
                self.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("seed: {value:?} is not an integer")))?
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical file form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model.d={}", self.dim);
        let _ = writeln!(s, "model.heads={}", self.heads);
        let _ = writeln!(s, "model.layers={}", self.layers);
        let _ = writeln!(s, "memory.n_read={}", self.n_read);
        let _ = writeln!(s, "memory.n_write={}", self.n_write);
        let _ = writeln!(s, "stream.subclip_frames={}", self.subclip_frames);
        let _ = writeln!(s, "dfs.L={}", self.top_l);
        let _ = writeln!(s, "dfs.knn_k={}", self.knn_k);
        let _ = writeln!(s, "dfs.Kc={}", self.centers);
        let _ = writeln!(s, "dfs.pool_tokens={}", self.pool_tokens);
        let _ = writeln!(s, "mode.residual_read={}", self.residual_read);
        let _ = writeln!(s, "mode.temporal={}", self.temporal.as_str());
        let _ = writeln!(s, "mode.z_repr={}", self.z_repr.as_str());
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}
