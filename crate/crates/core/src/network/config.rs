use std::fmt;
use std::str::FromStr;

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};

/// Which sparse-codec side receives image guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Guidance {
    None,
    Enc,
    Dec,
    Full,
}

impl Guidance {
    pub fn encoder(self) -> bool {
        matches!(self, Guidance::Enc | Guidance::Full)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Guidance::Dec | Guidance::Full)
    }
}

impl FromStr for Guidance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Guidance::None),
            "enc" => Ok(Guidance::Enc),
            "dec" => Ok(Guidance::Dec),
            "full" => Ok(Guidance::Full),
            _ => Err(format!("unknown guidance mode `{s}` (none, enc, dec, full)")),
        }
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Guidance::None => "none",
            Guidance::Enc => "enc",
            Guidance::Dec => "dec",
            Guidance::Full => "full",
        })
    }
}

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub levels: usize,
    pub kernel: usize,
    /// Feature depth per pyramid level, `levels + 1` entries.
    pub channels: Vec<usize>,
    pub out_channels: usize,
    pub guidance: Guidance,
    pub sparse_aware: bool,
    pub flat_affinity: bool,
    pub refine: bool,
    pub refine_iterations: usize,
}

impl ModelConfig {
    /// Six levels, depths 32 to 128, fully guided with flat affinities.
    pub fn standard(out_channels: usize) -> Self {
        ModelConfig {
            levels: 6,
            kernel: 3,
            channels: vec![32, 32, 48, 64, 80, 96, 128],
            out_channels,
            guidance: Guidance::Full,
            sparse_aware: true,
            flat_affinity: true,
            refine: false,
            refine_iterations: 10,
        }
    }

    /// Three levels, depths 8 to 24.
    pub fn toy(out_channels: usize) -> Self {
        ModelConfig {
            levels: 3,
            channels: vec![8, 12, 16, 24],
            ..Self::standard(out_channels)
        }
    }

    /// Encoder-only guidance with per-channel kernels and no masks.
    pub fn guidenet_like(out_channels: usize) -> Self {
        ModelConfig {
            guidance: Guidance::Enc,
            sparse_aware: false,
            flat_affinity: false,
            refine: false,
            ..Self::standard(out_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 12 {
            return Err(Error::Config(format!("levels = {} outside 1..=12", self.levels)));
        }
        if self.channels.len() != self.levels + 1 {
            return Err(Error::Config(format!(
                "channels has {} entries, levels = {} needs {}",
                self.channels.len(),
                self.levels,
                self.levels + 1
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel = {} must be odd and >= 3", self.kernel)));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        if self.refine && self.guidance == Guidance::None {
            return Err(Error::Config("refine needs image features; guidance = none has none".into()));
        }
        Ok(())
    }

    /// Spatial multiple the model pads inputs to.
    pub fn stride_multiple(&self) -> usize {
        1 << self.levels
    }
}

impl KeyValue for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "levels" => self.levels = config::value(key, v)?,
            "kernel" => self.kernel = config::value(key, v)?,
            "channels" => self.channels = config::list(key, v)?,
            "out_channels" => self.out_channels = config::value(key, v)?,
            "guidance" => self.guidance = config::value(key, v)?,
            "sparse_aware" => self.sparse_aware = config::flag(key, v)?,
            "flat_affinity" => self.flat_affinity = config::flag(key, v)?,
            "refine" => self.refine = config::flag(key, v)?,
            "refine_iterations" => self.refine_iterations = config::value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("levels", self.levels.to_string()),
            ("kernel", self.kernel.to_string()),
            ("channels", config::join(&self.channels)),
            ("out_channels", self.out_channels.to_string()),
            ("guidance", self.guidance.to_string()),
            ("sparse_aware", self.sparse_aware.to_string()),
            ("flat_affinity", self.flat_affinity.to_string()),
            ("refine", self.refine.to_string()),
            ("refine_iterations", self.refine_iterations.to_string()),
        ]
    }
}

impl ModelConfig {
    pub fn to_text(&self) -> String {
        config::render(&self.entries())
    }

    /// Parse a model config file; starts from [`ModelConfig::standard`] and
    /// rejects keys that are not model keys.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::standard(2);
        config::apply(&mut [&mut cfg], &config::parse(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
