use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Positional prior applied inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BiasKind {
    None,
    /// Learnable relative-offset table added to the logits.
    Rpb,
    /// Axial 2D rotary embedding of queries and keys.
    Rope,
    /// Low-rank positional tokens concatenated to queries and keys.
    Rib,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// Materializes the full score and probability matrices.
    Naive,
    /// Online softmax over key tiles; never holds an N x N buffer.
    Streaming,
}

impl fmt::Display for BiasKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasKind::None => "none",
            BiasKind::Rpb => "rpb",
            BiasKind::Rope => "rope",
            BiasKind::Rib => "rib",
        })
    }
}

impl FromStr for BiasKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BiasKind::None),
            "rpb" => Ok(BiasKind::Rpb),
            "rope" => Ok(BiasKind::Rope),
            "rib" => Ok(BiasKind::Rib),
            other => Err(Error::Config(format!("unknown bias variant '{other}'"))),
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Naive => "naive",
            KernelKind::Streaming => "streaming",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(KernelKind::Naive),
            "streaming" => Ok(KernelKind::Streaming),
            other => Err(Error::Config(format!("unknown kernel variant '{other}'"))),
        }
    }
}

pub const DEFAULT_TILE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Content dim across all heads.
    pub dim: usize,
    /// Positional rank per head (RIB only).
    pub rank: usize,
    pub bias: BiasKind,
    pub kernel: KernelKind,
    /// Key/query block size of the streaming kernel; `None` means `min(N, 64)`.
    pub tile: Option<usize>,
    /// Worker threads for window-parallel evaluation.
    pub threads: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, dim: usize, rank: usize, bias: BiasKind, kernel: KernelKind) -> Self {
        Self {
            heads,
            dim,
            rank,
            bias,
            kernel,
            tile: None,
            threads: 1,
        }
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile = Some(tile);
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of the query/key vectors the kernel sees.
    pub fn qk_width(&self) -> usize {
        match self.bias {
            BiasKind::Rib => self.head_dim() + self.rank,
            _ => self.head_dim(),
        }
    }

    pub fn effective_tile(&self, tokens: usize) -> usize {
        self.tile.unwrap_or(tokens.min(DEFAULT_TILE)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.tile == Some(0) {
            return Err(Error::Config("tile must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.bias == BiasKind::Rib && self.rank == 0 {
            return Err(Error::Config("rib needs rank >= 1".into()));
        }
        if self.bias == BiasKind::Rope && !self.head_dim().is_multiple_of(4) {
            return Err(Error::Config(format!(
                "rope needs head dim divisible by 4, got {}",
                self.head_dim()
            )));
        }
        if self.bias == BiasKind::Rpb && self.kernel == KernelKind::Streaming {
            return Err(Error::Unsupported(
                "rpb needs an explicit N x N bias and cannot run in the streaming kernel".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rpb_requires_naive() {
        let cfg = AttentionConfig::new(2, 16, 0, BiasKind::Rpb, KernelKind::Streaming);
        assert!(matches!(cfg.validate(), Err(Error::Unsupported(_))));
        let cfg = AttentionConfig::new(2, 16, 0, BiasKind::Rpb, KernelKind::Naive);
        cfg.validate().unwrap();
    }

    #[test]
    fn widths_and_tiles() {
        let cfg = AttentionConfig::new(6, 180, 18, BiasKind::Rib, KernelKind::Streaming);
        assert_eq!(cfg.head_dim(), 30);
        assert_eq!(cfg.qk_width(), 48);
        assert_eq!(cfg.effective_tile(10), 10);
        assert_eq!(cfg.effective_tile(4096), 64);
        assert_eq!(cfg.clone().with_tile(17).effective_tile(4096), 17);
        assert!(AttentionConfig::new(4, 10, 0, BiasKind::None, KernelKind::Naive)
            .validate()
            .is_err());
        assert!(cfg.with_tile(0).validate().is_err());
    }

    #[test]
    fn parse_round_trip() {
        for b in [BiasKind::None, BiasKind::Rpb, BiasKind::Rope, BiasKind::Rib] {
            assert_eq!(b.to_string().parse::<BiasKind>().unwrap(), b);
        }
        assert!("flash".parse::<KernelKind>().is_err());
    }
}
