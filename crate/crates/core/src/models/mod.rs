//! The two networks: an auxiliary supervision network (SN) that reconstructs
//! groundtruth from `(groundtruth, image)` and exposes attention-weighted
//! decoder features, and the density map estimator (DME) whose decoder taps
//! are supervised by those features.

mod dme;
mod layers;
mod se;
mod sn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

pub use dme::{DensityEstimator, DmeNodes};
pub use se::SeBlock;
pub use sn::{SnNodes, SupervisionNet};

/// Supervision regime: density-map regression or per-pixel head probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Density,
    Dot,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(Regime::Density),
            "dot" => Ok(Regime::Dot),
            _ => Err(Error::config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of decoder stages, each one a supervision node.
    pub num_nodes: usize,
    pub head_mode: Regime,
    /// Number of stride-2 downsampling stages.
    pub encoder_depth: usize,
    /// Squeeze-and-excitation reduction ratio.
    pub se_reduction: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 1,
            base_channels: 8,
            num_nodes: 3,
            head_mode: Regime::Density,
            encoder_depth: 3,
            se_reduction: 4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.se_reduction == 0 {
            return Err(Error::config(format!("channel counts must be positive: {self:?}")));
        }
        if self.encoder_depth == 0 {
            return Err(Error::config("encoder depth must be at least 1"));
        }
        if self.num_nodes != self.encoder_depth {
            return Err(Error::config(format!(
                "{} supervision nodes but {} upsampling stages; they must match",
                self.num_nodes, self.encoder_depth
            )));
        }
        Ok(())
    }

    /// Channels after encoder stage `s` (1-based).
    pub fn encoder_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Channels of decoder node `n` (1-based); the last node has `base_channels`.
    pub fn node_channels(&self, n: usize) -> usize {
        self.base_channels << (self.num_nodes - n)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.encoder_depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::config(format!("input {h}x{w} must be divisible by {m}")));
        }
        Ok(())
    }

    /// `[C_n, H_n, W_n]` of every decoder node for an `h×w` input.
    pub fn node_shapes(&self, h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        self.check_input(h, w)?;
        Ok((1..=self.num_nodes)
            .map(|n| {
                let down = 1 << (self.num_nodes - n);
                [self.node_channels(n), h / down, w / down]
            })
            .collect())
    }
}

/// Reject an SN/DME pairing whose node shapes disagree.
pub fn check_compatible(sn: &ArchConfig, dme: &ArchConfig) -> Result<()> {
    let side = 1 << sn.encoder_depth.max(dme.encoder_depth);
    let (a, b) = (sn.node_shapes(side, side)?, dme.node_shapes(side, side)?);
    if a != b {
        return Err(Error::config(format!(
            "SN node shapes {a:?} do not match DME taps {b:?}"
        )));
    }
    if sn.in_channels != dme.in_channels {
        return Err(Error::config("SN and DME disagree on image channels"));
    }
    Ok(())
}

/// Per-node SN decoder features `G^n` (`[N,C_n,H_n,W_n]`) and channel
/// attention weights `W^n` (`[N,C_n]`, each in (0,1)).
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionBundle {
    pub features: Vec<Tensor>,
    pub weights: Vec<Tensor>,
}

impl SupervisionBundle {
    pub fn num_nodes(&self) -> usize {
        self.features.len()
    }

    /// Keep only the last `k` nodes (those closest to the output).
    pub fn last_nodes(&self, k: usize) -> SupervisionBundle {
        let skip = self.features.len().saturating_sub(k);
        SupervisionBundle {
            features: self.features[skip..].to_vec(),
            weights: self.weights[skip..].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests;
