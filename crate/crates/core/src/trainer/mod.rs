//! Two-stage training: pretrain the supervision network, freeze it, then
//! train the density estimator under multi-channel deep supervision.
//! Evaluation and on-disk run artifacts live here too.

mod data;
mod eval;
mod fit;
mod grad_suite;
mod run;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ArchConfig, Regime};
use crate::supervision::{ChannelWeighting, LossConfig};

pub use data::{GtKernel, Prepared};
pub use eval::{evaluate_model, evaluate_predictions};
pub use fit::{train_dme, train_dme_with, train_sn, LossRow, TrainLog, TrainedDme, TrainedSn};
pub use grad_suite::{grad_check_model, GradTarget, GRAD_SIDE};
pub use run::{load_dme, load_sn, run_dme, run_sn, ArchSidecar, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    /// Number of supervised decoder nodes, counted back from the output (0 = baseline).
    pub nodes: usize,
    pub weighting: ChannelWeighting,
    pub lr: f64,
    pub epochs_sn: usize,
    pub epochs_dme: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fixed kernel width; `None` uses the dataset profile's width.
    pub sigma: Option<f64>,
    pub adaptive: bool,
    /// Random crop, flip and gamma on every training draw.
    pub augment: bool,
    /// Crop side when augmenting; `None` keeps the full image.
    pub crop: Option<usize>,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            nodes: 3,
            weighting: ChannelWeighting::Attention,
            lr: 1e-3,
            epochs_sn: 30,
            epochs_dme: 30,
            batch: 4,
            seed: 0,
            sigma: None,
            adaptive: false,
            augment: true,
            crop: None,
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn regime(&self) -> Regime {
        self.loss.regime
    }

    /// Set the regime on both the loss and the estimator head.
    pub fn set_regime(&mut self, r: Regime) {
        self.loss.regime = r;
        self.arch.head_mode = r;
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        if self.arch.head_mode != self.loss.regime {
            return Err(Error::config(format!(
                "head mode {:?} disagrees with loss regime {:?}",
                self.arch.head_mode, self.loss.regime
            )));
        }
        if self.loss.num_nodes != self.arch.num_nodes {
            return Err(Error::config(format!(
                "loss expects {} nodes, architecture has {}",
                self.loss.num_nodes, self.arch.num_nodes
            )));
        }
        if self.nodes > self.arch.num_nodes {
            return Err(Error::config(format!(
                "cannot supervise {} nodes of {}",
                self.nodes, self.arch.num_nodes
            )));
        }
        if self.epochs_sn == 0 || self.epochs_dme == 0 || self.batch == 0 {
            return Err(Error::config("epochs and batch must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!("sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
