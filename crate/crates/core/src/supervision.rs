//! Training objectives: groundtruth loss, the multi-channel feature loss with
//! node schedules and channel weights, its equal-weight ablation, the
//! combined objective and the dot-map cross-entropy.
//!
//! Every loss sums over pixels within an image and averages over the batch.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Regime, SupervisionBundle};
use crate::tensorgrad::{Graph, NodeId, Tensor};

/// How node weights `β_n` vary from the deepest node (`n = 1`) to the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Increase,
    Equal,
    Decrease,
}

impl FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "increase" => Ok(BetaMode::Increase),
            "equal" => Ok(BetaMode::Equal),
            "decrease" => Ok(BetaMode::Decrease),
            _ => Err(Error::config(format!(
                "unknown beta mode {s:?} (increase|equal|decrease)"
            ))),
        }
    }
}

/// Channel weighting inside the feature loss: SE attention weights `W_c^n`,
/// or the fixed `1/C_n` of the equal-weight ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelWeighting {
    Attention,
    Equal,
}

impl FromStr for ChannelWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "ca" => Ok(ChannelWeighting::Attention),
            "equal" | "ew" => Ok(ChannelWeighting::Equal),
            _ => Err(Error::config(format!(
                "unknown channel weighting {s:?} (attention|equal)"
            ))),
        }
    }
}

/// `β_n` for `n = 1..=m`: increase `1/2^(m−n)`, decrease `1/2^(n−1)`, equal 1.
pub fn beta_schedule(mode: BetaMode, m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::config("beta schedule needs at least one node"));
    }
    let pow = |k: usize| 0.5f64.powi(k as i32);
    Ok((1..=m)
        .map(|n| match mode {
            BetaMode::Increase => pow(m - n),
            BetaMode::Decrease => pow(n - 1),
            BetaMode::Equal => 1.0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub mode: BetaMode,
    pub num_nodes: usize,
    pub regime: Regime,
    pub ce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.05,
            mode: BetaMode::Increase,
            num_nodes: 3,
            regime: Regime::Density,
            ce_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.num_nodes == 0 {
            return Err(Error::config("at least one supervision node is required"));
        }
        if !(self.ce_clamp > 0.0 && self.ce_clamp < 0.5) {
            return Err(Error::config(format!(
                "ce_clamp must lie in (0, 0.5), got {}",
                self.ce_clamp
            )));
        }
        Ok(())
    }

    pub fn betas(&self) -> Result<Vec<f64>> {
        beta_schedule(self.mode, self.num_nodes)
    }
}

fn batch_of(g: &Graph, x: NodeId) -> usize {
    g.shape(x).first().copied().unwrap_or(1).max(1)
}

/// `(1/N) Σ_i ‖O_i − G_i‖²`.
pub fn loss_groundtruth(g: &mut Graph, output: NodeId, gt: &Tensor) -> Result<NodeId> {
    let s = g.shape(output).to_vec();
    if s.len() < 2 || gt.shape() != s.as_slice() {
        return Err(Error::usage(format!(
            "groundtruth loss: output {s:?} vs target {:?}",
            gt.shape()
        )));
    }
    let n = batch_of(g, output);
    let l = g.weighted_sq_err(output, gt, &Tensor::ones(&s[..2]))?;
    Ok(g.scale(l, 1.0 / n as f64))
}

fn check_node(g: &Graph, node: usize, tap: NodeId, feat: &Tensor) -> Result<()> {
    let ts = g.shape(tap);
    if ts != feat.shape() {
        let (tc, fc) = (
            ts.get(1).copied().unwrap_or(0),
            feat.shape().get(1).copied().unwrap_or(0),
        );
        return Err(Error::usage(format!(
            "feature loss node {}: tap {ts:?} ({tc} channels) vs supervision {:?} ({fc} channels)",
            node + 1,
            feat.shape()
        )));
    }
    Ok(())
}

fn feature_loss_with(
    g: &mut Graph,
    taps: &[NodeId],
    features: &[Tensor],
    betas: &[f64],
    mut weights_for: impl FnMut(usize, &Tensor) -> Result<Tensor>,
) -> Result<NodeId> {
    if taps.len() != features.len() || taps.len() != betas.len() {
        return Err(Error::usage(format!(
            "feature loss: {} taps, {} supervision nodes, {} betas",
            taps.len(),
            features.len(),
            betas.len()
        )));
    }
    if taps.is_empty() {
        return Err(Error::usage("feature loss needs at least one node"));
    }
    let mut total: Option<NodeId> = None;
    for (n, ((&tap, feat), &beta)) in taps.iter().zip(features).zip(betas).enumerate() {
        check_node(g, n, tap, feat)?;
        let w = weights_for(n, feat)?.map(|v| beta * v);
        let l = g.weighted_sq_err(tap, feat, &w)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let n = batch_of(g, taps[0]);
    Ok(g.scale(total.expect("non-empty"), 1.0 / n as f64))
}

/// `(1/N) Σ_i Σ_n β_n Σ_c W_c^n ‖O_c^n − G_c^n‖²` with per-sample weights.
pub fn loss_features(g: &mut Graph, taps: &[NodeId], bundle: &SupervisionBundle, betas: &[f64]) -> Result<NodeId> {
    feature_loss_with(g, taps, &bundle.features, betas, |n, feat| {
        let w = &bundle.weights[n];
        if w.shape() != &feat.shape()[..2] {
            return Err(Error::usage(format!(
                "feature loss node {}: weights {:?} vs features {:?}",
                n + 1,
                w.shape(),
                feat.shape()
            )));
        }
        Ok(w.clone())
    })
}

/// Equal-weight ablation: every `W_c^n` replaced by `1/C_n`.
pub fn loss_features_ew(g: &mut Graph, taps: &[NodeId], features: &[Tensor], betas: &[f64]) -> Result<NodeId> {
    feature_loss_with(g, taps, features, betas, |_, feat| {
        let s = feat.shape();
        if s.len() < 2 {
            return Err(Error::usage(format!(
                "feature loss: features {s:?} lack a channel axis"
            )));
        }
        Ok(Tensor::full(&s[..2], 1.0 / s[1] as f64))
    })
}

pub fn feature_loss(
    g: &mut Graph,
    taps: &[NodeId],
    bundle: &SupervisionBundle,
    betas: &[f64],
    weighting: ChannelWeighting,
) -> Result<NodeId> {
    match weighting {
        ChannelWeighting::Attention => loss_features(g, taps, bundle, betas),
        ChannelWeighting::Equal => loss_features_ew(g, taps, &bundle.features, betas),
    }
}

/// `L = L_G + α·L_F`.
pub fn combined_loss(l_g: f64, l_f: f64, alpha: f64) -> f64 {
    l_g + alpha * l_f
}

pub fn combine(g: &mut Graph, l_g: NodeId, l_f: NodeId, alpha: f64) -> Result<NodeId> {
    let scaled = g.scale(l_f, alpha);
    g.add(l_g, scaled)
}

/// `−(1/N) Σ_i Σ_pixels [y ln ŷ + (1−y) ln(1−ŷ)]`, `ŷ` clamped to `[clamp, 1−clamp]`.
pub fn loss_dot(g: &mut Graph, prob: NodeId, dots: &Tensor, clamp: f64) -> Result<NodeId> {
    let n = batch_of(g, prob);
    let l = g.binary_cross_entropy(prob, dots, clamp)?;
    Ok(g.scale(l, 1.0 / n as f64))
}

/// Output-level loss for the regime: squared error or cross-entropy.
pub fn loss_output(g: &mut Graph, output: NodeId, target: &Tensor, cfg: &LossConfig) -> Result<NodeId> {
    match cfg.regime {
        Regime::Density => loss_groundtruth(g, output, target),
        Regime::Dot => loss_dot(g, output, target, cfg.ce_clamp),
    }
}
