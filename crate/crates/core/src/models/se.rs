use rand::Rng;

use super::layers::Dense;
use crate::error::Result;
use crate::tensorgrad::{Graph, NodeId, ParamId, ParamSet};

/// Squeeze-and-excitation channel attention:
/// `weights = sigmoid(fc2(relu(fc1(avg_pool(x)))))`, output `x · weights`.
#[derive(Debug, Clone, Copy)]
pub struct SeBlock {
    fc1: Dense,
    fc2: Dense,
    hidden: usize,
}

impl SeBlock {
    /// Hidden width is `channels / reduction`, at least 1.
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        Ok(SeBlock {
            fc1: Dense::build(params, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Dense::build(params, &format!("{name}.fc2"), hidden, channels, rng)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Parameter ids `(fc1.w, fc1.b, fc2.w, fc2.b)`.
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b]
    }

    /// Returns `(scaled features [N,C,H,W], weights [N,C])`.
    pub fn forward(&self, g: &mut Graph, p: &ParamSet, x: NodeId) -> Result<(NodeId, NodeId)> {
        let squeezed = g.global_avg_pool(x)?;
        let h = self.fc1.forward(g, p, squeezed)?;
        let h = g.relu(h);
        let z = self.fc2.forward(g, p, h)?;
        let weights = g.sigmoid(z);
        let scaled = g.scale_channels(x, weights)?;
        Ok((scaled, weights))
    }
}
