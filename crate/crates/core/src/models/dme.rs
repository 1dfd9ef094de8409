use rand::Rng;

use super::layers::{Conv, Upsample};
use super::{ArchConfig, Regime};
use crate::error::{Error, Result};
use crate::tensorgrad::{Graph, NodeId, ParamSet, Tensor};

/// Encoder-decoder density map estimator. Decoder set `n` is conv → upsample
/// and its post-ReLU output is tap `n`, shaped like SN node `n`.
#[derive(Debug, Clone)]
pub struct DensityEstimator {
    arch: ArchConfig,
    encoder: Vec<(Conv, Conv)>,
    decoder: Vec<(Conv, Upsample)>,
    head: (Conv, Conv),
}

#[derive(Debug, Clone)]
pub struct DmeNodes {
    pub output: NodeId,
    pub taps: Vec<NodeId>,
}

impl DensityEstimator {
    pub fn build(arch: &ArchConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut encoder = Vec::with_capacity(arch.encoder_depth);
        let mut cin = arch.in_channels;
        for s in 1..=arch.encoder_depth {
            let c = arch.encoder_channels(s);
            encoder.push((
                Conv::build(params, &format!("dme.enc{s}.a"), cin, c, 3, 1, rng)?,
                Conv::build(params, &format!("dme.enc{s}.b"), c, c, 3, 2, rng)?,
            ));
            cin = c;
        }
        let mut decoder = Vec::with_capacity(arch.num_nodes);
        for n in 1..=arch.num_nodes {
            let c = arch.node_channels(n);
            decoder.push((
                Conv::build(params, &format!("dme.dec{n}.conv"), cin, cin, 3, 1, rng)?,
                Upsample::build(params, &format!("dme.dec{n}.up"), cin, c, rng)?,
            ));
            cin = c;
        }
        let b = arch.base_channels;
        let head = (
            Conv::build(params, "dme.head.a", b, b, 3, 1, rng)?,
            Conv::build(params, "dme.head.b", b, 1, 1, 1, rng)?,
        );
        Ok(DensityEstimator {
            arch: arch.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSet, image: NodeId) -> Result<DmeNodes> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::config(format!(
                "DME input must be [N,{},H,W], got {s:?}",
                self.arch.in_channels
            )));
        }
        self.arch.check_input(s[2], s[3])?;

        let mut x = image;
        for (a, b) in &self.encoder {
            let y = a.forward(g, p, x)?;
            let y = g.relu(y);
            let y = b.forward(g, p, y)?;
            x = g.relu(y);
        }
        let mut taps = Vec::with_capacity(self.decoder.len());
        for (conv, up) in &self.decoder {
            let y = conv.forward(g, p, x)?;
            let y = g.relu(y);
            let y = up.forward(g, p, y)?;
            x = g.relu(y);
            taps.push(x);
        }
        let y = self.head.0.forward(g, p, x)?;
        let y = g.relu(y);
        let y = self.head.1.forward(g, p, y)?;
        let output = match self.arch.head_mode {
            Regime::Density => g.relu(y),
            Regime::Dot => g.sigmoid(y),
        };
        Ok(DmeNodes { output, taps })
    }

    /// Output map `[N,1,H,W]` for a batch of images.
    pub fn predict(&self, p: &ParamSet, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let nodes = self.forward(&mut g, p, x)?;
        Ok(g.value(nodes.output).clone())
    }
}
