use rand::Rng;

use super::layers::{Conv, Upsample};
use super::{ArchConfig, SeBlock, SupervisionBundle};
use crate::error::{Error, Result};
use crate::tensorgrad::{Graph, NodeId, ParamSet, Tensor};

#[derive(Debug, Clone)]
struct Stage {
    up: Upsample,
    conv: Conv,
    se: SeBlock,
}

/// Two-branch encoder (groundtruth, image), 1×1 fusion, then `M` decoder
/// stages of upsample → conv → SE. Each stage exposes its post-ReLU features
/// `G^n` and SE weights `W^n`; the SE-scaled features feed the next stage.
#[derive(Debug, Clone)]
pub struct SupervisionNet {
    arch: ArchConfig,
    gt_branch: Vec<Conv>,
    image_branch: Vec<Conv>,
    fuse: Conv,
    stages: Vec<Stage>,
    out: Conv,
}

#[derive(Debug, Clone)]
pub struct SnNodes {
    pub recon: NodeId,
    pub features: Vec<NodeId>,
    pub weights: Vec<NodeId>,
}

fn branch(params: &mut ParamSet, name: &str, cin: usize, arch: &ArchConfig, rng: &mut impl Rng) -> Result<Vec<Conv>> {
    let b = arch.base_channels;
    let mut convs = vec![Conv::build(params, &format!("{name}.0"), cin, b, 3, 1, rng)?];
    for s in 1..=arch.encoder_depth {
        let (ci, co) = (arch.encoder_channels(s - 1), arch.encoder_channels(s));
        convs.push(Conv::build(params, &format!("{name}.{s}"), ci, co, 3, 2, rng)?);
    }
    Ok(convs)
}

fn run_chain(convs: &[Conv], g: &mut Graph, p: &ParamSet, mut x: NodeId) -> Result<NodeId> {
    for c in convs {
        x = c.forward(g, p, x)?;
        x = g.relu(x);
    }
    Ok(x)
}

impl SupervisionNet {
    pub fn build(arch: &ArchConfig, params: &mut ParamSet, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let gt_branch = branch(params, "sn.gt", 1, arch, rng)?;
        let image_branch = branch(params, "sn.img", arch.in_channels, arch, rng)?;
        let top = arch.encoder_channels(arch.encoder_depth);
        let fuse = Conv::build(params, "sn.fuse", 2 * top, top, 1, 1, rng)?;
        let mut stages = Vec::with_capacity(arch.num_nodes);
        let mut cin = top;
        for n in 1..=arch.num_nodes {
            let c = arch.node_channels(n);
            stages.push(Stage {
                up: Upsample::build(params, &format!("sn.dec{n}.up"), cin, c, rng)?,
                conv: Conv::build(params, &format!("sn.dec{n}.conv"), c, c, 3, 1, rng)?,
                se: SeBlock::build(params, &format!("sn.dec{n}.se"), c, arch.se_reduction, rng)?,
            });
            cin = c;
        }
        let out = Conv::build(params, "sn.out", arch.base_channels, 1, 1, 1, rng)?;
        Ok(SupervisionNet {
            arch: arch.clone(),
            gt_branch,
            image_branch,
            fuse,
            stages,
            out,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Weight of the final 1×1 reconstruction conv.
    pub fn output_weight(&self) -> crate::tensorgrad::ParamId {
        self.out.weight()
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSet, gt: NodeId, image: NodeId) -> Result<SnNodes> {
        let (gs, is) = (g.shape(gt).to_vec(), g.shape(image).to_vec());
        if gs.len() != 4 || gs[1] != 1 {
            return Err(Error::config(format!("SN groundtruth must be [N,1,H,W], got {gs:?}")));
        }
        if is.len() != 4 || is[0] != gs[0] || is[2..] != gs[2..] {
            return Err(Error::config(format!(
                "SN image {is:?} does not match groundtruth {gs:?}"
            )));
        }
        self.arch.check_input(gs[2], gs[3])?;

        let a = run_chain(&self.gt_branch, g, p, gt)?;
        let b = run_chain(&self.image_branch, g, p, image)?;
        let cat = g.concat_channels(a, b)?;
        let fused = self.fuse.forward(g, p, cat)?;
        let mut x = g.relu(fused);

        let mut features = Vec::with_capacity(self.stages.len());
        let mut weights = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let u = st.up.forward(g, p, x)?;
            let u = g.relu(u);
            let f = st.conv.forward(g, p, u)?;
            let f = g.relu(f);
            let (scaled, w) = st.se.forward(g, p, f)?;
            features.push(f);
            weights.push(w);
            x = scaled;
        }
        let r = self.out.forward(g, p, x)?;
        let recon = g.relu(r);
        Ok(SnNodes {
            recon,
            features,
            weights,
        })
    }

    /// Forward pass outside any training graph; returns the reconstruction and
    /// the supervision bundle.
    pub fn infer(&self, p: &ParamSet, gt: &Tensor, image: &Tensor) -> Result<(Tensor, SupervisionBundle)> {
        let mut g = Graph::new();
        let (gi, ii) = (g.input(gt.clone()), g.input(image.clone()));
        let nodes = self.forward(&mut g, p, gi, ii)?;
        let bundle = SupervisionBundle {
            features: nodes.features.iter().map(|&n| g.value(n).clone()).collect(),
            weights: nodes.weights.iter().map(|&n| g.value(n).clone()).collect(),
        };
        Ok((g.value(nodes.recon).clone(), bundle))
    }
}
