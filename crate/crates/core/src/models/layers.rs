use rand::Rng;

use crate::error::Result;
use crate::tensorgrad::{Graph, NodeId, ParamId, ParamSet};

/// Square convolution with "same"-style padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = params.insert_glorot(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, cout * k * k, rng)?;
        let b = params.insert_zeros(&format!("{name}.b"), &[cout])?;
        Ok(Conv {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSet, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }
}

/// ×2 upsampling transposed convolution (k = 4, stride 2, pad 1).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Upsample {
    w: ParamId,
    b: ParamId,
}

impl Upsample {
    pub fn build(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = params.insert_glorot(&format!("{name}.w"), &[cin, cout, 4, 4], cin * 16, cout * 16, rng)?;
        let b = params.insert_zeros(&format!("{name}.b"), &[cout])?;
        Ok(Upsample { w, b })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSet, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.conv2d_transpose(x, w, Some(b), 2, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn build(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = params.insert_glorot(&format!("{name}.w"), &[cout, cin], cin, cout, rng)?;
        let b = params.insert_zeros(&format!("{name}.b"), &[cout])?;
        Ok(Dense { w, b })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamSet, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(p, self.w), g.param(p, self.b));
        g.linear(x, w, Some(b))
    }
}
