//! Tape-based reverse-mode differentiation.
//!
//! Every operator appends a node holding its forward value plus whatever it
//! needs for the backward rule. Node ids are issued in creation order, so the
//! tape is topologically sorted by construction and `backward` simply walks
//! it in reverse.

use std::fmt;

use super::conv::{col2im, gemm, im2col, Geometry};
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Backward rule of a user-defined operator: given the inputs, the forward
/// output and the upstream gradient, return one gradient per input.
pub type CustomRule = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Input,
    Variable,
    Param {
        set: u64,
        id: ParamId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Geometry,
        cols: Option<Vec<f64>>,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: Geometry,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    ScaleChannels {
        x: NodeId,
        s: NodeId,
    },
    ConcatChannels(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    WeightedSqErr {
        x: NodeId,
        target: Tensor,
        weights: Tensor,
    },
    BinaryCrossEntropy {
        p: NodeId,
        target: Tensor,
        clamp: f64,
    },
    Custom {
        inputs: Vec<NodeId>,
        rule: CustomRule,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::WeightedSqErr { .. } => "weighted_sq_err",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_list();
        for n in &self.nodes {
            list.entry(&format_args!("{}{:?}", n.op.kind(), n.value.shape()));
        }
        list.finish()
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf whose gradient is read back from [`Gradients`].
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Variable, true)
    }

    /// Leaf bound to a parameter; `backward` accumulates into the parameter's
    /// grad slot when the parameter requires grad.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        let t = params.get(id);
        let needs = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid param");
        self.push(
            value,
            Op::Param {
                set: params.set_id(),
                id,
            },
            needs,
        )
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {c}, weight expects {wc}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel must be square with odd side, got {k}x{k2}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::config(format!("conv2d bias shape {:?} != [{f}]", self.shape(b))));
            }
        }
        let geom = Geometry::new(c, h, wd, k, stride, pad).ok_or_else(|| {
            Error::config(format!(
                "conv2d: {h}x{wd} with k={k}, stride={stride}, pad={pad} is invalid"
            ))
        })?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.needs(w);
        let mut all_cols = if keep_cols { vec![0.0; n * rows * p] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; rows * p] };
        let mut out = vec![0.0; n * f * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                let cols = if keep_cols {
                    &mut all_cols[i * rows * p..(i + 1) * rows * p]
                } else {
                    &mut scratch[..]
                };
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], &geom, cols);
                let o = &mut out[i * f * p..(i + 1) * f * p];
                gemm(f, rows, p, wv, false, cols, false, 0.0, o);
                if let Some(bv) = bv {
                    for (fi, chunk) in o.chunks_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[fi]);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep_cols.then_some(all_cols),
            },
            needs,
        ))
    }

    /// Transposed convolution with weight `[C_in, C_out, k, k]`; output side
    /// is `(H−1)·stride − 2·pad + k`.
    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::config(format!(
                "conv2d_transpose expects 4-d tensors, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (wc, f, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::config(format!(
                "conv2d_transpose channel mismatch: input has {c}, weight expects {wc}"
            )));
        }
        if k != k2 {
            return Err(Error::config("conv2d_transpose kernel must be square"));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::config(format!(
                "conv2d_transpose stride must be 1 or 2, got {stride}"
            )));
        }
        let side = |s: usize| ((s as isize - 1) * stride as isize - 2 * pad as isize + k as isize).max(0) as usize;
        let (oh, ow) = (side(h), side(wd));
        if oh == 0 || ow == 0 {
            return Err(Error::config(format!(
                "conv2d_transpose output {oh}x{ow} is not positive"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [f] {
                return Err(Error::config(format!(
                    "conv2d_transpose bias shape {:?} != [{f}]",
                    self.shape(b)
                )));
            }
        }
        let geom = Geometry::new(f, oh, ow, k, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| Error::config("conv2d_transpose geometry is not invertible"))?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; n * f * oh * ow];
        let mut cols = vec![0.0; rows * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for i in 0..n {
                gemm(
                    rows,
                    c,
                    p,
                    wv,
                    true,
                    &xv[i * c * p..(i + 1) * c * p],
                    false,
                    0.0,
                    &mut cols,
                );
                let o = &mut out[i * f * oh * ow..(i + 1) * f * oh * ow];
                col2im(&cols, &geom, o);
                if let Some(bv) = bv {
                    for (fi, chunk) in o.chunks_mut(oh * ow).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bv[fi]);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    /// `[N,C,H,W] → [N,C]` mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::usage(format!("global_avg_pool expects [N,C,H,W], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let needs = self.needs(x);
        let v = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), needs))
    }

    /// Affine map `[N,I] → [N,O]` with weight `[O,I]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::config(format!(
                "linear shape mismatch: input {xs:?}, weight {ws:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::config(format!("linear bias shape {:?} != [{o}]", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * o];
        gemm(
            n,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, bb)| *v += bb);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let v = Tensor::new(vec![n, o], out)?;
        Ok(self.push(v, Op::Linear { x, w, b }, needs))
    }

    /// `x[n,c,..] · s[n,c]`.
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() < 2 || ss != xs[..2] {
            return Err(Error::usage(format!("scale_channels: {xs:?} vs scales {ss:?}")));
        }
        let inner: usize = xs[2..].iter().product();
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(sv)
            .flat_map(|(chunk, &k)| chunk.iter().map(move |v| v * k))
            .collect();
        let needs = self.needs(x) || self.needs(s);
        let v = Tensor::new(xs, data)?;
        Ok(self.push(v, Op::ScaleChannels { x, s }, needs))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::config(format!("concat_channels: {sa:?} vs {sb:?}")));
        }
        let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut data = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs(a) || self.needs(b);
        let v = Tensor::new(vec![n, ca + cb, sa[2], sa[3]], data)?;
        Ok(self.push(v, Op::ConcatChannels(a, b), needs))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::usage(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.value(x).map(|v| v * k);
        let needs = self.needs(x);
        self.push(v, Op::Scale(x, k), needs)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push(v, Op::Square(x), needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(v, Op::Sum(x), needs)
    }

    /// `Σ_{n,c} w[n,c] · Σ_rest (x − target)²` for `x` of shape `[N,C,..]`.
    pub fn weighted_sq_err(&mut self, x: NodeId, target: &Tensor, weights: &Tensor) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if target.shape() != xs.as_slice() {
            return Err(Error::usage(format!(
                "weighted_sq_err: output {xs:?} vs target {:?}",
                target.shape()
            )));
        }
        if xs.len() < 2 || weights.shape() != &xs[..2] {
            return Err(Error::usage(format!(
                "weighted_sq_err: weights {:?} vs output {xs:?}",
                weights.shape()
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let total: f64 = self
            .value(x)
            .data()
            .chunks(inner)
            .zip(target.data().chunks(inner))
            .zip(weights.data())
            .map(|((o, t), w)| w * o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSqErr {
                x,
                target: target.clone(),
                weights: weights.clone(),
            },
            needs,
        ))
    }

    /// Pixel-summed binary cross-entropy, with `p` clamped to `[clamp, 1−clamp]`.
    pub fn binary_cross_entropy(&mut self, p: NodeId, target: &Tensor, clamp: f64) -> Result<NodeId> {
        if self.shape(p) != target.shape() {
            return Err(Error::usage(format!(
                "binary_cross_entropy: {:?} vs {:?}",
                self.shape(p),
                target.shape()
            )));
        }
        let total: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &y)| {
                let q = q.clamp(clamp, 1.0 - clamp);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(total),
            Op::BinaryCrossEntropy {
                p,
                target: target.clone(),
                clamp,
            },
            needs,
        ))
    }

    /// Append an operator with a caller-supplied forward value and backward rule.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, rule: CustomRule) -> NodeId {
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        )
    }

    /// Fingerprint of every non-smooth branch taken in the forward pass
    /// (ReLU signs, cross-entropy clamps). Finite differences are only
    /// meaningful between evaluations that share a fingerprint.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => node.value.data().iter().for_each(|&v| feed(v > 0.0)),
                Op::BinaryCrossEntropy { p, clamp, .. } => {
                    for &q in self.value(*p).data() {
                        feed(q > *clamp && q < 1.0 - *clamp);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar `loss`. Gradients of parameters from
    /// `params` that require grad are accumulated into their grad slots.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param { set, id }, Some(g)) = (&node.op, g) {
                if *set == params.set_id() && node.needs_grad {
                    params.get_mut(*id).accumulate_grad(g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |id: NodeId| self.value(id).numel();
        match &node.op {
            Op::Input | Op::Variable | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let xs = self.shape(*x);
                let n = xs[0];
                let f = node.value.shape()[1];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.h * geom.w;
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = add_into(&mut grads[b.0], f);
                    for (k, chunk) in g.chunks(p).enumerate() {
                        db[k % f] += chunk.iter().sum::<f64>();
                    }
                }
                if self.needs(*w) {
                    let cols = cols.as_ref().expect("columns cached when weight needs grad");
                    let dw = add_into(&mut grads[w.0], f * rows);
                    for i in 0..n {
                        gemm(
                            f,
                            p,
                            rows,
                            &g[i * f * p..(i + 1) * f * p],
                            false,
                            &cols[i * rows * p..(i + 1) * rows * p],
                            true,
                            1.0,
                            dw,
                        );
                    }
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut dcols = vec![0.0; rows * p];
                    let dx = add_into(&mut grads[x.0], n * img);
                    for i in 0..n {
                        gemm(
                            rows,
                            f,
                            p,
                            wv,
                            true,
                            &g[i * f * p..(i + 1) * f * p],
                            false,
                            0.0,
                            &mut dcols,
                        );
                        col2im(&dcols, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let f = geom.channels;
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let out_img = f * geom.h * geom.w;
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = add_into(&mut grads[b.0], f);
                    for (k, chunk) in g.chunks(geom.h * geom.w).enumerate() {
                        db[k % f] += chunk.iter().sum::<f64>();
                    }
                }
                if self.needs(*w) || self.needs(*x) {
                    let mut dcols = vec![0.0; rows * p];
                    let xv = self.value(*x).data();
                    let wv = self.value(*w).data();
                    for i in 0..n {
                        im2col(&g[i * out_img..(i + 1) * out_img], geom, &mut dcols);
                        if self.needs(*w) {
                            let dw = add_into(&mut grads[w.0], c * rows);
                            gemm(
                                c,
                                p,
                                rows,
                                &xv[i * c * p..(i + 1) * c * p],
                                false,
                                &dcols,
                                true,
                                1.0,
                                dw,
                            );
                        }
                        if self.needs(*x) {
                            let dx = add_into(&mut grads[x.0], n * c * p);
                            gemm(
                                c,
                                rows,
                                p,
                                wv,
                                false,
                                &dcols,
                                false,
                                1.0,
                                &mut dx[i * c * p..(i + 1) * c * p],
                            );
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let dx = add_into(&mut grads[x.0], g.len());
                for ((d, &gi), &o) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    if o > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = add_into(&mut grads[x.0], g.len());
                for ((d, &gi), &s) in dx.iter_mut().zip(g).zip(node.value.data()) {
                    *d += gi * s * (1.0 - s);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let dx = add_into(&mut grads[x.0], len(*x));
                for (chunk, &gi) in dx.chunks_mut(hw).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gi / hw as f64);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, i) = (xs[0], xs[1]);
                let o = node.value.shape()[1];
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = add_into(&mut grads[b.0], o);
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if self.needs(*w) {
                    let dw = add_into(&mut grads[w.0], o * i);
                    gemm(o, n, i, g, true, self.value(*x).data(), false, 1.0, dw);
                }
                if self.needs(*x) {
                    let dx = add_into(&mut grads[x.0], n * i);
                    gemm(n, o, i, g, false, self.value(*w).data(), false, 1.0, dx);
                }
            }
            Op::ScaleChannels { x, s } => {
                let inner: usize = self.shape(*x)[2..].iter().product();
                let sv = self.value(*s).data();
                if self.needs(*x) {
                    let dx = add_into(&mut grads[x.0], g.len());
                    for ((dchunk, gchunk), &k) in dx.chunks_mut(inner).zip(g.chunks(inner)).zip(sv) {
                        dchunk.iter_mut().zip(gchunk).for_each(|(d, gi)| *d += gi * k);
                    }
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    let ds = add_into(&mut grads[s.0], sv.len());
                    for ((d, gchunk), xchunk) in ds.iter_mut().zip(g.chunks(inner)).zip(xv.chunks(inner)) {
                        *d += gchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let stride = (ca + cb) * hw;
                if self.needs(*a) {
                    let da = add_into(&mut grads[a.0], n * ca * hw);
                    for i in 0..n {
                        da[i * ca * hw..(i + 1) * ca * hw]
                            .iter_mut()
                            .zip(&g[i * stride..i * stride + ca * hw])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                if self.needs(*b) {
                    let db = add_into(&mut grads[b.0], n * cb * hw);
                    for i in 0..n {
                        db[i * cb * hw..(i + 1) * cb * hw]
                            .iter_mut()
                            .zip(&g[i * stride + ca * hw..(i + 1) * stride])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let da = add_into(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if self.needs(*b) {
                    let db = add_into(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = add_into(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, v), y)| *d += v * y);
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = add_into(&mut grads[b.0], g.len());
                    db.iter_mut().zip(g).zip(av).for_each(|((d, v), x)| *d += v * x);
                }
            }
            Op::Scale(x, k) => {
                let dx = add_into(&mut grads[x.0], g.len());
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += k * v);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let dx = add_into(&mut grads[x.0], g.len());
                dx.iter_mut().zip(g).zip(xv).for_each(|((d, v), x)| *d += 2.0 * x * v);
            }
            Op::Sum(x) => {
                let dx = add_into(&mut grads[x.0], len(*x));
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::WeightedSqErr { x, target, weights } => {
                let inner = len(*x) / weights.numel();
                let xv = self.value(*x).data();
                let dx = add_into(&mut grads[x.0], xv.len());
                for (((dchunk, xchunk), tchunk), &w) in dx
                    .chunks_mut(inner)
                    .zip(xv.chunks(inner))
                    .zip(target.data().chunks(inner))
                    .zip(weights.data())
                {
                    let k = 2.0 * w * g[0];
                    for ((d, a), t) in dchunk.iter_mut().zip(xchunk).zip(tchunk) {
                        *d += k * (a - t);
                    }
                }
            }
            Op::BinaryCrossEntropy { p, target, clamp } => {
                let pv = self.value(*p).data();
                let dp = add_into(&mut grads[p.0], pv.len());
                for ((d, &q), &y) in dp.iter_mut().zip(pv).zip(target.data()) {
                    if q > *clamp && q < 1.0 - *clamp {
                        *d += g[0] * (-y / q + (1.0 - y) / (1.0 - q));
                    }
                }
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let local = rule(&ins, &node.value, g);
                for (&id, gi) in inputs.iter().zip(local) {
                    if self.needs(id) {
                        let d = add_into(&mut grads[id.0], gi.len());
                        d.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
