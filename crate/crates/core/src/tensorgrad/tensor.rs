//! Dense row-major `f64` tensors and the `NT1` text format.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::usage(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::usage(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Borrow the `i`-th slice along the leading axis.
    pub fn outer(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::usage("cannot stack zero tensors"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::usage(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(shape, data)
    }

    /// Inverse of [`Tensor::stack`].
    pub fn unstack(&self) -> Vec<Tensor> {
        let inner = self.shape[1..].to_vec();
        (0..self.shape[0])
            .map(|i| Tensor::new(inner.clone(), self.outer(i).to_vec()).expect("consistent"))
            .collect()
    }

    /// Serialize to `NT1`: the literal `NT1`, the space-separated shape, then
    /// one line per innermost row. Values use the shortest round-trip form.
    pub fn to_nt1(&self) -> String {
        let mut out = String::from("NT1\n");
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&dims.join(" "));
        out.push('\n');
        let row = *self.shape.last().unwrap_or(&1);
        for chunk in self.data.chunks(row) {
            for (i, v) in chunk.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{v:?}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_nt1(text: &str) -> Result<Tensor> {
        let mut lines = text.lines().enumerate();
        Self::read_nt1_lines(&mut lines, "<nt1>")
    }

    pub(crate) fn read_nt1_lines<'a, I>(lines: &mut I, origin: &str) -> Result<Tensor>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line: line + 1,
            msg,
        };
        let (ln, magic) = lines.next().ok_or_else(|| perr(0, "missing NT1 header".into()))?;
        if magic.trim() != "NT1" {
            return Err(perr(ln, format!("expected NT1, found {magic:?}")));
        }
        let (ln, shape_line) = lines.next().ok_or_else(|| perr(ln + 1, "missing shape line".into()))?;
        let shape = shape_line
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(ln, format!("bad shape: {e}")))?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(perr(ln, format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut last = ln;
        while data.len() < n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| perr(last + 1, format!("expected {n} values, got {}", data.len())))?;
            last = ln;
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<f64>()
                    .map_err(|e| perr(ln, format!("bad value {tok:?}: {e}")))?;
                data.push(v);
            }
        }
        if data.len() != n {
            return Err(perr(last, format!("expected {n} values, got {}", data.len())));
        }
        Tensor::new(shape, data)
    }

    pub fn read_nt1(reader: impl BufRead, origin: &str) -> Result<Tensor> {
        let text: Vec<String> = reader
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(origin, e))?;
        let mut it = text.iter().map(String::as_str).enumerate();
        Self::read_nt1_lines(&mut it, origin)
    }

    pub fn save_nt1(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_nt1()).map_err(|e| Error::io(path, e))
    }

    pub fn load_nt1(path: &std::path::Path) -> Result<Tensor> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        Self::read_nt1_lines(&mut lines, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn nt1_layout() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.5, -2.0, 1e-300]).unwrap();
        assert_eq!(t.to_nt1(), "NT1\n2 2\n1.0 0.5\n-2.0 1e-300\n");
    }

    #[test]
    fn nt1_rejects_short_body() {
        let err = Tensor::from_nt1("NT1\n3\n1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(Tensor::from_nt1("NT2\n1\n0\n").is_err());
    }

    proptest! {
        #[test]
        fn nt1_roundtrip_is_bit_exact(
            dims in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut s = seed | 1;
            let data: Vec<f64> = (0..n).map(|_| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                f64::from_bits(s >> 2) * if s & 1 == 0 { 1.0 } else { -1.0 }
            }).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = Tensor::from_nt1(&t.to_nt1()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
