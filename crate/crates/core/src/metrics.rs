//! Count metrics (MAE, root-mean-squared count error) and map-quality metrics
//! (PSNR, SSIM).
//!
//! PSNR and SSIM first divide both maps by `max(gt)`, so the peak is 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `(MAE, MSE)` over per-image counts, where "MSE" keeps its outer square
/// root: `sqrt(mean((y − ŷ)²))`.
pub fn count_mae_mse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::usage(format!(
            "count metrics need equal non-empty lists, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let e = g - p;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// View a map as one `h×w` plane; leading axes must all be 1.
fn plane(t: &Tensor) -> Result<(usize, usize, &[f64])> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|&d| d != 1) {
        return Err(Error::usage(format!("expected a single map, got shape {s:?}")));
    }
    Ok((s[s.len() - 2], s[s.len() - 1], t.data()))
}

fn scaled_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (h, w, p) = plane(pred)?;
    let (gh, gw, g) = plane(gt)?;
    if (h, w) != (gh, gw) {
        return Err(Error::usage(format!("map shapes differ: {h}x{w} vs {gh}x{gw}")));
    }
    let peak = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::data(format!("groundtruth peak {peak} gives no usable scale")));
    }
    let inv = 1.0 / peak;
    Ok((
        h,
        w,
        p.iter().map(|v| v * inv).collect(),
        g.iter().map(|v| v * inv).collect(),
    ))
}

/// PSNR in dB, `+∞` for identical maps.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (_, _, p, g) = scaled_pair(pred, gt)?;
    let mse = p.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// `10·log10(1 / mse)` for peak 1.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of an `h×w` plane.
fn blur(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &x[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = k.iter().zip(&src[c..c + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &rows[(r + i) * ow..(r + i + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += kv * v;
            }
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), valid positions only.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (h, w, p, g) = scaled_pair(pred, gt)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::usage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_x = blur(&p, h, w, &k);
    let mu_y = blur(&g, h, w, &k);
    let xx = blur(&prod(&p, &p), h, w, &k);
    let yy = blur(&prod(&g, &g), h, w, &k);
    let xy = blur(&prod(&p, &g), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Evaluation summary. Map metrics are absent in the dot regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub mse: f64,
    #[serde(with = "inf_float")]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub const CSV_HEADER: &'static str = "n_samples,mae,mse,psnr,ssim";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| match v {
            None => String::new(),
            Some(x) if x == f64::INFINITY => "inf".into(),
            Some(x) => format!("{x:?}"),
        };
        format!(
            "{},{:?},{:?},{},{}",
            self.n_samples,
            self.mae,
            self.mse,
            opt(self.psnr),
            opt(self.ssim)
        )
    }
}

/// JSON has no infinity; `+∞` is written as the string `"inf"`.
mod inf_float {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if *x == f64::INFINITY => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Str(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
            Some(Raw::Str(s)) => Err(D::Error::custom(format!("unexpected value {s:?}"))),
        }
    }
}
