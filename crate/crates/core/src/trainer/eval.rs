use super::data::Prepared;
use crate::error::{Error, Result};
use crate::metrics::{count_mae_mse, psnr, ssim, EvalReport};
use crate::models::{DensityEstimator, Regime};
use crate::tensorgrad::{ParamSet, Tensor};

/// Score predicted maps (`[1,H,W]` each) against prepared samples. The
/// predicted count is the map sum. PSNR and SSIM are averaged over samples
/// whose density map is not identically zero, and only in the density regime.
pub fn evaluate_predictions(preds: &[Tensor], split: &[Prepared], regime: Regime) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::usage("evaluation split is empty"));
    }
    if preds.len() != split.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} samples",
            preds.len(),
            split.len()
        )));
    }
    let pc: Vec<f64> = preds.iter().map(Tensor::sum).collect();
    let gc: Vec<f64> = split.iter().map(|p| p.count).collect();
    let (mae, mse) = count_mae_mse(&pc, &gc)?;
    let (psnr_v, ssim_v) = match regime {
        Regime::Dot => (None, None),
        Regime::Density => {
            let (mut ps, mut ss, mut n) = (0.0, 0.0, 0usize);
            for (p, s) in preds.iter().zip(split) {
                if s.density.max() <= 0.0 {
                    continue;
                }
                ps += psnr(p, &s.density)?;
                ss += ssim(p, &s.density)?;
                n += 1;
            }
            if n == 0 {
                (None, None)
            } else {
                (Some(ps / n as f64), Some(ss / n as f64))
            }
        }
    };
    Ok(EvalReport {
        mae,
        mse,
        psnr: psnr_v,
        ssim: ssim_v,
        n_samples: split.len(),
    })
}

pub fn evaluate_model(net: &DensityEstimator, params: &ParamSet, split: &[Prepared]) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::usage("evaluation split is empty"));
    }
    let mut preds = Vec::with_capacity(split.len());
    for chunk in split.chunks(8) {
        let imgs: Vec<&Tensor> = chunk.iter().map(|p| &p.image).collect();
        let out = net.predict(params, &Tensor::stack(&imgs)?)?;
        preds.extend(out.unstack());
    }
    evaluate_predictions(&preds, split, net.arch().head_mode)
}
