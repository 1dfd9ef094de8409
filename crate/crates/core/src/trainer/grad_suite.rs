use std::str::FromStr;

use rand::Rng;

use super::data::{GtKernel, Prepared};
use super::fit::rng_for;
use crate::datagen::{generate_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::models::{ArchConfig, DensityEstimator, Regime, SeBlock, SupervisionNet};
use crate::supervision::{beta_schedule, combine, loss_features, loss_groundtruth, loss_output, BetaMode, LossConfig};
use crate::tensorgrad::{GradCheck, GradCheckReport, Graph, ParamSet, Tensor};

/// Side of the synthetic inputs used by the gradient suite.
pub const GRAD_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Se,
    Sn,
    Dme,
    /// `L_out + α·L_F` through the estimator, with a live SN bundle.
    Objective(Regime),
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "se" => Ok(GradTarget::Se),
            "sn" => Ok(GradTarget::Sn),
            "dme" => Ok(GradTarget::Dme),
            "objective" => Ok(GradTarget::Objective(Regime::Density)),
            "objective-dot" => Ok(GradTarget::Objective(Regime::Dot)),
            _ => Err(Error::usage(format!(
                "unknown grad-check model {s:?} (se|sn|dme|objective|objective-dot)"
            ))),
        }
    }
}

fn grad_arch(regime: Regime) -> ArchConfig {
    ArchConfig {
        base_channels: 2,
        head_mode: regime,
        ..ArchConfig::default()
    }
}

/// Two small synthetic scenes with their targets, stacked as `[2,1,S,S]`.
fn grad_batch(seed: u64) -> Result<(Tensor, Tensor, Tensor)> {
    let scene = SceneConfig {
        size: GRAD_SIDE,
        count_range: (2, 6),
        blob_radius_range: (1.0, 2.0),
        ..SceneConfig::dense(seed)
    };
    let prep = (0..2)
        .map(|i| Prepared::new(&generate_scene(&scene, i)?, GtKernel::Fixed(2.0)))
        .collect::<Result<Vec<_>>>()?;
    let stack = |f: fn(&Prepared) -> &Tensor| Tensor::stack(&prep.iter().map(f).collect::<Vec<_>>());
    Ok((stack(|p| &p.image)?, stack(|p| &p.density)?, stack(|p| &p.dots)?))
}

fn checker(eps: f64, tol: f64, seed: u64) -> GradCheck {
    GradCheck {
        eps,
        tol,
        samples_per_tensor: 16,
        seed,
        ..GradCheck::default()
    }
}

/// Finite-difference check of one model component on 16×16 inputs.
pub fn grad_check_model(target: GradTarget, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = rng_for(seed, 11);
    let gc = checker(eps, tol, seed);
    match target {
        GradTarget::Se => {
            let mut p = ParamSet::new();
            let se = SeBlock::build(&mut p, "se", 8, 4, &mut rng)?;
            let x = Tensor::new(
                vec![2, 8, 4, 4],
                (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            let t = Tensor::new(
                vec![2, 8, 4, 4],
                (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )?;
            gc.run(
                |g, p| {
                    let xi = g.input(x.clone());
                    let (scaled, w) = se.forward(g, p, xi)?;
                    let l = g.weighted_sq_err(scaled, &t, &Tensor::ones(&[2, 8]))?;
                    let s = g.sum(w);
                    g.add(l, s)
                },
                &mut p,
            )
        }
        GradTarget::Sn => {
            let (image, density, dots) = grad_batch(seed)?;
            let mut p = ParamSet::new();
            let sn = SupervisionNet::build(&grad_arch(Regime::Density), &mut p, &mut rng)?;
            gc.run(
                |g, p| {
                    let (a, b) = (g.input(dots.clone()), g.input(image.clone()));
                    let nodes = sn.forward(g, p, a, b)?;
                    let l = loss_groundtruth(g, nodes.recon, &density)?;
                    // route the attention weights into the loss as well
                    let w = g.sum(nodes.weights[0]);
                    let w = g.scale(w, 1e-2);
                    g.add(l, w)
                },
                &mut p,
            )
        }
        GradTarget::Dme => {
            let (image, density, _) = grad_batch(seed)?;
            let mut p = ParamSet::new();
            let dme = DensityEstimator::build(&grad_arch(Regime::Density), &mut p, &mut rng)?;
            gc.run(
                |g, p| {
                    let x = g.input(image.clone());
                    let nodes = dme.forward(g, p, x)?;
                    loss_groundtruth(g, nodes.output, &density)
                },
                &mut p,
            )
        }
        GradTarget::Objective(regime) => {
            let (image, density, dots) = grad_batch(seed)?;
            let arch = grad_arch(regime);
            let mut ps = ParamSet::new();
            let sn = SupervisionNet::build(&arch, &mut ps, &mut rng)?;
            ps.freeze();
            let gt_in = match regime {
                Regime::Density => &density,
                Regime::Dot => &dots,
            };
            let (_, bundle) = sn.infer(&ps, gt_in, &image)?;
            let loss_cfg = LossConfig {
                regime,
                ..LossConfig::default()
            };
            let betas = beta_schedule(BetaMode::Increase, arch.num_nodes)?;
            let target = match regime {
                Regime::Density => density.clone(),
                Regime::Dot => dots.clone(),
            };
            let mut p = ParamSet::new();
            let dme = DensityEstimator::build(&arch, &mut p, &mut rng)?;
            gc.run(
                |g: &mut Graph, p: &ParamSet| {
                    let x = g.input(image.clone());
                    let nodes = dme.forward(g, p, x)?;
                    let lo = loss_output(g, nodes.output, &target, &loss_cfg)?;
                    let lf = loss_features(g, &nodes.taps, &bundle, &betas)?;
                    combine(g, lo, lf, loss_cfg.alpha)
                },
                &mut p,
            )
        }
    }
}
