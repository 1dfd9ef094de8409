use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{batch_of, GtKernel, Prepared};
use super::RunConfig;
use crate::datagen::{AugmentParams, Sample};
use crate::error::{Error, Result};
use crate::models::{check_compatible, DensityEstimator, Regime, SupervisionBundle, SupervisionNet};
use crate::supervision::{beta_schedule, combine, feature_loss, loss_groundtruth, loss_output};
use crate::tensorgrad::{Adam, Graph, NodeId, ParamSet, Tensor};

/// RNG streams derived from the run seed.
const STREAM_SN_INIT: u64 = 1;
const STREAM_SN_ORDER: u64 = 2;
const STREAM_DME_INIT: u64 = 3;
const STREAM_DME_ORDER: u64 = 4;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// One optimizer step: output loss (`L_G` or `L_Dot`), feature loss and total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub out: f64,
    pub feat: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LossRow>,
}

impl TrainLog {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.total;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn to_csv(&self, regime: Regime) -> String {
        let head = match regime {
            Regime::Density => "l_g",
            Regime::Dot => "l_dot",
        };
        let mut s = format!("step,{head},l_f,total\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", r.step, r.out, r.feat, r.total));
        }
        s
    }
}

pub struct TrainedSn {
    pub net: SupervisionNet,
    pub params: ParamSet,
    pub log: TrainLog,
}

pub struct TrainedDme {
    pub net: DensityEstimator,
    pub params: ParamSet,
    pub log: TrainLog,
}

/// Draws one epoch of batches, optionally augmenting each sample.
struct Batcher<'a> {
    samples: &'a [Sample],
    kernel: GtKernel,
    augment: bool,
    crop: usize,
    batch: usize,
    base: Option<Vec<Prepared>>,
}

impl<'a> Batcher<'a> {
    fn new(samples: &'a [Sample], cfg: &RunConfig, kernel: GtKernel) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("training split is empty"));
        }
        let side = samples[0].annotation.height.min(samples[0].annotation.width);
        let crop = cfg.crop.unwrap_or(side);
        cfg.arch.check_input(crop, crop)?;
        let base = if cfg.augment {
            None
        } else {
            Some(
                samples
                    .iter()
                    .map(|s| Prepared::new(s, kernel))
                    .collect::<Result<_>>()?,
            )
        };
        Ok(Batcher {
            samples,
            kernel,
            augment: cfg.augment,
            crop,
            batch: cfg.batch,
            base,
        })
    }

    /// Batches of `(sample index, prepared sample)`.
    fn epoch(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<(usize, Prepared)>>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(rng);
        order
            .chunks(self.batch)
            .map(|idx| {
                idx.iter()
                    .map(|&i| {
                        let p = match &self.base {
                            Some(b) => b[i].clone(),
                            None => {
                                let s = &self.samples[i];
                                let (h, w) = (s.annotation.height, s.annotation.width);
                                let a = if self.augment {
                                    AugmentParams::draw(rng, h, w, self.crop)
                                } else {
                                    AugmentParams::identity()
                                };
                                Prepared::augmented(s, self.crop, &a, self.kernel)?
                            }
                        };
                        Ok((i, p))
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_finite(v: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "non-finite {what} loss {v} at epoch {epoch}, batch {batch}"
        )))
    }
}

fn single(t: &Tensor) -> Result<Tensor> {
    Tensor::stack(&[t])
}

/// Drop the leading batch axis of a one-sample bundle.
fn unbatch(b: &SupervisionBundle) -> SupervisionBundle {
    let first = |v: &[Tensor]| v.iter().map(|t| t.unstack().remove(0)).collect();
    SupervisionBundle {
        features: first(&b.features),
        weights: first(&b.weights),
    }
}

fn rebatch<'a>(items: impl Iterator<Item = &'a SupervisionBundle>) -> Result<SupervisionBundle> {
    let items: Vec<&SupervisionBundle> = items.collect();
    let stack = |pick: fn(&SupervisionBundle) -> &[Tensor], n: usize| -> Result<Vec<Tensor>> {
        (0..n)
            .map(|k| Tensor::stack(&items.iter().map(|b| &pick(b)[k]).collect::<Vec<_>>()))
            .collect()
    };
    let n = items[0].num_nodes();
    Ok(SupervisionBundle {
        features: stack(|b| &b.features, n)?,
        weights: stack(|b| &b.weights, n)?,
    })
}

fn sn_input(regime: Regime, p: &Prepared) -> &Tensor {
    match regime {
        Regime::Density => &p.density,
        Regime::Dot => &p.dots,
    }
}

/// Pretrain the supervision network to reconstruct the density map from
/// `(groundtruth, image)`.
pub fn train_sn(cfg: &RunConfig, samples: &[Sample], kernel: GtKernel) -> Result<TrainedSn> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let net = SupervisionNet::build(&cfg.arch, &mut params, &mut rng_for(cfg.seed, STREAM_SN_INIT))?;
    let batcher = Batcher::new(samples, cfg, kernel)?;
    let mut order = rng_for(cfg.seed, STREAM_SN_ORDER);
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs_sn {
        for (bi, batch) in batcher.epoch(&mut order)?.into_iter().enumerate() {
            let batch: Vec<Prepared> = batch.into_iter().map(|(_, p)| p).collect();
            let gt_in = batch_of(batch.iter().map(|p| sn_input(cfg.regime(), p)))?;
            let image = batch_of(batch.iter().map(|p| &p.image))?;
            let target = batch_of(batch.iter().map(|p| &p.density))?;
            let mut g = Graph::new();
            let (a, b) = (g.input(gt_in), g.input(image));
            let nodes = net.forward(&mut g, &params, a, b)?;
            let loss = loss_groundtruth(&mut g, nodes.recon, &target)?;
            let v = g.value(loss).item();
            check_finite(v, "SN reconstruction", epoch, bi)?;
            g.backward(loss, &mut params)?;
            adam.step(&mut params, cfg.lr)?;
            params.clear_grads();
            log.rows.push(LossRow {
                step: log.rows.len(),
                epoch,
                out: v,
                feat: 0.0,
                total: v,
            });
        }
    }
    Ok(TrainedSn { net, params, log })
}

/// Train the estimator with the frozen SN supplying per-sample supervision
/// on the last `cfg.nodes` decoder nodes.
pub fn train_dme(
    cfg: &RunConfig,
    samples: &[Sample],
    kernel: GtKernel,
    sn: &SupervisionNet,
    sn_params: &ParamSet,
) -> Result<TrainedDme> {
    train_dme_with(cfg, samples, kernel, sn, sn_params, |_, _, _| Ok(()))
}

/// [`train_dme`] with a callback after every epoch.
pub fn train_dme_with(
    cfg: &RunConfig,
    samples: &[Sample],
    kernel: GtKernel,
    sn: &SupervisionNet,
    sn_params: &ParamSet,
    mut on_epoch: impl FnMut(usize, &DensityEstimator, &ParamSet) -> Result<()>,
) -> Result<TrainedDme> {
    cfg.validate()?;
    check_compatible(sn.arch(), &cfg.arch)?;
    let mut frozen = sn_params.clone();
    frozen.freeze();
    let betas = if cfg.nodes > 0 {
        beta_schedule(cfg.loss.mode, cfg.nodes)?
    } else {
        Vec::new()
    };
    let mut params = ParamSet::new();
    let net = DensityEstimator::build(&cfg.arch, &mut params, &mut rng_for(cfg.seed, STREAM_DME_INIT))?;
    let batcher = Batcher::new(samples, cfg, kernel)?;
    let mut order = rng_for(cfg.seed, STREAM_DME_ORDER);
    let mut adam = Adam::new();
    let mut log = TrainLog::default();
    // without augmentation every sample's SN output is fixed, so infer it once
    let cached: Option<Vec<SupervisionBundle>> = match (&batcher.base, cfg.nodes) {
        (Some(base), k) if k > 0 => Some(
            base.iter()
                .map(|p| {
                    let (_, b) = sn.infer(&frozen, &single(sn_input(cfg.regime(), p))?, &single(&p.image)?)?;
                    Ok(unbatch(&b.last_nodes(k)))
                })
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    for epoch in 0..cfg.epochs_dme {
        for (bi, batch) in batcher.epoch(&mut order)?.into_iter().enumerate() {
            let image = batch_of(batch.iter().map(|(_, p)| &p.image))?;
            let target = batch_of(batch.iter().map(|(_, p)| match cfg.regime() {
                Regime::Density => &p.density,
                Regime::Dot => &p.dots,
            }))?;
            let bundle = match (&cached, cfg.nodes) {
                (_, 0) => None,
                (Some(c), _) => Some(rebatch(batch.iter().map(|(i, _)| &c[*i]))?),
                (None, k) => {
                    let gt_in = batch_of(batch.iter().map(|(_, p)| sn_input(cfg.regime(), p)))?;
                    let (_, b) = sn.infer(&frozen, &gt_in, &image)?;
                    Some(b.last_nodes(k))
                }
            };
            let mut g = Graph::new();
            let x = g.input(image);
            let nodes = net.forward(&mut g, &params, x)?;
            let l_out = loss_output(&mut g, nodes.output, &target, &cfg.loss)?;
            let (l_f, total): (Option<NodeId>, NodeId) = match &bundle {
                Some(b) => {
                    let taps = &nodes.taps[nodes.taps.len() - cfg.nodes..];
                    let lf = feature_loss(&mut g, taps, b, &betas, cfg.weighting)?;
                    (Some(lf), combine(&mut g, l_out, lf, cfg.loss.alpha)?)
                }
                None => (None, l_out),
            };
            let row = LossRow {
                step: log.rows.len(),
                epoch,
                out: g.value(l_out).item(),
                feat: l_f.map_or(0.0, |n| g.value(n).item()),
                total: g.value(total).item(),
            };
            check_finite(row.total, "DME", epoch, bi)?;
            g.backward(total, &mut params)?;
            adam.step(&mut params, cfg.lr)?;
            params.clear_grads();
            log.rows.push(row);
        }
        on_epoch(epoch, &net, &params)?;
    }
    debug_assert!(!frozen.has_any_grad());
    Ok(TrainedDme { net, params, log })
}
