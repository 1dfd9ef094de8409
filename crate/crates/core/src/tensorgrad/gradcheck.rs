//! Central finite-difference verification of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, NodeId};
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±eps evaluations straddle a ReLU or clamp kink.
    pub skipped: usize,
    pub worst: Option<Worst>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub samples_per_tensor: usize,
    /// Relative error denominator is `max(|analytic|, |numeric|, abs_floor · max(1, |loss|))`;
    /// cancellation noise in `f(x+h) − f(x−h)` grows with the loss magnitude.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            tol: 1e-4,
            samples_per_tensor: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

pub fn grad_check<F>(f: F, params: &mut ParamSet, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    GradCheck {
        eps,
        tol,
        ..GradCheck::default()
    }
    .run(f, params)
}

fn evaluate<F>(f: &mut F, params: &ParamSet) -> Result<(f64, u64, Graph, NodeId)>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::usage(format!(
            "grad_check builder returned shape {:?}",
            v.shape()
        )));
    }
    let l = v.item();
    if !l.is_finite() {
        return Err(Error::numeric(format!(
            "grad_check: loss is {l} ({} graph nodes)",
            g.len()
        )));
    }
    let sig = g.kink_signature();
    Ok((l, sig, g, loss))
}

impl GradCheck {
    pub fn run<F>(&self, mut f: F, params: &mut ParamSet) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Graph, &ParamSet) -> Result<NodeId>,
    {
        if !(1e-7..=1e-3).contains(&self.eps) {
            return Err(Error::usage(format!(
                "grad_check eps {} outside [1e-7, 1e-3]",
                self.eps
            )));
        }
        params.clear_grads();
        let (base_loss, base_sig, graph, loss) = evaluate(&mut f, params)?;
        let floor = self.abs_floor * base_loss.abs().max(1.0);
        graph.backward(loss, params)?;
        drop(graph);
        let analytic: Vec<Option<Vec<f64>>> = params.iter().map(|(_, _, t)| t.grad().map(<[f64]>::to_vec)).collect();
        params.clear_grads();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
            worst: None,
            pass: false,
        };
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.get(id).requires_grad() {
                continue;
            }
            let n = params.get(id).numel();
            let coords: Vec<usize> = if n <= self.samples_per_tensor {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, self.samples_per_tensor).into_vec();
                v.sort_unstable();
                v
            };
            for i in coords {
                let orig = params.get(id).data()[i];
                params.get_mut(id).data_mut()[i] = orig + self.eps;
                let plus = evaluate(&mut f, params);
                params.get_mut(id).data_mut()[i] = orig - self.eps;
                let minus = evaluate(&mut f, params);
                params.get_mut(id).data_mut()[i] = orig;
                let (lp, sp, ..) = plus?;
                let (lm, sm, ..) = minus?;
                if sp != base_sig || sm != base_sig {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * self.eps);
                let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst = Some(Worst {
                        param: params.name(id).to_string(),
                        index: i,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        report.pass = report.checked > 0 && report.skipped <= report.checked && report.max_rel_err < self.tol;
        Ok(report)
    }
}
