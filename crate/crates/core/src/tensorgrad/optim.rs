use super::params::ParamSet;
use crate::error::{Error, Result};

/// Adaptive-moment (Adam) optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that requires grad.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::usage("optimizer state was built for a different parameter set"));
        }
        for (id, name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::usage(format!(
                    "parameter {name:?} (#{}) has no gradient",
                    id.index()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorgrad::Tensor;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = single(3.0);
        let id = p.id("x").unwrap();
        p.get_mut(id).accumulate_grad(&[0.0]);
        Adam::new().step(&mut p, 0.1).unwrap();
        assert_eq!(p.get(id).item(), 3.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0);
        let id = p.id("x").unwrap();
        p.get_mut(id).accumulate_grad(&[1.0]);
        Adam::new().step(&mut p, 0.1).unwrap();
        // 1 − 0.1·1/(1 + 1e−8)
        assert!((p.get(id).item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut p = single(1.0);
        assert!(matches!(Adam::new().step(&mut p, 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = single(1.0);
        p.freeze();
        Adam::new().step(&mut p, 0.1).unwrap();
        assert_eq!(p.by_name("x").unwrap().item(), 1.0);
    }
}
