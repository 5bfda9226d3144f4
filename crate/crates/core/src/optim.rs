use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{invalid_arg, CdaError, Result};

/// First-order optimizer over a fixed, ordered parameter group.
pub trait Optimizer {
    fn step(&mut self, params: Vec<&mut Mat>, grads: &[Mat]) -> Result<()>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !(self.lr > 0.0 && self.lr.is_finite()) || !betas_ok || !(self.eps > 0.0) {
            return invalid_arg(format!("invalid Adam settings {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }
}

fn check_shapes(params: &[&mut Mat], grads: &[Mat]) -> Result<()> {
    if params.len() != grads.len() {
        return invalid_arg(format!("{} params but {} grads", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.dim() != g.dim() {
            return invalid_arg(format!("param {:?} vs grad {:?}", p.dim(), g.dim()));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CdaError::NumericalDomain("non-finite gradient".into()));
        }
    }
    Ok(())
}

impl Optimizer for Adam {
    fn step(&mut self, mut params: Vec<&mut Mat>, grads: &[Mat]) -> Result<()> {
        check_shapes(&params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() {
            return invalid_arg("parameter group changed between Adam steps");
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut *params[i])
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, mut params: Vec<&mut Mat>, grads: &[Mat]) -> Result<()> {
        check_shapes(&params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            p.scaled_add(-self.lr, g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        let mut p = array![[1.0, -2.0]];
        opt.step(vec![&mut p], &[array![[3.0, -0.5]]]).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        let mut p = array![[4.0, -3.0]];
        for _ in 0..2000 {
            let g = p.mapv(|v| 2.0 * (v - 1.0));
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_mismatched_groups() {
        let mut opt = Sgd { lr: 0.1 };
        let mut p = array![[1.0]];
        assert!(opt.step(vec![&mut p], &[]).is_err());
        assert!(opt.step(vec![&mut p], &[array![[f64::NAN]]]).is_err());
        assert!(Adam::new(AdamConfig { lr: -1.0, ..Default::default() }).is_err());
    }
}
