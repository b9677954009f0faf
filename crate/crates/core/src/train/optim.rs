//! Warmup/cosine schedule and Adam.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numeric::{Parameter, Real, Tensor};

/// Linear warmup over `ceil(warmup_ratio * total)` steps, then cosine decay
/// to zero at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("schedule needs total > 0".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total}")));
    }
    let warm = ((cfg.warmup_ratio * total as f64).ceil() as usize).clamp(1, total);
    if step <= warm {
        return Ok(cfg.lr_max * (step as f64 / warm as f64));
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps }
    }
}

/// First and second moments per parameter plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<R> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(params: &[Parameter<R>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn check_matches(&self, params: &[Parameter<R>]) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Format(format!("optimizer holds {} moments for {} parameters", self.m.len(), params.len())));
        }
        for ((m, v), p) in self.m.iter().zip(&self.v).zip(params) {
            if m.shape() != p.value().shape() || v.shape() != p.value().shape() {
                return Err(Error::Format(format!("optimizer moment shape mismatch for {}", p.name())));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update from the gradients accumulated on `params`.
/// Parameters without a gradient are treated as having a zero gradient. A
/// non-finite gradient aborts before anything is modified.
pub fn adam_step<R: Real>(params: &mut [Parameter<R>], state: &mut OptimizerState<R>, lr: f64, cfg: AdamConfig) -> Result<()> {
    state.check_matches(params)?;
    for p in params.iter() {
        if let Some(g) = p.grad() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name())));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1r, b2r, eps, lr_r) = (R::lit(b1), R::lit(b2), R::lit(cfg.eps), R::lit(lr));
    let (one_b1, one_b2) = (R::lit(1.0 - b1), R::lit(1.0 - b2));
    let (c1r, c2r) = (R::lit(c1), R::lit(c2));
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().map(|g| g.data().to_vec());
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = p.value_mut().data_mut();
        for j in 0..value.len() {
            let g = grad.as_ref().map_or(R::zero(), |g| g[j]);
            m[j] = b1r * m[j] + one_b1 * g;
            v[j] = b2r * v[j] + one_b2 * g * g;
            let mh = m[j] / c1r;
            let vh = v[j] / c2r;
            value[j] = value[j] - lr_r * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
