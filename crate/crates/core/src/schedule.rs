//! Forward-process coefficients and the closed-form noising step.

use advanchor_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Linear β schedule and its cumulative products ᾱ_t. Timesteps are 1-indexed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(LabError::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        let in_range = |b: f64| b > 0.0 && b < 1.0;
        if !(in_range(beta_start) && in_range(beta_end)) {
            return Err(LabError::InvalidArgument(format!(
                "betas must lie in (0, 1): start={beta_start}, end={beta_end}"
            )));
        }
        if beta_start > beta_end {
            return Err(LabError::InvalidArgument(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LabError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

/// A batch of clean images, their timesteps, the injected noise and the noised result.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x0: Tensor<f64>,
    pub t: Vec<usize>,
    pub eps: Tensor<f64>,
    pub xt: Tensor<f64>,
}

impl NoisySample {
    pub fn batch(&self) -> usize {
        self.x0.dim(0)
    }

    /// Recover `x0` from `xt` and `eps` by inverting the noising identity.
    pub fn reconstruct_x0(&self, schedule: &NoiseSchedule) -> Result<Tensor<f64>> {
        let n = self.x0.item_len();
        let mut out = self.xt.clone();
        for (b, &t) in self.t.iter().enumerate() {
            let ab = schedule.alpha_bar(t)?;
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            let eps = self.eps.item(b);
            for (o, &e) in out.data_mut()[b * n..(b + 1) * n].iter_mut().zip(eps) {
                *o = (*o - sb * e) / sa;
            }
        }
        Ok(out)
    }
}

/// `sqrt(ᾱ)·x0 + sqrt(1−ᾱ)·eps` for a single coefficient.
pub fn noise_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64, out: &mut [f64]) {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
        *o = sa * x + sb * e;
    }
}

/// Forward-noise a batch `x0: (B, C, H, W)` to per-item timesteps `t`.
pub fn diffuse(
    x0: &Tensor<f64>,
    t: &[usize],
    eps: &Tensor<f64>,
    schedule: &NoiseSchedule,
) -> Result<NoisySample> {
    if x0.shape() != eps.shape() {
        return Err(LabError::ShapeMismatch {
            expected: x0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    if x0.rank() == 0 || t.len() != x0.dim(0) {
        return Err(LabError::InvalidArgument(format!(
            "need one timestep per batch item ({} items, {} timesteps)",
            x0.shape().first().copied().unwrap_or(0),
            t.len()
        )));
    }
    let n = x0.item_len();
    let mut xt = Tensor::zeros(x0.shape());
    for (b, &tb) in t.iter().enumerate() {
        let ab = schedule.alpha_bar(tb)?;
        noise_with_alpha_bar(
            x0.item(b),
            eps.item(b),
            ab,
            &mut xt.data_mut()[b * n..(b + 1) * n],
        );
    }
    Ok(NoisySample {
        x0: x0.clone(),
        t: t.to_vec(),
        eps: eps.clone(),
        xt,
    })
}
