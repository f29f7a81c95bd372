//! Linear-beta noise schedule, epsilon-prediction loss and the deterministic
//! DDIM update used by the sampler.

use ndarray::{Array2, Zip};

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas rescaled from the usual 1000-step `[1e-4, 0.02]` range to
    /// `timesteps` steps, with the end clamped at 0.5.
    pub fn linear(timesteps: usize) -> Self {
        let scale = 1000.0 / timesteps as f64;
        let start = 1e-4 * scale;
        let end = (0.02 * scale).min(0.5);
        let betas: Vec<f64> = if timesteps == 1 {
            vec![start]
        } else {
            (0..timesteps)
                .map(|i| start + (end - start) * i as f64 / (timesteps - 1) as f64)
                .collect()
        };
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
    pub fn add_noise(&self, clean: &Array2<f64>, noise: &Array2<f64>, t: usize) -> Array2<f64> {
        let ab = self.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = Array2::zeros(clean.raw_dim());
        Zip::from(&mut out)
            .and(clean)
            .and(noise)
            .for_each(|o, &c, &n| *o = a * c + b * n);
        out
    }

    /// One deterministic DDIM step from `t` to `t - 1` (or to the clean
    /// estimate when `t == 0`).
    pub fn ddim_step(&self, z_t: &Array2<f64>, eps: &Array2<f64>, t: usize) -> Array2<f64> {
        let ab = self.alpha_bars[t];
        let ab_prev = if t == 0 { 1.0 } else { self.alpha_bars[t - 1] };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let mut out = Array2::zeros(z_t.raw_dim());
        Zip::from(&mut out).and(z_t).and(eps).for_each(|o, &z, &e| {
            let x0 = (z - sb * e) / sa;
            *o = pa * x0 + pb * e;
        });
        out
    }
}

/// Mean squared error between the noise prediction and the true noise.
pub fn denoising_loss(prediction: &Array2<f64>, target_noise: &Array2<f64>) -> Result<f64> {
    if prediction.shape() != target_noise.shape() {
        return Err(LabError::shape(format!(
            "prediction {:?} vs target {:?}",
            prediction.shape(),
            target_noise.shape()
        )));
    }
    let n = prediction.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (p, t) in prediction.iter().zip(target_noise.iter()) {
        s += (p - t) * (p - t);
    }
    Ok(s / n as f64)
}
