//! Diffusion noise schedules, the closed-form forward process, and the
//! deterministic (η = 0) DDIM update.
//!
//! Timesteps run `1..=T`; index 0 is the clean signal with `ᾱ_0 = 1`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    /// β linear in t.
    Linear,
    /// √β linear in t.
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_train: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::InvalidArgument("need at least 2 diffusion steps".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(alloc::format!(
                "beta range ({beta_start}, {beta_end})"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_train + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=t_train {
            let u = (t - 1) as f64 / (t_train - 1) as f64;
            let beta = match kind {
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * u,
                ScheduleKind::ScaledLinear => {
                    let r = libm::sqrt(beta_start) + (libm::sqrt(beta_end) - libm::sqrt(beta_start)) * u;
                    r * r
                }
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self {
            kind,
            beta_start,
            beta_end,
            alpha_bar,
        })
    }

    /// Linear β from 1e-4 to 0.02.
    pub fn linear(t_train: usize) -> Self {
        Self::new(ScheduleKind::Linear, t_train, 1e-4, 0.02).expect("valid default schedule")
    }

    /// √β linear from √0.00085 to √0.012.
    pub fn scaled_linear(t_train: usize) -> Self {
        Self::new(ScheduleKind::ScaledLinear, t_train, 0.00085, 0.012).expect("valid default schedule")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn t_train(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// ᾱ_t for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alpha_bar[t];
        (libm::sqrt(a), libm::sqrt(1.0 - a))
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
pub fn forward_noise(z0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    if z0.len() != eps.len() {
        return Err(Error::ShapeMismatch(alloc::format!("{} vs {}", z0.len(), eps.len())));
    }
    if t > schedule.t_train() {
        return Err(Error::InvalidArgument(alloc::format!(
            "timestep {t} beyond {}",
            schedule.t_train()
        )));
    }
    let (a, b) = schedule.coefficients(t);
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect())
}

/// Evenly spaced DDIM timesteps, highest first: `⌊(i+1)·T/steps⌋` for
/// `i = steps-1 .. 0`. With `steps == T` this is every step `T..1`.
pub fn ddim_timesteps(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_train {
        return Err(Error::InvalidArgument(alloc::format!(
            "sampling steps must be in 1..={t_train}, got {steps}"
        )));
    }
    Ok((0..steps).rev().map(|i| (i + 1) * t_train / steps).collect())
}

/// The timestep following `t` in a DDIM sequence (0 after the last one).
pub fn previous_timestep(timesteps: &[usize], i: usize) -> usize {
    timesteps.get(i + 1).copied().unwrap_or(0)
}

/// Deterministic DDIM update from `t` to `t_prev` given the predicted
/// noise: `x̂0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`, then
/// `x_prev = √ᾱ_prev · x̂0 + √(1−ᾱ_prev) · ε̂`.
pub fn ddim_step(x_t: &[f32], eps_pred: &[f32], t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Vec<f32> {
    let (a_t, b_t) = schedule.coefficients(t);
    let (a_p, b_p) = schedule.coefficients(t_prev);
    x_t.iter()
        .zip(eps_pred)
        .map(|(&x, &e)| {
            let x0 = (x as f64 - b_t * e as f64) / a_t;
            (a_p * x0 + b_p * e as f64) as f32
        })
        .collect()
}

/// Mask guidance channel: labels rescaled by `1/num_labels`, average-pooled
/// by `factor` and clamped to `[0, 1]`. Output is `(w/f) × (h/f)`, x fastest.
pub fn downsample_mask(mask: &Mask, num_labels: u8, factor: usize) -> Result<Vec<f32>> {
    let [w, h, d] = mask.dims();
    if d != 1 || factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::ShapeMismatch(alloc::format!(
            "mask {:?} cannot be pooled by {factor}",
            mask.dims()
        )));
    }
    if num_labels == 0 {
        return Err(Error::InvalidArgument("num_labels must be >= 1".into()));
    }
    let (ow, oh) = (w / factor, h / factor);
    let scale = 1.0 / (num_labels as f32 * (factor * factor) as f32);
    let mut out = alloc::vec![0.0f32; ow * oh];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += mask.get(x, y, 0) as f32;
        }
    }
    out.iter_mut().for_each(|v| *v = (*v * scale).clamp(0.0, 1.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn alpha_bar_monotone_with_endpoints() {
        for s in [NoiseSchedule::linear(1000), NoiseSchedule::scaled_linear(1000)] {
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bar(1) > 0.99);
            assert!(s.alpha_bar(1000) < 0.01);
            for t in 1..=1000 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::linear(1000);
        let z0 = [0.5f32, -1.0, 2.0];
        assert_eq!(forward_noise(&z0, 0, &[1.0; 3], &s).unwrap(), z0.to_vec());
        let zt = forward_noise(&z0, 500, &[0.0; 3], &s).unwrap();
        let a = libm::sqrt(s.alpha_bar(500));
        for (x, z) in zt.iter().zip(z0) {
            assert!((*x as f64 - a * z as f64).abs() < 1e-6);
        }
        assert!(forward_noise(&z0, 1001, &[0.0; 3], &s).is_err());
    }

    #[test]
    fn timesteps() {
        assert_eq!(ddim_timesteps(1000, 4).unwrap(), vec![1000, 750, 500, 250]);
        let all = ddim_timesteps(10, 10).unwrap();
        assert_eq!(all, (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(previous_timestep(&all, 9), 0);
        assert!(ddim_timesteps(10, 0).is_err());
    }

    #[test]
    fn ddim_step_with_true_noise_recovers_clean_signal() {
        let s = NoiseSchedule::linear(1000);
        let z0 = [0.3f32, -0.7];
        let eps = [1.2f32, 0.4];
        let zt = forward_noise(&z0, 600, &eps, &s).unwrap();
        let back = ddim_step(&zt, &eps, 600, 0, &s);
        for (b, z) in back.iter().zip(z0) {
            assert!((b - z).abs() < 1e-5);
        }
        // Jumping to an intermediate step lands on the forward marginal.
        let mid = ddim_step(&zt, &eps, 600, 200, &s);
        let expect = forward_noise(&z0, 200, &eps, &s).unwrap();
        for (m, e) in mid.iter().zip(expect) {
            assert!((m - e).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_downsampling() {
        let m = Mask::plane(4, 2, vec![2, 2, 0, 1, 2, 2, 1, 1]).unwrap();
        let d = downsample_mask(&m, 2, 2).unwrap();
        assert_eq!(d, vec![1.0, 0.375]);
        assert!(downsample_mask(&m, 2, 3).is_err());
    }
}
