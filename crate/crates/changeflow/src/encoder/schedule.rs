//! Forward-noising schedule: a linear beta ramp and its cumulative
//! signal-retention products, plus the noising operator that produces the
//! encoder's inputs at a chosen timestep.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beta ramp with precomputed cumulative products. Timesteps index
/// `0..total_steps`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::validation(format!(
                "schedule needs at least 2 steps, got {total_steps}"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut schedule = NoiseSchedule {
            total_steps,
            beta_start,
            beta_end,
            alpha_bar: Vec::new(),
        };
        schedule.fill_alpha_bar();
        Ok(schedule)
    }

    /// The default 1000-step ramp from 1e-4 to 2e-2.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }

    /// Recomputes the cumulative products; needed after deserialization,
    /// which carries only the ramp endpoints.
    pub fn fill_alpha_bar(&mut self) {
        let n = self.total_steps;
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for t in 0..n {
            let beta = self.beta_start
                + (self.beta_end - self.beta_start) * t as f64 / (n - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        self.alpha_bar = alpha_bar;
    }

    pub fn len(&self) -> usize {
        self.total_steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Signal retention ᾱ_t.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::validation(format!(
                "timestep {t} outside schedule of {} steps",
                self.total_steps
            ))
        })
    }

    /// Noises an image in [0, 1]: rescales to [-1, 1] and mixes in unit
    /// Gaussian noise, returning both the noised image and the noise drawn.
    pub fn noise_pair(
        &self,
        x0: &Array3<f64>,
        t: usize,
        eps_seed: u64,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        let ab = self.alpha_bar(t)?;
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
        let eps = Array3::from_shape_fn(x0.dim(), |_| StandardNormal.sample(&mut rng));
        let x_t = x0.mapv(|v| (2.0 * v - 1.0) * signal) + &(eps.clone() * noise);
        Ok((x_t, eps))
    }

    /// The noised image alone; see [`NoiseSchedule::noise_pair`].
    pub fn forward_noise(&self, x0: &Array3<f64>, t: usize, eps_seed: u64) -> Result<Array3<f64>> {
        Ok(self.noise_pair(x0, t, eps_seed)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_decreases_from_one_toward_zero() {
        let s = NoiseSchedule::default_linear();
        let first = s.alpha_bar(0).unwrap();
        let last = s.alpha_bar(999).unwrap();
        assert!(first > 0.999);
        assert!(last < 0.01);
        let mut prev = 1.0;
        for t in 0..1000 {
            let ab = s.alpha_bar(t).unwrap();
            assert!(ab < prev, "alpha_bar not strictly decreasing at {t}");
            assert!(ab > 0.0);
            prev = ab;
        }
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn degenerate_ramps_are_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.5).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn early_timestep_barely_perturbs() {
        let s = NoiseSchedule::default_linear();
        let x0 = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| {
            0.5 + 0.4 * ((c + y + x) as f64 * 0.37).sin()
        });
        let x_t = s.forward_noise(&x0, 0, 9).unwrap();
        let rescaled = x0.mapv(|v| 2.0 * v - 1.0);
        let dev: f64 =
            x_t.iter().zip(rescaled.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / x_t.len() as f64;
        assert!(dev < 0.02, "mean abs deviation {dev}");
    }

    #[test]
    fn late_timestep_is_nearly_pure_noise() {
        let s = NoiseSchedule::default_linear();
        let x0 = Array3::from_elem((3, 128, 128), 0.5);
        let x_t = s.forward_noise(&x0, 999, 4).unwrap();
        let n = x_t.len() as f64;
        let mean = x_t.sum() / n;
        let var = x_t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "sample mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "sample std {}", var.sqrt());
    }

    #[test]
    fn noising_is_deterministic_in_the_seed() {
        let s = NoiseSchedule::default_linear();
        let x0 = Array3::from_elem((3, 8, 8), 0.25);
        let a = s.forward_noise(&x0, 400, 77).unwrap();
        let b = s.forward_noise(&x0, 400, 77).unwrap();
        assert_eq!(a, b);
        let c = s.forward_noise(&x0, 400, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_variance_matches_the_schedule() {
        let s = NoiseSchedule::default_linear();
        let x0 = Array3::from_shape_fn((3, 128, 128), |(c, y, x)| {
            ((c * 31 + y * 7 + x) % 11) as f64 / 11.0
        });
        for t in [50, 400, 650] {
            let ab = s.alpha_bar(t).unwrap();
            let x_t = s.forward_noise(&x0, t, t as u64).unwrap();
            let residual = &x_t - &x0.mapv(|v| (2.0 * v - 1.0) * ab.sqrt());
            let n = residual.len() as f64;
            let mean = residual.sum() / n;
            let var = residual.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let expected = 1.0 - ab;
            assert!(
                (var - expected).abs() / expected < 0.03,
                "t={t}: var {var} vs 1-alpha_bar {expected}"
            );
        }
    }

    #[test]
    fn serialization_restores_the_ramp() {
        let s = NoiseSchedule::linear(100, 1e-3, 1e-2).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let mut back: NoiseSchedule = serde_json::from_str(&text).unwrap();
        back.fill_alpha_bar();
        assert_eq!(back, s);
        assert_eq!(back.alpha_bar(50).unwrap(), s.alpha_bar(50).unwrap());
    }
}
