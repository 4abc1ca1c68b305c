//! Variance schedule and the closed-form forward noising marginal.

use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<T> {
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// `β_s` for `s = 1..=S`; each must lie strictly inside `(0, 1)`.
    pub fn from_betas(betas: Vec<T>) -> Result<Self, LearnerError> {
        if betas.is_empty() {
            return Err(LearnerError::Argument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > T::zero() && b < T::one())) {
            return Err(LearnerError::Argument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = T::one();
        for &b in &betas {
            acc *= T::one() - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly spaced `β` from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self, LearnerError> {
        let betas = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                T::of(start + (end - start) * f)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t`, `1 <= t <= S`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    /// `ᾱ_t = Π_{s<=t} (1 - β_s)`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<(), LearnerError> {
        if t == 0 || t > self.steps() {
            return Err(LearnerError::Argument(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t·x0 + √(1-ᾱ_t)·ε`.
    pub fn forward_noising(&self, x0: &[T], t: usize, eps: &[T]) -> Result<Vec<T>, LearnerError> {
        self.check_step(t)?;
        if x0.len() != eps.len() {
            return Err(LearnerError::Argument(format!("noise has {} entries, sample {}", eps.len(), x0.len())));
        }
        Ok(noise_with_alpha_bar(self.alpha_bar(t), x0, eps))
    }
}

pub fn noise_with_alpha_bar<T: Scalar>(alpha_bar: T, x0: &[T], eps: &[T]) -> Vec<T> {
    let a = alpha_bar.sqrt();
    let s = (T::one() - alpha_bar).sqrt();
    x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::<f64>::linear(10, 1e-3, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=10 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.beta(1) - 1e-3).abs() < 1e-15 && (s.beta(10) - 0.2).abs() < 1e-15);
        let manual: f64 = (1..=10).map(|t| 1.0 - s.beta(t)).product();
        assert!((s.alpha_bar(10) - manual).abs() < 1e-15);
    }

    #[test]
    fn endpoints() {
        let x0 = [0.5, -1.0, 0.25];
        let eps = [1.0, 2.0, -3.0];
        assert_eq!(noise_with_alpha_bar(1.0, &x0, &eps), x0.to_vec());
        assert_eq!(noise_with_alpha_bar(0.0, &x0, &eps), eps.to_vec());
    }

    #[test]
    fn rejects_bad_steps_and_betas() {
        let s = NoiseSchedule::<f64>::linear(3, 0.1, 0.3).unwrap();
        assert!(s.forward_noising(&[0.0], 0, &[0.0]).is_err());
        assert!(s.forward_noising(&[0.0], 4, &[0.0]).is_err());
        assert!(s.forward_noising(&[0.0], 3, &[0.0, 1.0]).is_err());
        assert!(NoiseSchedule::<f64>::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::<f64>::from_betas(vec![]).is_err());
    }

    #[test]
    fn forward_marginal_matches_monte_carlo() {
        use crate::rng::{stream, Domain};
        use rand::Rng;
        use rand_distr::StandardNormal;
        let s = NoiseSchedule::<f64>::linear(10, 1e-3, 0.2).unwrap();
        let x0 = [0.75, -0.5];
        let n = 100_000;
        let mut rng = stream(11, Domain::Noise, 0);
        for t in [1, 5, 10] {
            let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
            for _ in 0..n {
                let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
                let x = s.forward_noising(&x0, t, &eps).unwrap();
                for i in 0..2 {
                    sum[i] += x[i];
                    sq[i] += x[i] * x[i];
                }
            }
            let var = 1.0 - s.alpha_bar(t);
            for i in 0..2 {
                let mean = sum[i] / n as f64;
                let v = sq[i] / n as f64 - mean * mean;
                assert!((mean - s.alpha_bar(t).sqrt() * x0[i]).abs() < 3.0 * (var / n as f64).sqrt());
                // variance of the sample variance is 2σ⁴/n for a Gaussian
                assert!((v - var).abs() < 3.0 * var * (2.0 / n as f64).sqrt());
            }
        }
    }

    #[test]
    fn single_precision_schedule() {
        let s = NoiseSchedule::<f32>::linear(10, 1e-3, 0.2).unwrap();
        let x = s.forward_noising(&[1.0f32], 10, &[0.0]).unwrap();
        assert!((x[0] - s.alpha_bar(10).sqrt()).abs() < 1e-7);
    }
}
