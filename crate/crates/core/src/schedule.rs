//! Variance schedules for the forward process.
//!
//! Step indices are 1-based as in the usual diffusion notation: `t` ranges
//! over `1..=T`, and `t = 0` denotes clean data with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaKind {
    Linear,
    ScaledLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Interpolates `T` betas between `beta_start` and `beta_end`.
    pub fn build(steps: usize, beta_start: f64, beta_end: f64, kind: BetaKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let betas = (0..steps)
            .map(|i| match kind {
                BetaKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
                BetaKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + (b - a) * frac(i);
                    s * s
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            Err(Error::Index(format!(
                "step {t} outside [1, {}]",
                self.betas.len()
            )))
        } else {
            Ok(t - 1)
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Coefficient of the step-`t` noise prediction in the unrolled
    /// ancestral chain: `(1/sqrt(alpha_bar_t)) * beta_t / sqrt(1 - alpha_bar_t)`.
    pub fn chain_factor(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        self.beta(t) / (ab.sqrt() * (1.0 - ab).sqrt())
    }

    /// Closed-form forward process: `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        let i = self.check(t)?;
        if x0.len() != noise.len() {
            return Err(Error::Shape(format!(
                "x0 has {} dims, noise has {}",
                x0.len(),
                noise.len()
            )));
        }
        let ab = self.alpha_bars[i];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn explicit_four_step_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        for (got, want) in s.alpha_bars().iter().zip([0.9, 0.72, 0.504, 0.3024]) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        assert_eq!(s.sigma(4), 0.4f64.sqrt());
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.alphas(), &[0.5]);
        let s = NoiseSchedule::build(1, 0.5, 0.5, BetaKind::Linear).unwrap();
        assert_eq!(s.betas(), &[0.5]);
    }

    #[test]
    fn thousand_step_linear_is_monotone() {
        let s = NoiseSchedule::build(1000, 1e-4, 0.02, BetaKind::Linear).unwrap();
        assert_eq!(s.num_steps(), 1000);
        assert_relative_eq!(s.beta(1), 1e-4);
        assert_relative_eq!(s.beta(1000), 0.02);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for t in 2..=1000 {
            assert_eq!(s.alpha_bar(t), s.alpha(t) * s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn scaled_linear_endpoints() {
        let s = NoiseSchedule::build(10, 0.00085, 0.012, BetaKind::ScaledLinear).unwrap();
        assert_relative_eq!(s.beta(1), 0.00085, max_relative = 1e-12);
        assert_relative_eq!(s.beta(10), 0.012, max_relative = 1e-12);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(
            NoiseSchedule::build(0, 0.1, 0.2, BetaKind::Linear),
            Err(Error::Config(_))
        ));
        assert!(NoiseSchedule::build(5, 0.3, 0.2, BetaKind::Linear).is_err());
        assert!(NoiseSchedule::build(5, 0.0, 0.2, BetaKind::Linear).is_err());
        assert!(NoiseSchedule::build(5, 0.1, 1.0, BetaKind::Linear).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.2]).is_err());
    }

    #[test]
    fn forward_diffuse_closed_forms() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap(); // ab = .25
        let z = s.forward_diffuse(&[2.0, -4.0], 1, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(z[0], 1.0);
        assert_relative_eq!(z[1], -2.0);

        let s = NoiseSchedule::from_betas(vec![0.64]).unwrap(); // ab = .36
        let z = s.forward_diffuse(&[0.0, 0.0], 1, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(z[0], 0.8, max_relative = 1e-12);
        assert_eq!(z[1], 0.0);

        let s = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let z = s.forward_diffuse(&[0.3, 0.7], 1, &[1.0, -1.0]).unwrap();
        assert_relative_eq!(z[0], 0.3, epsilon = 1e-5);
        assert_relative_eq!(z[1], 0.7, epsilon = 1e-5);
    }

    #[test]
    fn forward_diffuse_index_errors() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            s.forward_diffuse(&[0.0], 0, &[0.0]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            s.forward_diffuse(&[0.0], 3, &[0.0]),
            Err(Error::Index(_))
        ));
        assert!(matches!(
            s.forward_diffuse(&[0.0], 1, &[0.0, 1.0]),
            Err(Error::Shape(_))
        ));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn alpha_bar_decreases_and_chain_factor_is_positive(
            steps in 1usize..400,
            start in 1e-5f64..0.05,
            span in 0.0f64..0.5,
            scaled in any::<bool>(),
        ) {
            let kind = if scaled { BetaKind::ScaledLinear } else { BetaKind::Linear };
            let s = NoiseSchedule::build(steps, start, start + span, kind).unwrap();
            prop_assert_eq!(s.alpha_bar(0), 1.0);
            for t in 1..=steps {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                prop_assert!(s.alpha_bar(t) > 0.0);
                let a = s.chain_factor(t);
                prop_assert!(a.is_finite() && a > 0.0);
            }
        }
    }
}
