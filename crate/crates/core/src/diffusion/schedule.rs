use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        linear_schedule(self.train_steps, self.beta_start, self.beta_end)
    }
}

/// Immutable schedule tables, kept in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the derived tables from `beta`, which must lie in `(0, 1)` and
    /// be non-decreasing.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Input("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Input(format!("beta {b} outside (0, 1)")));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Input("beta must be non-decreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        // Posterior std; the first step has no predecessor and uses beta_1.
        let sigma = (0..beta.len())
            .map(|i| {
                if i == 0 {
                    beta[0].sqrt()
                } else {
                    ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
                }
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    /// `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Input(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// `[beta, alpha, alpha_bar, sigma]` as f32 tensors of length `T`.
    pub fn tables(&self) -> [Tensor; 4] {
        let t = |v: &[f64]| Tensor::from_parts(vec![v.len()], v.iter().map(|&x| x as f32).collect());
        [t(&self.beta), t(&self.alpha), t(&self.alpha_bar), t(&self.sigma)]
    }
}

/// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Input(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    if steps == 0 {
        return Err(Error::Input("schedule needs at least one step".into()));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// Uniformly spaced `(t, t_prev)` pairs from high to low noise. Step `k`
/// (1-based) uses `t = floor(T·(S-k+1)/S)`; the final step lands on 0.
pub fn sampling_plan(train_steps: usize, steps: usize) -> Result<Vec<(usize, usize)>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Input(format!(
            "sampler steps {steps} must be in 1..={train_steps}"
        )));
    }
    let ts: Vec<usize> = (0..steps).map(|k| train_steps * (steps - k) / steps).collect();
    Ok(ts
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, ts.get(k + 1).copied().unwrap_or(0)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = linear_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.81).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.sigma(1) - 0.1f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identities_hold_on_default() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 2e-2).abs() < 1e-15);
        let [beta, alpha, abar, sigma] = s.tables();
        let mut prod = 1.0f64;
        for i in 0..1000 {
            assert!((alpha.data()[i] - (1.0 - beta.data()[i])).abs() < 1e-6);
            prod *= 1.0 - s.beta(i + 1);
            assert!((abar.data()[i] as f64 - prod).abs() < 1e-6);
            if i > 0 {
                let want = (1.0 - s.alpha_bar(i)) / (1.0 - s.alpha_bar(i + 1)) * s.beta(i + 1);
                assert!(((sigma.data()[i] as f64).powi(2) - want).abs() < 1e-6);
                assert!(s.alpha_bar(i + 1) < s.alpha_bar(i));
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(linear_schedule(10, 0.0, 0.1).is_err());
        assert!(linear_schedule(10, 0.2, 0.1).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn plan_endpoints() {
        let p = sampling_plan(1000, 50).unwrap();
        assert_eq!(p.len(), 50);
        assert_eq!(p[0], (1000, 980));
        assert_eq!(p[49], (20, 0));
        let p = sampling_plan(1000, 16).unwrap();
        assert_eq!(p[0].0, 1000);
        assert_eq!(p[15].1, 0);
        assert!(p.iter().all(|(t, tp)| tp < t));
        assert_eq!(sampling_plan(4, 4).unwrap(), vec![(4, 3), (3, 2), (2, 1), (1, 0)]);
        assert!(sampling_plan(10, 11).is_err());
    }
}
