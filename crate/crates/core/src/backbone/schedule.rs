use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β forward-noising schedule over `train_steps` timesteps.
///
/// Timesteps are 1-based; `alpha_bar(0)` is 1 by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    betas: Vec<f64>,
    #[serde(skip)]
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps < 2 {
            return Err(Error::invalid("schedule needs at least two timesteps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid("betas must satisfy 0 < start <= end < 1"));
        }
        let mut s = Self {
            train_steps,
            beta_start,
            beta_end,
            betas: Vec::new(),
            alpha_bars: Vec::new(),
        };
        s.rebuild();
        Ok(s)
    }

    /// Recomputes the derived arrays (needed after deserialization).
    pub fn rebuild(&mut self) {
        let n = self.train_steps;
        self.betas = (0..n)
            .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        self.alpha_bars = Vec::with_capacity(n + 1);
        self.alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &self.betas {
            acc *= 1.0 - b;
            self.alpha_bars.push(acc);
        }
    }

    /// β_t for `t ∈ [1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Training timesteps visited by a `steps`-step sampler, noisiest first:
    /// element `τ−1` is the timestep of denoising step `τ`.
    pub fn sampler_timesteps(&self, steps: usize) -> Vec<usize> {
        let stride = (self.train_steps / steps).max(1);
        (1..=steps).map(|tau| (steps - tau) * stride + 1).collect()
    }

    /// `(t, t_prev)` for denoising step `τ` (1-based) of a `steps`-step run.
    pub fn step_pair(&self, steps: usize, tau: usize) -> (usize, usize) {
        let ts = self.sampler_timesteps(steps);
        let t = ts[tau - 1];
        let prev = if tau < steps { ts[tau] } else { 0 };
        (t, prev)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn sampler_strides() {
        let s = NoiseSchedule::default();
        let ts = s.sampler_timesteps(50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 981);
        assert_eq!(ts[49], 1);
        assert_eq!(s.step_pair(50, 1), (981, 961));
        assert_eq!(s.step_pair(50, 50), (1, 0));
    }

    #[test]
    fn rebuild_after_serde() {
        let s = NoiseSchedule::default();
        let mut back: NoiseSchedule = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        back.rebuild();
        assert_eq!(back.alpha_bar(500), s.alpha_bar(500));
    }
}
