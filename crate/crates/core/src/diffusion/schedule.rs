//! Cosine noise schedule over T diffusion steps.

use crate::{CoreError, Result};

/// beta/alpha/alpha_bar arrays, 1-indexed by diffusion step; by convention
/// `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.t_max, "step {k} outside 1..={}", self.t_max);
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.t_max, "step {k} outside 1..={}", self.t_max);
        self.alphas[k - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        assert!(k <= self.t_max, "step {k} outside 0..={}", self.t_max);
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Rebuild from stored betas (checkpoint loading).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(CoreError::config("schedule needs at least 2 steps"));
        }
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(CoreError::config("betas must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { t_max: betas.len(), betas, alphas, alpha_bars })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Cosine schedule: `alpha_bar(k) = f(k)/f(0)` with
/// `f(k) = cos^2(((k/T + s)/(1 + s)) * pi/2)`, betas clipped at `beta_max`
/// and alpha_bar recomputed from the clipped betas for self-consistency.
pub fn build_cosine_schedule(t_max: usize, s: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(CoreError::config("cosine schedule needs T >= 2"));
    }
    let f = |k: f64| {
        let arg = ((k / t_max as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        arg.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut betas = Vec::with_capacity(t_max);
    let mut prev_bar = 1.0;
    for k in 1..=t_max {
        let bar = f(k as f64) / f0;
        let beta = (1.0 - bar / prev_bar).min(beta_max);
        betas.push(beta);
        prev_bar = bar;
    }
    NoiseSchedule::from_betas(betas)
}

/// Schedule with the default offset 0.008 and clip 0.999.
pub fn cosine_schedule(t_max: usize) -> Result<NoiseSchedule> {
    build_cosine_schedule(t_max, 0.008, 0.999)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_strictly_decreasing_and_below_one() {
        let s = cosine_schedule(20).unwrap();
        assert!(s.alpha_bar(1) < 1.0);
        for k in 1..=20 {
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1), "k={k}");
            assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
        }
    }

    #[test]
    fn beta_identity_holds_after_construction() {
        let s = cosine_schedule(50).unwrap();
        for k in 1..=50 {
            let lhs = s.beta(k);
            let rhs = 1.0 - s.alpha_bar(k) / s.alpha_bar(k - 1);
            assert!((lhs - rhs).abs() < 1e-12, "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn terminal_alpha_bar_is_small() {
        let s = cosine_schedule(20).unwrap();
        assert!(
            s.alpha_bar(20) < 0.01,
            "alpha_bar(T) = {}",
            s.alpha_bar(20)
        );
    }

    #[test]
    fn too_short_schedule_is_an_error() {
        assert!(cosine_schedule(1).is_err());
    }
}
