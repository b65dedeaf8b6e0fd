//! Energy-guided reverse diffusion (DDPM ancestral sampling plus a weighted
//! energy-gradient term). With zero guidance weights the chain reduces
//! exactly to plain DDPM. Optional current-state conditioning overwrites the
//! first state block at initialization and after every reverse step.

use crate::autodiff::{RngStream, Tensor};
use crate::diffusion::{score_from_denoiser, DenoiserModel, NoiseSchedule};
use crate::energy::{weighted_energy_gradient, EnergyBundle};
use crate::env::segment::TrajectorySegment;
use crate::{CoreError, Result};

/// Anything that predicts the clean trajectory batch from a noisy one.
pub trait CleanPredictor {
    fn predict_clean(&self, tau_k: &Tensor, k: usize) -> Result<Tensor>;
}

/// The trained denoiser samples with its EMA parameters.
impl CleanPredictor for DenoiserModel {
    fn predict_clean(&self, tau_k: &Tensor, k: usize) -> Result<Tensor> {
        self.predict(tau_k, k, true)
    }
}

/// Anything that produces the guidance score `h` for a noisy batch.
pub trait GuidanceSource {
    fn guidance(&self, tau_k: &Tensor, k: usize) -> Result<Tensor>;
}

impl GuidanceSource for EnergyBundle {
    fn guidance(&self, tau_k: &Tensor, k: usize) -> Result<Tensor> {
        weighted_energy_gradient(self, tau_k, k)
    }
}

/// Per-step guidance scale.
#[derive(Debug, Clone, PartialEq)]
pub enum RhoSchedule {
    Constant(f64),
    PerStep(Vec<f64>),
    /// `scale * sqrt(abar_k)`: guidance tracks the signal level, so the
    /// noisiest steps (whose energy gradients are least informative) get the
    /// least weight. Equals the exact unit-variance tilted-Gaussian scale
    /// when `scale` is 1.
    SignalScaled { scale: f64 },
    /// Exact scale for a linear energy over a Gaussian prior with data
    /// variance `v0`: `sqrt(abar_k) v0 / (abar_k v0 + 1 - abar_k)`.
    TiltedGaussianExact { v0: f64 },
}

impl RhoSchedule {
    pub fn value(&self, schedule: &NoiseSchedule, k: usize) -> f64 {
        match self {
            RhoSchedule::Constant(r) => *r,
            RhoSchedule::PerStep(rs) => rs[k - 1],
            RhoSchedule::SignalScaled { scale } => scale * schedule.alpha_bar(k).sqrt(),
            RhoSchedule::TiltedGaussianExact { v0 } => {
                let bar = schedule.alpha_bar(k);
                bar.sqrt() * v0 / (bar * v0 + 1.0 - bar)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub rho: RhoSchedule,
    pub temperature: f64,
    pub n_samples: usize,
    pub master_seed: u64,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(CoreError::config("sampler: temperature must be finite and >= 0"));
        }
        if self.n_samples == 0 {
            return Err(CoreError::config("sampler: need at least one sample"));
        }
        if let RhoSchedule::PerStep(rs) = &self.rho {
            if rs.len() != self.schedule.t_max() {
                return Err(CoreError::config("sampler: per-step rho length != T"));
            }
            if rs.iter().any(|r| !r.is_finite() || *r < 0.0) {
                return Err(CoreError::config("sampler: rho must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn row_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }
}

/// Optional conditioning on the current (normalized) state.
#[derive(Debug, Clone, Default)]
pub struct ConditionSpec {
    pub s_cur: Option<Vec<f64>>,
}

impl ConditionSpec {
    pub fn none() -> Self {
        ConditionSpec { s_cur: None }
    }

    pub fn on_state(s_cur: Vec<f64>) -> Self {
        ConditionSpec { s_cur: Some(s_cur) }
    }
}

/// Overwrite only the first `d_s` entries of row 0; every other entry is
/// preserved bitwise. Pure segment-level form of the conditioning op.
pub fn apply_state_conditioning(
    segment: &TrajectorySegment,
    s_cur: &[f64],
) -> Result<TrajectorySegment> {
    if s_cur.len() != segment.state_dim() {
        return Err(CoreError::shape(format!(
            "conditioning: s_cur has {} entries, state dim is {}",
            s_cur.len(),
            segment.state_dim()
        )));
    }
    let mut out = segment.clone();
    out.values_mut()[..s_cur.len()].copy_from_slice(s_cur);
    Ok(out)
}

fn condition_batch(taus: &mut Tensor, s_cur: &[f64], h: usize, c: usize) {
    let n = taus.shape()[0];
    let v = taus.values_mut();
    for ni in 0..n {
        v[ni * h * c..ni * h * c + s_cur.len()].copy_from_slice(s_cur);
    }
}

/// One guided reverse step for a batch; `rngs[i]` drives sample i's noise.
pub fn reverse_step_batch(
    predictor: &dyn CleanPredictor,
    guidance: Option<&dyn GuidanceSource>,
    config: &SamplerConfig,
    tau_k: &Tensor,
    k: usize,
    rngs: &mut [RngStream],
) -> Result<Tensor> {
    let schedule = &config.schedule;
    if k < 1 || k > schedule.t_max() {
        return Err(CoreError::usage(format!(
            "reverse step {k} outside 1..={}",
            schedule.t_max()
        )));
    }
    let tau0_hat = predictor.predict_clean(tau_k, k)?;
    let score = score_from_denoiser(schedule, tau_k, &tau0_hat, k)?;
    let rho = config.rho.value(schedule, k);
    let guided_score = match guidance {
        Some(g) => {
            let h = g.guidance(tau_k, k)?;
            if h.shape() != score.shape() {
                return Err(CoreError::shape("guidance shape mismatch"));
            }
            let v = score
                .values()
                .iter()
                .zip(h.values())
                .map(|(&s, &hv)| s + rho * hv)
                .collect();
            Tensor::new(score.shape().to_vec(), v)?
        }
        None => score,
    };

    let beta = schedule.beta(k);
    let alpha_sqrt = schedule.alpha(k).sqrt();
    let mut next: Vec<f64> = tau_k
        .values()
        .iter()
        .zip(guided_score.values())
        .map(|(&x, &s)| (x + beta * s) / alpha_sqrt)
        .collect();

    // Posterior variance, temperature-scaled; zero at the final step because
    // alpha_bar(0) = 1.
    if k > 1 && config.temperature > 0.0 {
        let beta_tilde =
            (1.0 - schedule.alpha_bar(k - 1)) / (1.0 - schedule.alpha_bar(k)) * beta;
        let sigma = config.temperature * beta_tilde.sqrt();
        let (n, per) = (tau_k.shape()[0], tau_k.len() / tau_k.shape()[0]);
        debug_assert_eq!(rngs.len(), n);
        for (ni, rng) in rngs.iter_mut().enumerate() {
            for j in 0..per {
                next[ni * per + j] += sigma * rng.normal();
            }
        }
    }
    Tensor::new(tau_k.shape().to_vec(), next)
}

/// Single-chain reverse step ([1, H, C] in, [1, H, C] out).
pub fn guided_reverse_step(
    predictor: &dyn CleanPredictor,
    guidance: Option<&dyn GuidanceSource>,
    config: &SamplerConfig,
    tau_k: &Tensor,
    k: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    reverse_step_batch(predictor, guidance, config, tau_k, k, std::slice::from_mut(rng))
}

/// Full N-chain reverse diffusion from Gaussian noise. Per-sample streams are
/// `(master_seed, sample_index)`, so parallel and serial scheduling produce
/// the same set. `trace` receives the batch after every step (post
/// conditioning), outermost step first.
pub fn sample_batch_traced(
    predictor: &dyn CleanPredictor,
    guidance: Option<&dyn GuidanceSource>,
    config: &SamplerConfig,
    condition: &ConditionSpec,
    mut trace: Option<&mut Vec<(usize, Tensor)>>,
) -> Result<Tensor> {
    config.validate()?;
    let (n, h, c) = (config.n_samples, config.horizon, config.row_dim());
    if let Some(s_cur) = &condition.s_cur {
        if s_cur.len() != config.state_dim {
            return Err(CoreError::shape(format!(
                "conditioning: s_cur has {} entries, state dim is {}",
                s_cur.len(),
                config.state_dim
            )));
        }
    }
    let mut rngs: Vec<RngStream> = (0..n)
        .map(|i| RngStream::new(config.master_seed, i as u64))
        .collect();

    let mut values = Vec::with_capacity(n * h * c);
    for rng in rngs.iter_mut() {
        values.extend(rng.normal_vec(h * c));
    }
    let mut tau = Tensor::new(vec![n, h, c], values)?;
    if let Some(s_cur) = &condition.s_cur {
        condition_batch(&mut tau, s_cur, h, c);
    }

    for k in (1..=config.schedule.t_max()).rev() {
        tau = reverse_step_batch(predictor, guidance, config, &tau, k, &mut rngs)?;
        if let Some(s_cur) = &condition.s_cur {
            condition_batch(&mut tau, s_cur, h, c);
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push((k, tau.clone()));
        }
    }
    Ok(tau)
}

/// Reverse diffusion returning segments ordered by sample index.
pub fn sample_trajectories(
    predictor: &dyn CleanPredictor,
    guidance: Option<&dyn GuidanceSource>,
    config: &SamplerConfig,
    condition: &ConditionSpec,
) -> Result<Vec<TrajectorySegment>> {
    let tau = sample_batch_traced(predictor, guidance, config, condition, None)?;
    batch_to_segments(&tau, config.state_dim, config.action_dim)
}

pub fn batch_to_segments(
    tau: &Tensor,
    state_dim: usize,
    action_dim: usize,
) -> Result<Vec<TrajectorySegment>> {
    let (n, h, c) = (tau.shape()[0], tau.shape()[1], tau.shape()[2]);
    if c != state_dim + action_dim {
        return Err(CoreError::shape("batch_to_segments: row dim mismatch"));
    }
    (0..n)
        .map(|ni| {
            TrajectorySegment::new(
                tau.values()[ni * h * c..(ni + 1) * h * c].to_vec(),
                h,
                state_dim,
                action_dim,
                ni,
                0,
            )
        })
        .collect()
}

/// Analytic clean-predictor for a unit-Gaussian prior: the optimal
/// prediction is `sqrt(alpha_bar_k) * tau_k`. Test oracle stand-in.
pub struct UnitGaussianPredictor {
    pub schedule: NoiseSchedule,
}

impl CleanPredictor for UnitGaussianPredictor {
    fn predict_clean(&self, tau_k: &Tensor, k: usize) -> Result<Tensor> {
        let root = self.schedule.alpha_bar(k).sqrt();
        Ok(tau_k.map(|v| root * v))
    }
}

/// Constant-slope linear energy: `h = -slope` everywhere. Test oracle
/// stand-in for the tilted-Gaussian checks.
pub struct LinearEnergy {
    pub slope: f64,
}

impl GuidanceSource for LinearEnergy {
    fn guidance(&self, tau_k: &Tensor, _k: usize) -> Result<Tensor> {
        Ok(Tensor::filled(tau_k.shape().to_vec(), -self.slope))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::cosine_schedule;

    fn scalar_config(t: usize, n: usize, seed: u64, temperature: f64) -> SamplerConfig {
        SamplerConfig {
            schedule: cosine_schedule(t).unwrap(),
            rho: RhoSchedule::Constant(1.0),
            temperature,
            n_samples: n,
            master_seed: seed,
            horizon: 1,
            state_dim: 1,
            action_dim: 0,
        }
    }

    #[test]
    fn hand_checked_reverse_mean() {
        // tau_k = 1, tau0_hat = 0, abar_k = 0.5, abar_{k-1} = 0.8:
        // beta = 0.375, alpha = 0.625, score = -2, mean = 0.25/sqrt(0.625).
        let schedule = NoiseSchedule::from_betas(vec![0.2, 0.375]).unwrap();
        assert!((schedule.alpha_bar(1) - 0.8).abs() < 1e-15);
        assert!((schedule.alpha_bar(2) - 0.5).abs() < 1e-15);
        struct Zero;
        impl CleanPredictor for Zero {
            fn predict_clean(&self, tau_k: &Tensor, _k: usize) -> Result<Tensor> {
                Ok(Tensor::zeros(tau_k.shape().to_vec()))
            }
        }
        let config = SamplerConfig {
            schedule,
            rho: RhoSchedule::Constant(1.0),
            temperature: 0.0,
            n_samples: 1,
            master_seed: 0,
            horizon: 1,
            state_dim: 1,
            action_dim: 0,
        };
        let tau_k = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let mut rng = RngStream::new(0, 0);
        let out = guided_reverse_step(&Zero, None, &config, &tau_k, 2, &mut rng).unwrap();
        let want = 0.25 / 0.625f64.sqrt();
        assert!((out.values()[0] - want).abs() < 1e-12, "{}", out.values()[0]);
    }

    #[test]
    fn temperature_zero_is_deterministic() {
        let config = scalar_config(10, 4, 3, 0.0);
        let pred = UnitGaussianPredictor { schedule: config.schedule.clone() };
        let a = sample_batch_traced(&pred, None, &config, &ConditionSpec::none(), None).unwrap();
        let b = sample_batch_traced(&pred, None, &config, &ConditionSpec::none(), None).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn same_seed_same_samples() {
        let config = scalar_config(10, 8, 11, 1.0);
        let pred = UnitGaussianPredictor { schedule: config.schedule.clone() };
        let a = sample_batch_traced(&pred, None, &config, &ConditionSpec::none(), None).unwrap();
        let b = sample_batch_traced(&pred, None, &config, &ConditionSpec::none(), None).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn sample_count_and_shape() {
        let mut config = scalar_config(5, 3, 1, 0.5);
        config.horizon = 4;
        config.state_dim = 4;
        config.action_dim = 2;
        let pred = UnitGaussianPredictor { schedule: config.schedule.clone() };
        let segs = sample_trajectories(&pred, None, &config, &ConditionSpec::none()).unwrap();
        assert_eq!(segs.len(), 3);
        for s in &segs {
            assert_eq!(s.horizon(), 4);
            assert_eq!(s.row_dim(), 6);
        }
    }

    #[test]
    fn conditioning_is_idempotent_and_touches_only_first_state() {
        let seg =
            TrajectorySegment::new((0..12).map(|i| i as f64).collect(), 2, 4, 2, 0, 0).unwrap();
        let s_cur = vec![9.0, 8.0, 7.0, 6.0];
        let once = apply_state_conditioning(&seg, &s_cur).unwrap();
        let twice = apply_state_conditioning(&once, &s_cur).unwrap();
        assert_eq!(once, twice);
        assert_eq!(&once.values()[..4], s_cur.as_slice());
        // Action entries of row 0 and all of row 1 untouched.
        assert_eq!(&once.values()[4..], &seg.values()[4..]);
        // Conditioning with the existing first state is a no-op.
        let same = apply_state_conditioning(&seg, &seg.values()[..4].to_vec()).unwrap();
        assert_eq!(same, seg);
    }

    #[test]
    fn conditioned_sampling_pins_first_state_at_every_step() {
        let mut config = scalar_config(8, 5, 21, 1.0);
        config.horizon = 3;
        config.state_dim = 4;
        config.action_dim = 2;
        let pred = UnitGaussianPredictor { schedule: config.schedule.clone() };
        let s_cur = vec![0.25, -0.5, 1.5, 0.0];
        let mut trace = Vec::new();
        let out = sample_batch_traced(
            &pred,
            None,
            &config,
            &ConditionSpec::on_state(s_cur.clone()),
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(trace.len(), 8);
        let c = config.row_dim();
        let h = config.horizon;
        for (_, t) in &trace {
            for ni in 0..config.n_samples {
                let row0 = &t.values()[ni * h * c..ni * h * c + 4];
                for (a, b) in row0.iter().zip(&s_cur) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        for ni in 0..config.n_samples {
            let row0 = &out.values()[ni * h * c..ni * h * c + 4];
            for (a, b) in row0.iter().zip(&s_cur) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn guided_mean_is_linear_in_guidance() {
        // mean(h1 + h2) = mean(h1) + beta/sqrt(alpha) * rho * h2.
        let schedule = cosine_schedule(10).unwrap();
        let k = 6;
        let (beta, alpha) = (schedule.beta(k), schedule.alpha(k));
        let config = SamplerConfig {
            schedule: schedule.clone(),
            rho: RhoSchedule::Constant(0.8),
            temperature: 0.0,
            n_samples: 1,
            master_seed: 0,
            horizon: 1,
            state_dim: 1,
            action_dim: 0,
        };
        let pred = UnitGaussianPredictor { schedule: schedule.clone() };
        let tau_k = Tensor::new(vec![1, 1, 1], vec![0.6]).unwrap();
        let g1 = LinearEnergy { slope: 0.7 };
        let g12 = LinearEnergy { slope: 0.7 + 0.4 };
        let mut rng = RngStream::new(0, 0);
        let m1 = guided_reverse_step(&pred, Some(&g1), &config, &tau_k, k, &mut rng).unwrap();
        let m12 = guided_reverse_step(&pred, Some(&g12), &config, &tau_k, k, &mut rng).unwrap();
        let expected = m1.values()[0] + beta / alpha.sqrt() * 0.8 * (-0.4);
        assert!((m12.values()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn tilted_gaussian_oracle_small() {
        // Reduced-size version of the acceptance oracle: exact score, linear
        // energy slope 1, exact per-step scale; the tilted law is N(-1, 1).
        let t = 100;
        let config = SamplerConfig {
            schedule: cosine_schedule(t).unwrap(),
            rho: RhoSchedule::TiltedGaussianExact { v0: 1.0 },
            temperature: 1.0,
            n_samples: 20_000,
            master_seed: 33,
            horizon: 1,
            state_dim: 1,
            action_dim: 0,
        };
        let pred = UnitGaussianPredictor { schedule: config.schedule.clone() };
        let guide = LinearEnergy { slope: 1.0 };
        let out = sample_batch_traced(&pred, Some(&guide), &config, &ConditionSpec::none(), None)
            .unwrap();
        let n = out.len() as f64;
        let mean = out.values().iter().sum::<f64>() / n;
        let var = out.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((mean + 1.0).abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.07, "std {}", var.sqrt());
    }
}
