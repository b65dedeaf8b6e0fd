//! Denoiser training: sample a segment batch, noise it at a uniform step,
//! regress the clean segment under squared error, EMA the parameters.

use super::denoiser::{DenoiserArch, DenoiserModel};
use super::schedule::NoiseSchedule;
use crate::autodiff::{adam_step, backward, ema_update, forward, AdamConfig, AdamState, RngStream, Tensor};
use crate::env::segment::TrajectorySegment;
use crate::{CoreError, Result};

/// `sqrt(alpha_bar_k) * tau0 + sqrt(1 - alpha_bar_k) * eps`, elementwise.
pub fn forward_noise(
    schedule: &NoiseSchedule,
    tau0: &Tensor,
    k: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    if k < 1 || k > schedule.t_max() {
        return Err(CoreError::usage(format!(
            "forward_noise: step {k} outside 1..={}",
            schedule.t_max()
        )));
    }
    if tau0.shape() != eps.shape() {
        return Err(CoreError::shape(format!(
            "forward_noise: tau0 {:?} vs eps {:?}",
            tau0.shape(),
            eps.shape()
        )));
    }
    let bar = schedule.alpha_bar(k);
    let (c0, c1) = (bar.sqrt(), (1.0 - bar).sqrt());
    let values = tau0
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&x, &e)| c0 * x + c1 * e)
        .collect();
    Tensor::new(tau0.shape().to_vec(), values)
}

/// Denoiser-to-score conversion: `-(tau_k - sqrt(alpha_bar_k) tau0_hat) / (1 - alpha_bar_k)`.
pub fn score_from_denoiser(
    schedule: &NoiseSchedule,
    tau_k: &Tensor,
    tau0_hat: &Tensor,
    k: usize,
) -> Result<Tensor> {
    if k < 1 || k > schedule.t_max() {
        return Err(CoreError::usage(format!(
            "score_from_denoiser: step {k} outside 1..={}",
            schedule.t_max()
        )));
    }
    let bar = schedule.alpha_bar(k);
    if bar >= 1.0 {
        return Err(CoreError::usage("score_from_denoiser: alpha_bar = 1 divides by zero"));
    }
    if tau_k.shape() != tau0_hat.shape() {
        return Err(CoreError::shape("score_from_denoiser: shape mismatch"));
    }
    let root = bar.sqrt();
    let denom = 1.0 - bar;
    let values = tau_k
        .values()
        .iter()
        .zip(tau0_hat.values())
        .map(|(&xk, &x0)| -(xk - root * x0) / denom)
        .collect();
    Tensor::new(tau_k.shape().to_vec(), values)
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub arch: DenoiserArch,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Cosine-anneal the learning rate to zero over the step budget.
    pub cosine_lr: bool,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            arch: DenoiserArch::default(),
            steps: 50_000,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 1e-5,
            ema_decay: 0.9999,
            cosine_lr: true,
            seed: 0,
        }
    }
}

/// Train a denoiser on source segments. Returns the model and the per-step
/// loss history.
pub fn train_denoiser(
    segments: &[TrajectorySegment],
    schedule: &NoiseSchedule,
    config: &DiffusionTrainConfig,
) -> Result<(DenoiserModel, Vec<f64>)> {
    if segments.is_empty() {
        return Err(CoreError::empty("train_denoiser: no segments"));
    }
    let h = segments[0].horizon();
    let c = segments[0].row_dim();
    let mut rng = RngStream::new(config.seed, 0xD1FF);
    let mut model = DenoiserModel::new(config.arch.clone(), h, c, config.ema_decay, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(config.steps);
    let t_max = schedule.t_max();
    let bs = config.batch_size.min(segments.len());

    for step in 0..config.steps {
        if config.cosine_lr {
            let frac = step as f64 / config.steps as f64;
            adam.config.lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let mut batch = Vec::with_capacity(bs * h * c);
        for _ in 0..bs {
            let idx = rng.uniform_index(segments.len());
            batch.extend_from_slice(segments[idx].values());
        }
        let tau0 = Tensor::new(vec![bs, h, c], batch)?;
        let k = rng.uniform_index(t_max) + 1;
        let eps = Tensor::new(vec![bs, h, c], rng.normal_vec(bs * h * c))?;
        let tau_k = forward_noise(schedule, &tau0, k, &eps)?;
        let k_t = Tensor::filled(vec![bs], k as f64);

        let graph = model.train_graph().clone();
        let eval = forward(
            &graph,
            &model.params,
            &[("tau", &tau_k), ("k", &k_t), ("target", &tau0)],
        )?;
        history.push(eval.output(&graph, "loss")?.item()?);
        let grads = backward(&graph, &eval, "loss", None)?;
        adam_step(&mut model.params, &grads.params, &mut adam)?;
        // Ramped decay: without it the shadow would still carry a visible
        // share of the random init after short desk-scale budgets.
        let effective = config.ema_decay.min((1 + step) as f64 / (10 + step) as f64);
        ema_update(&mut model.ema_params, &model.params, effective);
    }
    Ok((model, history))
}

pub fn smoothed(history: &[f64], window: usize) -> Vec<f64> {
    if history.is_empty() || window == 0 {
        return Vec::new();
    }
    history
        .windows(window.min(history.len()))
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::cosine_schedule;

    fn constant_segment(h: usize, c: usize, fill: &[f64]) -> TrajectorySegment {
        let mut data = Vec::with_capacity(h * c);
        for _ in 0..h {
            data.extend_from_slice(fill);
        }
        TrajectorySegment::new(data, h, c - 2, 2, 0, 0).unwrap()
    }

    #[test]
    fn forward_noise_deterministic_limb() {
        let s = cosine_schedule(10).unwrap();
        let tau0 = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0]).unwrap();
        let eps = Tensor::zeros(vec![1, 2, 3]);
        let k = 4;
        let out = forward_noise(&s, &tau0, k, &eps).unwrap();
        let c0 = s.alpha_bar(k).sqrt();
        for (o, x) in out.values().iter().zip(tau0.values()) {
            assert!((o - c0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_noise_moments() {
        let s = cosine_schedule(20).unwrap();
        let tau0 = Tensor::new(vec![1, 1, 1], vec![0.7]).unwrap();
        let mut rng = RngStream::new(4, 0);
        for k in [1usize, 10, 20] {
            let n = 100_000;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let eps = Tensor::new(vec![1, 1, 1], vec![rng.normal()]).unwrap();
                let v = forward_noise(&s, &tau0, k, &eps).unwrap().values()[0];
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / n as f64;
            let std = (sum_sq / n as f64 - mean * mean).sqrt();
            let want_mean = s.alpha_bar(k).sqrt() * 0.7;
            let want_std = (1.0 - s.alpha_bar(k)).sqrt();
            assert!(
                (mean - want_mean).abs() <= 0.01 * want_mean.abs().max(want_std),
                "k={k}: mean {mean} vs {want_mean}"
            );
            assert!(
                (std - want_std).abs() <= 0.01 * want_std,
                "k={k}: std {std} vs {want_std}"
            );
        }
    }

    #[test]
    fn score_is_zero_at_consistency_point() {
        let s = cosine_schedule(10).unwrap();
        let k = 5;
        let tau_k = Tensor::new(vec![1, 1, 2], vec![0.4, -1.3]).unwrap();
        let tau0 = tau_k.map(|v| v / s.alpha_bar(k).sqrt());
        let score = score_from_denoiser(&s, &tau_k, &tau0, k).unwrap();
        for v in score.values() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn score_scalar_hand_case() {
        // alpha_bar = 0.5 at some step of a custom schedule: construct directly.
        let s = NoiseSchedule::from_betas(vec![0.5, 0.2]).unwrap();
        assert!((s.alpha_bar(1) - 0.5).abs() < 1e-15);
        let tau_k = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let tau0 = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let score = score_from_denoiser(&s, &tau_k, &tau0, 1).unwrap();
        assert!((score.values()[0] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn score_linear_in_prediction() {
        let s = cosine_schedule(10).unwrap();
        let k = 7;
        let tau_k = Tensor::new(vec![1, 1, 2], vec![0.3, -0.9]).unwrap();
        let a = Tensor::new(vec![1, 1, 2], vec![0.5, 1.5]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![-1.0, 0.25]).unwrap();
        let sa = score_from_denoiser(&s, &tau_k, &a, k).unwrap();
        let sb = score_from_denoiser(&s, &tau_k, &b, k).unwrap();
        let mid = Tensor::new(
            vec![1, 1, 2],
            a.values().iter().zip(b.values()).map(|(&x, &y)| 0.5 * (x + y)).collect::<Vec<_>>(),
        )
        .unwrap();
        let smid = score_from_denoiser(&s, &tau_k, &mid, k).unwrap();
        for i in 0..2 {
            let lin = 0.5 * (sa.values()[i] + sb.values()[i]);
            assert!((smid.values()[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_gaussian_denoiser_recovers_marginal_score() {
        // Data ~ N(0,1): optimal prediction is sqrt(alpha_bar)*tau_k, and the
        // resulting score must equal -tau_k exactly.
        let s = cosine_schedule(10).unwrap();
        for k in [1usize, 5, 10] {
            let tau_k = Tensor::new(vec![1, 1, 1], vec![0.37]).unwrap();
            let tau0 = tau_k.map(|v| s.alpha_bar(k).sqrt() * v);
            let score = score_from_denoiser(&s, &tau_k, &tau0, k).unwrap();
            assert!((score.values()[0] - (-0.37)).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn memorizes_a_single_repeated_segment() {
        let seg = constant_segment(4, 6, &[0.3, -0.2, 0.8, 0.1, -0.5, 0.9]);
        let segments = vec![seg; 8];
        let schedule = cosine_schedule(10).unwrap();
        let config = DiffusionTrainConfig {
            arch: DenoiserArch::Dense { hidden: 64 },
            steps: 4000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            ema_decay: 0.99,
            cosine_lr: false,
            seed: 7,
        };
        let (_, history) = train_denoiser(&segments, &schedule, &config).unwrap();
        let initial = history[..20].iter().sum::<f64>() / 20.0;
        let last = history[history.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(
            last < 1e-3 * initial,
            "loss did not memorize: start {initial}, end {last}"
        );
    }

    #[test]
    fn ema_decay_zero_tracks_parameters() {
        let seg = constant_segment(4, 6, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let schedule = cosine_schedule(10).unwrap();
        let config = DiffusionTrainConfig {
            arch: DenoiserArch::Dense { hidden: 8 },
            steps: 5,
            batch_size: 2,
            ema_decay: 0.0,
            cosine_lr: false,
            seed: 1,
            ..DiffusionTrainConfig::default()
        };
        let (model, _) = train_denoiser(&[seg], &schedule, &config).unwrap();
        assert_eq!(model.params, model.ema_params);
    }

    #[test]
    fn training_reduces_smoothed_loss_on_pointmass_segments() {
        use crate::env::{collect_dataset, extract_segments, BehaviorPolicy, Domain, EnvParams, Normalizer};
        let params = EnvParams::default();
        let data = collect_dataset(&params, BehaviorPolicy::MediumPd, 2000, Domain::Source, 5)
            .unwrap();
        let norm = Normalizer::fit(&data).unwrap();
        let segments = extract_segments(&data, &norm, 8).unwrap();
        let schedule = cosine_schedule(20).unwrap();
        let config = DiffusionTrainConfig {
            arch: DenoiserArch::Dense { hidden: 64 },
            steps: 800,
            batch_size: 32,
            cosine_lr: false,
            seed: 3,
            ..DiffusionTrainConfig::default()
        };
        let (_, history) = train_denoiser(&segments, &schedule, &config).unwrap();
        let sm = smoothed(&history, 100);
        assert!(
            sm.last().unwrap() < sm.first().unwrap(),
            "smoothed loss did not decrease: {} -> {}",
            sm.first().unwrap(),
            sm.last().unwrap()
        );
    }

    #[test]
    fn heavy_noise_prediction_approaches_data_mean() {
        // Segments drawn from N(mu, 0.25 I); at k = T the optimal prediction
        // is approximately the data mean.
        let mut rng = RngStream::new(9, 0);
        let (h, c) = (2, 3);
        let mu = [0.8, -0.6, 0.5];
        let segments: Vec<TrajectorySegment> = (0..512)
            .map(|i| {
                let mut data = Vec::with_capacity(h * c);
                for _ in 0..h {
                    for &m in &mu {
                        data.push(m + 0.4 * rng.normal());
                    }
                }
                TrajectorySegment::new(data, h, 1, 2, i, 0).unwrap()
            })
            .collect();
        let schedule = cosine_schedule(8).unwrap();
        let config = DiffusionTrainConfig {
            arch: DenoiserArch::Dense { hidden: 96 },
            steps: 6000,
            batch_size: 64,
            lr: 1.5e-3,
            weight_decay: 0.0,
            cosine_lr: true,
            seed: 2,
            ..DiffusionTrainConfig::default()
        };
        let (model, _) = train_denoiser(&segments, &schedule, &config).unwrap();
        let t = schedule.t_max();
        let n = 1000;
        let noise = Tensor::new(vec![n, h, c], rng.normal_vec(n * h * c)).unwrap();
        let pred = model.predict(&noise, t, true).unwrap();
        // Average prediction per column over samples and rows.
        let mut avg = vec![0.0; c];
        for b in 0..n {
            for t_i in 0..h {
                for ci in 0..c {
                    avg[ci] += pred.values()[(b * h + t_i) * c + ci];
                }
            }
        }
        for v in avg.iter_mut() {
            *v /= (n * h) as f64;
        }
        for (ci, (&got, &want)) in avg.iter().zip(&mu).enumerate() {
            let rel = (got - want).abs() / want.abs();
            assert!(rel < 0.10, "column {ci}: {got} vs {want} (rel {rel})");
        }
    }
}
