//! Return predictor and the return energy `E2 = -J(tau)`.
//!
//! A temporal-convolution encoder (kernel 3, mean-pooled) with a linear head
//! regresses a segment's discounted return; a dense fallback is available.

use crate::autodiff::{
    adam_step, backward, forward, graph::Graph, graph::GraphBuilder, nets, AdamConfig, AdamState,
    ParamSet, RngStream, Tensor,
};
use crate::env::segment::TrajectorySegment;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ReturnArch {
    /// Conv(kernel) -> relu -> Conv(kernel) -> relu -> mean pool -> linear.
    Conv { channels: usize, kernel: usize },
    Dense { hidden: usize },
}

impl Default for ReturnArch {
    fn default() -> Self {
        ReturnArch::Conv { channels: 32, kernel: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct ReturnPredictor {
    pub arch: ReturnArch,
    pub gamma: f64,
    pub horizon: usize,
    pub row_dim: usize,
    pub params: ParamSet,
    value_graph: Graph,
    train_graph: Graph,
}

impl ReturnPredictor {
    pub fn new(
        arch: ReturnArch,
        gamma: f64,
        horizon: usize,
        row_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(CoreError::config("return predictor: gamma must lie in (0,1)"));
        }
        let params = init_params(&arch, horizon, row_dim, rng)?;
        Ok(ReturnPredictor {
            value_graph: build_graph(&arch, horizon, row_dim, false),
            train_graph: build_graph(&arch, horizon, row_dim, true),
            arch,
            gamma,
            horizon,
            row_dim,
            params,
        })
    }

    pub fn from_params(
        arch: ReturnArch,
        gamma: f64,
        horizon: usize,
        row_dim: usize,
        params: ParamSet,
    ) -> Self {
        ReturnPredictor {
            value_graph: build_graph(&arch, horizon, row_dim, false),
            train_graph: build_graph(&arch, horizon, row_dim, true),
            arch,
            gamma,
            horizon,
            row_dim,
            params,
        }
    }

    pub fn train_graph(&self) -> &Graph {
        &self.train_graph
    }

    /// Predicted discounted returns for a batch [N, H, C].
    pub fn predict(&self, taus: &Tensor) -> Result<Vec<f64>> {
        let eval = forward(&self.value_graph, &self.params, &[("tau", taus)])?;
        Ok(eval.output(&self.value_graph, "j")?.values().to_vec())
    }

    /// Per-sample predicted returns plus the gradient of `sum_n J_n` with
    /// respect to the batch (per-sample rows are independent).
    pub fn predict_with_grad(&self, taus: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let eval = forward(&self.value_graph, &self.params, &[("tau", taus)])?;
        let j = eval.output(&self.value_graph, "j")?.values().to_vec();
        let seed = Tensor::filled(vec![j.len()], 1.0);
        let grads = backward(&self.value_graph, &eval, "j", Some(&seed))?;
        let g = grads.inputs.get("tau").cloned().expect("value graph has input tau");
        Ok((j, g))
    }
}

fn init_params(arch: &ReturnArch, horizon: usize, row_dim: usize, rng: &mut RngStream) -> Result<ParamSet> {
    match arch {
        ReturnArch::Conv { channels, kernel } => {
            let mut p = nets::init_conv("ret.conv", 0, *channels, row_dim, *kernel, rng);
            p.merge(nets::init_conv("ret.conv", 1, *channels, *channels, *kernel, rng))?;
            p.merge(nets::init_mlp("ret.head", &[*channels, 1], rng))?;
            Ok(p)
        }
        ReturnArch::Dense { hidden } => Ok(nets::init_mlp(
            "ret.head",
            &[horizon * row_dim, *hidden, *hidden, 1],
            rng,
        )),
    }
}

fn build_graph(arch: &ReturnArch, _horizon: usize, _row_dim: usize, with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let tau = b.input("tau");
    let head_in = match arch {
        ReturnArch::Conv { .. } => {
            let h0 = nets::conv_layer(&mut b, "ret.conv", 0, tau);
            let h0 = b.relu(h0);
            let h1 = nets::conv_layer(&mut b, "ret.conv", 1, h0);
            let h1 = b.relu(h1);
            b.mean_time(h1)
        }
        ReturnArch::Dense { .. } => b.flatten(tau),
    };
    let layers = match arch {
        ReturnArch::Conv { .. } => 1,
        ReturnArch::Dense { .. } => 3,
    };
    let out = nets::mlp(&mut b, "ret.head", head_in, layers, nets::Activation::Relu);
    let j = b.squeeze(out);
    b.output("j", j);
    if with_loss {
        let target = b.input("target");
        let diff = b.sub(j, target);
        let sq = b.square(diff);
        let loss = b.mean(sq);
        b.output("loss", loss);
    }
    b.build()
}

/// Discounted return with segment-local time: `sum_t gamma^t r_t`, t = 0 at
/// the segment start.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for &r in rewards {
        total += disc * r;
        disc *= gamma;
    }
    total
}

#[derive(Debug, Clone)]
pub struct ReturnTrainConfig {
    pub arch: ReturnArch,
    pub gamma: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ReturnTrainConfig {
    fn default() -> Self {
        ReturnTrainConfig {
            arch: ReturnArch::default(),
            gamma: 0.99,
            steps: 20_000,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Regress predicted returns onto discounted-return targets over segments of
/// the combined source and target data. `rewards[i]` aligns with
/// `segments[i]` rows.
pub fn train_return_predictor(
    segments: &[TrajectorySegment],
    rewards: &[Vec<f64>],
    config: &ReturnTrainConfig,
) -> Result<(ReturnPredictor, Vec<f64>)> {
    if segments.is_empty() {
        return Err(CoreError::empty("train_return_predictor: no segments"));
    }
    if segments.len() != rewards.len() {
        return Err(CoreError::shape("train_return_predictor: rewards misaligned"));
    }
    let h = segments[0].horizon();
    let c = segments[0].row_dim();
    let targets: Vec<f64> = rewards.iter().map(|r| discounted_return(r, config.gamma)).collect();

    let mut rng = RngStream::new(config.seed, 0x4E7);
    let mut model = ReturnPredictor::new(config.arch.clone(), config.gamma, h, c, &mut rng)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });
    let bs = config.batch_size.min(segments.len());
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut batch = Vec::with_capacity(bs * h * c);
        let mut target = Vec::with_capacity(bs);
        for _ in 0..bs {
            let i = rng.uniform_index(segments.len());
            batch.extend_from_slice(segments[i].values());
            target.push(targets[i]);
        }
        let tau = Tensor::new(vec![bs, h, c], batch)?;
        let target = Tensor::vector(target);
        let graph = model.train_graph.clone();
        let eval = forward(&graph, &model.params, &[("tau", &tau), ("target", &target)])?;
        history.push(eval.output(&graph, "loss")?.item()?);
        let grads = backward(&graph, &eval, "loss", None)?;
        adam_step(&mut model.params, &grads.params, &mut adam)?;
    }
    Ok((model, history))
}

/// Return energy: `E2 = -J`, gradient `-dJ/dtau`.
pub fn return_energy_batch(model: &ReturnPredictor, taus: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (j, g) = model.predict_with_grad(taus)?;
    let values = j.iter().map(|v| -v).collect();
    Ok((values, g.map(|v| -v)))
}

/// Forward-only return energies (selection and filtering paths).
pub fn return_energy_values(model: &ReturnPredictor, taus: &Tensor) -> Result<Vec<f64>> {
    Ok(model.predict(taus)?.iter().map(|v| -v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_reward_segments(
        n: usize,
        h: usize,
        c: usize,
        reward: f64,
        rng: &mut RngStream,
    ) -> (Vec<TrajectorySegment>, Vec<Vec<f64>>) {
        let segments: Vec<TrajectorySegment> = (0..n)
            .map(|i| TrajectorySegment::new(rng.normal_vec(h * c), h, c - 2, 2, i, 0).unwrap())
            .collect();
        let rewards = vec![vec![reward; h]; n];
        (segments, rewards)
    }

    #[test]
    fn discount_zero_keeps_first_reward() {
        assert_eq!(discounted_return(&[3.0, 100.0, -5.0], 0.0), 3.0);
    }

    #[test]
    fn geometric_series_target() {
        let r = vec![1.0; 8];
        let want = (1.0 - 0.99f64.powi(8)) / (1.0 - 0.99);
        assert!((discounted_return(&r, 0.99) - want).abs() < 1e-12);
        assert!((want - 7.72553055669).abs() < 1e-9);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let mut rng = RngStream::new(1, 0);
        let model =
            ReturnPredictor::new(ReturnArch::Dense { hidden: 8 }, 0.99, 4, 6, &mut rng).unwrap();
        let tau = Tensor::new(vec![3, 4, 6], rng.normal_vec(72)).unwrap();
        let j = model.predict(&tau).unwrap();
        let target = Tensor::vector(j);
        let eval = forward(
            &model.train_graph,
            &model.params,
            &[("tau", &tau), ("target", &target)],
        )
        .unwrap();
        let loss = eval.output(&model.train_graph, "loss").unwrap().item().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn learns_constant_reward_target() {
        let mut rng = RngStream::new(3, 0);
        let c = 2.0;
        let (segments, rewards) = constant_reward_segments(64, 8, 6, c, &mut rng);
        let config = ReturnTrainConfig {
            arch: ReturnArch::Conv { channels: 16, kernel: 3 },
            steps: 3000,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 5,
            ..ReturnTrainConfig::default()
        };
        let (model, _) = train_return_predictor(&segments, &rewards, &config).unwrap();
        let want = c * (1.0 - 0.99f64.powi(8)) / (1.0 - 0.99);
        let tau = crate::env::segment::segments_to_tensor(&segments[..16]).unwrap();
        for &j in &model.predict(&tau).unwrap() {
            let rel = (j - want).abs() / want.abs();
            assert!(rel < 0.02, "{j} vs {want}");
        }
    }

    #[test]
    fn energy_is_negated_prediction() {
        let mut rng = RngStream::new(4, 0);
        let model =
            ReturnPredictor::new(ReturnArch::Conv { channels: 8, kernel: 3 }, 0.99, 4, 6, &mut rng)
                .unwrap();
        let tau = Tensor::new(vec![5, 4, 6], rng.normal_vec(120)).unwrap();
        let j = model.predict(&tau).unwrap();
        let e = return_energy_values(&model, &tau).unwrap();
        for (a, b) in j.iter().zip(&e) {
            assert_eq!(-a, *b);
        }
        // argmin of E2 equals argmax of J.
        let argmax_j = (0..j.len()).max_by(|&i, &k| j[i].total_cmp(&j[k])).unwrap();
        let argmin_e = (0..e.len()).min_by(|&i, &k| e[i].total_cmp(&e[k])).unwrap();
        assert_eq!(argmax_j, argmin_e);
    }

    #[test]
    fn return_energy_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(5, 0);
        for arch in [
            ReturnArch::Conv { channels: 8, kernel: 3 },
            ReturnArch::Dense { hidden: 16 },
        ] {
            let model = ReturnPredictor::new(arch, 0.99, 3, 6, &mut rng).unwrap();
            let tau = Tensor::new(vec![1, 3, 6], rng.normal_vec(18)).unwrap();
            let (_, grad) = return_energy_batch(&model, &tau).unwrap();
            let h = 1e-5;
            for idx in 0..tau.len() {
                let mut p = tau.clone();
                p.values_mut()[idx] += h;
                let mut m = tau.clone();
                m.values_mut()[idx] -= h;
                let vp: f64 = return_energy_values(&model, &p).unwrap()[0];
                let vm: f64 = return_energy_values(&model, &m).unwrap()[0];
                let fd = (vp - vm) / (2.0 * h);
                let an = grad.values()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "idx {idx}: {an} vs {fd}");
            }
        }
    }
}
