//! Reward annotator: regresses r(s, a) from (s, a, s') transitions so
//! generated trajectories can be labeled without touching the environment.

use crate::autodiff::{
    adam_step, backward, forward, graph::Graph, graph::GraphBuilder, nets, AdamConfig, AdamState,
    ParamSet, RngStream, Tensor,
};
use crate::env::{Normalizer, OfflineDataset};
use crate::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct RewardAnnotator {
    pub state_dim: usize,
    pub action_dim: usize,
    pub params: ParamSet,
    value_graph: Graph,
    train_graph: Graph,
}

impl RewardAnnotator {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let in_dim = 2 * state_dim + action_dim;
        let params = nets::init_mlp("rew", &[in_dim, hidden, hidden, 1], rng);
        RewardAnnotator {
            state_dim,
            action_dim,
            params,
            value_graph: build_graph(false),
            train_graph: build_graph(true),
        }
    }

    pub fn from_params(state_dim: usize, action_dim: usize, params: ParamSet) -> Self {
        RewardAnnotator {
            state_dim,
            action_dim,
            params,
            value_graph: build_graph(false),
            train_graph: build_graph(true),
        }
    }

    pub fn train_graph(&self) -> &Graph {
        &self.train_graph
    }

    /// Predicted rewards for (s, a, s') feature rows [M, 2*d_s + d_a];
    /// states normalized, actions raw.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let eval = forward(&self.value_graph, &self.params, &[("x", x)])?;
        Ok(eval.output(&self.value_graph, "r")?.values().to_vec())
    }

    pub fn mse(&self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let eval = forward(&self.train_graph, &self.params, &[("x", x), ("target", target)])?;
        eval.output(&self.train_graph, "loss")?.item()
    }
}

fn build_graph(with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.input("x");
    let out = nets::mlp(&mut b, "rew", x, 3, nets::Activation::Relu);
    let r = b.squeeze(out);
    b.output("r", r);
    if with_loss {
        let target = b.input("target");
        let diff = b.sub(r, target);
        let sq = b.square(diff);
        let loss = b.mean(sq);
        b.output("loss", loss);
    }
    b.build()
}

#[derive(Debug, Clone)]
pub struct RewardTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        RewardTrainConfig {
            hidden: 256,
            steps: 20_000,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Squared-error regression of observed rewards on the union of the source
/// and target datasets.
pub fn train_reward_annotator(
    datasets: &[&OfflineDataset],
    normalizer: &Normalizer,
    config: &RewardTrainConfig,
) -> Result<(RewardAnnotator, Vec<f64>)> {
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(CoreError::empty("train_reward_annotator: empty union"));
    }
    let ds = normalizer.dim();
    let da = 2;
    let dim = 2 * ds + da;
    let mut rows = Vec::with_capacity(total * dim);
    let mut targets = Vec::with_capacity(total);
    for d in datasets {
        for tr in d.transitions() {
            rows.extend_from_slice(&normalizer.normalize(&tr.s));
            rows.extend_from_slice(&tr.a);
            rows.extend_from_slice(&normalizer.normalize(&tr.s_next));
            targets.push(tr.r);
        }
    }

    let mut rng = RngStream::new(config.seed, 0x4E_4A4D);
    let mut model = RewardAnnotator::new(ds, da, config.hidden, &mut rng);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });
    let bs = config.batch_size.min(total);
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut x = Vec::with_capacity(bs * dim);
        let mut t = Vec::with_capacity(bs);
        for _ in 0..bs {
            let i = rng.uniform_index(total);
            x.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
            t.push(targets[i]);
        }
        let x = Tensor::new(vec![bs, dim], x)?;
        let t = Tensor::vector(t);
        let graph = model.train_graph.clone();
        let eval = forward(&graph, &model.params, &[("x", &x), ("target", &t)])?;
        history.push(eval.output(&graph, "loss")?.item()?);
        let grads = backward(&graph, &eval, "loss", None)?;
        adam_step(&mut model.params, &grads.params, &mut adam)?;
    }
    Ok((model, history))
}

/// Build (s, a, s') feature rows plus targets for a dataset (tests and
/// held-out evaluation).
pub fn reward_features(
    dataset: &OfflineDataset,
    normalizer: &Normalizer,
) -> Result<(Tensor, Tensor)> {
    let ds = normalizer.dim();
    let dim = 2 * ds + 2;
    let n = dataset.len();
    if n == 0 {
        return Err(CoreError::empty("reward_features: empty dataset"));
    }
    let mut rows = Vec::with_capacity(n * dim);
    let mut targets = Vec::with_capacity(n);
    for tr in dataset.transitions() {
        rows.extend_from_slice(&normalizer.normalize(&tr.s));
        rows.extend_from_slice(&tr.a);
        rows.extend_from_slice(&normalizer.normalize(&tr.s_next));
        targets.push(tr.r);
    }
    Ok((Tensor::new(vec![n, dim], rows)?, Tensor::vector(targets)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_dataset, BehaviorPolicy, Domain, EnvParams, Transition};

    fn constant_reward_dataset(c: f64, n: usize, seed: u64) -> OfflineDataset {
        let mut rng = RngStream::new(seed, 0);
        let transitions: Vec<Transition> = (0..n)
            .map(|i| Transition {
                s: [rng.normal(), rng.normal(), rng.normal(), rng.normal()],
                a: [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)],
                r: c,
                s_next: [rng.normal(), rng.normal(), rng.normal(), rng.normal()],
                done: false,
                episode_id: i,
                t: 0,
            })
            .collect();
        OfflineDataset::from_transitions(Domain::Source, transitions).unwrap()
    }

    #[test]
    fn constant_reward_is_learned() {
        let c = -1.5;
        let data = constant_reward_dataset(c, 2000, 1);
        let held = constant_reward_dataset(c, 500, 2);
        let norm = Normalizer::fit(&data).unwrap();
        let config = RewardTrainConfig {
            hidden: 16,
            steps: 30_000,
            lr: 1e-3,
            seed: 3,
            ..RewardTrainConfig::default()
        };
        let (model, _) = train_reward_annotator(&[&data], &norm, &config).unwrap();
        let (x, _) = reward_features(&held, &norm).unwrap();
        for &p in &model.predict(&x).unwrap() {
            assert!((p - c).abs() < 0.01 * c.abs(), "{p} vs {c}");
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let mut rng = RngStream::new(4, 0);
        let model = RewardAnnotator::new(4, 2, 8, &mut rng);
        let x = Tensor::new(vec![5, 10], rng.normal_vec(50)).unwrap();
        let pred = Tensor::vector(model.predict(&x).unwrap());
        assert_eq!(model.mse(&x, &pred).unwrap(), 0.0);
    }

    #[test]
    fn held_out_rmse_improves_with_training() {
        let params = EnvParams::default();
        let data = collect_dataset(&params, BehaviorPolicy::MediumPd, 3000, Domain::Source, 5)
            .unwrap();
        let held = collect_dataset(&params, BehaviorPolicy::MediumPd, 800, Domain::Source, 6)
            .unwrap();
        let norm = Normalizer::fit(&data).unwrap();
        let (hx, ht) = reward_features(&held, &norm).unwrap();
        let mut rng = RngStream::new(7, 0);
        let fresh = RewardAnnotator::new(4, 2, 64, &mut rng);
        let rmse_init = fresh.mse(&hx, &ht).unwrap().sqrt();
        let config = RewardTrainConfig {
            hidden: 64,
            steps: 2500,
            lr: 1e-3,
            seed: 7,
            ..RewardTrainConfig::default()
        };
        let (model, _) = train_reward_annotator(&[&data], &norm, &config).unwrap();
        let rmse_fit = model.mse(&hx, &ht).unwrap().sqrt();
        assert!(rmse_fit < rmse_init, "{rmse_fit} vs {rmse_init}");
    }
}
