//! Source behavior policy: a state-conditioned Gaussian fit by maximum
//! likelihood, and the policy energy `E3 = sum_t log pi(a_t | s_t)`.

use crate::autodiff::{
    adam_step, backward, forward, graph::Graph, graph::GraphBuilder, nets, AdamConfig, AdamState,
    ParamSet, RngStream, Tensor,
};
use crate::energy::features;
use crate::env::{Normalizer, OfflineDataset};
use crate::{CoreError, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Gaussian policy: MLP mean (two hidden layers) and a state-independent
/// log-std vector clamped to [LOG_STD_MIN, LOG_STD_MAX].
#[derive(Debug, Clone)]
pub struct BehaviorPolicyModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub params: ParamSet,
    logp_graph: Graph,
    nll_graph: Graph,
}

impl BehaviorPolicyModel {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut params = nets::init_mlp("bpol.mean", &[state_dim, hidden, hidden, action_dim], rng);
        params.insert("bpol.log_std", Tensor::vector(vec![0.0; action_dim]));
        BehaviorPolicyModel {
            state_dim,
            action_dim,
            params,
            logp_graph: build_graph(false),
            nll_graph: build_graph(true),
        }
    }

    pub fn from_params(state_dim: usize, action_dim: usize, params: ParamSet) -> Self {
        BehaviorPolicyModel {
            state_dim,
            action_dim,
            params,
            logp_graph: build_graph(false),
            nll_graph: build_graph(true),
        }
    }

    pub fn log_std(&self) -> &[f64] {
        self.params.get("bpol.log_std").expect("log_std parameter").values()
    }

    pub fn nll_graph(&self) -> &Graph {
        &self.nll_graph
    }

    /// Per-row `log pi(a|s)` for states [M, d_s], actions [M, d_a].
    pub fn log_prob(&self, states: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let eval = forward(&self.logp_graph, &self.params, &[("s", states), ("a", actions)])?;
        Ok(eval.output(&self.logp_graph, "logp")?.values().to_vec())
    }

    /// Mean NLL over a batch.
    pub fn nll(&self, states: &Tensor, actions: &Tensor) -> Result<f64> {
        let eval = forward(&self.nll_graph, &self.params, &[("s", states), ("a", actions)])?;
        eval.output(&self.nll_graph, "loss")?.item()
    }

    /// Gradient of `sum_m logp_m` with respect to states and actions.
    pub fn log_prob_with_grad(
        &self,
        states: &Tensor,
        actions: &Tensor,
    ) -> Result<(Vec<f64>, Tensor, Tensor)> {
        let eval = forward(&self.logp_graph, &self.params, &[("s", states), ("a", actions)])?;
        let logp = eval.output(&self.logp_graph, "logp")?.values().to_vec();
        let seed = Tensor::filled(vec![logp.len()], 1.0);
        let grads = backward(&self.logp_graph, &eval, "logp", Some(&seed))?;
        Ok((
            logp,
            grads.inputs.get("s").cloned().expect("input s"),
            grads.inputs.get("a").cloned().expect("input a"),
        ))
    }
}

fn build_graph(with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let s = b.input("s");
    let a = b.input("a");
    let mean = nets::mlp(&mut b, "bpol.mean", s, 3, nets::Activation::Relu);
    let log_std = b.param("bpol.log_std");
    let logp = b.gaussian_log_prob(a, mean, log_std);
    b.output("logp", logp);
    if with_loss {
        let m = b.mean(logp);
        let loss = b.scale(m, -1.0);
        b.output("loss", loss);
    }
    b.build()
}

#[derive(Debug, Clone)]
pub struct BehaviorTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for BehaviorTrainConfig {
    fn default() -> Self {
        BehaviorTrainConfig {
            hidden: 256,
            steps: 20_000,
            batch_size: 64,
            lr: 2e-4,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Behavior cloning on the source dataset: minimize NLL of source actions
/// under the Gaussian policy; log-std is projected into its clamp bounds
/// after every step.
pub fn train_behavior_policy(
    d_src: &OfflineDataset,
    normalizer: &Normalizer,
    config: &BehaviorTrainConfig,
) -> Result<(BehaviorPolicyModel, Vec<f64>)> {
    if d_src.is_empty() {
        return Err(CoreError::empty("train_behavior_policy: empty dataset"));
    }
    let ds = normalizer.dim();
    let da = 2;
    let mut rng = RngStream::new(config.seed, 0xB_C10);
    let mut model = BehaviorPolicyModel::new(ds, da, config.hidden, &mut rng);
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    });

    let transitions = d_src.transitions();
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let bs = config.batch_size.min(transitions.len());
        let mut s = Vec::with_capacity(bs * ds);
        let mut a = Vec::with_capacity(bs * da);
        for _ in 0..bs {
            let tr = &transitions[rng.uniform_index(transitions.len())];
            s.extend_from_slice(&normalizer.normalize(&tr.s));
            a.extend_from_slice(&tr.a);
        }
        let s = Tensor::new(vec![bs, ds], s)?;
        let a = Tensor::new(vec![bs, da], a)?;
        let graph = model.nll_graph.clone();
        let eval = forward(&graph, &model.params, &[("s", &s), ("a", &a)])?;
        history.push(eval.output(&graph, "loss")?.item()?);
        let grads = backward(&graph, &eval, "loss", None)?;
        adam_step(&mut model.params, &grads.params, &mut adam)?;
        let ls = model.params.get_mut("bpol.log_std").expect("log_std");
        for v in ls.values_mut() {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
    Ok((model, history))
}

/// Policy energy over all H rows: per-sample `sum_t log pi(a_t|s_t)` and the
/// gradient with respect to both state and action entries.
pub fn policy_energy_batch(
    model: &BehaviorPolicyModel,
    taus: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let (ds, da) = (model.state_dim, model.action_dim);
    let (n, h) = features::check_batch(taus, ds, da)?;
    let (states, actions) = features::row_features(taus, ds, da)?;
    let (logp, dstates, dactions) = model.log_prob_with_grad(&states, &actions)?;
    let values = features::per_sample_sums(&logp, n, h);
    let mut grad = Tensor::zeros(vec![n, h, ds + da]);
    features::scatter_row_grad(&dstates, &dactions, n, h, ds, da, &mut grad);
    Ok((values, grad))
}

/// Forward-only per-sample policy energies.
pub fn policy_energy_values(model: &BehaviorPolicyModel, taus: &Tensor) -> Result<Vec<f64>> {
    let (ds, da) = (model.state_dim, model.action_dim);
    let (n, h) = features::check_batch(taus, ds, da)?;
    let (states, actions) = features::row_features(taus, ds, da)?;
    let logp = model.log_prob(&states, &actions)?;
    Ok(features::per_sample_sums(&logp, n, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gaussian_log_prob;
    use crate::env::{collect_dataset, BehaviorPolicy, Domain, EnvParams};

    #[test]
    fn single_row_energy_is_log_density() {
        let mut rng = RngStream::new(2, 0);
        let model = BehaviorPolicyModel::new(4, 2, 16, &mut rng);
        let s = Tensor::new(vec![1, 4], rng.normal_vec(4)).unwrap();
        let a = Tensor::new(vec![1, 2], rng.normal_vec(2)).unwrap();
        let logp = model.log_prob(&s, &a).unwrap()[0];

        // Closed form with the model's own mean and log-std.
        let mut b = GraphBuilder::new();
        let sx = b.input("s");
        let mean = nets::mlp(&mut b, "bpol.mean", sx, 3, nets::Activation::Relu);
        b.output("mean", mean);
        let g = b.build();
        let eval = forward(&g, &model.params, &[("s", &s)]).unwrap();
        let mean = eval.output(&g, "mean").unwrap().values().to_vec();
        let want = gaussian_log_prob(a.values(), &mean, model.log_std()).unwrap();
        assert!((logp - want).abs() < 1e-12);
    }

    #[test]
    fn action_gradient_vanishes_at_the_mean() {
        let mut rng = RngStream::new(3, 0);
        let model = BehaviorPolicyModel::new(4, 2, 16, &mut rng);
        let s = Tensor::new(vec![1, 4], rng.normal_vec(4)).unwrap();
        // Compute the mean action for this state, then evaluate the gradient there.
        let mut b = GraphBuilder::new();
        let sx = b.input("s");
        let mean = nets::mlp(&mut b, "bpol.mean", sx, 3, nets::Activation::Relu);
        b.output("mean", mean);
        let g = b.build();
        let eval = forward(&g, &model.params, &[("s", &s)]).unwrap();
        let mean = eval.output(&g, "mean").unwrap().clone();
        let (_, _, dact) = model.log_prob_with_grad(&s, &mean).unwrap();
        for v in dact.values() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn fits_state_independent_gaussian_actions() {
        // Actions ~ N(0.3, 0.1^2) regardless of state.
        let mut rng = RngStream::new(4, 0);
        let transitions: Vec<crate::env::Transition> = (0..4000)
            .map(|i| crate::env::Transition {
                s: [rng.normal(), rng.normal(), rng.normal(), rng.normal()],
                a: [0.3 + 0.1 * rng.normal(), 0.3 + 0.1 * rng.normal()],
                r: 0.0,
                s_next: [0.0; 4],
                done: false,
                episode_id: i,
                t: 0,
            })
            .collect();
        let data = OfflineDataset::from_transitions(Domain::Source, transitions).unwrap();
        let norm = Normalizer::fit(&data).unwrap();
        let config = BehaviorTrainConfig {
            hidden: 32,
            steps: 4000,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 6,
            ..BehaviorTrainConfig::default()
        };
        let (model, _) = train_behavior_policy(&data, &norm, &config).unwrap();
        // Mean prediction near 0.3 across random states.
        let mut b = GraphBuilder::new();
        let sx = b.input("s");
        let mean = nets::mlp(&mut b, "bpol.mean", sx, 3, nets::Activation::Relu);
        b.output("mean", mean);
        let g = b.build();
        let s = Tensor::new(vec![200, 4], rng.normal_vec(800)).unwrap();
        let eval = forward(&g, &model.params, &[("s", &s)]).unwrap();
        let m = eval.output(&g, "mean").unwrap();
        let avg: f64 = m.values().iter().sum::<f64>() / m.len() as f64;
        assert!((avg - 0.3).abs() < 0.02, "fitted mean {avg}");
        for &ls in model.log_std() {
            let sigma = ls.exp();
            assert!((sigma - 0.1).abs() < 0.02, "fitted sigma {sigma}");
        }
    }

    #[test]
    fn deterministic_actions_push_log_std_to_floor() {
        let mut rng = RngStream::new(5, 0);
        let transitions: Vec<crate::env::Transition> = (0..2000)
            .map(|i| {
                let s = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
                let a = [
                    (0.5 * s[0] - 0.2 * s[2]).clamp(-1.0, 1.0),
                    (0.4 * s[1] + 0.1 * s[3]).clamp(-1.0, 1.0),
                ];
                crate::env::Transition {
                    s,
                    a,
                    r: 0.0,
                    s_next: [0.0; 4],
                    done: false,
                    episode_id: i,
                    t: 0,
                }
            })
            .collect();
        let data = OfflineDataset::from_transitions(Domain::Source, transitions).unwrap();
        let norm = Normalizer::fit(&data).unwrap();
        let config = BehaviorTrainConfig {
            hidden: 64,
            steps: 5000,
            lr: 5e-3,
            weight_decay: 0.0,
            seed: 7,
            ..BehaviorTrainConfig::default()
        };
        let (model, _) = train_behavior_policy(&data, &norm, &config).unwrap();
        for &ls in model.log_std() {
            assert!(ls < -3.0, "log_std {ls} should head toward {LOG_STD_MIN}");
            assert!(ls >= LOG_STD_MIN);
        }
    }

    #[test]
    fn training_does_not_hurt_held_out_nll() {
        let params = EnvParams::default();
        let data = collect_dataset(&params, BehaviorPolicy::MediumPd, 3000, Domain::Source, 8)
            .unwrap();
        let held = collect_dataset(&params, BehaviorPolicy::MediumPd, 1000, Domain::Source, 9)
            .unwrap();
        let norm = Normalizer::fit(&data).unwrap();
        let build_batch = |d: &OfflineDataset| {
            let n = d.len();
            let mut s = Vec::new();
            let mut a = Vec::new();
            for tr in d.transitions() {
                s.extend_from_slice(&norm.normalize(&tr.s));
                a.extend_from_slice(&tr.a);
            }
            (
                Tensor::new(vec![n, 4], s).unwrap(),
                Tensor::new(vec![n, 2], a).unwrap(),
            )
        };
        let (hs, ha) = build_batch(&held);
        let mut rng = RngStream::new(10, 0);
        let initial = BehaviorPolicyModel::new(4, 2, 64, &mut rng);
        let nll_init = initial.nll(&hs, &ha).unwrap();
        let config = BehaviorTrainConfig {
            hidden: 64,
            steps: 2000,
            lr: 1e-3,
            seed: 10,
            ..BehaviorTrainConfig::default()
        };
        let (model, _) = train_behavior_policy(&data, &norm, &config).unwrap();
        let nll_fit = model.nll(&hs, &ha).unwrap();
        assert!(nll_fit <= nll_init, "{nll_fit} vs init {nll_init}");
    }

    #[test]
    fn policy_energy_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(11, 0);
        let model = BehaviorPolicyModel::new(4, 2, 32, &mut rng);
        let taus = Tensor::new(vec![1, 3, 6], rng.normal_vec(18)).unwrap();
        let (_, grad) = policy_energy_batch(&model, &taus).unwrap();
        let h = 1e-5;
        for idx in 0..taus.len() {
            let mut p = taus.clone();
            p.values_mut()[idx] += h;
            let mut m = taus.clone();
            m.values_mut()[idx] -= h;
            let vp = policy_energy_values(&model, &p).unwrap()[0];
            let vm = policy_energy_values(&model, &m).unwrap()[0];
            let fd = (vp - vm) / (2.0 * h);
            let an = grad.values()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "idx {idx}: {an} vs {fd}");
        }
    }
}
