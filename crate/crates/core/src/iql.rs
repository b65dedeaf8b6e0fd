//! IQL backbone: expectile value regression, twin Q-learning with polyak
//! targets, and advantage-weighted behavior cloning with a tanh-squashed
//! Gaussian policy. Trains on any combination of replay buffers with
//! equal-size per-buffer batch draws.

use std::collections::BTreeMap;

use crate::autodiff::{
    adam_step, backward, forward, graph::Graph, graph::GraphBuilder, nets, AdamConfig, AdamState,
    ParamSet, RngStream, Tensor,
};
use crate::env::dataset::rollout_with;
use crate::env::{normalized_score, EnvParams, Normalizer, Transition};
use crate::{CoreError, Result};

pub const POLICY_LOG_STD_MIN: f64 = -20.0;
pub const POLICY_LOG_STD_MAX: f64 = 2.0;

/// `|tau - 1{u<0}| * u^2`, averaged over the batch.
pub fn expectile_loss(residuals: &[f64], tau_exp: f64) -> Result<f64> {
    if !(0.0 < tau_exp && tau_exp < 1.0) {
        return Err(CoreError::config("expectile parameter must lie in (0,1)"));
    }
    if residuals.is_empty() {
        return Err(CoreError::empty("expectile_loss: empty batch"));
    }
    let total: f64 = residuals
        .iter()
        .map(|&u| {
            let w = if u < 0.0 { 1.0 - tau_exp } else { tau_exp };
            w * u * u
        })
        .sum();
    Ok(total / residuals.len() as f64)
}

#[derive(Debug, Clone)]
pub struct IqlConfig {
    pub expectile: f64,
    pub adv_temperature: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub lr: f64,
    pub hidden: usize,
    /// Batch size drawn from each non-empty buffer per step.
    pub batch_per_buffer: usize,
    pub steps: usize,
    pub adv_weight_clip: f64,
    pub seed: u64,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            expectile: 0.7,
            adv_temperature: 3.0,
            gamma: 0.99,
            polyak: 0.005,
            lr: 3e-4,
            hidden: 256,
            batch_per_buffer: 128,
            steps: 50_000,
            adv_weight_clip: 100.0,
            seed: 0,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.expectile && self.expectile < 1.0) {
            return Err(CoreError::config("iql: expectile must lie in (0,1)"));
        }
        if self.adv_temperature <= 0.0 {
            return Err(CoreError::config("iql: advantage temperature must be > 0"));
        }
        if !(0.0 < self.polyak && self.polyak <= 1.0) {
            return Err(CoreError::config("iql: polyak rate must lie in (0,1]"));
        }
        Ok(())
    }
}

/// Value net, twin Q nets with target copies, tanh-squashed Gaussian policy.
#[derive(Debug, Clone)]
pub struct IqlModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub v_params: ParamSet,
    pub q1_params: ParamSet,
    pub q2_params: ParamSet,
    pub q1_target: ParamSet,
    pub q2_target: ParamSet,
    pub policy_params: ParamSet,
    v_graph: Graph,
    v_train: Graph,
    q_graph: Graph,
    q_train: Graph,
    policy_graph: Graph,
    policy_train: Graph,
}

impl IqlModel {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let v_params = nets::init_mlp("v", &[state_dim, hidden, hidden, 1], rng);
        let q1_params = nets::init_mlp("q", &[state_dim + action_dim, hidden, hidden, 1], rng);
        let q2_params = nets::init_mlp("q", &[state_dim + action_dim, hidden, hidden, 1], rng);
        let mut policy_params = nets::init_mlp("pi.trunk", &[state_dim, hidden, hidden], rng);
        policy_params
            .merge(nets::init_mlp("pi.head", &[hidden, 2 * action_dim], rng))
            .expect("distinct prefixes");
        IqlModel {
            state_dim,
            action_dim,
            q1_target: q1_params.clone(),
            q2_target: q2_params.clone(),
            v_params,
            q1_params,
            q2_params,
            policy_params,
            v_graph: build_v_graph(false),
            v_train: build_v_graph(true),
            q_graph: build_q_graph(false),
            q_train: build_q_graph(true),
            policy_graph: build_policy_graph(action_dim, false),
            policy_train: build_policy_graph(action_dim, true),
        }
    }

    pub fn from_params(
        state_dim: usize,
        action_dim: usize,
        v_params: ParamSet,
        q1_params: ParamSet,
        q2_params: ParamSet,
        q1_target: ParamSet,
        q2_target: ParamSet,
        policy_params: ParamSet,
    ) -> Self {
        IqlModel {
            state_dim,
            action_dim,
            v_params,
            q1_params,
            q2_params,
            q1_target,
            q2_target,
            policy_params,
            v_graph: build_v_graph(false),
            v_train: build_v_graph(true),
            q_graph: build_q_graph(false),
            q_train: build_q_graph(true),
            policy_graph: build_policy_graph(action_dim, false),
            policy_train: build_policy_graph(action_dim, true),
        }
    }

    pub fn v_train_graph(&self) -> &Graph {
        &self.v_train
    }

    pub fn q_train_graph(&self) -> &Graph {
        &self.q_train
    }

    pub fn policy_train_graph(&self) -> &Graph {
        &self.policy_train
    }

    pub fn value(&self, s: &Tensor) -> Result<Vec<f64>> {
        let eval = forward(&self.v_graph, &self.v_params, &[("s", s)])?;
        Ok(eval.output(&self.v_graph, "v")?.values().to_vec())
    }

    fn q_value(&self, params: &ParamSet, sa: &Tensor) -> Result<Vec<f64>> {
        let eval = forward(&self.q_graph, params, &[("sa", sa)])?;
        Ok(eval.output(&self.q_graph, "q")?.values().to_vec())
    }

    /// min(Q1target, Q2target) on (s, a).
    pub fn target_q_min(&self, sa: &Tensor) -> Result<Vec<f64>> {
        let q1 = self.q_value(&self.q1_target, sa)?;
        let q2 = self.q_value(&self.q2_target, sa)?;
        Ok(q1.iter().zip(&q2).map(|(&a, &b)| a.min(b)).collect())
    }

    /// Deterministic evaluation action: tanh of the policy mean.
    pub fn act_deterministic(&self, s_norm: &[f64]) -> Result<[f64; 2]> {
        let s = Tensor::new(vec![1, self.state_dim], s_norm.to_vec())?;
        let eval = forward(&self.policy_graph, &self.policy_params, &[("s", &s)])?;
        let mean = eval.output(&self.policy_graph, "mean")?;
        Ok([mean.values()[0].tanh(), mean.values()[1].tanh()])
    }
}

fn build_v_graph(with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let s = b.input("s");
    let out = nets::mlp(&mut b, "v", s, 3, nets::Activation::Relu);
    let v = b.squeeze(out);
    b.output("v", v);
    if with_loss {
        // Expectile regression of target - V via
        // tau * relu(u)^2 + (1 - tau) * relu(-u)^2, tau supplied as weights.
        let target = b.input("target");
        let u = b.sub(target, v);
        let up = b.relu(u);
        let up2 = b.square(up);
        let neg_u = b.scale(u, -1.0);
        let un = b.relu(neg_u);
        let un2 = b.square(un);
        let tau_w = b.input("tau_pos");
        let one_minus = b.input("tau_neg");
        let wp = b.mul(up2, tau_w);
        let wn = b.mul(un2, one_minus);
        let both = b.add(wp, wn);
        let loss = b.mean(both);
        b.output("loss", loss);
    }
    b.build()
}

fn build_q_graph(with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let sa = b.input("sa");
    let out = nets::mlp(&mut b, "q", sa, 3, nets::Activation::Relu);
    let q = b.squeeze(out);
    b.output("q", q);
    if with_loss {
        let target = b.input("target");
        let diff = b.sub(q, target);
        let sq = b.square(diff);
        let loss = b.mean(sq);
        b.output("loss", loss);
    }
    b.build()
}

fn build_policy_graph(action_dim: usize, with_loss: bool) -> Graph {
    let mut b = GraphBuilder::new();
    let s = b.input("s");
    let trunk = nets::mlp(&mut b, "pi.trunk", s, 2, nets::Activation::Relu);
    let trunk = b.relu(trunk);
    let head = nets::mlp(&mut b, "pi.head", trunk, 1, nets::Activation::Relu);
    let mean = b.slice_cols(head, 0, action_dim);
    let log_std_raw = b.slice_cols(head, action_dim, 2 * action_dim);
    let log_std = b.clamp(log_std_raw, POLICY_LOG_STD_MIN, POLICY_LOG_STD_MAX);
    b.output("mean", mean);
    b.output("log_std", log_std);
    if with_loss {
        // Advantage-weighted likelihood of pre-squash actions u = atanh(a);
        // the squash correction is constant in the parameters and dropped.
        let u = b.input("u");
        let w = b.input("w");
        let lp = b.gaussian_log_prob(u, mean, log_std);
        let weighted = b.mul(lp, w);
        let m = b.mean(weighted);
        let loss = b.scale(m, -1.0);
        b.output("loss", loss);
    }
    b.build()
}

/// Normalized-state minibatch.
#[derive(Debug, Clone)]
pub struct IqlBatch {
    pub s: Tensor,
    pub sa: Tensor,
    pub u: Tensor,
    pub s_next: Tensor,
    pub r: Vec<f64>,
    pub done: Vec<bool>,
}

pub fn atanh_clipped(a: f64) -> f64 {
    let eps = 1e-6;
    a.clamp(-1.0 + eps, 1.0 - eps).atanh()
}

fn build_batch(
    transitions: &[&Transition],
    normalizer: &Normalizer,
    state_dim: usize,
    action_dim: usize,
) -> Result<IqlBatch> {
    let n = transitions.len();
    let mut s = Vec::with_capacity(n * state_dim);
    let mut sa = Vec::with_capacity(n * (state_dim + action_dim));
    let mut u = Vec::with_capacity(n * action_dim);
    let mut s_next = Vec::with_capacity(n * state_dim);
    let mut r = Vec::with_capacity(n);
    let mut done = Vec::with_capacity(n);
    for tr in transitions {
        let sn = normalizer.normalize(&tr.s);
        let snn = normalizer.normalize(&tr.s_next);
        s.extend_from_slice(&sn);
        sa.extend_from_slice(&sn);
        sa.extend_from_slice(&tr.a);
        u.extend(tr.a.iter().map(|&a| atanh_clipped(a)));
        s_next.extend_from_slice(&snn);
        r.push(tr.r);
        done.push(tr.done);
    }
    Ok(IqlBatch {
        s: Tensor::new(vec![n, state_dim], s)?,
        sa: Tensor::new(vec![n, state_dim + action_dim], sa)?,
        u: Tensor::new(vec![n, action_dim], u)?,
        s_next: Tensor::new(vec![n, state_dim], s_next)?,
        r,
        done,
    })
}

pub struct IqlOptimizers {
    pub v: AdamState,
    pub q1: AdamState,
    pub q2: AdamState,
    pub policy: AdamState,
}

impl IqlOptimizers {
    pub fn new(lr: f64) -> Self {
        let cfg = AdamConfig { lr, ..AdamConfig::default() };
        IqlOptimizers {
            v: AdamState::new(cfg.clone()),
            q1: AdamState::new(cfg.clone()),
            q2: AdamState::new(cfg.clone()),
            policy: AdamState::new(cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IqlLosses {
    pub value_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
}

/// One IQL update: expectile V regression toward min target-Q, twin Q
/// regression toward `r + gamma (1-done) V(s')`, advantage-weighted behavior
/// cloning, then polyak target updates. Targets are computed from the
/// pre-step parameters.
pub fn iql_update_step(
    model: &mut IqlModel,
    batch: &IqlBatch,
    config: &IqlConfig,
    opts: &mut IqlOptimizers,
) -> Result<IqlLosses> {
    config.validate()?;
    let n = batch.r.len();

    let q_min = model.target_q_min(&batch.sa)?;
    let v_next = model.value(&batch.s_next)?;
    let v_now = model.value(&batch.s)?;

    // Q regression target with terminal masking.
    let q_target: Vec<f64> = (0..n)
        .map(|i| batch.r[i] + config.gamma * if batch.done[i] { 0.0 } else { v_next[i] })
        .collect();

    // Advantage weights in (0, clip].
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            ((config.adv_temperature * (q_min[i] - v_now[i])).exp()).min(config.adv_weight_clip)
        })
        .collect();

    // Value step (expectile regression toward q_min).
    let tau_pos = Tensor::vector(vec![config.expectile; n]);
    let tau_neg = Tensor::vector(vec![1.0 - config.expectile; n]);
    let target = Tensor::vector(q_min.clone());
    let eval = forward(
        &model.v_train,
        &model.v_params,
        &[
            ("s", &batch.s),
            ("target", &target),
            ("tau_pos", &tau_pos),
            ("tau_neg", &tau_neg),
        ],
    )?;
    let value_loss = eval.output(&model.v_train, "loss")?.item()?;
    let grads = backward(&model.v_train, &eval, "loss", None)?;
    adam_step(&mut model.v_params, &grads.params, &mut opts.v)?;

    // Twin Q steps.
    let target = Tensor::vector(q_target);
    let mut q_loss = 0.0;
    for (params, opt) in [
        (&mut model.q1_params, &mut opts.q1),
        (&mut model.q2_params, &mut opts.q2),
    ] {
        let eval = forward(&model.q_train, params, &[("sa", &batch.sa), ("target", &target)])?;
        q_loss += eval.output(&model.q_train, "loss")?.item()?;
        let grads = backward(&model.q_train, &eval, "loss", None)?;
        adam_step(params, &grads.params, opt)?;
    }

    // Advantage-weighted behavior cloning.
    let w = Tensor::vector(weights);
    let eval = forward(
        &model.policy_train,
        &model.policy_params,
        &[("s", &batch.s), ("u", &batch.u), ("w", &w)],
    )?;
    let policy_loss = eval.output(&model.policy_train, "loss")?.item()?;
    let grads = backward(&model.policy_train, &eval, "loss", None)?;
    adam_step(&mut model.policy_params, &grads.params, &mut opts.policy)?;

    polyak_update(&mut model.q1_target, &model.q1_params, config.polyak);
    polyak_update(&mut model.q2_target, &model.q2_params, config.polyak);

    Ok(IqlLosses { value_loss, q_loss: q_loss / 2.0, policy_loss })
}

/// target <- (1 - rate) * target + rate * online.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, rate: f64) {
    for (name, t) in target.iter_mut() {
        let o = online.get(name).expect("target mirrors online names");
        for (tv, &ov) in t.values_mut().iter_mut().zip(o.values()) {
            *tv = (1.0 - rate) * *tv + rate * ov;
        }
    }
}

/// Train IQL on up to two buffers; each step draws `batch_per_buffer` from
/// every non-empty buffer and concatenates. Deterministic per seed.
pub fn train_iql(
    buffers: &[&[Transition]],
    normalizer: &Normalizer,
    config: &IqlConfig,
    on_step: Option<&mut dyn FnMut(usize, &IqlLosses)>,
) -> Result<(IqlModel, Vec<IqlLosses>)> {
    config.validate()?;
    let non_empty: Vec<&[Transition]> =
        buffers.iter().copied().filter(|b| !b.is_empty()).collect();
    if non_empty.is_empty() {
        return Err(CoreError::empty("train_iql: all buffers are empty"));
    }
    let mut rng = RngStream::new(config.seed, 0x1_41);
    let mut model = IqlModel::new(normalizer.dim(), 2, config.hidden, &mut rng);
    let mut opts = IqlOptimizers::new(config.lr);
    let mut history = Vec::with_capacity(config.steps);
    let mut callback = on_step;
    for step in 0..config.steps {
        let mut chosen: Vec<&Transition> = Vec::with_capacity(
            config.batch_per_buffer * non_empty.len(),
        );
        for buf in &non_empty {
            for _ in 0..config.batch_per_buffer.min(buf.len()) {
                chosen.push(&buf[rng.uniform_index(buf.len())]);
            }
        }
        let batch = build_batch(&chosen, normalizer, model.state_dim, model.action_dim)?;
        let losses = iql_update_step(&mut model, &batch, config, &mut opts)?;
        if let Some(cb) = callback.as_deref_mut() {
            cb(step, &losses);
        }
        history.push(losses);
    }
    Ok((model, history))
}

#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    pub per_seed_means: Vec<f64>,
    pub per_episode_returns: Vec<Vec<f64>>,
    pub mean_score: f64,
    pub std_score: f64,
}

/// Evaluate the deterministic squashed-mean policy; normalized scores across
/// seeds against the provided anchors.
pub fn evaluate_policy(
    env: &EnvParams,
    model: &IqlModel,
    normalizer: &Normalizer,
    episodes: usize,
    seeds: &[u64],
    j_random: f64,
    j_expert: f64,
) -> Result<PolicyEvaluation> {
    if seeds.is_empty() || episodes == 0 {
        return Err(CoreError::usage("evaluate_policy: need seeds and episodes"));
    }
    let mut per_seed_means = Vec::with_capacity(seeds.len());
    let mut per_episode_returns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let mut env_rng = RngStream::new(seed, 0xE9A1 + ep as u64);
            let (ret, _, _) = rollout_with(env, &mut env_rng, |obs, _| {
                model.act_deterministic(&normalizer.normalize(obs))
            })?;
            returns.push(ret);
        }
        let mean_return = returns.iter().sum::<f64>() / episodes as f64;
        per_seed_means.push(normalized_score(mean_return, j_random, j_expert)?);
        per_episode_returns.push(returns);
    }
    let mean_score = per_seed_means.iter().sum::<f64>() / per_seed_means.len() as f64;
    let var = per_seed_means
        .iter()
        .map(|s| (s - mean_score) * (s - mean_score))
        .sum::<f64>()
        / per_seed_means.len() as f64;
    Ok(PolicyEvaluation {
        per_seed_means,
        per_episode_returns,
        mean_score,
        std_score: var.sqrt(),
    })
}

/// Export the model's parameter sets for checkpointing.
pub fn export_params(model: &IqlModel) -> BTreeMap<String, ParamSet> {
    let mut out = BTreeMap::new();
    out.insert("v".to_string(), model.v_params.clone());
    out.insert("q1".to_string(), model.q1_params.clone());
    out.insert("q2".to_string(), model.q2_params.clone());
    out.insert("q1_target".to_string(), model.q1_target.clone());
    out.insert("q2_target".to_string(), model.q2_target.clone());
    out.insert("policy".to_string(), model.policy_params.clone());
    out
}
