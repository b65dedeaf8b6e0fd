//! Domain classifiers and the domain energy.
//!
//! Two binary classifiers output the target-class logit: one on the full
//! transition (s, a, s') and one on (s, a). The domain energy of a segment
//! sums, over its consecutive-row transitions,
//!
//!   [log p(src|s,a,s') - log p(trg|s,a,s')] - [log p(src|s,a) - log p(trg|s,a)]
//!
//! which in target-class logits is exactly `logit_SA - logit_SAS`. The same
//! log-ratio feeds the DARA reward-augmentation baseline.

use crate::autodiff::scalar::log_sigmoid;
use crate::autodiff::{
    adam_step, backward, forward, graph::Graph, graph::GraphBuilder, nets, AdamConfig, AdamState,
    ParamSet, RngStream, Tensor,
};
use crate::energy::features;
use crate::env::{Normalizer, OfflineDataset};
use crate::{CoreError, Result};

/// One binary classifier MLP producing a target-class logit per row.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub params: ParamSet,
    pub in_dim: usize,
    logit_graph: Graph,
    train_graph: Graph,
}

impl ClassifierNet {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let params = nets::init_mlp("clf", &[in_dim, hidden, hidden, 1], rng);
        ClassifierNet {
            params,
            in_dim,
            logit_graph: build_logit_graph(),
            train_graph: build_train_graph(),
        }
    }

    pub fn from_params(in_dim: usize, params: ParamSet) -> Self {
        ClassifierNet {
            params,
            in_dim,
            logit_graph: build_logit_graph(),
            train_graph: build_train_graph(),
        }
    }

    /// Target-class logits for a feature batch [M, in_dim].
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let eval = forward(&self.logit_graph, &self.params, &[("x", x)])?;
        Ok(eval.output(&self.logit_graph, "logit")?.values().to_vec())
    }

    /// Gradient of `sum_m seed_m * logit_m` with respect to the features.
    pub fn logit_input_grad(&self, x: &Tensor, seed: &Tensor) -> Result<Tensor> {
        let eval = forward(&self.logit_graph, &self.params, &[("x", x)])?;
        let grads = backward(&self.logit_graph, &eval, "logit", Some(seed))?;
        Ok(grads
            .inputs
            .get("x")
            .cloned()
            .expect("logit graph always has input x"))
    }

    pub fn logit_graph(&self) -> &Graph {
        &self.logit_graph
    }

    pub fn train_graph(&self) -> &Graph {
        &self.train_graph
    }

    /// Balanced cross-entropy loss on a (source batch, target batch) pair.
    pub fn loss(&self, src_x: &Tensor, trg_x: &Tensor) -> Result<f64> {
        let eval = forward(
            &self.train_graph,
            &self.params,
            &[("src_x", src_x), ("trg_x", trg_x)],
        )?;
        eval.output(&self.train_graph, "loss")?.item()
    }

    fn train_step(
        &mut self,
        src_x: &Tensor,
        trg_x: &Tensor,
        adam: &mut AdamState,
    ) -> Result<f64> {
        let eval = forward(
            &self.train_graph,
            &self.params,
            &[("src_x", src_x), ("trg_x", trg_x)],
        )?;
        let loss = eval.output(&self.train_graph, "loss")?.item()?;
        let grads = backward(&self.train_graph, &eval, "loss", None)?;
        adam_step(&mut self.params, &grads.params, adam)?;
        Ok(loss)
    }
}

fn build_logit_graph() -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.input("x");
    let y = nets::mlp(&mut b, "clf", x, 3, nets::Activation::Relu);
    let logit = b.squeeze(y);
    b.output("logit", logit);
    b.build()
}

fn build_train_graph() -> Graph {
    // loss = E_src[softplus(logit)] + E_trg[softplus(-logit)]
    //      = -E_src[log p(src)] - E_trg[log p(trg)]
    let mut b = GraphBuilder::new();
    let src = b.input("src_x");
    let trg = b.input("trg_x");
    let src_logit = nets::mlp(&mut b, "clf", src, 3, nets::Activation::Relu);
    let trg_logit = nets::mlp(&mut b, "clf", trg, 3, nets::Activation::Relu);
    let sp_src = b.softplus(src_logit);
    let l_src = b.mean(sp_src);
    let neg_trg = b.scale(trg_logit, -1.0);
    let sp_trg = b.softplus(neg_trg);
    let l_trg = b.mean(sp_trg);
    let loss = b.add(l_src, l_trg);
    b.output("loss", loss);
    b.build()
}

/// The SAS/SA classifier pair behind the domain energy.
#[derive(Debug, Clone)]
pub struct DomainClassifierPair {
    pub state_dim: usize,
    pub action_dim: usize,
    pub sas: ClassifierNet,
    pub sa: ClassifierNet,
}

impl DomainClassifierPair {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let sas = ClassifierNet::new(2 * state_dim + action_dim, hidden, rng);
        let sa = ClassifierNet::new(state_dim + action_dim, hidden, rng);
        DomainClassifierPair { state_dim, action_dim, sas, sa }
    }

    /// Per-transition log-ratio `logit_SA - logit_SAS`, computed through the
    /// four log-sigmoid terms of the energy definition.
    pub fn transition_log_ratio(&self, sas_x: &Tensor, sa_x: &Tensor) -> Result<Vec<f64>> {
        let l_sas = self.sas.logits(sas_x)?;
        let l_sa = self.sa.logits(sa_x)?;
        Ok(l_sas
            .iter()
            .zip(&l_sa)
            .map(|(&lsas, &lsa)| {
                (log_sigmoid(-lsas) - log_sigmoid(lsas))
                    - (log_sigmoid(-lsa) - log_sigmoid(lsa))
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub steps: usize,
    /// Per-domain minibatch size (balanced: this many source plus this many
    /// target rows per step).
    pub batch_each: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            hidden: 256,
            steps: 20_000,
            batch_each: 64,
            lr: 2e-4,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

pub(crate) fn transition_feature_rows(
    dataset: &OfflineDataset,
    normalizer: &Normalizer,
) -> (Vec<f64>, Vec<f64>) {
    let ds = normalizer.dim();
    let mut sas = Vec::with_capacity(dataset.len() * (2 * ds + 2));
    let mut sa = Vec::with_capacity(dataset.len() * (ds + 2));
    for tr in dataset.transitions() {
        let s = normalizer.normalize(&tr.s);
        let sn = normalizer.normalize(&tr.s_next);
        sas.extend_from_slice(&s);
        sas.extend_from_slice(&tr.a);
        sas.extend_from_slice(&sn);
        sa.extend_from_slice(&s);
        sa.extend_from_slice(&tr.a);
    }
    (sas, sa)
}

fn sample_rows(
    rows: &[f64],
    dim: usize,
    count: usize,
    batch: usize,
    rng: &mut RngStream,
) -> Tensor {
    let mut out = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        let i = rng.uniform_index(count);
        out.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
    }
    Tensor::new(vec![batch, dim], out).expect("sampled rows are consistent")
}

/// Train the SAS and SA domain classifiers on balanced minibatches drawn
/// from the two datasets. States are normalized, actions raw.
pub fn train_domain_classifiers(
    d_src: &OfflineDataset,
    d_trg: &OfflineDataset,
    normalizer: &Normalizer,
    config: &ClassifierTrainConfig,
) -> Result<(DomainClassifierPair, Vec<f64>)> {
    if d_src.is_empty() || d_trg.is_empty() {
        return Err(CoreError::empty("train_domain_classifiers: empty dataset"));
    }
    let ds = normalizer.dim();
    let da = 2;
    let mut rng = RngStream::new(config.seed, 0xD0CA);
    let mut pair = DomainClassifierPair::new(ds, da, config.hidden, &mut rng);
    let adam_cfg = AdamConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam_sas = AdamState::new(adam_cfg.clone());
    let mut adam_sa = AdamState::new(adam_cfg);

    let (src_sas, src_sa) = transition_feature_rows(d_src, normalizer);
    let (trg_sas, trg_sa) = transition_feature_rows(d_trg, normalizer);
    let sas_dim = 2 * ds + da;
    let sa_dim = ds + da;
    let (n_src, n_trg) = (d_src.len(), d_trg.len());

    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let sx = sample_rows(&src_sas, sas_dim, n_src, config.batch_each, &mut rng);
        let tx = sample_rows(&trg_sas, sas_dim, n_trg, config.batch_each, &mut rng);
        let loss_sas = pair.sas.train_step(&sx, &tx, &mut adam_sas)?;
        let sx = sample_rows(&src_sa, sa_dim, n_src, config.batch_each, &mut rng);
        let tx = sample_rows(&trg_sa, sa_dim, n_trg, config.batch_each, &mut rng);
        let loss_sa = pair.sa.train_step(&sx, &tx, &mut adam_sa)?;
        history.push(loss_sas + loss_sa);
    }
    Ok((pair, history))
}

/// Domain energy and its gradient for a trajectory batch [N, H, C].
/// Returns per-sample energies and the gradient tensor of the summed energy
/// (per-sample rows are independent, so this is the per-sample gradient).
pub fn domain_energy_batch(
    pair: &DomainClassifierPair,
    taus: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let (ds, da) = (pair.state_dim, pair.action_dim);
    let (n, h) = features::check_batch(taus, ds, da)?;
    let sas_x = features::sas_features(taus, ds, da)?;
    let sa_x = features::sa_features(taus, ds, da)?;

    let per_transition = pair.transition_log_ratio(&sas_x, &sa_x)?;
    let values = features::per_sample_sums(&per_transition, n, h - 1);

    // d E1 / d logits: -1 for SAS, +1 for SA.
    let m = n * (h - 1);
    let minus = Tensor::filled(vec![m], -1.0);
    let plus = Tensor::filled(vec![m], 1.0);
    let d_sas = pair.sas.logit_input_grad(&sas_x, &minus)?;
    let d_sa = pair.sa.logit_input_grad(&sa_x, &plus)?;

    let mut grad = Tensor::zeros(vec![n, h, ds + da]);
    features::scatter_sas_grad(&d_sas, n, h, ds, da, &mut grad);
    features::scatter_sa_grad(&d_sa, n, h, ds, da, &mut grad);
    Ok((values, grad))
}

/// Forward-only per-sample domain energies (filtering path).
pub fn domain_energy_values(pair: &DomainClassifierPair, taus: &Tensor) -> Result<Vec<f64>> {
    let (ds, da) = (pair.state_dim, pair.action_dim);
    let (n, h) = features::check_batch(taus, ds, da)?;
    let sas_x = features::sas_features(taus, ds, da)?;
    let sa_x = features::sa_features(taus, ds, da)?;
    let per_transition = pair.transition_log_ratio(&sas_x, &sa_x)?;
    Ok(features::per_sample_sums(&per_transition, n, h - 1))
}

/// DARA reward augmentation: `r - eta * dyn_log_ratio(s, a, s')` with the
/// classifier-estimated source-over-target dynamics log-ratio.
pub fn dara_augment(
    pair: &DomainClassifierPair,
    s_norm: &[f64],
    action: &[f64],
    s_next_norm: &[f64],
    reward: f64,
    eta: f64,
) -> Result<f64> {
    let ds = pair.state_dim;
    let da = pair.action_dim;
    if s_norm.len() != ds || s_next_norm.len() != ds || action.len() != da {
        return Err(CoreError::shape("dara_augment: feature dims"));
    }
    let mut sas = Vec::with_capacity(2 * ds + da);
    sas.extend_from_slice(s_norm);
    sas.extend_from_slice(action);
    sas.extend_from_slice(s_next_norm);
    let mut sa = Vec::with_capacity(ds + da);
    sa.extend_from_slice(s_norm);
    sa.extend_from_slice(action);
    let sas_x = Tensor::new(vec![1, 2 * ds + da], sas)?;
    let sa_x = Tensor::new(vec![1, ds + da], sa)?;
    let delta = pair.transition_log_ratio(&sas_x, &sa_x)?[0];
    Ok(reward - eta * delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_dataset, BehaviorPolicy, Domain, EnvParams};

    pub(crate) fn zeroed_pair(ds: usize, da: usize, hidden: usize) -> DomainClassifierPair {
        let mut rng = RngStream::new(0, 0);
        let mut pair = DomainClassifierPair::new(ds, da, hidden, &mut rng);
        for net in [&mut pair.sas, &mut pair.sa] {
            let names: Vec<String> = net.params.names().cloned().collect();
            for name in names {
                let t = net.params.get_mut(&name).unwrap();
                for v in t.values_mut() {
                    *v = 0.0;
                }
            }
        }
        pair
    }

    /// Pair whose logits are constants: hidden path zeroed, final bias set.
    pub(crate) fn constant_logit_pair(
        ds: usize,
        da: usize,
        sas_logit: f64,
        sa_logit: f64,
    ) -> DomainClassifierPair {
        let mut pair = zeroed_pair(ds, da, 8);
        pair.sas.params.get_mut("clf.b2").unwrap().values_mut()[0] = sas_logit;
        pair.sa.params.get_mut("clf.b2").unwrap().values_mut()[0] = sa_logit;
        pair
    }

    #[test]
    fn initial_uncertain_classifier_loss_is_two_ln_two() {
        let pair = zeroed_pair(2, 2, 16);
        let src = Tensor::new(vec![4, 6], vec![0.3; 24]).unwrap();
        let trg = Tensor::new(vec![4, 6], vec![-0.2; 24]).unwrap();
        let loss = pair.sas.loss(&src, &trg).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn balanced_classifiers_give_zero_energy_and_gradient() {
        let pair = zeroed_pair(4, 2, 16);
        let taus = Tensor::new(vec![2, 3, 6], (0..36).map(|i| i as f64 * 0.1).collect()).unwrap();
        let (values, grad) = domain_energy_batch(&pair, &taus).unwrap();
        for v in values {
            assert_eq!(v, 0.0);
        }
        for g in grad.values() {
            assert_eq!(*g, 0.0);
        }
    }

    #[test]
    fn single_transition_log_ratio_example() {
        // p(trg|s,a,s') = 0.8, p(trg|s,a) = 0.5 -> contribution ln(0.2/0.8) = -ln 4
        let p = 0.8f64;
        let pair = constant_logit_pair(4, 2, (p / (1.0 - p)).ln(), 0.0);
        let taus = Tensor::new(vec![1, 2, 6], vec![0.1; 12]).unwrap();
        let (values, _) = domain_energy_batch(&pair, &taus).unwrap();
        assert!((values[0] - (-(4.0f64).ln())).abs() < 1e-12, "{}", values[0]);
    }

    #[test]
    fn logit_identity_per_transition() {
        let mut rng = RngStream::new(12, 0);
        let pair = DomainClassifierPair::new(4, 2, 32, &mut rng);
        let taus = Tensor::new(vec![3, 4, 6], rng.normal_vec(72)).unwrap();
        let sas_x = features::sas_features(&taus, 4, 2).unwrap();
        let sa_x = features::sa_features(&taus, 4, 2).unwrap();
        let via_log_ratio = pair.transition_log_ratio(&sas_x, &sa_x).unwrap();
        let l_sas = pair.sas.logits(&sas_x).unwrap();
        let l_sa = pair.sa.logits(&sa_x).unwrap();
        for i in 0..via_log_ratio.len() {
            assert!(
                (via_log_ratio[i] - (l_sa[i] - l_sas[i])).abs() < 1e-12,
                "transition {i}"
            );
        }
    }

    #[test]
    fn domain_energy_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(13, 0);
        let pair = DomainClassifierPair::new(4, 2, 32, &mut rng);
        let taus = Tensor::new(vec![1, 3, 6], rng.normal_vec(18)).unwrap();
        let (_, grad) = domain_energy_batch(&pair, &taus).unwrap();
        let h = 1e-5;
        for idx in 0..taus.len() {
            let mut plus = taus.clone();
            plus.values_mut()[idx] += h;
            let mut minus = taus.clone();
            minus.values_mut()[idx] -= h;
            let vp: f64 = domain_energy_values(&pair, &plus).unwrap().iter().sum();
            let vm: f64 = domain_energy_values(&pair, &minus).unwrap().iter().sum();
            let fd = (vp - vm) / (2.0 * h);
            let an = grad.values()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "idx {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn identical_distributions_are_not_separable() {
        let params = EnvParams::default();
        let src = collect_dataset(&params, BehaviorPolicy::MediumPd, 4000, Domain::Source, 21)
            .unwrap();
        let trg = collect_dataset(&params, BehaviorPolicy::MediumPd, 4000, Domain::Target, 22)
            .unwrap();
        let norm = Normalizer::fit(&src).unwrap();
        let config = ClassifierTrainConfig {
            hidden: 64,
            steps: 600,
            seed: 3,
            ..ClassifierTrainConfig::default()
        };
        let (pair, _) = train_domain_classifiers(&src, &trg, &norm, &config).unwrap();

        // Held-out draws from the same generating process.
        let src_ho = collect_dataset(&params, BehaviorPolicy::MediumPd, 5000, Domain::Source, 77)
            .unwrap();
        let trg_ho = collect_dataset(&params, BehaviorPolicy::MediumPd, 5000, Domain::Target, 78)
            .unwrap();
        let (sas_src, _) = transition_feature_rows(&src_ho, &norm);
        let (sas_trg, _) = transition_feature_rows(&trg_ho, &norm);
        let dim = 10;
        let xs = Tensor::new(vec![5000, dim], sas_src).unwrap();
        let xt = Tensor::new(vec![5000, dim], sas_trg).unwrap();
        let mut correct = 0usize;
        for &l in &pair.sas.logits(&xs).unwrap() {
            if l <= 0.0 {
                correct += 1;
            }
        }
        for &l in &pair.sas.logits(&xt).unwrap() {
            if l > 0.0 {
                correct += 1;
            }
        }
        let acc = correct as f64 / 10_000.0;
        assert!((0.45..=0.55).contains(&acc), "null-case accuracy {acc}");
    }

    #[test]
    fn shifted_dynamics_are_separable() {
        let src_params = EnvParams { noise_std: 0.02, ..EnvParams::default() };
        // Strong gravity shift: next states differ systematically.
        let trg_params = src_params.with_shift(5.0, 1.0);
        let src = collect_dataset(&src_params, BehaviorPolicy::MediumPd, 4000, Domain::Source, 31)
            .unwrap();
        let trg = collect_dataset(&trg_params, BehaviorPolicy::MediumPd, 4000, Domain::Target, 32)
            .unwrap();
        let norm = Normalizer::fit(&src).unwrap();
        let config = ClassifierTrainConfig {
            hidden: 64,
            steps: 1500,
            lr: 1e-3,
            seed: 4,
            ..ClassifierTrainConfig::default()
        };
        let (pair, _) = train_domain_classifiers(&src, &trg, &norm, &config).unwrap();

        let src_ho = collect_dataset(&src_params, BehaviorPolicy::MediumPd, 2000, Domain::Source, 91)
            .unwrap();
        let trg_ho = collect_dataset(&trg_params, BehaviorPolicy::MediumPd, 2000, Domain::Target, 92)
            .unwrap();
        let (sas_src, _) = transition_feature_rows(&src_ho, &norm);
        let (sas_trg, _) = transition_feature_rows(&trg_ho, &norm);
        let xs = Tensor::new(vec![2000, 10], sas_src).unwrap();
        let xt = Tensor::new(vec![2000, 10], sas_trg).unwrap();
        let mut correct = 0usize;
        for &l in &pair.sas.logits(&xs).unwrap() {
            if l <= 0.0 {
                correct += 1;
            }
        }
        for &l in &pair.sas.logits(&xt).unwrap() {
            if l > 0.0 {
                correct += 1;
            }
        }
        let acc = correct as f64 / 4000.0;
        assert!(acc > 0.95, "separable-case accuracy {acc}");
    }

    #[test]
    fn dara_zero_eta_and_balanced_classifiers() {
        let pair = zeroed_pair(4, 2, 8);
        let s = [0.1, 0.2, 0.3, 0.4];
        let a = [0.5, -0.5];
        let sn = [0.2, 0.3, 0.4, 0.5];
        // Balanced classifiers: log-ratio zero regardless of eta.
        let r = dara_augment(&pair, &s, &a, &sn, 1.25, 3.0).unwrap();
        assert_eq!(r, 1.25);
        // eta = 0 with arbitrary classifiers.
        let mut rng = RngStream::new(1, 1);
        let pair = DomainClassifierPair::new(4, 2, 16, &mut rng);
        let r = dara_augment(&pair, &s, &a, &sn, 1.25, 0.0).unwrap();
        assert_eq!(r, 1.25);
    }

    #[test]
    fn dara_worked_example() {
        let p = 0.8f64;
        let pair = constant_logit_pair(4, 2, (p / (1.0 - p)).ln(), 0.0);
        let s = [0.0; 4];
        let a = [0.0; 2];
        let r = dara_augment(&pair, &s, &a, &s, 1.0, 1.0).unwrap();
        // delta = -ln 4, so r~ = 1 + ln 4
        assert!((r - (1.0 + (4.0f64).ln())).abs() < 1e-12, "{r}");
    }

    #[test]
    fn dara_equals_negative_domain_energy_contribution() {
        let mut rng = RngStream::new(17, 0);
        let pair = DomainClassifierPair::new(4, 2, 32, &mut rng);
        // Build a 2-row segment so its single transition matches the DARA call.
        let row0: Vec<f64> = rng.normal_vec(6);
        let row1: Vec<f64> = rng.normal_vec(6);
        let mut tau = row0.clone();
        tau.extend_from_slice(&row1);
        let taus = Tensor::new(vec![1, 2, 6], tau).unwrap();
        let (values, _) = domain_energy_batch(&pair, &taus).unwrap();
        let eta = 0.7;
        let r = 0.4;
        let r_aug = dara_augment(&pair, &row0[..4], &row0[4..], &row1[..4], r, eta).unwrap();
        assert!(
            (r_aug - (r - eta * values[0])).abs() < 1e-12,
            "{r_aug} vs {}",
            r - eta * values[0]
        );
    }
}
