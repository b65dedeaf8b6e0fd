//! Receding-horizon planner: at every decision step, sample N guided
//! candidates conditioned on the current state, pick the one with the lowest
//! return energy, execute its first action, replan from the next state.

use crate::autodiff::{RngStream, Tensor};
use crate::energy::{return_energy_values, EnergyBundle};
use crate::env::dataset::rollout_with;
use crate::env::{normalized_score, EnvParams, Normalizer};
use crate::sampler::{sample_batch_traced, CleanPredictor, ConditionSpec, SamplerConfig};
use crate::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub candidates: usize,
    pub sampler: SamplerConfig,
    pub action_low: f64,
    pub action_high: f64,
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(CoreError::config("planner: need at least one candidate"));
        }
        if self.action_low >= self.action_high {
            return Err(CoreError::config("planner: action bounds inverted"));
        }
        self.sampler.validate()
    }
}

/// Lowest-E2 candidate index; ties break toward the lower sample index.
pub fn select_lowest_energy(energies: &[f64]) -> Result<usize> {
    if energies.is_empty() {
        return Err(CoreError::empty("select_lowest_energy: no candidates"));
    }
    let mut best = 0;
    for (i, &e) in energies.iter().enumerate().skip(1) {
        if e < energies[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One planning decision: normalize the raw state, sample conditioned
/// candidates, select by return energy, return the clipped first action.
/// `decision_seed` keys the candidate noise so each decision step replans
/// with fresh chains.
pub fn plan_action(
    predictor: &dyn CleanPredictor,
    bundle: &EnergyBundle,
    config: &PlannerConfig,
    s_cur: &[f64; 4],
    normalizer: &Normalizer,
    decision_seed: u64,
) -> Result<[f64; 2]> {
    config.validate()?;
    let mut sampler_config = config.sampler.clone();
    sampler_config.n_samples = config.candidates;
    sampler_config.master_seed = decision_seed;
    let s_norm = normalizer.normalize(s_cur);
    let guidance: Option<&dyn crate::sampler::GuidanceSource> =
        if bundle.weights == crate::energy::GuidanceWeights::ZERO {
            None
        } else {
            Some(bundle)
        };
    let batch = sample_batch_traced(
        predictor,
        guidance,
        &sampler_config,
        &ConditionSpec::on_state(s_norm),
        None,
    )?;
    let energies = candidate_return_energies(bundle, &batch)?;
    let best = select_lowest_energy(&energies)?;
    let (h, c) = (sampler_config.horizon, sampler_config.row_dim());
    let row0 = &batch.values()[best * h * c..best * h * c + c];
    let ds = sampler_config.state_dim;
    Ok([
        row0[ds].clamp(config.action_low, config.action_high),
        row0[ds + 1].clamp(config.action_low, config.action_high),
    ])
}

/// Selection score: E2 from the trained predictor.
pub fn candidate_return_energies(bundle: &EnergyBundle, batch: &Tensor) -> Result<Vec<f64>> {
    let model = bundle.require_return_predictor()?;
    return_energy_values(model, batch)
}

/// Roll one episode with replanning at every step. The env stream and the
/// per-decision candidate seeds both derive from `seed`, so the episode is
/// reproducible end to end.
pub fn run_planner_episode(
    env: &EnvParams,
    predictor: &dyn CleanPredictor,
    bundle: &EnergyBundle,
    config: &PlannerConfig,
    normalizer: &Normalizer,
    seed: u64,
) -> Result<(f64, Vec<[f64; 4]>, Vec<[f64; 2]>)> {
    let mut env_rng = RngStream::new(seed, 0x91A);
    let mut decision = 0u64;
    rollout_with(env, &mut env_rng, |obs, _| {
        let a = plan_action(
            predictor,
            bundle,
            config,
            obs,
            normalizer,
            derive_decision_seed(seed, decision),
        )?;
        decision += 1;
        Ok(a)
    })
}

fn derive_decision_seed(seed: u64, decision: u64) -> u64 {
    let mut x = seed ^ decision.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 27)
}

#[derive(Debug, Clone)]
pub struct PlannerEvaluation {
    pub per_seed_means: Vec<f64>,
    pub per_episode_returns: Vec<Vec<f64>>,
    pub mean_score: f64,
    pub std_score: f64,
}

/// Normalized-score statistics across seeds; J_random/J_expert anchors must
/// come from the same env params.
pub fn evaluate_planner(
    env: &EnvParams,
    predictor: &dyn CleanPredictor,
    bundle: &EnergyBundle,
    config: &PlannerConfig,
    normalizer: &Normalizer,
    episodes: usize,
    seeds: &[u64],
    j_random: f64,
    j_expert: f64,
) -> Result<PlannerEvaluation> {
    if seeds.is_empty() || episodes == 0 {
        return Err(CoreError::usage("evaluate_planner: need seeds and episodes"));
    }
    let mut per_seed_means = Vec::with_capacity(seeds.len());
    let mut per_episode_returns = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut returns = Vec::with_capacity(episodes);
        for ep in 0..episodes {
            let ep_seed = derive_decision_seed(seed, 0xEE00 + ep as u64);
            let (ret, _, _) =
                run_planner_episode(env, predictor, bundle, config, normalizer, ep_seed)?;
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
    Ok(PlannerEvaluation {
        per_seed_means,
        per_episode_returns,
        mean_score,
        std_score: var.sqrt(),
    })
}
