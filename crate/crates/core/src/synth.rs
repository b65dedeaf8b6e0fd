//! Synthetic-data pipeline: unconditioned guided generation at a transition
//! budget, reward annotation via the learned reward model, two-stage
//! filtering (domain energy, then return energy), and assembly of the
//! synthetic replay buffer next to the untouched target data.

use crate::autodiff::Tensor;
use crate::energy::{
    domain_energy_values, return_energy_values, EnergyBundle, RewardAnnotator,
};
use crate::env::segment::{segments_to_tensor, TrajectorySegment};
use crate::env::{Normalizer, Transition};
use crate::sampler::{
    batch_to_segments, sample_batch_traced, CleanPredictor, ConditionSpec, SamplerConfig,
};
use crate::{CoreError, Result};

/// A generated segment with its filtering energies and annotated rewards.
#[derive(Debug, Clone)]
pub struct ScoredSegment {
    pub segment: TrajectorySegment,
    pub domain_energy: f64,
    pub return_energy: f64,
    /// One reward per consecutive-row transition (H-1 of them).
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub domain_keep: f64,
    pub return_keep: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { domain_keep: 0.1, return_keep: 0.5 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("domain_keep", self.domain_keep), ("return_keep", self.return_keep)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(CoreError::config(format!(
                    "filter ratio {name} must lie in (0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}

/// Number of segments needed so that `budget` transitions are available:
/// each segment yields H-1 transitions.
pub fn segments_for_budget(budget: usize, horizon: usize) -> Result<usize> {
    if budget == 0 {
        return Err(CoreError::usage("generation budget must be > 0"));
    }
    if horizon < 2 {
        return Err(CoreError::usage("generation needs H >= 2"));
    }
    Ok(budget.div_ceil(horizon - 1))
}

/// Unconditioned guided generation of enough segments to cover the
/// transition budget. Deterministic per seed; generation runs in chunks so
/// memory stays bounded, with per-sample streams indexed globally.
pub fn generate_synthetic(
    predictor: &dyn CleanPredictor,
    bundle: &EnergyBundle,
    sampler: &SamplerConfig,
    budget: usize,
    seed: u64,
) -> Result<Vec<TrajectorySegment>> {
    let total = segments_for_budget(budget, sampler.horizon)?;
    let chunk = sampler.n_samples.max(1);
    let mut segments = Vec::with_capacity(total);
    let guidance: Option<&dyn crate::sampler::GuidanceSource> =
        if bundle.weights == crate::energy::GuidanceWeights::ZERO {
            None
        } else {
            Some(bundle)
        };
    let mut produced = 0usize;
    let mut chunk_index = 0u64;
    while produced < total {
        let n = chunk.min(total - produced);
        let mut config = sampler.clone();
        config.n_samples = n;
        // Distinct stream block per chunk keeps chains independent while the
        // chunk size stays a free performance knob.
        config.master_seed = seed ^ chunk_index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let batch = sample_batch_traced(predictor, guidance, &config, &ConditionSpec::none(), None)?;
        let mut segs = batch_to_segments(&batch, config.state_dim, config.action_dim)?;
        for (i, s) in segs.iter_mut().enumerate() {
            s.episode_id = produced + i;
        }
        produced += n;
        chunk_index += 1;
        segments.append(&mut segs);
    }
    Ok(segments)
}

/// Annotate each consecutive-row transition with the learned reward model;
/// evaluation happens in normalized state space, actions raw.
pub fn annotate_rewards(
    annotator: &RewardAnnotator,
    segments: &[TrajectorySegment],
) -> Result<Vec<Vec<f64>>> {
    let mut all = Vec::with_capacity(segments.len());
    for seg in segments {
        let h = seg.horizon();
        if h < 2 {
            return Err(CoreError::usage("annotate_rewards: segment needs H >= 2"));
        }
        let ds = seg.state_dim();
        let da = seg.action_dim();
        let dim = 2 * ds + da;
        let mut rows = Vec::with_capacity((h - 1) * dim);
        for t in 0..h - 1 {
            rows.extend_from_slice(seg.state(t));
            rows.extend_from_slice(seg.action(t));
            rows.extend_from_slice(seg.state(t + 1));
        }
        let x = Tensor::new(vec![h - 1, dim], rows)?;
        all.push(annotator.predict(&x)?);
    }
    Ok(all)
}

/// Score segments with the bundle's domain and return energies (clean
/// segments, forward-only).
pub fn score_segments(
    bundle: &EnergyBundle,
    segments: &[TrajectorySegment],
    rewards: Vec<Vec<f64>>,
) -> Result<Vec<ScoredSegment>> {
    if segments.is_empty() {
        return Err(CoreError::empty("score_segments: no segments"));
    }
    let batch = segments_to_tensor(segments)?;
    let e1 = domain_energy_values(bundle.require_classifiers()?, &batch)?;
    let e2 = return_energy_values(bundle.require_return_predictor()?, &batch)?;
    Ok(segments
        .iter()
        .zip(rewards)
        .zip(e1.into_iter().zip(e2))
        .map(|((seg, rew), (domain_energy, return_energy))| ScoredSegment {
            segment: seg.clone(),
            domain_energy,
            return_energy,
            rewards: rew,
        })
        .collect())
}

fn keep_count(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64).floor() as usize).max(1)
}

/// Two-stage filter: keep the floor(p1*M) lowest-domain-energy segments
/// (minimum one), then the floor(p2*M1) lowest-return-energy of those. Ties
/// break by segment index; the result keeps original index order.
pub fn filter_trajectories(
    scored: &[ScoredSegment],
    config: &FilterConfig,
) -> Result<Vec<usize>> {
    config.validate()?;
    if scored.is_empty() {
        return Err(CoreError::empty("filter_trajectories: no segments"));
    }
    let m = scored.len();
    let stage1 = keep_count(config.domain_keep, m);
    let mut by_domain: Vec<usize> = (0..m).collect();
    by_domain.sort_by(|&a, &b| {
        scored[a]
            .domain_energy
            .total_cmp(&scored[b].domain_energy)
            .then(a.cmp(&b))
    });
    let mut survivors: Vec<usize> = by_domain[..stage1].to_vec();

    let stage2 = keep_count(config.return_keep, survivors.len());
    survivors.sort_by(|&a, &b| {
        scored[a]
            .return_energy
            .total_cmp(&scored[b].return_energy)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = survivors[..stage2].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Extracted synthetic transitions plus the untouched target buffer.
#[derive(Debug, Clone)]
pub struct AssembledData {
    pub synthetic: Vec<Transition>,
    pub target: Vec<Transition>,
}

/// Turn retained segments into environment-scale transitions: states
/// denormalized, actions clipped to [-1, 1], rewards from the annotator,
/// done = false everywhere (generated segments carry no termination).
pub fn assemble_training_set(
    scored: &[ScoredSegment],
    retained: &[usize],
    normalizer: &Normalizer,
    target: &[Transition],
) -> Result<AssembledData> {
    if retained.is_empty() {
        return Err(CoreError::empty(
            "assemble_training_set: nothing retained; loosen the filter ratios",
        ));
    }
    let mut synthetic = Vec::new();
    for (episode_id, &idx) in retained.iter().enumerate() {
        let s = &scored[idx];
        let seg = &s.segment;
        for t in 0..seg.horizon() - 1 {
            let raw_s = normalizer.denormalize(seg.state(t));
            let raw_next = normalizer.denormalize(seg.state(t + 1));
            let a = seg.action(t);
            synthetic.push(Transition {
                s: [raw_s[0], raw_s[1], raw_s[2], raw_s[3]],
                a: [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)],
                r: s.rewards[t],
                s_next: [raw_next[0], raw_next[1], raw_next[2], raw_next[3]],
                done: false,
                episode_id,
                t,
            });
        }
    }
    Ok(AssembledData { synthetic, target: target.to_vec() })
}
