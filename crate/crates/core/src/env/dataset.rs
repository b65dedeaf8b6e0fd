//! Offline transition datasets with episode structure.

use super::pointmass::{initial_state, step, BehaviorPolicy, EnvParams, EnvState};
use crate::autodiff::RngStream;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: [f64; 4],
    pub a: [f64; 2],
    pub r: f64,
    pub s_next: [f64; 4],
    pub done: bool,
    pub episode_id: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub domain: Domain,
    transitions: Vec<Transition>,
    /// episode_id -> [start, end) into `transitions`.
    episodes: Vec<(usize, usize)>,
}

impl OfflineDataset {
    /// Wrap transitions already in (episode, t) order, rebuilding the episode
    /// index and validating contiguity.
    pub fn from_transitions(domain: Domain, transitions: Vec<Transition>) -> Result<Self> {
        let mut episodes: Vec<(usize, usize)> = Vec::new();
        for (i, tr) in transitions.iter().enumerate() {
            if tr.episode_id == episodes.len() {
                episodes.push((i, i + 1));
            } else if tr.episode_id + 1 == episodes.len() {
                let ep = episodes.last_mut().unwrap();
                let expected_t = i - ep.0;
                if tr.t != expected_t {
                    return Err(CoreError::usage(format!(
                        "episode {} step {} found where t={expected_t} expected",
                        tr.episode_id, tr.t
                    )));
                }
                ep.1 = i + 1;
            } else {
                return Err(CoreError::usage(format!(
                    "episode ids must be consecutive; saw {} after {} episodes",
                    tr.episode_id,
                    episodes.len()
                )));
            }
        }
        Ok(OfflineDataset { domain, transitions, episodes })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    pub fn episode(&self, id: usize) -> &[Transition] {
        let (start, end) = self.episodes[id];
        &self.transitions[start..end]
    }

    pub fn mean_episode_return(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        let total: f64 = self.transitions.iter().map(|t| t.r).sum();
        total / self.episodes.len() as f64
    }
}

/// Roll out the behavior policy until exactly `n_transitions` transitions are
/// collected; whole episodes except possibly the last. Deterministic per
/// seed: episode e uses the derived stream (seed, collect/e).
pub fn collect_dataset(
    params: &EnvParams,
    policy: BehaviorPolicy,
    n_transitions: usize,
    domain: Domain,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_transitions == 0 {
        return Err(CoreError::usage("collect_dataset: n_transitions must be > 0"));
    }
    params.validate()?;
    let root = RngStream::new(seed, 0xC011_EC7);
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut episode_id = 0;
    while transitions.len() < n_transitions {
        let mut rng = root.derive(episode_id as u64);
        let mut state = initial_state(&mut rng);
        for t in 0..params.episode_len {
            let a = policy.action(params, &state, &mut rng);
            let (next, r) = step(params, &state, a, &mut rng)?;
            transitions.push(Transition {
                s: state.observe(),
                a,
                r,
                s_next: next.observe(),
                done: t + 1 == params.episode_len,
                episode_id,
                t,
            });
            state = next;
            if transitions.len() == n_transitions {
                break;
            }
        }
        episode_id += 1;
    }
    OfflineDataset::from_transitions(domain, transitions)
}

/// Mean undiscounted return of a policy over `episodes` fresh episodes; used
/// for the random/expert score anchors.
pub fn policy_mean_return(
    params: &EnvParams,
    policy: BehaviorPolicy,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    params.validate()?;
    let root = RngStream::new(seed, 0xE7A1);
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut rng = root.derive(ep as u64);
        let mut state = initial_state(&mut rng);
        let mut ep_return = 0.0;
        for _ in 0..params.episode_len {
            let a = policy.action(params, &state, &mut rng);
            let (next, r) = step(params, &state, a, &mut rng)?;
            ep_return += r;
            state = next;
        }
        total += ep_return;
    }
    Ok(total / episodes as f64)
}

/// One environment rollout driven by an arbitrary action function; shared by
/// planner and policy evaluation. Returns (undiscounted return, states, actions).
pub fn rollout_with<F>(
    params: &EnvParams,
    seed_stream: &mut RngStream,
    mut act: F,
) -> Result<(f64, Vec<[f64; 4]>, Vec<[f64; 2]>)>
where
    F: FnMut(&[f64; 4], &mut RngStream) -> Result<[f64; 2]>,
{
    params.validate()?;
    let mut state = initial_state(seed_stream);
    let mut ep_return = 0.0;
    let mut states = Vec::with_capacity(params.episode_len);
    let mut actions = Vec::with_capacity(params.episode_len);
    for _ in 0..params.episode_len {
        let obs = state.observe();
        let a = act(&obs, seed_stream)?;
        let (next, r) = step(params, &state, a, seed_stream)?;
        states.push(obs);
        actions.push(a);
        ep_return += r;
        state = next;
    }
    Ok((ep_return, states, actions))
}

/// Applies `f` to the states of an [`EnvState`]-shaped observation vector.
pub fn obs_env_state(obs: &[f64; 4]) -> EnvState {
    EnvState { position: [obs[0], obs[1]], velocity: [obs[2], obs[3]] }
}
