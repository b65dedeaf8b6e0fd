//! Trajectory segments: length-H windows of (normalized state, raw action)
//! rows from a single episode. The diffusion model's data unit.

use super::dataset::OfflineDataset;
use super::normalize::Normalizer;
use crate::autodiff::Tensor;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySegment {
    /// Row-major H x (d_s + d_a): normalized state then raw action per row.
    data: Vec<f64>,
    horizon: usize,
    state_dim: usize,
    action_dim: usize,
    pub episode_id: usize,
    pub start_t: usize,
}

impl TrajectorySegment {
    pub fn new(
        data: Vec<f64>,
        horizon: usize,
        state_dim: usize,
        action_dim: usize,
        episode_id: usize,
        start_t: usize,
    ) -> Result<Self> {
        if data.len() != horizon * (state_dim + action_dim) {
            return Err(CoreError::shape(format!(
                "segment: {} values for H={horizon}, d_s={state_dim}, d_a={action_dim}",
                data.len()
            )));
        }
        Ok(TrajectorySegment { data, horizon, state_dim, action_dim, episode_id, start_t })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn row_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.row_dim();
        &self.data[t * c..(t + 1) * c]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.row(t)[..self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.row(t)[self.state_dim..]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.horizon, self.row_dim()], self.data.clone())
            .expect("segment data is consistent by construction")
    }
}

/// Stack segments into a [N, H, C] tensor.
pub fn segments_to_tensor(segments: &[TrajectorySegment]) -> Result<Tensor> {
    let first = segments
        .first()
        .ok_or_else(|| CoreError::empty("segments_to_tensor: no segments"))?;
    let (h, c) = (first.horizon(), first.row_dim());
    let mut data = Vec::with_capacity(segments.len() * h * c);
    for s in segments {
        if s.horizon() != h || s.row_dim() != c {
            return Err(CoreError::shape("segments_to_tensor: inconsistent segment shapes"));
        }
        data.extend_from_slice(s.values());
    }
    Tensor::new(vec![segments.len(), h, c], data)
}

/// Stride-1 windows of length `h`, never crossing an episode boundary.
/// States are normalized, actions kept raw. An episode with L transitions
/// yields max(0, L - h + 1) segments.
pub fn extract_segments(
    dataset: &OfflineDataset,
    normalizer: &Normalizer,
    h: usize,
) -> Result<Vec<TrajectorySegment>> {
    if h < 2 {
        return Err(CoreError::usage("extract_segments: H must be >= 2"));
    }
    let state_dim = normalizer.dim();
    let mut segments = Vec::new();
    for ep in 0..dataset.episode_count() {
        let transitions = dataset.episode(ep);
        if transitions.len() < h {
            continue;
        }
        for start in 0..=transitions.len() - h {
            let mut data = Vec::with_capacity(h * (state_dim + 2));
            for tr in &transitions[start..start + h] {
                data.extend_from_slice(&normalizer.normalize(&tr.s));
                data.extend_from_slice(&tr.a);
            }
            segments.push(TrajectorySegment::new(
                data,
                h,
                state_dim,
                2,
                ep,
                transitions[start].t,
            )?);
        }
    }
    Ok(segments)
}

/// Per-step rewards aligned with a segment's rows, for return-regression
/// targets.
pub fn segment_rewards(dataset: &OfflineDataset, segment: &TrajectorySegment) -> Vec<f64> {
    let transitions = dataset.episode(segment.episode_id);
    (0..segment.horizon())
        .map(|i| transitions[segment.start_t + i].r)
        .collect()
}
