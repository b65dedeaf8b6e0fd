//! Toy off-dynamics environment family: a 2-D stochastic point-mass with a
//! friction-analog damping scale and a gravity-analog constant pull, plus
//! dataset collection, normalization, segment extraction and score
//! normalization.

pub mod dataset;
pub mod normalize;
pub mod pointmass;
pub mod segment;

pub use dataset::{collect_dataset, policy_mean_return, Domain, OfflineDataset, Transition};
pub use normalize::Normalizer;
pub use pointmass::{step, BehaviorPolicy, EnvParams, EnvState};
pub use segment::{extract_segments, segments_to_tensor, TrajectorySegment};

use crate::{CoreError, Result};

/// `(J - J_random) / (J_expert - J_random) * 100`.
pub fn normalized_score(j: f64, j_random: f64, j_expert: f64) -> Result<f64> {
    if !(j.is_finite() && j_random.is_finite() && j_expert.is_finite()) {
        return Err(CoreError::config("normalized_score: non-finite anchor or value"));
    }
    if j_expert == j_random {
        return Err(CoreError::config("normalized_score: degenerate anchors"));
    }
    Ok((j - j_random) / (j_expert - j_random) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_anchors() {
        assert_eq!(normalized_score(-5.0, -20.0, -5.0).unwrap(), 100.0);
        assert_eq!(normalized_score(-20.0, -20.0, -5.0).unwrap(), 0.0);
        assert_eq!(normalized_score(-12.5, -20.0, -5.0).unwrap(), 50.0);
        assert!(normalized_score(0.0, -5.0, -5.0).is_err());
    }
}
