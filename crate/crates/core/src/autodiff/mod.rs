//! Minimal reverse-mode autodiff over small dense networks.
//!
//! Graphs are symbolic and immutable; evaluation writes into a per-call
//! scratch [`graph::Evaluation`], so concurrent read-only evaluation is safe.
//! Backward returns gradients with respect to parameters (training) and
//! inputs (energy guidance needs gradients of learned energies w.r.t. the
//! trajectory itself).

pub mod adam;
pub mod fd;
pub mod graph;
pub mod nets;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, ema_update, AdamConfig, AdamState};
pub use graph::{backward, forward, Evaluation, Gradients, Graph, GraphBuilder, NodeId, ParamSet};
pub use rng::RngStream;
pub use tensor::Tensor;

/// Log-density of a diagonal Gaussian: sum over dimensions of
/// `-log_std - ln(2*pi)/2 - ((x - mean) / exp(log_std))^2 / 2`.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> crate::Result<f64> {
    if x.len() != mean.len() || x.len() != log_std.len() {
        return Err(crate::CoreError::shape(format!(
            "gaussian_log_prob: x has {} dims, mean {}, log_std {}",
            x.len(),
            mean.len(),
            log_std.len()
        )));
    }
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    let mut total = 0.0;
    for i in 0..x.len() {
        let z = (x[i] - mean[i]) / log_std[i].exp();
        total += -log_std[i] - HALF_LN_2PI - 0.5 * z * z;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_prob_at_mode_unit_sigma() {
        // d = 1: -0.5 ln(2 pi)
        let lp = gaussian_log_prob(&[0.3], &[0.3], &[0.0]).unwrap();
        assert!((lp - (-0.918938533204672_7)).abs() < 1e-12);
        // d = 2: -ln(2 pi)
        let lp2 = gaussian_log_prob(&[0.1, -0.4], &[0.1, -0.4], &[0.0, 0.0]).unwrap();
        assert!((lp2 - (-1.837877066409345_4)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_translation_invariant() {
        let x = [0.7, -1.2, 0.05];
        let m = [0.2, 0.3, -0.9];
        let ls = [0.1, -0.3, 0.7];
        let a = gaussian_log_prob(&x, &m, &ls).unwrap();
        let shift = 3.25;
        let xs: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let ms: Vec<f64> = m.iter().map(|v| v + shift).collect();
        let b = gaussian_log_prob(&xs, &ms, &ls).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn log_prob_unit_residual() {
        // x - mean = 1, log_std = 0 -> -0.5 ln(2 pi) - 0.5
        let lp = gaussian_log_prob(&[1.0], &[0.0], &[0.0]).unwrap();
        assert!((lp - (-1.4189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn log_prob_dim_mismatch() {
        assert!(gaussian_log_prob(&[1.0, 2.0], &[0.0], &[0.0]).is_err());
    }
}
