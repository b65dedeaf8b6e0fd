//! Energy-guided trajectory diffusion for off-dynamics offline RL.
//!
//! A source-domain trajectory diffusion model is steered toward a shifted
//! target domain with learned energies (domain classifiers, return predictor,
//! behavior policy). The guided samples drive a receding-horizon planner and
//! a synthetic-data pipeline feeding IQL policy optimization.
//!
//! Everything runs on a small self-contained f64 autodiff engine so training
//! and guidance gradients share one code path and stay bit-deterministic.

pub mod autodiff;
pub mod diffusion;
pub mod energy;
pub mod env;
pub mod error;
pub mod iql;
pub mod planner;
pub mod sampler;
pub mod synth;

pub use error::{CoreError, Result};
