//! The three guidance energies, their trainers, the weighted guidance
//! gradient, the reward annotator, and the DARA reward-augmentation baseline.
//!
//! All constants C, C1, C2, C3 of the energy decomposition are fixed to zero:
//! they do not affect gradient-based guidance, and filtering only compares
//! energy order. Energies are trained on clean data but evaluated on the
//! current noisy sample during guidance, with no noise-level conditioning.

pub mod behavior;
pub mod classifiers;
pub mod features;
pub mod returns;
pub mod reward;

pub use behavior::{
    policy_energy_batch, policy_energy_values, train_behavior_policy, BehaviorPolicyModel,
    BehaviorTrainConfig, LOG_STD_MAX, LOG_STD_MIN,
};
pub use classifiers::{
    dara_augment, domain_energy_batch, domain_energy_values, train_domain_classifiers,
    ClassifierNet, ClassifierTrainConfig, DomainClassifierPair,
};
pub use returns::{
    discounted_return, return_energy_batch, return_energy_values, train_return_predictor,
    ReturnArch, ReturnPredictor, ReturnTrainConfig,
};
pub use reward::{
    reward_features, train_reward_annotator, RewardAnnotator, RewardTrainConfig,
};

use crate::autodiff::Tensor;
use crate::env::Normalizer;
use crate::{CoreError, Result};

/// Non-negative weights for the domain, return and policy energies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceWeights {
    pub domain: f64,
    pub ret: f64,
    pub policy: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights { domain: 1.0, ret: 1.0, policy: 0.1 }
    }
}

impl GuidanceWeights {
    pub const ZERO: GuidanceWeights = GuidanceWeights { domain: 0.0, ret: 0.0, policy: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("domain", self.domain), ("return", self.ret), ("policy", self.policy)] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::config(format!(
                    "guidance weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Trained energy modules plus weights and the shared normalization context.
/// Members may be absent while their weight is zero.
#[derive(Debug, Clone)]
pub struct EnergyBundle {
    pub classifiers: Option<DomainClassifierPair>,
    pub return_predictor: Option<ReturnPredictor>,
    pub behavior_policy: Option<BehaviorPolicyModel>,
    pub weights: GuidanceWeights,
    pub normalizer: Normalizer,
}

impl EnergyBundle {
    /// Weighted energy of a trajectory batch plus its gradient; used by
    /// tests and the finite-difference oracle.
    pub fn weighted_energy_values(&self, taus: &Tensor) -> Result<Vec<f64>> {
        let n = taus.shape()[0];
        let mut totals = vec![0.0; n];
        if self.weights.domain > 0.0 {
            let pair = self.require_classifiers()?;
            for (t, v) in totals.iter_mut().zip(domain_energy_values(pair, taus)?) {
                *t += self.weights.domain * v;
            }
        }
        if self.weights.ret > 0.0 {
            let model = self.require_return_predictor()?;
            for (t, v) in totals.iter_mut().zip(return_energy_values(model, taus)?) {
                *t += self.weights.ret * v;
            }
        }
        if self.weights.policy > 0.0 {
            let model = self.require_behavior_policy()?;
            for (t, v) in totals.iter_mut().zip(policy_energy_values(model, taus)?) {
                *t += self.weights.policy * v;
            }
        }
        Ok(totals)
    }

    pub fn require_classifiers(&self) -> Result<&DomainClassifierPair> {
        self.classifiers.as_ref().ok_or_else(|| {
            CoreError::config("domain guidance weight is nonzero but classifiers are untrained")
        })
    }

    pub fn require_return_predictor(&self) -> Result<&ReturnPredictor> {
        self.return_predictor.as_ref().ok_or_else(|| {
            CoreError::config("return guidance weight is nonzero but the predictor is untrained")
        })
    }

    pub fn require_behavior_policy(&self) -> Result<&BehaviorPolicyModel> {
        self.behavior_policy.as_ref().ok_or_else(|| {
            CoreError::config("policy guidance weight is nonzero but the policy is untrained")
        })
    }
}

/// Guidance score `h = -(lambda_1 dE1 + lambda_2 dE2 + lambda_3 dE3)`,
/// evaluated directly on the current (noisy) trajectory batch. The diffusion
/// step index is unused by the energies themselves; any noise-level
/// modulation belongs to the sampler's per-step scale.
pub fn weighted_energy_gradient(
    bundle: &EnergyBundle,
    taus: &Tensor,
    _k: usize,
) -> Result<Tensor> {
    bundle.weights.validate()?;
    let mut h = Tensor::zeros(taus.shape().to_vec());
    if bundle.weights.domain > 0.0 {
        let pair = bundle.require_classifiers()?;
        let (_, grad) = domain_energy_batch(pair, taus)?;
        axpy(&mut h, -bundle.weights.domain, &grad);
    }
    if bundle.weights.ret > 0.0 {
        let model = bundle.require_return_predictor()?;
        let (_, grad) = return_energy_batch(model, taus)?;
        axpy(&mut h, -bundle.weights.ret, &grad);
    }
    if bundle.weights.policy > 0.0 {
        let model = bundle.require_behavior_policy()?;
        let (_, grad) = policy_energy_batch(model, taus)?;
        axpy(&mut h, -bundle.weights.policy, &grad);
    }
    Ok(h)
}

fn axpy(acc: &mut Tensor, alpha: f64, x: &Tensor) {
    for (a, &v) in acc.values_mut().iter_mut().zip(x.values()) {
        *a += alpha * v;
    }
}
