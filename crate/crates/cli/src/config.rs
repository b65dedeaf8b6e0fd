//! Experiment configuration: JSON file with one block per pipeline phase,
//! strict about unknown keys, hashed for artifact provenance.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use offdyn_core::diffusion::{DenoiserArch, DiffusionTrainConfig};
use offdyn_core::energy::{
    BehaviorTrainConfig, ClassifierTrainConfig, GuidanceWeights, ReturnArch, ReturnTrainConfig,
    RewardTrainConfig,
};
use offdyn_core::env::pointmass::EnvParams;
use offdyn_core::iql::IqlConfig;
use offdyn_core::sampler::{RhoSchedule, SamplerConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ShiftBlock {
    pub kappa_grav: f64,
    pub kappa_fric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvBlock {
    pub source: ShiftBlock,
    pub target: ShiftBlock,
    pub dt: f64,
    pub g0: f64,
    pub mu0: f64,
    pub u_max: f64,
    pub noise_std: f64,
    pub goal: [f64; 2],
    pub episode_len: usize,
}

impl EnvBlock {
    pub fn source_params(&self) -> EnvParams {
        self.params(&self.source)
    }

    pub fn target_params(&self) -> EnvParams {
        self.params(&self.target)
    }

    fn params(&self, shift: &ShiftBlock) -> EnvParams {
        EnvParams {
            kappa_grav: shift.kappa_grav,
            kappa_fric: shift.kappa_fric,
            dt: self.dt,
            g0: self.g0,
            mu0: self.mu0,
            u_max: self.u_max,
            noise_std: self.noise_std,
            goal: self.goal,
            episode_len: self.episode_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub source_transitions: usize,
    pub target_transitions: usize,
    /// random | medium | expert
    pub source_policy: String,
    pub target_policy: String,
    pub anchor_episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionBlock {
    /// dense | conv
    pub arch: String,
    pub hidden: usize,
    pub channels: usize,
    pub kernel: usize,
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub cosine_lr: bool,
}

impl DiffusionBlock {
    pub fn denoiser_arch(&self) -> Result<DenoiserArch> {
        match self.arch.as_str() {
            "dense" => Ok(DenoiserArch::Dense { hidden: self.hidden }),
            "conv" => Ok(DenoiserArch::Conv { channels: self.channels, kernel: self.kernel }),
            other => bail!("config: diffusion.arch must be dense|conv, got {other}"),
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<DiffusionTrainConfig> {
        Ok(DiffusionTrainConfig {
            arch: self.denoiser_arch()?,
            steps: self.train_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            cosine_lr: self.cosine_lr,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnergyBlock {
    pub hidden: usize,
    pub train_steps: usize,
    pub batch_each: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    /// conv | dense
    pub return_arch: String,
    pub return_channels: usize,
    pub return_kernel: usize,
    pub reward_lr: f64,
    pub reward_steps: usize,
    pub lambda_domain: f64,
    pub lambda_return: f64,
    pub lambda_policy: f64,
    /// Candidate values for the domain/return weight sweep.
    pub lambda_sweep: Vec<f64>,
}

impl EnergyBlock {
    pub fn classifier_config(&self, seed: u64) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            hidden: self.hidden,
            steps: self.train_steps,
            batch_each: self.batch_each,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    pub fn return_arch(&self) -> Result<ReturnArch> {
        match self.return_arch.as_str() {
            "conv" => Ok(ReturnArch::Conv {
                channels: self.return_channels,
                kernel: self.return_kernel,
            }),
            "dense" => Ok(ReturnArch::Dense { hidden: self.hidden }),
            other => bail!("config: energy.return_arch must be conv|dense, got {other}"),
        }
    }

    pub fn return_config(&self, seed: u64) -> Result<ReturnTrainConfig> {
        Ok(ReturnTrainConfig {
            arch: self.return_arch()?,
            gamma: self.gamma,
            steps: self.train_steps,
            batch_size: self.batch_each,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
        })
    }

    pub fn behavior_config(&self, seed: u64) -> BehaviorTrainConfig {
        BehaviorTrainConfig {
            hidden: self.hidden,
            steps: self.train_steps,
            batch_size: self.batch_each,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
        }
    }

    pub fn reward_config(&self, seed: u64) -> RewardTrainConfig {
        RewardTrainConfig {
            hidden: self.hidden,
            steps: self.reward_steps,
            batch_size: self.batch_each,
            lr: self.reward_lr,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn weights(&self) -> GuidanceWeights {
        GuidanceWeights {
            domain: self.lambda_domain,
            ret: self.lambda_return,
            policy: self.lambda_policy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerBlock {
    pub rho: f64,
    /// constant | signal  (signal: rho_k = rho * sqrt(alpha_bar_k))
    pub rho_mode: String,
    pub temperature_plan: f64,
    pub temperature_generate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PlannerBlock {
    pub candidates: usize,
    pub eval_episodes: usize,
    pub eval_seeds: Vec<u64>,
    /// guided | plain
    pub arm: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineBlock {
    pub budget: usize,
    pub domain_keep: f64,
    pub return_keep: f64,
    /// Generation chunk size (performance knob, not semantics).
    pub chunk: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IqlBlock {
    pub expectile: f64,
    pub adv_temperature: f64,
    pub gamma: f64,
    pub polyak: f64,
    pub lr: f64,
    pub hidden: usize,
    pub batch_per_buffer: usize,
    pub train_steps: usize,
    pub adv_weight_clip: f64,
    /// syn+trg | trg | src+trg | dara
    pub data: String,
    /// DARA reward-penalty coefficient.
    pub dara_eta: f64,
}

impl IqlBlock {
    pub fn iql_config(&self, seed: u64) -> IqlConfig {
        IqlConfig {
            expectile: self.expectile,
            adv_temperature: self.adv_temperature,
            gamma: self.gamma,
            polyak: self.polyak,
            lr: self.lr,
            hidden: self.hidden,
            batch_per_buffer: self.batch_per_buffer,
            steps: self.train_steps,
            adv_weight_clip: self.adv_weight_clip,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvBlock,
    pub data: DataBlock,
    pub diffusion: DiffusionBlock,
    pub energy: EnergyBlock,
    pub sampler: SamplerBlock,
    pub planner: PlannerBlock,
    pub pipeline: PipelineBlock,
    pub iql: IqlBlock,
    pub out_dir: String,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvBlock {
                source: ShiftBlock { kappa_grav: 1.0, kappa_fric: 1.0 },
                target: ShiftBlock { kappa_grav: 2.0, kappa_fric: 1.0 },
                dt: 0.05,
                g0: 1.0,
                mu0: 0.5,
                u_max: 3.0,
                noise_std: 0.05,
                goal: [0.5, 0.5],
                episode_len: 100,
            },
            data: DataBlock {
                source_transitions: 50_000,
                target_transitions: 1_000,
                source_policy: "medium".into(),
                target_policy: "medium".into(),
                anchor_episodes: 20,
            },
            diffusion: DiffusionBlock {
                arch: "dense".into(),
                hidden: 256,
                channels: 32,
                kernel: 5,
                horizon: 8,
                diffusion_steps: 20,
                train_steps: 50_000,
                batch_size: 64,
                lr: 2e-4,
                weight_decay: 1e-5,
                ema_decay: 0.9999,
                cosine_lr: true,
            },
            energy: EnergyBlock {
                hidden: 256,
                train_steps: 20_000,
                batch_each: 64,
                lr: 2e-4,
                weight_decay: 1e-4,
                gamma: 0.99,
                return_arch: "conv".into(),
                return_channels: 32,
                return_kernel: 3,
                reward_lr: 3e-4,
                reward_steps: 20_000,
                lambda_domain: 1.0,
                lambda_return: 1.0,
                lambda_policy: 0.1,
                lambda_sweep: vec![0.1, 0.5, 1.0, 2.0],
            },
            sampler: SamplerBlock {
                rho: 1.0,
                rho_mode: "signal".into(),
                temperature_plan: 0.5,
                temperature_generate: 1.0,
            },
            planner: PlannerBlock {
                candidates: 64,
                eval_episodes: 10,
                eval_seeds: vec![0, 1, 2],
                arm: "guided".into(),
            },
            pipeline: PipelineBlock {
                budget: 50_000,
                domain_keep: 0.1,
                return_keep: 0.5,
                chunk: 64,
            },
            iql: IqlBlock {
                expectile: 0.7,
                adv_temperature: 3.0,
                gamma: 0.99,
                polyak: 0.005,
                lr: 3e-4,
                hidden: 256,
                batch_per_buffer: 128,
                train_steps: 50_000,
                adv_weight_clip: 100.0,
                data: "syn+trg".into(),
                dara_eta: 1.0,
            },
            out_dir: "runs/default".into(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(
        path: &Path,
        seed_override: Option<u64>,
        out_override: Option<&str>,
        overrides: &[String],
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("config file {} not readable", path.display()))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).context("config is not valid JSON")?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let mut config: ExperimentConfig = serde_json::from_value(value)
            .context("config validation failed (unknown or missing key?)")?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        if let Some(out) = out_override {
            config.out_dir = out.to_string();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.source_params().validate()?;
        self.env.target_params().validate()?;
        for (name, policy) in [
            ("data.source_policy", &self.data.source_policy),
            ("data.target_policy", &self.data.target_policy),
        ] {
            parse_policy(policy).with_context(|| format!("config key {name}"))?;
        }
        self.diffusion.denoiser_arch()?;
        self.energy.return_arch()?;
        if self.diffusion.horizon < 2 {
            bail!("config: diffusion.horizon must be >= 2");
        }
        if self.diffusion.diffusion_steps < 2 {
            bail!("config: diffusion.diffusion_steps must be >= 2");
        }
        if !matches!(self.planner.arm.as_str(), "guided" | "plain") {
            bail!("config: planner.arm must be guided|plain, got {}", self.planner.arm);
        }
        if !matches!(self.iql.data.as_str(), "syn+trg" | "trg" | "src+trg" | "dara") {
            bail!(
                "config: iql.data must be syn+trg|trg|src+trg|dara, got {}",
                self.iql.data
            );
        }
        if !(self.pipeline.domain_keep > 0.0 && self.pipeline.domain_keep <= 1.0)
            || !(self.pipeline.return_keep > 0.0 && self.pipeline.return_keep <= 1.0)
        {
            bail!("config: pipeline keep ratios must lie in (0,1]");
        }
        Ok(())
    }

    /// Content digest of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.seed)
    }

    pub fn sampler_config(&self, temperature: f64, n_samples: usize, seed: u64) -> Result<SamplerConfig> {
        let rho = match self.sampler.rho_mode.as_str() {
            "constant" => RhoSchedule::Constant(self.sampler.rho),
            "signal" => RhoSchedule::SignalScaled { scale: self.sampler.rho },
            other => bail!("config: sampler.rho_mode must be constant|signal, got {other}"),
        };
        Ok(SamplerConfig {
            schedule: offdyn_core::diffusion::cosine_schedule(self.diffusion.diffusion_steps)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            rho,
            temperature,
            n_samples,
            master_seed: seed,
            horizon: self.diffusion.horizon,
            state_dim: 4,
            action_dim: 2,
        })
    }
}

pub fn parse_policy(name: &str) -> Result<offdyn_core::env::BehaviorPolicy> {
    use offdyn_core::env::BehaviorPolicy;
    match name {
        "random" => Ok(BehaviorPolicy::RandomUniform),
        "medium" => Ok(BehaviorPolicy::MediumPd),
        "expert" => Ok(BehaviorPolicy::ExpertPd),
        other => bail!("unknown behavior policy {other} (random|medium|expert)"),
    }
}

fn apply_override(value: &mut serde_json::Value, item: &str) -> Result<()> {
    let (path, raw) = item
        .split_once('=')
        .with_context(|| format!("--set {item} is not key=value"))?;
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            let obj = cursor
                .as_object_mut()
                .with_context(|| format!("--set {path}: {part} is not an object"))?;
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = cursor
            .get_mut(*part)
            .with_context(|| format!("--set {path}: no such block {part}"))?;
    }
    unreachable!("split always yields at least one part")
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shift descriptor for report rows: which kappa differs from the source and
/// by how much.
pub fn shift_descriptor(config: &ExperimentConfig) -> (String, f64) {
    let src = &config.env.source;
    let trg = &config.env.target;
    if (trg.kappa_grav - src.kappa_grav).abs() > 1e-12 {
        ("gravity".to_string(), trg.kappa_grav)
    } else if (trg.kappa_fric - src.kappa_fric).abs() > 1e-12 {
        ("friction".to_string(), trg.kappa_fric)
    } else {
        ("none".to_string(), 1.0)
    }
}
