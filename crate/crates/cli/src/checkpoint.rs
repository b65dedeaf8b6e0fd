//! Versioned JSON checkpoints. Parameter values are decimal strings with 17
//! significant digits, so every f64 round-trips bitwise. A format-version
//! mismatch refuses to load; a corrupted file reports the byte offset.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use offdyn_core::autodiff::{AdamState, ParamSet, Tensor};
use offdyn_core::diffusion::{DenoiserArch, DenoiserModel, NoiseSchedule};
use offdyn_core::energy::{
    BehaviorPolicyModel, DomainClassifierPair, EnergyBundle, GuidanceWeights, ReturnArch,
    ReturnPredictor, RewardAnnotator,
};
use offdyn_core::energy::classifiers::ClassifierNet;
use offdyn_core::env::Normalizer;
use offdyn_core::iql::IqlModel;

use crate::dataset_io::format_float;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorJson {
    pub shape: Vec<usize>,
    pub values: Vec<String>,
}

impl TensorJson {
    pub fn from_tensor(t: &Tensor) -> Self {
        TensorJson {
            shape: t.shape().to_vec(),
            values: t.values().iter().map(|&v| format_float(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let values: Result<Vec<f64>> = self
            .values
            .iter()
            .map(|s| s.parse::<f64>().with_context(|| format!("bad float {s}")))
            .collect();
        Tensor::new(self.shape.clone(), values?).map_err(|e| anyhow::anyhow!("{e}"))
    }
}

pub fn params_to_json(params: &ParamSet) -> BTreeMap<String, TensorJson> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), TensorJson::from_tensor(t)))
        .collect()
}

pub fn params_from_json(map: &BTreeMap<String, TensorJson>) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    for (name, t) in map {
        params.insert(name.clone(), t.to_tensor()?);
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerJson {
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Vec<String>>,
    pub second_moment: BTreeMap<String, Vec<String>>,
}

impl OptimizerJson {
    pub fn from_state(state: &AdamState) -> Self {
        let (first, second, step_count) = state.export();
        let fmt = |m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|&x| format_float(x)).collect()))
                .collect()
        };
        OptimizerJson { step_count, first_moment: fmt(first), second_moment: fmt(second) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizerJson {
    pub mean: Vec<String>,
    pub std: Vec<String>,
}

impl NormalizerJson {
    pub fn from_normalizer(n: &Normalizer) -> Self {
        NormalizerJson {
            mean: n.mean.iter().map(|&v| format_float(v)).collect(),
            std: n.std.iter().map(|&v| format_float(v)).collect(),
        }
    }

    pub fn to_normalizer(&self) -> Result<Normalizer> {
        let parse = |v: &[String]| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().with_context(|| format!("bad float {s}")))
                .collect()
        };
        Ok(Normalizer { mean: parse(&self.mean)?, std: parse(&self.std)? })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub component: String,
    pub config_hash: String,
    pub seed: u64,
    pub architecture: serde_json::Value,
    pub param_groups: BTreeMap<String, BTreeMap<String, TensorJson>>,
    pub optimizer: Option<OptimizerJson>,
    pub normalizer: Option<NormalizerJson>,
    pub schedule_betas: Option<Vec<String>>,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    crate::metrics::atomic_write(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("missing checkpoint {}", path.display()))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| {
        let offset = byte_offset(&text, e.line(), e.column());
        anyhow::anyhow!(
            "corrupted checkpoint {} at byte offset {offset}: {e}",
            path.display()
        )
    })?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        bail!(
            "checkpoint {} has format version {}, this build reads version {}",
            path.display(),
            checkpoint.format_version,
            CHECKPOINT_VERSION
        );
    }
    Ok(checkpoint)
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.lines().enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

// ---- diffusion ----

pub fn diffusion_checkpoint(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    normalizer: &Normalizer,
    optimizer: Option<&AdamState>,
    config_hash: &str,
    seed: u64,
) -> Checkpoint {
    let architecture = match &model.arch {
        DenoiserArch::Dense { hidden } => serde_json::json!({
            "kind": "dense", "hidden": hidden,
            "horizon": model.horizon, "row_dim": model.row_dim,
            "ema_decay": model.ema_decay,
        }),
        DenoiserArch::Conv { channels, kernel } => serde_json::json!({
            "kind": "conv", "channels": channels, "kernel": kernel,
            "horizon": model.horizon, "row_dim": model.row_dim,
            "ema_decay": model.ema_decay,
        }),
    };
    let mut param_groups = BTreeMap::new();
    param_groups.insert("params".to_string(), params_to_json(&model.params));
    param_groups.insert("ema".to_string(), params_to_json(&model.ema_params));
    Checkpoint {
        format_version: CHECKPOINT_VERSION,
        component: "diffusion".to_string(),
        config_hash: config_hash.to_string(),
        seed,
        architecture,
        param_groups,
        optimizer: optimizer.map(OptimizerJson::from_state),
        normalizer: Some(NormalizerJson::from_normalizer(normalizer)),
        schedule_betas: Some(schedule.betas().iter().map(|&b| format_float(b)).collect()),
    }
}

pub fn load_diffusion(checkpoint: &Checkpoint) -> Result<(DenoiserModel, NoiseSchedule, Normalizer)> {
    if checkpoint.component != "diffusion" {
        bail!("expected a diffusion checkpoint, found {}", checkpoint.component);
    }
    let arch_value = &checkpoint.architecture;
    let kind = arch_value["kind"].as_str().context("architecture.kind")?;
    let horizon = arch_value["horizon"].as_u64().context("architecture.horizon")? as usize;
    let row_dim = arch_value["row_dim"].as_u64().context("architecture.row_dim")? as usize;
    let ema_decay = arch_value["ema_decay"].as_f64().context("architecture.ema_decay")?;
    let arch = match kind {
        "dense" => DenoiserArch::Dense {
            hidden: arch_value["hidden"].as_u64().context("architecture.hidden")? as usize,
        },
        "conv" => DenoiserArch::Conv {
            channels: arch_value["channels"].as_u64().context("architecture.channels")? as usize,
            kernel: arch_value["kernel"].as_u64().context("architecture.kernel")? as usize,
        },
        other => bail!("unknown denoiser kind {other}"),
    };
    let params = params_from_json(
        checkpoint.param_groups.get("params").context("missing params group")?,
    )?;
    let ema = params_from_json(
        checkpoint.param_groups.get("ema").context("missing ema group")?,
    )?;
    let model = DenoiserModel::from_params(arch, horizon, row_dim, ema_decay, params, ema);
    let betas: Result<Vec<f64>> = checkpoint
        .schedule_betas
        .as_ref()
        .context("missing schedule")?
        .iter()
        .map(|s| s.parse::<f64>().context("bad beta"))
        .collect();
    let schedule = NoiseSchedule::from_betas(betas?).map_err(|e| anyhow::anyhow!("{e}"))?;
    let normalizer = checkpoint
        .normalizer
        .as_ref()
        .context("missing normalizer")?
        .to_normalizer()?;
    Ok((model, schedule, normalizer))
}

// ---- energy bundle + reward annotator ----

pub struct EnergyArtifacts {
    pub bundle: EnergyBundle,
    pub annotator: RewardAnnotator,
}

pub fn energy_checkpoint(
    artifacts: &EnergyArtifacts,
    gamma: f64,
    config_hash: &str,
    seed: u64,
) -> Result<Checkpoint> {
    let bundle = &artifacts.bundle;
    let classifiers = bundle
        .classifiers
        .as_ref()
        .context("energy checkpoint needs trained classifiers")?;
    let ret = bundle
        .return_predictor
        .as_ref()
        .context("energy checkpoint needs a trained return predictor")?;
    let behavior = bundle
        .behavior_policy
        .as_ref()
        .context("energy checkpoint needs a trained behavior policy")?;
    let ret_arch = match &ret.arch {
        ReturnArch::Conv { channels, kernel } => {
            serde_json::json!({"kind": "conv", "channels": channels, "kernel": kernel})
        }
        ReturnArch::Dense { hidden } => serde_json::json!({"kind": "dense", "hidden": hidden}),
    };
    let architecture = serde_json::json!({
        "state_dim": classifiers.state_dim,
        "action_dim": classifiers.action_dim,
        "gamma": gamma,
        "horizon": ret.horizon,
        "row_dim": ret.row_dim,
        "return_arch": ret_arch,
        "lambda": {
            "domain": bundle.weights.domain,
            "return": bundle.weights.ret,
            "policy": bundle.weights.policy,
        },
    });
    let mut param_groups = BTreeMap::new();
    param_groups.insert("sas".to_string(), params_to_json(&classifiers.sas.params));
    param_groups.insert("sa".to_string(), params_to_json(&classifiers.sa.params));
    param_groups.insert("return".to_string(), params_to_json(&ret.params));
    param_groups.insert("behavior".to_string(), params_to_json(&behavior.params));
    param_groups.insert("reward".to_string(), params_to_json(&artifacts.annotator.params));
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        component: "energy".to_string(),
        config_hash: config_hash.to_string(),
        seed,
        architecture,
        param_groups,
        optimizer: None,
        normalizer: Some(NormalizerJson::from_normalizer(&bundle.normalizer)),
        schedule_betas: None,
    })
}

pub fn load_energy(checkpoint: &Checkpoint) -> Result<EnergyArtifacts> {
    if checkpoint.component != "energy" {
        bail!("expected an energy checkpoint, found {}", checkpoint.component);
    }
    let arch = &checkpoint.architecture;
    let state_dim = arch["state_dim"].as_u64().context("state_dim")? as usize;
    let action_dim = arch["action_dim"].as_u64().context("action_dim")? as usize;
    let gamma = arch["gamma"].as_f64().context("gamma")?;
    let horizon = arch["horizon"].as_u64().context("horizon")? as usize;
    let row_dim = arch["row_dim"].as_u64().context("row_dim")? as usize;
    let ret_arch = match arch["return_arch"]["kind"].as_str().context("return_arch.kind")? {
        "conv" => ReturnArch::Conv {
            channels: arch["return_arch"]["channels"].as_u64().context("channels")? as usize,
            kernel: arch["return_arch"]["kernel"].as_u64().context("kernel")? as usize,
        },
        "dense" => ReturnArch::Dense {
            hidden: arch["return_arch"]["hidden"].as_u64().context("hidden")? as usize,
        },
        other => bail!("unknown return arch {other}"),
    };
    let weights = GuidanceWeights {
        domain: arch["lambda"]["domain"].as_f64().context("lambda.domain")?,
        ret: arch["lambda"]["return"].as_f64().context("lambda.return")?,
        policy: arch["lambda"]["policy"].as_f64().context("lambda.policy")?,
    };
    let group = |name: &str| -> Result<ParamSet> {
        params_from_json(
            checkpoint
                .param_groups
                .get(name)
                .with_context(|| format!("missing param group {name}"))?,
        )
    };
    let sas = ClassifierNet::from_params(2 * state_dim + action_dim, group("sas")?);
    let sa = ClassifierNet::from_params(state_dim + action_dim, group("sa")?);
    let classifiers = DomainClassifierPair { state_dim, action_dim, sas, sa };
    let ret = ReturnPredictor::from_params(ret_arch, gamma, horizon, row_dim, group("return")?);
    let behavior = BehaviorPolicyModel::from_params(state_dim, action_dim, group("behavior")?);
    let annotator = RewardAnnotator::from_params(state_dim, action_dim, group("reward")?);
    let normalizer = checkpoint
        .normalizer
        .as_ref()
        .context("missing normalizer")?
        .to_normalizer()?;
    Ok(EnergyArtifacts {
        bundle: EnergyBundle {
            classifiers: Some(classifiers),
            return_predictor: Some(ret),
            behavior_policy: Some(behavior),
            weights,
            normalizer,
        },
        annotator,
    })
}

// ---- IQL policy ----

pub fn policy_checkpoint(
    model: &IqlModel,
    normalizer: &Normalizer,
    arm: &str,
    config_hash: &str,
    seed: u64,
) -> Checkpoint {
    let mut param_groups = BTreeMap::new();
    for (name, params) in offdyn_core::iql::export_params(model) {
        param_groups.insert(name, params_to_json(&params));
    }
    Checkpoint {
        format_version: CHECKPOINT_VERSION,
        component: "policy".to_string(),
        config_hash: config_hash.to_string(),
        seed,
        architecture: serde_json::json!({
            "state_dim": model.state_dim,
            "action_dim": model.action_dim,
            "arm": arm,
        }),
        param_groups,
        optimizer: None,
        normalizer: Some(NormalizerJson::from_normalizer(normalizer)),
        schedule_betas: None,
    }
}

pub fn load_policy(checkpoint: &Checkpoint) -> Result<(IqlModel, Normalizer)> {
    if checkpoint.component != "policy" {
        bail!("expected a policy checkpoint, found {}", checkpoint.component);
    }
    let arch = &checkpoint.architecture;
    let state_dim = arch["state_dim"].as_u64().context("state_dim")? as usize;
    let action_dim = arch["action_dim"].as_u64().context("action_dim")? as usize;
    let group = |name: &str| -> Result<ParamSet> {
        params_from_json(
            checkpoint
                .param_groups
                .get(name)
                .with_context(|| format!("missing param group {name}"))?,
        )
    };
    let model = IqlModel::from_params(
        state_dim,
        action_dim,
        group("v")?,
        group("q1")?,
        group("q2")?,
        group("q1_target")?,
        group("q2_target")?,
        group("policy")?,
    );
    let normalizer = checkpoint
        .normalizer
        .as_ref()
        .context("missing normalizer")?
        .to_normalizer()?;
    Ok((model, normalizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use offdyn_core::autodiff::RngStream;
    use offdyn_core::diffusion::cosine_schedule;

    #[test]
    fn diffusion_checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(5, 0);
        let model = DenoiserModel::new(DenoiserArch::Dense { hidden: 16 }, 4, 6, 0.999, &mut rng)
            .unwrap();
        let schedule = cosine_schedule(10).unwrap();
        let normalizer = Normalizer { mean: vec![0.1; 4], std: vec![1.5; 4] };
        let checkpoint =
            diffusion_checkpoint(&model, &schedule, &normalizer, None, "hash123", 7);
        let path = dir.path().join("diffusion.json");
        save_checkpoint(&path, &checkpoint).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config_hash, "hash123");
        let (model2, schedule2, norm2) = load_diffusion(&loaded).unwrap();
        assert_eq!(model.params, model2.params);
        assert_eq!(model.ema_params, model2.ema_params);
        assert_eq!(schedule, schedule2);
        assert_eq!(normalizer, norm2);
    }

    #[test]
    fn version_gate_refuses_future_formats() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(6, 0);
        let model = DenoiserModel::new(DenoiserArch::Dense { hidden: 8 }, 2, 6, 0.9, &mut rng)
            .unwrap();
        let schedule = cosine_schedule(4).unwrap();
        let normalizer = Normalizer { mean: vec![0.0; 4], std: vec![1.0; 4] };
        let mut checkpoint =
            diffusion_checkpoint(&model, &schedule, &normalizer, None, "h", 0);
        checkpoint.format_version = CHECKPOINT_VERSION + 1;
        let path = dir.path().join("future.json");
        save_checkpoint(&path, &checkpoint).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
    }

    #[test]
    fn corrupted_checkpoint_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format_version\": 1, !!!").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("byte offset"), "{err}");
    }
}
