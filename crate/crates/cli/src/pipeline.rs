//! Experiment phases over the filesystem: collect -> train-diffusion ->
//! train-energy -> {plan | generate -> filter -> train-policy} -> evaluate
//! -> report. Every artifact carries the config hash and seed; writes are
//! atomic; phases fail with an error naming any missing upstream artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use offdyn_core::diffusion::{train_denoiser, DenoiserModel, NoiseSchedule};
use offdyn_core::energy::{
    dara_augment, train_behavior_policy, train_domain_classifiers, train_return_predictor,
    train_reward_annotator, EnergyBundle, GuidanceWeights,
};
use offdyn_core::env::segment::TrajectorySegment;
use offdyn_core::env::{
    collect_dataset, extract_segments, policy_mean_return, BehaviorPolicy, Domain, Normalizer,
    OfflineDataset, Transition,
};
use offdyn_core::iql::{evaluate_policy, train_iql};
use offdyn_core::planner::{evaluate_planner, PlannerConfig};
use offdyn_core::sampler::SamplerConfig;
use offdyn_core::synth::{
    annotate_rewards, assemble_training_set, filter_trajectories, generate_synthetic,
    score_segments, FilterConfig, ScoredSegment,
};

use crate::checkpoint::{
    diffusion_checkpoint, energy_checkpoint, load_checkpoint, load_diffusion, load_energy,
    load_policy, policy_checkpoint, save_checkpoint, EnergyArtifacts,
};
use crate::config::{parse_policy, ExperimentConfig};
use crate::dataset_io::{
    format_float, read_anchors, read_dataset, write_anchors, write_dataset, Anchors, EnvAnchors,
};
use crate::metrics::{atomic_write, MetricsWriter};

pub struct Paths {
    out: PathBuf,
}

impl Paths {
    pub fn new(out_dir: &str) -> Self {
        Paths { out: PathBuf::from(out_dir) }
    }

    pub fn root(&self) -> &Path {
        &self.out
    }

    pub fn source_csv(&self) -> PathBuf {
        self.out.join("datasets/source.csv")
    }

    pub fn target_csv(&self) -> PathBuf {
        self.out.join("datasets/target.csv")
    }

    pub fn anchors(&self) -> PathBuf {
        self.out.join("datasets/anchors.json")
    }

    pub fn diffusion_ckpt(&self) -> PathBuf {
        self.out.join("checkpoints/diffusion.json")
    }

    pub fn energy_ckpt(&self) -> PathBuf {
        self.out.join("checkpoints/energy.json")
    }

    pub fn generated(&self) -> PathBuf {
        self.out.join("synth/generated.json")
    }

    pub fn synthetic_csv(&self) -> PathBuf {
        self.out.join("synth/synthetic.csv")
    }

    pub fn sidecar(&self) -> PathBuf {
        self.out.join("synth/sidecar.json")
    }

    pub fn policy_ckpt(&self, arm: &str) -> PathBuf {
        self.out.join(format!("checkpoints/policy_{}.json", arm.replace('+', "_")))
    }

    pub fn planner_eval(&self, arm: &str) -> PathBuf {
        self.out.join(format!("eval/planner_{arm}.json"))
    }

    pub fn policy_eval(&self, arm: &str) -> PathBuf {
        self.out.join(format!("eval/policy_{}.json", arm.replace('+', "_")))
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report/summary.csv")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.out.join("plots")
    }
}

fn phase_seed(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 31)
}

const TAG_COLLECT_SRC: u64 = 1;
const TAG_COLLECT_TRG: u64 = 2;
const TAG_ANCHORS: u64 = 3;
const TAG_DIFFUSION: u64 = 4;
const TAG_CLASSIFIERS: u64 = 5;
const TAG_RETURN: u64 = 6;
const TAG_BEHAVIOR: u64 = 7;
const TAG_REWARD: u64 = 8;
const TAG_GENERATE: u64 = 9;
const TAG_IQL: u64 = 10;

pub fn collect_data(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let hash = config.hash();
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "collect-data", config.seed)?;

    let src_params = config.env.source_params();
    let trg_params = config.env.target_params();
    let src_policy = parse_policy(&config.data.source_policy)?;
    let trg_policy = parse_policy(&config.data.target_policy)?;

    let source = collect_dataset(
        &src_params,
        src_policy,
        config.data.source_transitions,
        Domain::Source,
        phase_seed(config.seed, TAG_COLLECT_SRC),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let target = collect_dataset(
        &trg_params,
        trg_policy,
        config.data.target_transitions,
        Domain::Target,
        phase_seed(config.seed, TAG_COLLECT_TRG),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    write_dataset(&paths.source_csv(), &source)?;
    write_dataset(&paths.target_csv(), &target)?;
    metrics.log(0, "source_transitions", source.len() as f64)?;
    metrics.log(0, "target_transitions", target.len() as f64)?;
    metrics.log(0, "source_mean_episode_return", source.mean_episode_return())?;
    metrics.log(0, "target_mean_episode_return", target.mean_episode_return())?;

    let anchor_seed = phase_seed(config.seed, TAG_ANCHORS);
    let episodes = config.data.anchor_episodes;
    let anchors = Anchors {
        source: EnvAnchors {
            j_random: policy_mean_return(&src_params, BehaviorPolicy::RandomUniform, episodes, anchor_seed)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            j_expert: policy_mean_return(&src_params, BehaviorPolicy::ExpertPd, episodes, anchor_seed)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            episodes,
        },
        target: EnvAnchors {
            j_random: policy_mean_return(&trg_params, BehaviorPolicy::RandomUniform, episodes, anchor_seed)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            j_expert: policy_mean_return(&trg_params, BehaviorPolicy::ExpertPd, episodes, anchor_seed)
                .map_err(|e| anyhow::anyhow!("{e}"))?,
            episodes,
        },
        config_hash: hash,
        seed: config.seed,
    };
    write_anchors(&paths.anchors(), &anchors)?;
    metrics.log(0, "target_j_random", anchors.target.j_random)?;
    metrics.log(0, "target_j_expert", anchors.target.j_expert)?;
    Ok(())
}

fn load_source(paths: &Paths) -> Result<OfflineDataset> {
    read_dataset(&paths.source_csv(), Domain::Source)
        .context("run collect-data first: source dataset missing")
}

fn load_target(paths: &Paths) -> Result<OfflineDataset> {
    read_dataset(&paths.target_csv(), Domain::Target)
        .context("run collect-data first: target dataset missing")
}

pub fn train_diffusion_phase(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "train-diffusion", config.seed)?;
    let source = load_source(&paths)?;
    let normalizer = Normalizer::fit(&source).map_err(|e| anyhow::anyhow!("{e}"))?;
    let segments = extract_segments(&source, &normalizer, config.diffusion.horizon)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    if segments.is_empty() {
        bail!("no source segments: horizon {} exceeds every episode", config.diffusion.horizon);
    }
    let schedule = offdyn_core::diffusion::cosine_schedule(config.diffusion.diffusion_steps)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let train_config = config
        .diffusion
        .train_config(phase_seed(config.seed, TAG_DIFFUSION))?;
    let (model, history) =
        train_denoiser(&segments, &schedule, &train_config).map_err(|e| anyhow::anyhow!("{e}"))?;
    let stride = (history.len() / 200).max(1);
    for (i, loss) in history.iter().enumerate() {
        if i % stride == 0 || i + 1 == history.len() {
            metrics.log(i, "diffusion_loss", *loss)?;
        }
    }
    let checkpoint =
        diffusion_checkpoint(&model, &schedule, &normalizer, None, &config.hash(), config.seed);
    save_checkpoint(&paths.diffusion_ckpt(), &checkpoint)?;
    Ok(())
}

pub fn train_energy_phase(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "train-energy", config.seed)?;
    let source = load_source(&paths)?;
    let target = load_target(&paths)?;
    let normalizer = Normalizer::fit(&source).map_err(|e| anyhow::anyhow!("{e}"))?;

    let (classifiers, clf_history) = train_domain_classifiers(
        &source,
        &target,
        &normalizer,
        &config.energy.classifier_config(phase_seed(config.seed, TAG_CLASSIFIERS)),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    // Return predictor trains on segments of the combined data.
    let h = config.diffusion.horizon;
    let mut segments = extract_segments(&source, &normalizer, h).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut rewards: Vec<Vec<f64>> = segments
        .iter()
        .map(|s| offdyn_core::env::segment::segment_rewards(&source, s))
        .collect();
    let trg_segments = extract_segments(&target, &normalizer, h).map_err(|e| anyhow::anyhow!("{e}"))?;
    rewards.extend(
        trg_segments
            .iter()
            .map(|s| offdyn_core::env::segment::segment_rewards(&target, s)),
    );
    segments.extend(trg_segments);
    let (return_predictor, ret_history) = train_return_predictor(
        &segments,
        &rewards,
        &config.energy.return_config(phase_seed(config.seed, TAG_RETURN))?,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    let (behavior, bc_history) = train_behavior_policy(
        &source,
        &normalizer,
        &config.energy.behavior_config(phase_seed(config.seed, TAG_BEHAVIOR)),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    let (annotator, rew_history) = train_reward_annotator(
        &[&source, &target],
        &normalizer,
        &config.energy.reward_config(phase_seed(config.seed, TAG_REWARD)),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    for (name, history) in [
        ("classifier_loss", &clf_history),
        ("return_loss", &ret_history),
        ("behavior_nll", &bc_history),
        ("reward_loss", &rew_history),
    ] {
        let stride = (history.len() / 100).max(1);
        for (i, loss) in history.iter().enumerate() {
            if i % stride == 0 || i + 1 == history.len() {
                metrics.log(i, name, *loss)?;
            }
        }
    }

    let artifacts = EnergyArtifacts {
        bundle: EnergyBundle {
            classifiers: Some(classifiers),
            return_predictor: Some(return_predictor),
            behavior_policy: Some(behavior),
            weights: config.energy.weights(),
            normalizer,
        },
        annotator,
    };
    let checkpoint = energy_checkpoint(&artifacts, config.energy.gamma, &config.hash(), config.seed)?;
    save_checkpoint(&paths.energy_ckpt(), &checkpoint)?;
    Ok(())
}

fn load_diffusion_artifacts(paths: &Paths) -> Result<(DenoiserModel, NoiseSchedule, Normalizer)> {
    let checkpoint = load_checkpoint(&paths.diffusion_ckpt())
        .context("run train-diffusion first: diffusion checkpoint missing")?;
    load_diffusion(&checkpoint)
}

fn load_energy_artifacts(paths: &Paths) -> Result<EnergyArtifacts> {
    let checkpoint = load_checkpoint(&paths.energy_ckpt())
        .context("run train-energy first: energy checkpoint missing")?;
    load_energy(&checkpoint)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub arm: String,
    pub mean_score: f64,
    pub std_score: f64,
    pub per_seed_scores: Vec<f64>,
    pub per_episode_returns: Vec<Vec<f64>>,
    pub config_hash: String,
    pub seed: u64,
}

pub fn plan_phase(config: &ExperimentConfig) -> Result<EvalSummary> {
    let paths = Paths::new(&config.out_dir);
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "plan", config.seed)?;
    let (denoiser, schedule, _) = load_diffusion_artifacts(&paths)?;
    let mut artifacts = load_energy_artifacts(&paths)?;
    let anchors = read_anchors(&paths.anchors())?;

    let arm = config.planner.arm.clone();
    if arm == "plain" {
        artifacts.bundle.weights = GuidanceWeights::ZERO;
    } else {
        artifacts.bundle.weights = config.energy.weights();
    }
    let sampler = SamplerConfig {
        schedule,
        ..config.sampler_config(config.sampler.temperature_plan, config.planner.candidates, 0)?
    };
    let planner_config = PlannerConfig {
        candidates: config.planner.candidates,
        sampler,
        action_low: -1.0,
        action_high: 1.0,
    };
    let eval = evaluate_planner(
        &config.env.target_params(),
        &denoiser,
        &artifacts.bundle,
        &planner_config,
        &artifacts.bundle.normalizer.clone(),
        config.planner.eval_episodes,
        &config.planner.eval_seeds,
        anchors.target.j_random,
        anchors.target.j_expert,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;

    for (i, score) in eval.per_seed_means.iter().enumerate() {
        metrics.log(i, &format!("planner_{arm}_score"), *score)?;
        for (ep, ret) in eval.per_episode_returns[i].iter().enumerate() {
            metrics.log(ep, &format!("planner_{arm}_return_seed{i}"), *ret)?;
        }
    }
    let summary = EvalSummary {
        arm: format!("planner_{arm}"),
        mean_score: eval.mean_score,
        std_score: eval.std_score,
        per_seed_scores: eval.per_seed_means,
        per_episode_returns: eval.per_episode_returns,
        config_hash: config.hash(),
        seed: config.seed,
    };
    atomic_write(
        &paths.planner_eval(&arm),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

/// Serialized generated segments with their energies and annotated rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedFile {
    pub config_hash: String,
    pub seed: u64,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub segments: Vec<GeneratedSegment>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedSegment {
    pub values: Vec<String>,
    pub domain_energy: String,
    pub return_energy: String,
    pub rewards: Vec<String>,
}

pub fn generate_phase(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "generate", config.seed)?;
    let (denoiser, schedule, _) = load_diffusion_artifacts(&paths)?;
    let mut artifacts = load_energy_artifacts(&paths)?;
    artifacts.bundle.weights = config.energy.weights();
    let sampler = SamplerConfig {
        schedule,
        ..config.sampler_config(
            config.sampler.temperature_generate,
            config.pipeline.chunk,
            0,
        )?
    };
    let segments = generate_synthetic(
        &denoiser,
        &artifacts.bundle,
        &sampler,
        config.pipeline.budget,
        phase_seed(config.seed, TAG_GENERATE),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let rewards = annotate_rewards(&artifacts.annotator, &segments)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let scored = score_segments(&artifacts.bundle, &segments, rewards)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    metrics.log(0, "generated_segments", scored.len() as f64)?;
    let mean_e1 = scored.iter().map(|s| s.domain_energy).sum::<f64>() / scored.len() as f64;
    let mean_e2 = scored.iter().map(|s| s.return_energy).sum::<f64>() / scored.len() as f64;
    metrics.log(0, "mean_domain_energy", mean_e1)?;
    metrics.log(0, "mean_return_energy", mean_e2)?;

    let file = GeneratedFile {
        config_hash: config.hash(),
        seed: config.seed,
        horizon: config.diffusion.horizon,
        state_dim: 4,
        action_dim: 2,
        segments: scored
            .iter()
            .map(|s| GeneratedSegment {
                values: s.segment.values().iter().map(|&v| format_float(v)).collect(),
                domain_energy: format_float(s.domain_energy),
                return_energy: format_float(s.return_energy),
                rewards: s.rewards.iter().map(|&v| format_float(v)).collect(),
            })
            .collect(),
    };
    atomic_write(&paths.generated(), serde_json::to_string(&file)?.as_bytes())?;
    Ok(())
}

pub fn read_generated(paths: &Paths) -> Result<Vec<ScoredSegment>> {
    let text = std::fs::read_to_string(paths.generated())
        .context("run generate first: generated segments missing")?;
    let file: GeneratedFile = serde_json::from_str(&text).context("generated.json unreadable")?;
    let parse = |s: &String| -> Result<f64> {
        s.parse::<f64>().with_context(|| format!("bad float {s}"))
    };
    file.segments
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let values: Result<Vec<f64>> = g.values.iter().map(parse).collect();
            let rewards: Result<Vec<f64>> = g.rewards.iter().map(parse).collect();
            Ok(ScoredSegment {
                segment: TrajectorySegment::new(
                    values?,
                    file.horizon,
                    file.state_dim,
                    file.action_dim,
                    i,
                    0,
                )
                .map_err(|e| anyhow::anyhow!("{e}"))?,
                domain_energy: parse(&g.domain_energy)?,
                return_energy: parse(&g.return_energy)?,
                rewards: rewards?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarFile {
    pub config_hash: String,
    pub seed: u64,
    pub retained_indices: Vec<usize>,
    pub domain_energies: Vec<String>,
    pub return_energies: Vec<String>,
}

pub fn filter_phase(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "filter", config.seed)?;
    let scored = read_generated(&paths)?;
    let artifacts = load_energy_artifacts(&paths)?;
    let filter = FilterConfig {
        domain_keep: config.pipeline.domain_keep,
        return_keep: config.pipeline.return_keep,
    };
    let retained = filter_trajectories(&scored, &filter).map_err(|e| anyhow::anyhow!("{e}"))?;
    let assembled = assemble_training_set(
        &scored,
        &retained,
        &artifacts.bundle.normalizer,
        &[],
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    metrics.log(0, "retained_segments", retained.len() as f64)?;
    metrics.log(0, "synthetic_transitions", assembled.synthetic.len() as f64)?;

    let dataset = OfflineDataset::from_transitions(Domain::Target, assembled.synthetic)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    write_dataset(&paths.synthetic_csv(), &dataset)?;
    let sidecar = SidecarFile {
        config_hash: config.hash(),
        seed: config.seed,
        retained_indices: retained.clone(),
        domain_energies: retained.iter().map(|&i| format_float(scored[i].domain_energy)).collect(),
        return_energies: retained.iter().map(|&i| format_float(scored[i].return_energy)).collect(),
    };
    atomic_write(&paths.sidecar(), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(())
}

pub fn train_policy_phase(config: &ExperimentConfig) -> Result<()> {
    let paths = Paths::new(&config.out_dir);
    let arm = config.iql.data.clone();
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "train-policy", config.seed)?;
    let target = load_target(&paths)?;
    let source = Normalizer::fit(&load_source(&paths)?).map_err(|e| anyhow::anyhow!("{e}"))?;
    let normalizer = source;

    let mut buffers: Vec<Vec<Transition>> = Vec::new();
    match arm.as_str() {
        "syn+trg" => {
            let syn = read_dataset(&paths.synthetic_csv(), Domain::Target)
                .context("run filter first: synthetic dataset missing")?;
            buffers.push(syn.transitions().to_vec());
            buffers.push(target.transitions().to_vec());
        }
        "trg" => {
            buffers.push(target.transitions().to_vec());
        }
        "src+trg" => {
            let src = load_source(&paths)?;
            buffers.push(src.transitions().to_vec());
            buffers.push(target.transitions().to_vec());
        }
        "dara" => {
            let src = load_source(&paths)?;
            let artifacts = load_energy_artifacts(&paths)?;
            let pair = artifacts
                .bundle
                .classifiers
                .as_ref()
                .context("energy checkpoint lacks classifiers")?;
            let eta = config.iql.dara_eta;
            let augmented: Result<Vec<Transition>> = src
                .transitions()
                .iter()
                .map(|tr| {
                    let s = normalizer.normalize(&tr.s);
                    let sn = normalizer.normalize(&tr.s_next);
                    let r = dara_augment(pair, &s, &tr.a, &sn, tr.r, eta)
                        .map_err(|e| anyhow::anyhow!("{e}"))?;
                    Ok(Transition { r, ..tr.clone() })
                })
                .collect();
            buffers.push(augmented?);
            buffers.push(target.transitions().to_vec());
        }
        other => bail!("unknown iql.data arm {other}"),
    }

    let buffer_refs: Vec<&[Transition]> = buffers.iter().map(|b| b.as_slice()).collect();
    let iql_config = config.iql.iql_config(phase_seed(config.seed, TAG_IQL));
    let stride = (iql_config.steps / 100).max(1);
    let mut log_error: Option<anyhow::Error> = None;
    let mut on_step = |step: usize, losses: &offdyn_core::iql::IqlLosses| {
        if step % stride == 0 && log_error.is_none() {
            for (name, value) in [
                ("value_loss", losses.value_loss),
                ("q_loss", losses.q_loss),
                ("policy_loss", losses.policy_loss),
            ] {
                if let Err(e) = metrics.log(step, name, value) {
                    log_error = Some(e);
                }
            }
        }
    };
    let (model, _) = train_iql(&buffer_refs, &normalizer, &iql_config, Some(&mut on_step))
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(e) = log_error {
        return Err(e);
    }
    let checkpoint = policy_checkpoint(&model, &normalizer, &arm, &config.hash(), config.seed);
    save_checkpoint(&paths.policy_ckpt(&arm), &checkpoint)?;
    Ok(())
}

pub fn evaluate_phase(config: &ExperimentConfig) -> Result<EvalSummary> {
    let paths = Paths::new(&config.out_dir);
    let arm = config.iql.data.clone();
    let metrics = MetricsWriter::new(&paths.metrics_dir(), &config.run_id(), "evaluate", config.seed)?;
    let checkpoint = load_checkpoint(&paths.policy_ckpt(&arm))
        .with_context(|| format!("run train-policy first: policy checkpoint for arm {arm} missing"))?;
    let (model, normalizer) = load_policy(&checkpoint)?;
    let anchors = read_anchors(&paths.anchors())?;
    let eval = evaluate_policy(
        &config.env.target_params(),
        &model,
        &normalizer,
        config.planner.eval_episodes,
        &config.planner.eval_seeds,
        anchors.target.j_random,
        anchors.target.j_expert,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (i, score) in eval.per_seed_means.iter().enumerate() {
        metrics.log(i, &format!("policy_{arm}_score"), *score)?;
    }
    let summary = EvalSummary {
        arm: format!("policy_{arm}"),
        mean_score: eval.mean_score,
        std_score: eval.std_score,
        per_seed_scores: eval.per_seed_means,
        per_episode_returns: eval.per_episode_returns,
        config_hash: config.hash(),
        seed: config.seed,
    };
    atomic_write(
        &paths.policy_eval(&arm),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(summary)
}

pub fn run_subcommand(name: &str, config: &ExperimentConfig) -> Result<()> {
    match name {
        "collect-data" => collect_data(config),
        "train-diffusion" => train_diffusion_phase(config),
        "train-energy" => train_energy_phase(config),
        "plan" => plan_phase(config).map(|_| ()),
        "generate" => generate_phase(config),
        "filter" => filter_phase(config),
        "train-policy" => train_policy_phase(config),
        "evaluate" => evaluate_phase(config).map(|_| ()),
        "report" => crate::report::report_phase(config),
        other => bail!("unknown subcommand {other}"),
    }
}
