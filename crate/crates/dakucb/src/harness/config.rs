//! Run configuration: a TOML key-tree with CLI `--set` overrides, validation
//! that enumerates every violated field, and resolution into concrete kernel
//! specs, policy parameters and environment templates.
//!
//! Derived seed streams (all ChaCha12, seeded from the master seed):
//! - trial `i` policy/env stream: `seed + i`
//! - per-trial reference-output stream: `(seed + i) ^ REFERENCE_STREAM`
//! - per-trial oracle validation stream: `(seed + i) ^ ORACLE_STREAM`
//! - kernel-calibration sample: `seed ^ CALIBRATION_STREAM`
//! - synthetic env structure (cluster means, anchors): `seed ^ STRUCTURE_STREAM`

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    load_embeddings, EmbeddingDataset, FidelityScorer, GenerativeEnv, ModeSelection, PromptCluster,
    PromptSampler, ReplayEnv, SyntheticArm, SyntheticEnv,
};
use crate::kernels::{median_pairwise_distance, KernelSpec};
use crate::krr::{confidence_radius, ConfidenceParams};
use crate::policies::{DiversityPrimitive, PolicyConfig};
use crate::{Error, Result};

pub const REFERENCE_STREAM: u64 = 0x5245_4653;
pub const ORACLE_STREAM: u64 = 0x4f52_4143;
pub const CALIBRATION_STREAM: u64 = 0x4341_4c42;
pub const STRUCTURE_STREAM: u64 = 0x5354_5243;

fn default_true() -> bool {
    true
}
fn default_eval_every() -> usize {
    25
}
fn default_dim() -> usize {
    16
}
fn default_one() -> usize {
    1
}
fn default_one_f() -> f64 {
    1.0
}
fn default_half() -> f64 {
    0.5
}
fn default_separation() -> f64 {
    4.0
}
fn default_cluster_scale() -> f64 {
    0.25
}
fn default_mode_radius() -> f64 {
    3.0
}
fn default_panel_rate() -> f64 {
    0.25
}
fn default_qp_tolerance() -> f64 {
    1e-9
}
fn default_delta() -> f64 {
    0.1
}
fn default_diversity() -> DiversityPrimitive {
    DiversityPrimitive::NegIJrke
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_validation() -> usize {
    64
}

/// Which policy drives the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Dakucb,
    MixtureDakucb,
    SupDakucb,
    Pakucb,
    Random,
    Oracle,
}

/// A kernel spec whose gaussian bandwidth may be left unset, in which case it
/// is resolved by the median heuristic on a calibration sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<f64>,
    },
    Polynomial {
        gain: f64,
        degree: u32,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Cosine {
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Gaussian { sigma: None }
    }
}

impl KernelConfig {
    fn resolve(&self, calibration: &[Vec<f64>]) -> KernelSpec {
        match self {
            KernelConfig::Gaussian { sigma: Some(s) } => KernelSpec::Gaussian { sigma: *s },
            KernelConfig::Gaussian { sigma: None } => KernelSpec::Gaussian {
                sigma: median_pairwise_distance(calibration).unwrap_or(1.0),
            },
            KernelConfig::Polynomial {
                gain,
                degree,
                normalize,
            } => KernelSpec::Polynomial {
                gain: *gain,
                degree: *degree,
                normalize: *normalize,
            },
            KernelConfig::Cosine { normalize } => KernelSpec::Cosine {
                normalize: *normalize,
            },
        }
    }

    fn check(&self, field: &str, problems: &mut Vec<String>) {
        match self {
            KernelConfig::Gaussian { sigma: Some(s) } if !(s.is_finite() && *s > 0.0) => {
                problems.push(format!("{field}: gaussian sigma must be positive, got {s}"));
            }
            KernelConfig::Polynomial { gain, degree, .. } => {
                if !(gain.is_finite() && *gain > 0.0) {
                    problems.push(format!("{field}: polynomial gain must be positive"));
                }
                if *degree == 0 {
                    problems.push(format!("{field}: polynomial degree must be >= 1"));
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsSection {
    #[serde(default)]
    pub prompt: KernelConfig,
    #[serde(default)]
    pub output: KernelConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    #[default]
    Synthetic,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Collapsed,
    Uniform,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// Number of generated clusters (ignored when `means` is given).
    #[serde(default = "default_one")]
    pub clusters: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_cluster_scale")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// Explicit cluster means; overrides generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            clusters: 1,
            separation: default_separation(),
            scale: default_cluster_scale(),
            weights: None,
            means: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub mode_selection: ModeKind,
    #[serde(default = "default_one")]
    pub modes_per_cluster: usize,
    #[serde(default = "default_mode_radius")]
    pub mode_radius: f64,
    #[serde(default)]
    pub noise_scale: f64,
    /// Strength of the prompt-aligned output component; 0 keeps the arm's
    /// mean fidelity at the scorer midpoint.
    #[serde(default)]
    pub alignment_gain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert_cluster: Option<usize>,
    /// Generate each cluster's anchors around the cluster-mean direction in
    /// output space (requires equal dims; pairs with the identity scorer so
    /// cluster-matched outputs score high and mismatched ones low).
    #[serde(default)]
    pub cluster_aligned_anchors: bool,
    /// Explicit anchors `[cluster][mode][dim]`; overrides generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// Rank-one map: every prompt targets the first output axis. All
    /// off-axis anchors share the same midpoint fidelity.
    Axis,
    /// `gain * I`: the target direction is the prompt itself, so fidelity
    /// distinguishes cluster-aligned from misaligned outputs.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerSection {
    #[serde(default = "default_scorer_kind")]
    pub kind: ScorerKind,
    #[serde(default = "default_half")]
    pub scale: f64,
    #[serde(default = "default_half")]
    pub shift: f64,
    #[serde(default = "default_one_f")]
    pub gain: f64,
}

fn default_scorer_kind() -> ScorerKind {
    ScorerKind::Axis
}

impl Default for ScorerSection {
    fn default() -> Self {
        ScorerSection {
            kind: ScorerKind::Axis,
            scale: 0.5,
            shift: 0.5,
            gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    #[serde(default)]
    pub kind: EnvKind,
    #[serde(default = "default_dim")]
    pub prompt_dim: usize,
    #[serde(default = "default_dim")]
    pub output_dim: usize,
    /// JSON-Lines embedding dataset (replay only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_file: Option<PathBuf>,
    /// Arm whose outputs form the reference corpus for JKD-style scores.
    #[serde(default)]
    pub reference_arm: usize,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub arms: Vec<ArmSection>,
    #[serde(default)]
    pub scorer: ScorerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceSection {
    #[serde(default = "default_one_f")]
    pub rkhs_bound_s: f64,
    #[serde(default = "default_one_f")]
    pub rkhs_bound_d: f64,
    #[serde(default = "default_half")]
    pub noise_scale: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub name: PolicyKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_diversity")]
    pub diversity: DiversityPrimitive,
    #[serde(default = "default_one_f")]
    pub ridge: f64,
    /// Explicit confidence multipliers; when absent they derive from the
    /// `confidence` section (or default to 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_d: Option<f64>,
    #[serde(default = "default_panel_rate")]
    pub panel_rate: f64,
    #[serde(default = "default_qp_tolerance")]
    pub qp_tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rff_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<ConfidenceSection>,
    /// Validation prompts drawn for the one-arm oracle.
    #[serde(default = "default_validation")]
    pub oracle_validation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    /// Trial worker count; 0 means all cores. The `DAKUCB_WORKERS` env var
    /// overrides this.
    #[serde(default)]
    pub workers: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
            workers: 0,
        }
    }
}

/// The root run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub horizon: usize,
    pub trials: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// When set, corpus scores are computed over the last `eval_window`
    /// rounds instead of the cumulative history.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_window: Option<usize>,
    #[serde(default)]
    pub kernels: KernelsSection,
    pub env: EnvSection,
    pub policy: PolicySection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses a TOML file, applying `--set key=value` overrides first.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config does not parse as TOML: {e}")))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        let config: RunConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("config schema: {e}")))?;
        Ok(config)
    }

    /// Checks every field, collecting all violations into one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.horizon == 0 {
            problems.push("horizon must be >= 1".to_string());
        }
        if self.trials == 0 {
            problems.push("trials must be >= 1".to_string());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be >= 1".to_string());
        }
        if self.eval_window == Some(0) {
            problems.push("eval_window must be >= 1 when set".to_string());
        }
        self.kernels.prompt.check("kernels.prompt", &mut problems);
        self.kernels.output.check("kernels.output", &mut problems);

        let env = &self.env;
        match env.kind {
            EnvKind::Synthetic => {
                if env.prompt_dim == 0 || env.output_dim == 0 {
                    problems.push("env dimensions must be >= 1".to_string());
                }
                if env.arms.is_empty() {
                    problems.push("env.arms: at least one arm must be defined".to_string());
                }
                if env.reference_arm >= env.arms.len().max(1) {
                    problems.push(format!(
                        "env.reference_arm {} references an undefined arm ({} defined)",
                        env.reference_arm,
                        env.arms.len()
                    ));
                }
                let cluster_count = env
                    .sampler
                    .means
                    .as_ref()
                    .map_or(env.sampler.clusters, |m| m.len());
                if cluster_count == 0 {
                    problems.push("env.sampler: needs at least one cluster".to_string());
                }
                if let Some(weights) = &env.sampler.weights {
                    if weights.len() != cluster_count {
                        problems.push(format!(
                            "env.sampler.weights has {} entries for {} clusters",
                            weights.len(),
                            cluster_count
                        ));
                    }
                    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
                        || weights.iter().sum::<f64>() <= 0.0
                    {
                        problems.push(
                            "env.sampler.weights must be nonnegative with positive sum".to_string(),
                        );
                    }
                }
                if let Some(means) = &env.sampler.means {
                    if means.iter().any(|m| m.len() != env.prompt_dim) {
                        problems
                            .push("env.sampler.means entries must match prompt_dim".to_string());
                    }
                }
                if !(env.sampler.scale.is_finite() && env.sampler.scale >= 0.0) {
                    problems.push("env.sampler.scale must be nonnegative".to_string());
                }
                if env.scorer.kind == ScorerKind::Identity && env.prompt_dim != env.output_dim {
                    problems.push(
                        "env.scorer.kind identity requires prompt_dim == output_dim".to_string(),
                    );
                }
                for (i, arm) in env.arms.iter().enumerate() {
                    if arm.modes_per_cluster == 0 && arm.anchors.is_none() {
                        problems.push(format!("env.arms[{i}].modes_per_cluster must be >= 1"));
                    }
                    if arm.cluster_aligned_anchors && env.prompt_dim != env.output_dim {
                        problems.push(format!(
                            "env.arms[{i}].cluster_aligned_anchors requires prompt_dim == output_dim"
                        ));
                    }
                    if !(arm.noise_scale.is_finite() && arm.noise_scale >= 0.0) {
                        problems.push(format!("env.arms[{i}].noise_scale must be nonnegative"));
                    }
                    match (arm.mode_selection, arm.expert_cluster) {
                        (ModeKind::Expert, None) => {
                            problems.push(format!("env.arms[{i}]: expert arms need expert_cluster"))
                        }
                        (ModeKind::Expert, Some(c)) if c >= cluster_count => {
                            problems.push(format!("env.arms[{i}].expert_cluster {c} out of range"))
                        }
                        _ => {}
                    }
                    if let Some(anchors) = &arm.anchors {
                        if anchors.len() != cluster_count {
                            problems.push(format!(
                                "env.arms[{i}].anchors covers {} clusters, sampler has {}",
                                anchors.len(),
                                cluster_count
                            ));
                        }
                        if anchors
                            .iter()
                            .any(|c| c.is_empty() || c.iter().any(|a| a.len() != env.output_dim))
                        {
                            problems.push(format!(
                                "env.arms[{i}].anchors must be nonempty vectors of output_dim"
                            ));
                        }
                    }
                }
            }
            EnvKind::Replay => {
                if env.embedding_file.is_none() {
                    problems.push("env.embedding_file is required for replay".to_string());
                }
                if !env.arms.is_empty() {
                    problems.push(
                        "env.arms must be empty for replay (arms come from the file)".to_string(),
                    );
                }
            }
        }

        let policy = &self.policy;
        if !(policy.lambda.is_finite() && policy.lambda >= 0.0) {
            problems.push("policy.lambda must be a nonnegative real".to_string());
        }
        if !(policy.ridge.is_finite() && policy.ridge > 0.0) {
            problems.push("policy.ridge must be positive".to_string());
        }
        for (name, beta) in [("beta_s", policy.beta_s), ("beta_d", policy.beta_d)] {
            if let Some(b) = beta {
                if !(b.is_finite() && b >= 0.0) {
                    problems.push(format!("policy.{name} must be nonnegative"));
                }
            }
        }
        if !(0.0..=1.0).contains(&policy.panel_rate) {
            problems.push("policy.panel_rate must lie in [0, 1]".to_string());
        }
        if !(policy.qp_tolerance.is_finite() && policy.qp_tolerance > 0.0) {
            problems.push("policy.qp_tolerance must be positive".to_string());
        }
        if policy.rff_dim == Some(0) {
            problems.push("policy.rff_dim must be >= 1 when set".to_string());
        }
        if let Some(conf) = &policy.confidence {
            if !(conf.delta > 0.0 && conf.delta < 1.0) {
                problems.push("policy.confidence.delta must lie in (0, 1)".to_string());
            }
            if conf.rkhs_bound_s < 0.0 || conf.rkhs_bound_d < 0.0 || conf.noise_scale < 0.0 {
                problems.push("policy.confidence bounds must be nonnegative".to_string());
            }
        }
        if policy.name == PolicyKind::Oracle && policy.oracle_validation == 0 {
            problems.push("policy.oracle_validation must be >= 1".to_string());
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Sets a dotted `key=value` path in a TOML tree, parsing the value as a TOML
/// literal (falling back to a string).
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{spec}'")))?;
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let segments: Vec<&str> = path.split('.').collect();
    let mut table = root;
    for (i, segment) in segments.iter().enumerate() {
        if i + 1 == segments.len() {
            table.insert(segment.to_string(), parsed);
            return Ok(());
        }
        table = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set path '{path}' crosses a non-table")))?;
    }
    Ok(())
}

/// A fully resolved experiment: concrete kernels, betas, and an environment
/// template that trials clone.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: RunConfig,
    pub prompt_spec: KernelSpec,
    pub data_spec: KernelSpec,
    pub policy_config: PolicyConfig,
    pub env_template: EnvTemplate,
    pub reference_arm: usize,
}

#[derive(Debug, Clone)]
pub enum EnvTemplate {
    Synthetic(SyntheticEnv),
    Replay(EmbeddingDataset),
}

impl EnvTemplate {
    pub fn arm_count(&self) -> usize {
        match self {
            EnvTemplate::Synthetic(env) => env.arms.len(),
            EnvTemplate::Replay(dataset) => dataset.arm_ids().len(),
        }
    }

    pub fn instantiate(&self) -> Result<Box<dyn GenerativeEnv>> {
        Ok(match self {
            EnvTemplate::Synthetic(env) => Box::new(env.clone()),
            EnvTemplate::Replay(dataset) => Box::new(ReplayEnv::new(dataset.clone())?),
        })
    }
}

/// Validates the config and resolves it into runnable pieces.
pub fn resolve(config: &RunConfig) -> Result<ResolvedExperiment> {
    config.validate()?;
    let env_template = build_env(config)?;
    let arm_count = env_template.arm_count();
    if config.env.kind == EnvKind::Replay && config.env.reference_arm >= arm_count {
        return Err(Error::Config(format!(
            "env.reference_arm {} out of range: dataset has {arm_count} arms",
            config.env.reference_arm
        )));
    }

    let (prompt_calibration, output_calibration) = calibration_sample(config, &env_template)?;
    let prompt_spec = config.kernels.prompt.resolve(&prompt_calibration);
    let data_spec = config.kernels.output.resolve(&output_calibration);
    prompt_spec.validate()?;
    data_spec.validate()?;

    let stages = if config.policy.name == PolicyKind::SupDakucb {
        if config.horizon <= 2 {
            1
        } else {
            (config.horizon - 1).ilog2() as usize + 1
        }
    } else {
        1
    };
    let derive_beta =
        |explicit: Option<f64>, bound: fn(&ConfidenceSection) -> f64| -> Result<f64> {
            if let Some(b) = explicit {
                return Ok(b);
            }
            match &config.policy.confidence {
                Some(conf) => confidence_radius(
                    &ConfidenceParams {
                        rkhs_bound: bound(conf),
                        noise_scale: conf.noise_scale,
                        failure_prob: conf.delta,
                        arms: arm_count,
                        stages,
                        horizon: config.horizon,
                    },
                    config.policy.ridge,
                ),
                None => Ok(1.0),
            }
        };
    let policy_config = PolicyConfig {
        lambda: if config.policy.name == PolicyKind::Pakucb {
            0.0
        } else {
            config.policy.lambda
        },
        diversity: config.policy.diversity,
        beta_s: derive_beta(config.policy.beta_s, |c| c.rkhs_bound_s)?,
        beta_d: derive_beta(config.policy.beta_d, |c| c.rkhs_bound_d)?,
        ridge: config.policy.ridge,
        panel_rate: config.policy.panel_rate,
        qp_tolerance: config.policy.qp_tolerance,
        rff_dim: config.policy.rff_dim,
    };
    policy_config.validate()?;

    Ok(ResolvedExperiment {
        config: config.clone(),
        prompt_spec,
        data_spec,
        policy_config,
        env_template,
        reference_arm: config.env.reference_arm,
    })
}

fn build_env(config: &RunConfig) -> Result<EnvTemplate> {
    match config.env.kind {
        EnvKind::Replay => {
            let path = config.env.embedding_file.as_ref().expect("validated");
            Ok(EnvTemplate::Replay(load_embeddings(path)?))
        }
        EnvKind::Synthetic => Ok(EnvTemplate::Synthetic(build_synthetic_env(config)?)),
    }
}

/// Builds the synthetic environment from the config, generating cluster means
/// and anchors deterministically from the structure stream.
///
/// Geometry conventions: the scorer projects prompts onto the first output
/// axis through a fixed unit direction `u` in prompt space; cluster means are
/// placed orthogonal to `u` plus a constant offset along it (so alignment
/// scores are well-defined); generated anchors avoid the first output axis,
/// which gives every arm the same midpoint fidelity until `alignment_gain`
/// adds signal back.
fn build_synthetic_env(config: &RunConfig) -> Result<SyntheticEnv> {
    let env = &config.env;
    let dt = env.prompt_dim;
    let dx = env.output_dim;
    let mut structure = ChaCha12Rng::seed_from_u64(config.seed ^ STRUCTURE_STREAM);

    let u: Vec<f64> = vec![1.0 / (dt as f64).sqrt(); dt];
    let cluster_means: Vec<Vec<f64>> = match &env.sampler.means {
        Some(means) => means.clone(),
        None => (0..env.sampler.clusters)
            .map(|_| {
                let mut v = crate::env::random_unit_vector(dt, &mut structure);
                let along = crate::kernels::dot(&v, &u);
                for (vi, ui) in v.iter_mut().zip(&u) {
                    *vi -= along * ui;
                }
                let norm = crate::kernels::dot(&v, &v).sqrt().max(1e-9);
                v.iter_mut()
                    .zip(&u)
                    .map(|(vi, ui)| env.sampler.separation * *vi / norm + 2.0 * ui)
                    .collect()
            })
            .collect(),
    };
    let clusters: Vec<PromptCluster> = cluster_means
        .iter()
        .map(|mean| PromptCluster {
            mean: mean.clone(),
            scale: env.sampler.scale,
        })
        .collect();
    let cluster_count = clusters.len();
    let sampler = match &env.sampler.weights {
        Some(w) => PromptSampler::new(clusters, w.clone()),
        None => PromptSampler::uniform(clusters),
    }?;

    let scorer_map = match env.scorer.kind {
        ScorerKind::Axis => {
            // rank-one map: t -> gain * (u . t) e_0
            let mut m = DMatrix::zeros(dx, dt);
            for (j, uj) in u.iter().enumerate() {
                m[(0, j)] = env.scorer.gain * uj;
            }
            m
        }
        ScorerKind::Identity => DMatrix::identity(dx, dt) * env.scorer.gain,
    };
    let scorer = FidelityScorer::new(scorer_map, env.scorer.scale, env.scorer.shift)?;

    let mut arms = Vec::with_capacity(env.arms.len());
    for (id, section) in env.arms.iter().enumerate() {
        let anchors = match &section.anchors {
            Some(a) => a.clone(),
            None if section.cluster_aligned_anchors => (0..cluster_count)
                .map(|c| {
                    (0..section.modes_per_cluster)
                        .map(|_| {
                            // the cluster-mean direction plus a little
                            // per-mode spread, rescaled to the anchor radius
                            let mean = &cluster_means[c];
                            let norm = crate::kernels::dot(mean, mean).sqrt().max(1e-9);
                            let jitter = crate::env::random_unit_vector(dx, &mut structure);
                            let mut a: Vec<f64> = mean
                                .iter()
                                .zip(&jitter)
                                .map(|(m, j)| m / norm + 0.2 * j)
                                .collect();
                            let a_norm = crate::kernels::dot(&a, &a).sqrt().max(1e-9);
                            for v in a.iter_mut() {
                                *v *= section.mode_radius / a_norm;
                            }
                            a
                        })
                        .collect()
                })
                .collect(),
            None => (0..cluster_count)
                .map(|_| {
                    (0..section.modes_per_cluster)
                        .map(|_| {
                            let mut a = crate::env::random_unit_vector(dx, &mut structure);
                            a[0] = 0.0;
                            let norm = crate::kernels::dot(&a, &a).sqrt().max(1e-9);
                            a.iter_mut()
                                .map(|v| section.mode_radius * *v / norm)
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        };
        let mode_selection = match section.mode_selection {
            ModeKind::Collapsed => ModeSelection::Collapsed,
            ModeKind::Uniform => ModeSelection::UniformOverModes,
            ModeKind::Expert => ModeSelection::Expert {
                home_cluster: section.expert_cluster.expect("validated"),
            },
        };
        let alignment = {
            let mut m = DMatrix::zeros(dx, dt);
            if section.alignment_gain != 0.0 {
                for (j, uj) in u.iter().enumerate() {
                    m[(0, j)] = section.alignment_gain * uj;
                }
            }
            m
        };
        arms.push(SyntheticArm::new(
            id,
            anchors,
            mode_selection,
            section.noise_scale,
            alignment,
        )?);
    }
    SyntheticEnv::new(sampler, arms, scorer)
}

/// Draws the calibration sample the median heuristic runs on: prompts from
/// the sampler (or the first records), outputs from the arms cycled over
/// those prompts (or the record columns).
type CalibrationSample = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn calibration_sample(config: &RunConfig, template: &EnvTemplate) -> Result<CalibrationSample> {
    const CALIBRATION_POINTS: usize = 64;
    match template {
        EnvTemplate::Synthetic(env) => {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ CALIBRATION_STREAM);
            let mut env = env.clone();
            let mut prompts = Vec::with_capacity(CALIBRATION_POINTS);
            let mut outputs = Vec::with_capacity(CALIBRATION_POINTS);
            for i in 0..CALIBRATION_POINTS {
                let ctx = env.next_context(&mut rng)?;
                let arm = i % env.arm_count();
                outputs.push(env.generate(arm, &ctx, &mut rng)?);
                prompts.push(ctx.prompt);
            }
            Ok((prompts, outputs))
        }
        EnvTemplate::Replay(dataset) => {
            let take = dataset.len().min(CALIBRATION_POINTS);
            let mut prompts = Vec::with_capacity(take);
            let mut outputs = Vec::new();
            for record in &dataset.records()[..take] {
                prompts.push(record.prompt_vec.clone());
                for out in record.outputs.values() {
                    outputs.push(out.clone());
                }
            }
            Ok((prompts, outputs))
        }
    }
}
