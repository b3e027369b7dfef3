//! Multi-trial experiment execution: per-trial derived seeds, periodic corpus
//! scores over the accumulated history, and cross-trial aggregation.
//!
//! Trials run concurrently up to the configured worker count; each owns all
//! of its mutable state, and results are merged in trial order so the output
//! is deterministic regardless of scheduling.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::env::GenerativeEnv;
use crate::kernels::JointKernelSpec;
use crate::policies::{
    one_arm_oracle, DakUcbPolicy, FixedArmPolicy, MixturePolicy, RandomPolicy, RoundRecord,
    SupDakUcbPolicy,
};
use crate::scores::{i_jrke, joint_kd, rke, vendi_joint, EmbeddedPair, PairedCorpus};
use crate::{Error, Result};

use super::config::{
    resolve, PolicyKind, ResolvedExperiment, RunConfig, ORACLE_STREAM, REFERENCE_STREAM,
};

/// Corpus-level scores computed on the history accumulated so far.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub round: usize,
    pub rke: f64,
    pub i_jrke: f64,
    pub jkd: f64,
    pub vendi_proxy: f64,
    pub mean_fidelity: f64,
}

/// One trial's per-round records and periodic evaluations.
#[derive(Debug, Clone)]
pub struct TrialRun {
    pub trial: usize,
    pub rounds: Vec<RoundRecord>,
    pub evals: Vec<EvalRow>,
}

/// Mean and standard deviation over trials.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn over(values: &[f64]) -> Stat {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Aggregates across trials plus provenance, serialized as `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub version: String,
    pub policy: PolicyKind,
    pub arm_count: usize,
    pub horizon: usize,
    pub trials: usize,
    /// Per-arm selection ratio: mean and std of the per-trial ratios.
    pub selection_ratios: Vec<Stat>,
    /// Aggregate per-cluster selection ratios: counts over all trials,
    /// normalized within each cluster.
    pub per_cluster_ratios: Vec<Vec<f64>>,
    /// Final eval-row scores across trials.
    pub final_scores: BTreeMap<String, Stat>,
    pub wall_clock_seconds: f64,
    /// The resolved run configuration.
    pub config: RunConfig,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub arm_count: usize,
    pub runs: Vec<TrialRun>,
    pub summary: Summary,
}

/// Executes `trials` independent runs with per-trial derived seeds and
/// aggregates the results.
pub fn run_experiment(config: &RunConfig) -> Result<MetricsLog> {
    let started = std::time::Instant::now();
    let resolved = resolve(config)?;
    let workers = worker_count(config);
    let runs: Result<Vec<TrialRun>> = if workers <= 1 || config.trials == 1 {
        (0..config.trials)
            .map(|t| run_trial(&resolved, t))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.min(config.trials))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..config.trials)
                .into_par_iter()
                .map(|t| run_trial(&resolved, t))
                .collect()
        })
    };
    let runs = runs?;
    let summary = summarize(&resolved, &runs, started.elapsed().as_secs_f64());
    Ok(MetricsLog {
        arm_count: resolved.env_template.arm_count(),
        runs,
        summary,
    })
}

fn worker_count(config: &RunConfig) -> usize {
    if let Ok(value) = std::env::var("DAKUCB_WORKERS") {
        if let Ok(n) = value.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    if config.output.workers >= 1 {
        return config.output.workers;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

enum PolicyState {
    Dak(DakUcbPolicy),
    Mixture(MixturePolicy),
    Sup(SupDakUcbPolicy),
    Random(RandomPolicy),
    Fixed(FixedArmPolicy),
}

impl PolicyState {
    fn round(
        &mut self,
        env: &mut dyn GenerativeEnv,
        ctx: &crate::env::RoundContext,
        reference: Option<&[EmbeddedPair]>,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundRecord> {
        match self {
            PolicyState::Dak(p) => p.round(env, ctx, reference, rng),
            PolicyState::Mixture(p) => p.round(env, ctx, rng),
            PolicyState::Sup(p) => p.round(env, ctx, reference, rng),
            PolicyState::Random(p) => p.round(env, ctx, rng),
            PolicyState::Fixed(p) => p.round(env, ctx, rng),
        }
    }
}

fn build_policy(
    resolved: &ResolvedExperiment,
    env: &mut dyn GenerativeEnv,
    trial_seed: u64,
) -> Result<PolicyState> {
    let arm_count = env.arm_count();
    let output_dim = env.output_dim();
    let prompt_spec = resolved.prompt_spec.clone();
    let data_spec = resolved.data_spec.clone();
    let config = resolved.policy_config.clone();
    Ok(match resolved.config.policy.name {
        PolicyKind::Dakucb => PolicyState::Dak(DakUcbPolicy::new(
            arm_count,
            output_dim,
            prompt_spec,
            data_spec,
            config,
        )?),
        PolicyKind::Pakucb => PolicyState::Dak(DakUcbPolicy::fidelity_only(
            arm_count,
            output_dim,
            prompt_spec,
            data_spec,
            config,
        )?),
        PolicyKind::MixtureDakucb => PolicyState::Mixture(MixturePolicy::new(
            arm_count,
            prompt_spec,
            data_spec,
            config,
        )?),
        PolicyKind::SupDakucb => PolicyState::Sup(SupDakUcbPolicy::new(
            arm_count,
            resolved.config.horizon,
            prompt_spec,
            data_spec,
            config,
        )?),
        PolicyKind::Random => {
            PolicyState::Random(RandomPolicy::new(arm_count, prompt_spec, data_spec)?)
        }
        PolicyKind::Oracle => {
            let arm = oracle_arm(resolved, trial_seed)?;
            PolicyState::Fixed(FixedArmPolicy::new(arm, arm_count, prompt_spec, data_spec)?)
        }
    })
}

/// Evaluates the one-arm oracle on a freshly drawn validation set, against
/// its own environment instance so trial streams stay untouched.
pub fn oracle_arm(resolved: &ResolvedExperiment, seed: u64) -> Result<usize> {
    let mut env = resolved.env_template.instantiate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ ORACLE_STREAM);
    let mut validation = Vec::with_capacity(resolved.config.policy.oracle_validation);
    for _ in 0..resolved.config.policy.oracle_validation {
        let ctx = env.next_context(&mut rng)?;
        validation.push((ctx.cluster, ctx.prompt));
    }
    let jspec = JointKernelSpec::squared(resolved.prompt_spec.clone(), resolved.data_spec.clone());
    one_arm_oracle(
        env.as_mut(),
        &validation,
        &jspec,
        &resolved.policy_config,
        &mut rng,
    )
}

fn run_trial(resolved: &ResolvedExperiment, trial: usize) -> Result<TrialRun> {
    let config = &resolved.config;
    let trial_seed = config.seed + trial as u64;
    let mut rng = ChaCha12Rng::seed_from_u64(trial_seed);
    let mut reference_rng = ChaCha12Rng::seed_from_u64(trial_seed ^ REFERENCE_STREAM);
    let mut env = resolved.env_template.instantiate()?;
    let mut policy = build_policy(resolved, env.as_mut(), trial_seed)?;

    let jspec_squared =
        JointKernelSpec::squared(resolved.prompt_spec.clone(), resolved.data_spec.clone());
    let jspec_unsquared =
        JointKernelSpec::new(resolved.prompt_spec.clone(), resolved.data_spec.clone());

    let mut reference = PairedCorpus::new();
    let mut stream = PairedCorpus::new();
    let mut rounds = Vec::with_capacity(config.horizon);
    let mut evals = Vec::new();

    for i in 0..config.horizon {
        let ctx = env.next_context(&mut rng)?;
        // the reference arm replays every prompt on its own stream, pairing
        // the history with a fixed competitor for distance scores
        let reference_output = env.generate(resolved.reference_arm, &ctx, &mut reference_rng)?;
        let record = policy.round(env.as_mut(), &ctx, Some(&reference), &mut rng)?;
        reference.push(EmbeddedPair::new(ctx.prompt.clone(), reference_output))?;
        stream.push(EmbeddedPair::new(ctx.prompt.clone(), record.output.clone()))?;
        rounds.push(record);

        let done = i + 1 == config.horizon;
        if (i + 1) % config.eval_every == 0 || done {
            // cumulative history by default; a trailing window when asked
            let start = config
                .eval_window
                .map_or(0, |window| (i + 1).saturating_sub(window));
            let window_fid: f64 = rounds[start..].iter().map(|r| r.fidelity_label).sum();
            evals.push(eval_row(
                i + 1,
                &stream.window_from(start),
                &reference.window_from(start),
                window_fid / (i + 1 - start) as f64,
                &jspec_squared,
                &jspec_unsquared,
            )?);
        }
    }
    Ok(TrialRun {
        trial,
        rounds,
        evals,
    })
}

/// Cap on the corpus size fed to the spectral (Vendi) proxy; larger
/// histories are evenly strided down to this many pairs.
const VENDI_EVAL_CAP: usize = 512;

fn eval_row(
    round: usize,
    stream: &PairedCorpus,
    reference: &PairedCorpus,
    mean_fidelity: f64,
    jspec_squared: &JointKernelSpec,
    jspec_unsquared: &JointKernelSpec,
) -> Result<EvalRow> {
    let outputs = stream.outputs();
    let rke_value = rke(&outputs, &jspec_squared.data)?;
    let ijrke_value = i_jrke(stream, jspec_squared)?;
    let jkd_value = joint_kd(stream, reference, jspec_unsquared)?;
    let vendi_corpus: Vec<EmbeddedPair> = if stream.len() > VENDI_EVAL_CAP {
        let stride = stream.len().div_ceil(VENDI_EVAL_CAP);
        stream.iter().step_by(stride).cloned().collect()
    } else {
        stream.to_vec()
    };
    let vendi_value = vendi_joint(&vendi_corpus, jspec_unsquared)?;
    Ok(EvalRow {
        round,
        rke: rke_value,
        i_jrke: ijrke_value,
        jkd: jkd_value,
        vendi_proxy: vendi_value,
        mean_fidelity,
    })
}

fn summarize(resolved: &ResolvedExperiment, runs: &[TrialRun], wall_clock: f64) -> Summary {
    let arm_count = resolved.env_template.arm_count();
    let trials = runs.len();

    let mut ratio_columns: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); arm_count];
    for run in runs {
        let total = run.rounds.len().max(1) as f64;
        let mut counts = vec![0usize; arm_count];
        for record in &run.rounds {
            counts[record.arm] += 1;
        }
        for (column, count) in ratio_columns.iter_mut().zip(&counts) {
            column.push(*count as f64 / total);
        }
    }
    let selection_ratios: Vec<Stat> = ratio_columns.iter().map(|c| Stat::over(c)).collect();

    let cluster_count = runs
        .iter()
        .flat_map(|r| r.rounds.iter().map(|record| record.cluster + 1))
        .max()
        .unwrap_or(0);
    let mut cluster_counts = vec![vec![0usize; arm_count]; cluster_count];
    for run in runs {
        for record in &run.rounds {
            cluster_counts[record.cluster][record.arm] += 1;
        }
    }
    let per_cluster_ratios: Vec<Vec<f64>> = cluster_counts
        .iter()
        .map(|counts| {
            let total: usize = counts.iter().sum();
            counts
                .iter()
                .map(|c| {
                    if total == 0 {
                        0.0
                    } else {
                        *c as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect();

    let mut final_scores = BTreeMap::new();
    let collect = |f: fn(&EvalRow) -> f64| -> Vec<f64> {
        runs.iter().filter_map(|r| r.evals.last()).map(f).collect()
    };
    final_scores.insert("rke".to_string(), Stat::over(&collect(|e| e.rke)));
    final_scores.insert("i_jrke".to_string(), Stat::over(&collect(|e| e.i_jrke)));
    final_scores.insert("jkd".to_string(), Stat::over(&collect(|e| e.jkd)));
    final_scores.insert(
        "vendi_joint_proxy".to_string(),
        Stat::over(&collect(|e| e.vendi_proxy)),
    );
    final_scores.insert(
        "mean_fidelity".to_string(),
        Stat::over(&collect(|e| e.mean_fidelity)),
    );

    Summary {
        version: env!("CARGO_PKG_VERSION").to_string(),
        policy: resolved.config.policy.name,
        arm_count,
        horizon: resolved.config.horizon,
        trials,
        selection_ratios,
        per_cluster_ratios,
        final_scores,
        wall_clock_seconds: wall_clock,
        config: resolved.config.clone(),
    }
}
