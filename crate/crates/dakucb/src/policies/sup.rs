//! Staged selection (Sup-DAK-UCB): per (arm, stage, target) regressors on
//! disjoint exploration rounds, stage-frozen archive snapshots for diversity
//! labels, width-gated elimination, and exploitation once every width is
//! below `T^{-1/2}`.
//!
//! The stage discipline makes the labels feeding each regressor mutually
//! independent, which is what the elimination thresholds rely on.

use rand_chacha::ChaCha12Rng;

use crate::env::{GenerativeEnv, RoundContext};
use crate::kernels::{JointKernelSpec, KernelSpec};
use crate::krr::KrrState;
use crate::scores::EmbeddedPair;
use crate::{Error, Result};

use super::{diversity_label, HistoryArchive, MixtureWeights, PolicyConfig, RoundRecord};

/// What the stage walk did at one level.
#[derive(Debug, Clone, PartialEq)]
pub enum StageAction {
    Exploit { arm: usize },
    Eliminate { removed: Vec<usize> },
    Explore { arm: usize },
}

/// One level of a round's stage walk: the stage, the candidate set seen
/// there, and the action taken.
#[derive(Debug, Clone)]
pub struct StageStep {
    pub stage: usize,
    pub candidates: Vec<usize>,
    pub action: StageAction,
}

/// Bookkeeping the staged run exposes for verification.
#[derive(Debug, Clone, Default)]
pub struct SupDiagnostics {
    /// exploration_rounds[arm][stage] — round indices appended there. An
    /// exploration round joins the fidelity and diversity index sets of its
    /// (arm, stage) together, so one list covers both targets.
    pub exploration_rounds: Vec<Vec<Vec<usize>>>,
    /// The per-round stage walks, in round order.
    pub walks: Vec<Vec<StageStep>>,
    pub stage_cap: usize,
}

/// Records plus diagnostics of a full staged run.
#[derive(Debug, Clone)]
pub struct SupRunOutput {
    pub records: Vec<RoundRecord>,
    pub diagnostics: SupDiagnostics,
}

/// The staged policy. Stages are 0-based internally; stage `m` uses the width
/// gate `2^{-m}` and the elimination gap `2^{1-m}`.
#[derive(Debug)]
pub struct SupDakUcbPolicy {
    config: PolicyConfig,
    horizon: usize,
    stage_cap: usize,
    jspec_squared: JointKernelSpec,
    jspec_unsquared: JointKernelSpec,
    /// fidelity_states[arm][stage]
    fidelity_states: Vec<Vec<KrrState>>,
    diversity_states: Vec<Vec<KrrState>>,
    archive: HistoryArchive,
    diagnostics: SupDiagnostics,
    round: usize,
}

fn stage_cap(horizon: usize) -> usize {
    // ceil(log2 T), at least 1
    if horizon <= 2 {
        1
    } else {
        (horizon - 1).ilog2() as usize + 1
    }
}

impl SupDakUcbPolicy {
    pub fn new(
        arm_count: usize,
        horizon: usize,
        prompt_spec: KernelSpec,
        data_spec: KernelSpec,
        config: PolicyConfig,
    ) -> Result<Self> {
        config.validate()?;
        prompt_spec.validate()?;
        data_spec.validate()?;
        if arm_count == 0 {
            return Err(Error::invalid("need at least one arm"));
        }
        if horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        let cap = stage_cap(horizon);
        let states = |_| -> Result<Vec<Vec<KrrState>>> {
            (0..arm_count)
                .map(|_| {
                    (0..cap)
                        .map(|_| KrrState::new(prompt_spec.clone(), config.ridge))
                        .collect()
                })
                .collect()
        };
        let mut archive = HistoryArchive::new(arm_count);
        archive.freeze_stage(0);
        Ok(SupDakUcbPolicy {
            horizon,
            stage_cap: cap,
            jspec_squared: JointKernelSpec::squared(prompt_spec.clone(), data_spec.clone()),
            jspec_unsquared: JointKernelSpec::new(prompt_spec.clone(), data_spec.clone()),
            fidelity_states: states(0)?,
            diversity_states: states(0)?,
            archive,
            diagnostics: SupDiagnostics {
                exploration_rounds: vec![vec![Vec::new(); cap]; arm_count],
                walks: Vec::new(),
                stage_cap: cap,
            },
            round: 0,
            config,
        })
    }

    pub fn archive(&self) -> &HistoryArchive {
        &self.archive
    }

    pub fn diagnostics(&self) -> &SupDiagnostics {
        &self.diagnostics
    }

    pub fn into_diagnostics(self) -> SupDiagnostics {
        self.diagnostics
    }

    pub fn stage_cap_value(&self) -> usize {
        self.stage_cap
    }

    pub fn round(
        &mut self,
        env: &mut dyn GenerativeEnv,
        ctx: &RoundContext,
        reference: Option<&[EmbeddedPair]>,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundRecord> {
        let arm_count = self.fidelity_states.len();
        let exploit_gate = 1.0 / (self.horizon as f64).sqrt();
        let mut candidates: Vec<usize> = (0..arm_count).collect();
        let mut stage = 0usize;
        let mut walk: Vec<StageStep> = Vec::new();
        let mut last_scores = vec![0.0_f64; arm_count];

        let (arm, final_stage, explored) = loop {
            self.archive.freeze_stage(stage);
            let mut optimistic = Vec::with_capacity(candidates.len());
            let mut widths = Vec::with_capacity(candidates.len());
            for &g in &candidates {
                let (s_mean, s_dev) = self.fidelity_states[g][stage].predict(&ctx.prompt)?;
                let (d_mean, d_dev) = self.diversity_states[g][stage].predict(&ctx.prompt)?;
                let score = (s_mean + self.config.beta_s * s_dev)
                    - self.config.lambda * (d_mean - self.config.beta_d * d_dev);
                let width =
                    self.config.beta_s * s_dev + self.config.lambda * self.config.beta_d * d_dev;
                optimistic.push(score);
                widths.push(width);
                last_scores[g] = score;
            }
            let max_width = widths.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let max_score = optimistic.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let stage_gate = 2.0_f64.powi(-(stage as i32));

            if max_width <= exploit_gate || (max_width <= stage_gate && stage + 1 >= self.stage_cap)
            {
                let mut best = candidates[0];
                let mut best_score = f64::NEG_INFINITY;
                for (&g, &score) in candidates.iter().zip(&optimistic) {
                    if score > best_score {
                        best = g;
                        best_score = score;
                    }
                }
                walk.push(StageStep {
                    stage,
                    candidates: candidates.clone(),
                    action: StageAction::Exploit { arm: best },
                });
                break (best, stage, false);
            }
            if max_width <= stage_gate {
                let gap = 2.0_f64.powi(1 - stage as i32);
                let keep: Vec<usize> = candidates
                    .iter()
                    .zip(&optimistic)
                    .filter(|(_, &score)| score >= max_score - gap)
                    .map(|(&g, _)| g)
                    .collect();
                let removed: Vec<usize> = candidates
                    .iter()
                    .copied()
                    .filter(|g| !keep.contains(g))
                    .collect();
                walk.push(StageStep {
                    stage,
                    candidates: candidates.clone(),
                    action: StageAction::Eliminate { removed },
                });
                candidates = keep;
                stage += 1;
                continue;
            }
            // explore the lowest-index candidate whose width exceeds the gate
            let chosen = candidates
                .iter()
                .zip(&widths)
                .find(|(_, &w)| w > stage_gate)
                .map(|(&g, _)| g)
                .expect("some width exceeds the stage gate");
            self.diagnostics.exploration_rounds[chosen][stage].push(self.round);
            walk.push(StageStep {
                stage,
                candidates: candidates.clone(),
                action: StageAction::Explore { arm: chosen },
            });
            break (chosen, stage, true);
        };

        let output = env.generate(arm, ctx, rng)?;
        let fidelity_label = env.fidelity(arm, ctx, &output)?;
        // stage-frozen diversity label: pairs collected during this stage are
        // invisible until the next snapshot
        let snapshot = self.archive.snapshot(arm, final_stage);
        let diversity_penalty = diversity_label(
            self.config.diversity,
            &ctx.prompt,
            &output,
            snapshot,
            reference,
            &self.jspec_squared,
            &self.jspec_unsquared,
        )?;
        if explored {
            self.fidelity_states[arm][final_stage].update(&ctx.prompt, fidelity_label)?;
            self.diversity_states[arm][final_stage].update(&ctx.prompt, diversity_penalty)?;
        }
        self.archive.push(
            arm,
            EmbeddedPair::tagged(ctx.prompt.clone(), output.clone(), arm, self.round),
        );
        self.diagnostics.walks.push(walk);
        let record = RoundRecord {
            round: self.round,
            cluster: ctx.cluster,
            arm,
            weights: MixtureWeights::vertex(arm_count, arm).into_vec(),
            fidelity_label,
            diversity_label: diversity_penalty,
            scores: last_scores,
            output,
        };
        self.round += 1;
        Ok(record)
    }
}

/// Drives the staged policy against an environment for a full horizon.
pub fn sup_dakucb_run(
    env: &mut dyn GenerativeEnv,
    horizon: usize,
    prompt_spec: KernelSpec,
    data_spec: KernelSpec,
    config: &PolicyConfig,
    rng: &mut ChaCha12Rng,
) -> Result<SupRunOutput> {
    let mut policy = SupDakUcbPolicy::new(
        env.arm_count(),
        horizon,
        prompt_spec,
        data_spec,
        config.clone(),
    )?;
    let mut records = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let ctx = env.next_context(rng)?;
        records.push(policy.round(env, &ctx, None, rng)?);
    }
    Ok(SupRunOutput {
        records,
        diagnostics: policy.into_diagnostics(),
    })
}
