//! Single-model selection: the diversity-aware UCB round, its fidelity-only
//! reduction (PAK-UCB), and the Random / fixed-arm baselines.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::env::{GenerativeEnv, RoundContext};
use crate::kernels::{JointKernelSpec, KernelSpec, RffMap};
use crate::krr::KrrState;
use crate::scores::EmbeddedPair;
use crate::{Error, Result};

use super::{
    argmax_lowest_index, dakucb_score, diversity_label, DiversityPrimitive, HistoryArchive,
    PolicyConfig, RoundRecord,
};

const RFF_MAP_SEED: u64 = 0x5246_4621;

/// Cached random-feature state for approximate diversity labels: one feature
/// vector per archived output, aligned with the live archive.
#[derive(Debug, Clone)]
struct RffLabeler {
    map: RffMap,
    features: Vec<Vec<Vec<f64>>>,
}

impl RffLabeler {
    fn new(
        data_spec: &KernelSpec,
        output_dim: usize,
        dim: usize,
        seed: u64,
        arms: usize,
    ) -> Result<Self> {
        // the labels need k_X^2, so the map approximates the squared kernel
        let squared = data_spec
            .squared_spec()
            .ok_or_else(|| Error::invalid("rff-backed labels require a gaussian output kernel"))?;
        Ok(RffLabeler {
            map: RffMap::new(&squared, output_dim, dim, seed)?,
            features: vec![Vec::new(); arms],
        })
    }

    fn label(
        &self,
        jspec_squared: &JointKernelSpec,
        prompt: &[f64],
        output: &[f64],
        archive: &[EmbeddedPair],
        arm: usize,
    ) -> Result<f64> {
        if archive.is_empty() {
            return Ok(0.0);
        }
        let z = self.map.features(output)?;
        let feats = &self.features[arm];
        debug_assert_eq!(feats.len(), archive.len());
        let mut total = 0.0;
        for (entry, zj) in archive.iter().zip(feats) {
            total += jspec_squared.eval_text(prompt, &entry.prompt)? * crate::kernels::dot(&z, zj);
        }
        Ok(total / archive.len() as f64)
    }

    fn push(&mut self, arm: usize, output: &[f64]) -> Result<()> {
        let z = self.map.features(output)?;
        self.features[arm].push(z);
        Ok(())
    }
}

/// DAK-UCB: per-arm KRR estimates of fidelity and of the diversity penalty,
/// combined into an optimistic index. With `lambda = 0` (or the dedicated
/// fidelity-only constructor) the decisions reduce to PAK-UCB.
#[derive(Debug, Clone)]
pub struct DakUcbPolicy {
    config: PolicyConfig,
    jspec_squared: JointKernelSpec,
    jspec_unsquared: JointKernelSpec,
    fidelity_states: Vec<KrrState>,
    diversity_states: Vec<KrrState>,
    archive: HistoryArchive,
    rff: Option<RffLabeler>,
    fidelity_only: bool,
    round: usize,
}

impl DakUcbPolicy {
    pub fn new(
        arm_count: usize,
        output_dim: usize,
        prompt_spec: KernelSpec,
        data_spec: KernelSpec,
        config: PolicyConfig,
    ) -> Result<Self> {
        Self::build(arm_count, output_dim, prompt_spec, data_spec, config, false)
    }

    /// The fidelity-only baseline: no diversity predictions, labels, or
    /// updates anywhere in the round.
    pub fn fidelity_only(
        arm_count: usize,
        output_dim: usize,
        prompt_spec: KernelSpec,
        data_spec: KernelSpec,
        config: PolicyConfig,
    ) -> Result<Self> {
        Self::build(arm_count, output_dim, prompt_spec, data_spec, config, true)
    }

    fn build(
        arm_count: usize,
        output_dim: usize,
        prompt_spec: KernelSpec,
        data_spec: KernelSpec,
        config: PolicyConfig,
        fidelity_only: bool,
    ) -> Result<Self> {
        config.validate()?;
        prompt_spec.validate()?;
        data_spec.validate()?;
        if arm_count == 0 {
            return Err(Error::invalid("need at least one arm"));
        }
        let rff = match config.rff_dim {
            Some(dim) => {
                if config.diversity != DiversityPrimitive::NegIJrke {
                    return Err(Error::invalid(
                        "rff-backed labels are only supported for the neg_ijrke primitive",
                    ));
                }
                // fixed seed so the feature map never touches policy streams
                Some(RffLabeler::new(
                    &data_spec,
                    output_dim,
                    dim,
                    RFF_MAP_SEED,
                    arm_count,
                )?)
            }
            None => None,
        };
        let make_states = || -> Result<Vec<KrrState>> {
            (0..arm_count)
                .map(|_| KrrState::new(prompt_spec.clone(), config.ridge))
                .collect()
        };
        Ok(DakUcbPolicy {
            jspec_squared: JointKernelSpec::squared(prompt_spec.clone(), data_spec.clone()),
            jspec_unsquared: JointKernelSpec::new(prompt_spec.clone(), data_spec.clone()),
            fidelity_states: make_states()?,
            diversity_states: make_states()?,
            archive: HistoryArchive::new(arm_count),
            rff,
            fidelity_only,
            round: 0,
            config,
        })
    }

    pub fn archive(&self) -> &HistoryArchive {
        &self.archive
    }

    pub fn fidelity_states(&self) -> &[KrrState] {
        &self.fidelity_states
    }

    pub fn diversity_states(&self) -> &[KrrState] {
        &self.diversity_states
    }

    /// Scores every arm, plays the argmax, labels the outcome, and updates
    /// the chosen arm's regressors and archive.
    pub fn round(
        &mut self,
        env: &mut dyn GenerativeEnv,
        ctx: &RoundContext,
        reference: Option<&[EmbeddedPair]>,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundRecord> {
        let arm_count = self.fidelity_states.len();
        let mut scores = Vec::with_capacity(arm_count);
        for g in 0..arm_count {
            let (fid_mean, fid_dev) = self.fidelity_states[g].predict(&ctx.prompt)?;
            if self.fidelity_only {
                scores.push(fid_mean + self.config.beta_s * fid_dev);
            } else {
                let (div_mean, div_dev) = self.diversity_states[g].predict(&ctx.prompt)?;
                scores.push(dakucb_score(
                    fid_mean,
                    fid_dev,
                    div_mean,
                    div_dev,
                    &self.config,
                ));
            }
        }
        let arm = argmax_lowest_index(&scores);
        let output = env.generate(arm, ctx, rng)?;
        let fidelity_label = env.fidelity(arm, ctx, &output)?;

        let diversity_penalty = if self.fidelity_only {
            0.0
        } else {
            match &self.rff {
                Some(labeler) => labeler.label(
                    &self.jspec_squared,
                    &ctx.prompt,
                    &output,
                    self.archive.live(arm),
                    arm,
                )?,
                None => diversity_label(
                    self.config.diversity,
                    &ctx.prompt,
                    &output,
                    self.archive.live(arm),
                    reference,
                    &self.jspec_squared,
                    &self.jspec_unsquared,
                )?,
            }
        };

        self.fidelity_states[arm].update(&ctx.prompt, fidelity_label)?;
        if !self.fidelity_only {
            self.diversity_states[arm].update(&ctx.prompt, diversity_penalty)?;
        }
        if let Some(labeler) = &mut self.rff {
            labeler.push(arm, &output)?;
        }
        self.archive.push(
            arm,
            EmbeddedPair::tagged(ctx.prompt.clone(), output.clone(), arm, self.round),
        );
        let record = RoundRecord {
            round: self.round,
            cluster: ctx.cluster,
            arm,
            weights: super::MixtureWeights::vertex(arm_count, arm).into_vec(),
            fidelity_label,
            diversity_label: diversity_penalty,
            scores,
            output,
        };
        self.round += 1;
        Ok(record)
    }
}

/// Uniform random arm selection; archives and labels are still tracked so
/// the metrics log stays comparable.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    jspec_squared: JointKernelSpec,
    archive: HistoryArchive,
    round: usize,
}

impl RandomPolicy {
    pub fn new(arm_count: usize, prompt_spec: KernelSpec, data_spec: KernelSpec) -> Result<Self> {
        prompt_spec.validate()?;
        data_spec.validate()?;
        if arm_count == 0 {
            return Err(Error::invalid("need at least one arm"));
        }
        Ok(RandomPolicy {
            jspec_squared: JointKernelSpec::squared(prompt_spec, data_spec),
            archive: HistoryArchive::new(arm_count),
            round: 0,
        })
    }

    pub fn archive(&self) -> &HistoryArchive {
        &self.archive
    }

    pub fn round(
        &mut self,
        env: &mut dyn GenerativeEnv,
        ctx: &RoundContext,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundRecord> {
        let arm_count = self.archive.arm_count();
        let arm = rng.random_range(0..arm_count);
        let output = env.generate(arm, ctx, rng)?;
        let fidelity_label = env.fidelity(arm, ctx, &output)?;
        let diversity_penalty = crate::scores::label_ijrke(
            &ctx.prompt,
            &output,
            self.archive.live(arm),
            &self.jspec_squared,
        )?;
        self.archive.push(
            arm,
            EmbeddedPair::tagged(ctx.prompt.clone(), output.clone(), arm, self.round),
        );
        let record = RoundRecord {
            round: self.round,
            cluster: ctx.cluster,
            arm,
            weights: vec![1.0 / arm_count as f64; arm_count],
            fidelity_label,
            diversity_label: diversity_penalty,
            scores: vec![0.0; arm_count],
            output,
        };
        self.round += 1;
        Ok(record)
    }
}

/// Always plays one arm — the policy the one-arm oracle turns into.
#[derive(Debug, Clone)]
pub struct FixedArmPolicy {
    arm: usize,
    jspec_squared: JointKernelSpec,
    archive: HistoryArchive,
    round: usize,
}

impl FixedArmPolicy {
    pub fn new(
        arm: usize,
        arm_count: usize,
        prompt_spec: KernelSpec,
        data_spec: KernelSpec,
    ) -> Result<Self> {
        if arm >= arm_count {
            return Err(Error::invalid(format!(
                "fixed arm {arm} out of range ({arm_count} arms)"
            )));
        }
        Ok(FixedArmPolicy {
            arm,
            jspec_squared: JointKernelSpec::squared(prompt_spec, data_spec),
            archive: HistoryArchive::new(arm_count),
            round: 0,
        })
    }

    pub fn archive(&self) -> &HistoryArchive {
        &self.archive
    }

    pub fn round(
        &mut self,
        env: &mut dyn GenerativeEnv,
        ctx: &RoundContext,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundRecord> {
        let arm_count = self.archive.arm_count();
        let output = env.generate(self.arm, ctx, rng)?;
        let fidelity_label = env.fidelity(self.arm, ctx, &output)?;
        let diversity_penalty = crate::scores::label_ijrke(
            &ctx.prompt,
            &output,
            self.archive.live(self.arm),
            &self.jspec_squared,
        )?;
        self.archive.push(
            self.arm,
            EmbeddedPair::tagged(ctx.prompt.clone(), output.clone(), self.arm, self.round),
        );
        let record = RoundRecord {
            round: self.round,
            cluster: ctx.cluster,
            arm: self.arm,
            weights: super::MixtureWeights::vertex(arm_count, self.arm).into_vec(),
            fidelity_label,
            diversity_label: diversity_penalty,
            scores: vec![0.0; arm_count],
            output,
        };
        self.round += 1;
        Ok(record)
    }
}
