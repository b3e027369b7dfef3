//! Selection policies: DAK-UCB and its mixture and staged variants, plus the
//! Random, One-Arm-Oracle and fidelity-only (PAK-UCB) baselines.
//!
//! A policy run is a single logical thread owning its KRR states, archive and
//! random stream; independent trials share nothing mutable.

mod dakucb;
mod mixture;
mod sup;

pub use dakucb::{DakUcbPolicy, FixedArmPolicy, RandomPolicy};
pub use mixture::{
    pair_label, psd_project, qp_objective, simplex_project, simplex_qp, MixturePolicy,
};
pub use sup::{
    sup_dakucb_run, StageAction, StageStep, SupDakUcbPolicy, SupDiagnostics, SupRunOutput,
};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::env::GenerativeEnv;
use crate::kernels::JointKernelSpec;
use crate::scores::{i_jrke, label_ijrke, label_jkd, EmbeddedPair, PairedCorpus};
use crate::{Error, Result};

/// Which per-sample diversity label the bandit regresses on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityPrimitive {
    /// Penalty form of the inverse joint RKE (squared product kernel).
    #[serde(rename = "neg_ijrke")]
    NegIJrke,
    /// Joint kernel distance against a fixed reference corpus.
    NegJkd,
}

/// Knobs shared by every policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Fidelity/diversity trade-off; 0 reduces every decision to the
    /// fidelity-only policy.
    pub lambda: f64,
    pub diversity: DiversityPrimitive,
    /// Confidence multiplier on the fidelity deviation.
    pub beta_s: f64,
    /// Confidence multiplier on the diversity deviation (also used for the
    /// mixture matrix radius).
    pub beta_d: f64,
    /// KRR ridge.
    pub ridge: f64,
    /// Probability of a panel round (mixture policy only).
    pub panel_rate: f64,
    /// Stopping tolerance of the simplex QP solver.
    pub qp_tolerance: f64,
    /// When set, diversity labels approximate the squared output kernel with
    /// this many random Fourier features.
    pub rff_dim: Option<usize>,
}

impl PolicyConfig {
    pub fn new(lambda: f64) -> Self {
        PolicyConfig {
            lambda,
            diversity: DiversityPrimitive::NegIJrke,
            beta_s: 1.0,
            beta_d: 1.0,
            ridge: 1.0,
            panel_rate: 0.25,
            qp_tolerance: 1e-9,
            rff_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be a nonnegative real"));
        }
        if !(self.beta_s.is_finite() && self.beta_s >= 0.0)
            || !(self.beta_d.is_finite() && self.beta_d >= 0.0)
        {
            return Err(Error::invalid("confidence multipliers must be nonnegative"));
        }
        if !(self.ridge.is_finite() && self.ridge > 0.0) {
            return Err(Error::invalid("ridge must be positive"));
        }
        if !(0.0..=1.0).contains(&self.panel_rate) {
            return Err(Error::invalid("panel rate must lie in [0, 1]"));
        }
        if !(self.qp_tolerance.is_finite() && self.qp_tolerance > 0.0) {
            return Err(Error::invalid("qp tolerance must be positive"));
        }
        if self.rff_dim == Some(0) {
            return Err(Error::invalid("rff_dim must be positive when set"));
        }
        Ok(())
    }
}

/// The optimistic DAK-UCB index:
/// `(fid_mean + beta_s fid_dev) - lambda (div_mean - beta_d div_dev)`,
/// where the diversity estimate is the stored-positive penalty.
pub fn dakucb_score(
    fid_mean: f64,
    fid_dev: f64,
    div_mean: f64,
    div_dev: f64,
    config: &PolicyConfig,
) -> f64 {
    (fid_mean + config.beta_s * fid_dev) - config.lambda * (div_mean - config.beta_d * div_dev)
}

/// Everything one round produced: the chosen arm, the sampling weights (a
/// vertex for deterministic policies), both labels, the per-arm indices the
/// decision was based on, and the raw output for later corpus scoring.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub cluster: usize,
    pub arm: usize,
    pub weights: Vec<f64>,
    pub fidelity_label: f64,
    pub diversity_label: f64,
    pub scores: Vec<f64>,
    pub output: Vec<f64>,
}

/// Per-arm streams of (prompt, output) pairs with stage-frozen snapshots.
///
/// The live archive only grows; a snapshot is the recorded prefix length at
/// the moment a stage was first entered, so frozen views stay immutable by
/// construction.
#[derive(Debug, Clone)]
pub struct HistoryArchive {
    arms: Vec<Vec<EmbeddedPair>>,
    /// snapshot_lens[arm][stage] = live length when that stage was frozen
    snapshot_lens: Vec<Vec<usize>>,
    rounds: usize,
}

impl HistoryArchive {
    pub fn new(arm_count: usize) -> Self {
        HistoryArchive {
            arms: vec![Vec::new(); arm_count],
            snapshot_lens: vec![Vec::new(); arm_count],
            rounds: 0,
        }
    }

    pub fn arm_count(&self) -> usize {
        self.arms.len()
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn push(&mut self, arm: usize, pair: EmbeddedPair) {
        self.arms[arm].push(pair);
        self.rounds += 1;
    }

    /// The full live history of one arm.
    pub fn live(&self, arm: usize) -> &[EmbeddedPair] {
        &self.arms[arm]
    }

    /// Freezes the next stage snapshot for every arm; returns its index.
    /// No-op (returning the existing index) if that stage is already frozen.
    pub fn freeze_stage(&mut self, stage: usize) -> usize {
        for arm in 0..self.arms.len() {
            while self.snapshot_lens[arm].len() <= stage {
                let len = self.arms[arm].len();
                self.snapshot_lens[arm].push(len);
            }
        }
        stage
    }

    pub fn frozen_stages(&self) -> usize {
        self.snapshot_lens.first().map_or(0, |s| s.len())
    }

    /// The immutable snapshot of an arm's archive at a frozen stage.
    pub fn snapshot(&self, arm: usize, stage: usize) -> &[EmbeddedPair] {
        let len = self.snapshot_lens[arm][stage];
        &self.arms[arm][..len]
    }
}

/// A point on the G-simplex: per-prompt sampling probabilities over arms.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture weights cannot be empty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("mixture weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(MixtureWeights(weights))
    }

    pub fn vertex(arm_count: usize, arm: usize) -> Self {
        let mut w = vec![0.0; arm_count];
        w[arm] = 1.0;
        MixtureWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Multinomial draw by inverse CDF over the stored order.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> usize {
        let u: f64 = rand::Rng::random(rng);
        let mut acc = 0.0;
        for (i, w) in self.0.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        self.0.len() - 1
    }
}

/// Argmax with ties broken toward the lowest index.
pub(crate) fn argmax_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The diversity-penalty label for a freshly generated pair against an
/// archive slice, per the configured primitive. The reference corpus is only
/// consulted for the JKD form; an empty reference yields 0 (no evidence yet).
pub(crate) fn diversity_label(
    primitive: DiversityPrimitive,
    prompt: &[f64],
    output: &[f64],
    same_model: &[EmbeddedPair],
    reference: Option<&[EmbeddedPair]>,
    squared: &JointKernelSpec,
    unsquared: &JointKernelSpec,
) -> Result<f64> {
    match primitive {
        DiversityPrimitive::NegIJrke => label_ijrke(prompt, output, same_model, squared),
        DiversityPrimitive::NegJkd => {
            let reference = reference
                .ok_or_else(|| Error::invalid("neg_jkd diversity requires a reference corpus"))?;
            if reference.is_empty() {
                return Ok(0.0);
            }
            label_jkd(prompt, output, same_model, reference, unsquared)
        }
    }
}

/// Evaluates each arm's aggregate objective `mean fidelity - lambda * i_jrke`
/// on a validation prompt set and returns the argmax (lowest index on ties).
pub fn one_arm_oracle(
    env: &mut dyn GenerativeEnv,
    validation_prompts: &[(usize, Vec<f64>)],
    jspec_squared: &JointKernelSpec,
    config: &PolicyConfig,
    rng: &mut ChaCha12Rng,
) -> Result<usize> {
    if validation_prompts.is_empty() {
        return Err(Error::invalid("one_arm_oracle needs a validation set"));
    }
    config.validate()?;
    let mut objectives = Vec::with_capacity(env.arm_count());
    for arm in 0..env.arm_count() {
        let mut corpus = PairedCorpus::new();
        let mut fid_sum = 0.0;
        for (cluster, prompt) in validation_prompts {
            let ctx = crate::env::RoundContext {
                cluster: *cluster,
                prompt: prompt.clone(),
                record: None,
            };
            let output = env.generate(arm, &ctx, rng)?;
            fid_sum += env.fidelity(arm, &ctx, &output)?;
            corpus.push(EmbeddedPair::new(prompt.clone(), output))?;
        }
        let mean_fid = fid_sum / validation_prompts.len() as f64;
        let penalty = i_jrke(&corpus, jspec_squared)?;
        objectives.push(mean_fid - config.lambda * penalty);
    }
    Ok(argmax_lowest_index(&objectives))
}

/// Cumulative regret of a record stream against per-round oracle objective
/// values (`true_j[i][g]` = the true objective of arm `g` at round `i`).
pub fn empirical_regret(records: &[RoundRecord], true_j: &[Vec<f64>]) -> Result<Vec<f64>> {
    if records.len() != true_j.len() {
        return Err(Error::invalid(format!(
            "{} records but {} oracle rows",
            records.len(),
            true_j.len()
        )));
    }
    let mut cumulative = Vec::with_capacity(records.len());
    let mut total = 0.0;
    for (record, row) in records.iter().zip(true_j) {
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let chosen = *row.get(record.arm).ok_or_else(|| {
            Error::invalid(format!("oracle row has no entry for arm {}", record.arm))
        })?;
        total += best - chosen;
        cumulative.push(total);
    }
    Ok(cumulative)
}
