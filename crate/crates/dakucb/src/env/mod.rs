//! Synthetic prompt-conditioned generator arms with controllable diversity
//! collapse, a cosine fidelity scorer, prompt samplers, and replay of
//! precomputed embedding datasets.
//!
//! Samplers and arms are immutable; randomness is injected per call, so
//! concurrent trials with distinct streams are safe.

mod dataset;

pub use dataset::{
    load_embeddings, write_embeddings, EmbeddingDataset, EmbeddingRecord, ReplayEnv,
};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kernels::{check_finite, dot};
use crate::{Error, Result};

/// One gaussian component of the prompt distribution.
#[derive(Debug, Clone)]
pub struct PromptCluster {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation around the mean.
    pub scale: f64,
}

/// Mixture-of-gaussians prompt distribution; each draw reports the cluster it
/// came from.
#[derive(Debug, Clone)]
pub struct PromptSampler {
    clusters: Vec<PromptCluster>,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl PromptSampler {
    pub fn new(clusters: Vec<PromptCluster>, weights: Vec<f64>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::invalid("prompt sampler needs at least one cluster"));
        }
        if clusters.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} clusters but {} weights",
                clusters.len(),
                weights.len()
            )));
        }
        let dim = clusters[0].mean.len();
        for c in &clusters {
            check_finite(&c.mean)?;
            if c.mean.len() != dim {
                return Err(Error::invalid("cluster means have mixed dimensions"));
            }
            if !(c.scale.is_finite() && c.scale >= 0.0) {
                return Err(Error::invalid("cluster scale must be nonnegative"));
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || total <= 0.0 {
            return Err(Error::invalid(
                "cluster weights must be nonnegative and sum > 0",
            ));
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w / total;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(PromptSampler {
            clusters,
            weights: weights.iter().map(|w| w / total).collect(),
            cumulative,
        })
    }

    pub fn uniform(clusters: Vec<PromptCluster>) -> Result<Self> {
        let w = vec![1.0; clusters.len()];
        PromptSampler::new(clusters, w)
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn prompt_dim(&self) -> usize {
        self.clusters[0].mean.len()
    }

    pub fn cluster_mean(&self, cluster: usize) -> &[f64] {
        &self.clusters[cluster].mean
    }

    /// Draws a cluster by weight, then a gaussian prompt around its mean.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> (usize, Vec<f64>) {
        let u: f64 = rng.random();
        let cluster = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.clusters.len() - 1);
        let spec = &self.clusters[cluster];
        let prompt = spec
            .mean
            .iter()
            .map(|m| {
                m + spec.scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
            })
            .collect();
        (cluster, prompt)
    }
}

/// How an arm picks its output anchor for a prompt's cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModeSelection {
    /// Always the cluster's first anchor — a fully collapsed generator.
    Collapsed,
    /// Uniform over the cluster's anchors.
    UniformOverModes,
    /// Aligned anchor on the home cluster; an anchor of a uniformly chosen
    /// wrong cluster elsewhere.
    Expert { home_cluster: usize },
}

/// A synthetic conditional generator: per-cluster anchor sets plus an
/// optional linear prompt-to-output alignment and isotropic noise.
///
/// Identical (prompt, rng state) pairs produce identical outputs.
#[derive(Debug, Clone)]
pub struct SyntheticArm {
    pub id: usize,
    /// anchors[cluster][mode]
    anchors: Vec<Vec<Vec<f64>>>,
    mode_selection: ModeSelection,
    noise_scale: f64,
    alignment: DMatrix<f64>,
}

impl SyntheticArm {
    pub fn new(
        id: usize,
        anchors: Vec<Vec<Vec<f64>>>,
        mode_selection: ModeSelection,
        noise_scale: f64,
        alignment: DMatrix<f64>,
    ) -> Result<Self> {
        if anchors.is_empty() || anchors.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid("every cluster needs at least one anchor"));
        }
        let dim = anchors[0][0].len();
        for cluster in &anchors {
            for anchor in cluster {
                check_finite(anchor)?;
                if anchor.len() != dim {
                    return Err(Error::invalid("anchor dimensions are inhomogeneous"));
                }
            }
        }
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(Error::invalid("noise scale must be nonnegative"));
        }
        if let ModeSelection::Expert { home_cluster } = mode_selection {
            if home_cluster >= anchors.len() {
                return Err(Error::invalid(format!(
                    "expert home cluster {home_cluster} out of range ({} clusters)",
                    anchors.len()
                )));
            }
        }
        if alignment.nrows() != dim {
            return Err(Error::invalid(format!(
                "alignment map has {} rows but output dim is {dim}",
                alignment.nrows()
            )));
        }
        Ok(SyntheticArm {
            id,
            anchors,
            mode_selection,
            noise_scale,
            alignment,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn output_dim(&self) -> usize {
        self.anchors[0][0].len()
    }

    pub fn anchors(&self, cluster: usize) -> &[Vec<f64>] {
        &self.anchors[cluster]
    }

    /// Draws an output: anchor per the mode selection, plus the alignment-map
    /// contribution and gaussian noise.
    pub fn generate(
        &self,
        cluster: usize,
        prompt: &[f64],
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>> {
        if cluster >= self.anchors.len() {
            return Err(Error::invalid(format!(
                "arm {} knows {} clusters, got cluster {cluster}",
                self.id,
                self.anchors.len()
            )));
        }
        if prompt.len() != self.alignment.ncols() {
            return Err(Error::invalid(format!(
                "prompt dimension {} does not match alignment map ({})",
                prompt.len(),
                self.alignment.ncols()
            )));
        }
        let anchor = match self.mode_selection {
            ModeSelection::Collapsed => &self.anchors[cluster][0],
            ModeSelection::UniformOverModes => {
                let modes = &self.anchors[cluster];
                &modes[rng.random_range(0..modes.len())]
            }
            ModeSelection::Expert { home_cluster } => {
                if cluster == home_cluster {
                    &self.anchors[cluster][0]
                } else {
                    // a cluster irrelevant to the prompt, then an anchor in it
                    let wrong = {
                        let mut c = rng.random_range(0..self.anchors.len() - 1);
                        if c >= cluster {
                            c += 1;
                        }
                        c
                    };
                    let modes = &self.anchors[wrong];
                    &modes[rng.random_range(0..modes.len())]
                }
            }
        };
        let mut out = anchor.clone();
        if self.alignment.iter().any(|v| *v != 0.0) {
            let aligned = &self.alignment * nalgebra::DVector::from_column_slice(prompt);
            for (o, a) in out.iter_mut().zip(aligned.iter()) {
                *o += a;
            }
        }
        for o in out.iter_mut() {
            *o += self.noise_scale
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
        Ok(out)
    }
}

/// Deterministic fidelity scorer: `shift + scale * cos(A t, x)`; the default
/// shift/scale of 0.5 maps cosine similarity into [0, 1].
#[derive(Debug, Clone)]
pub struct FidelityScorer {
    map: DMatrix<f64>,
    scale: f64,
    shift: f64,
}

impl FidelityScorer {
    pub fn new(map: DMatrix<f64>, scale: f64, shift: f64) -> Result<Self> {
        if !(scale.is_finite() && shift.is_finite()) {
            return Err(Error::invalid("scorer scale/shift must be finite"));
        }
        Ok(FidelityScorer { map, scale, shift })
    }

    pub fn affine_cosine(map: DMatrix<f64>) -> Result<Self> {
        FidelityScorer::new(map, 0.5, 0.5)
    }

    pub fn score(&self, prompt: &[f64], output: &[f64]) -> Result<f64> {
        check_finite(prompt)?;
        check_finite(output)?;
        if prompt.len() != self.map.ncols() || output.len() != self.map.nrows() {
            return Err(Error::invalid("fidelity scorer dimension mismatch"));
        }
        let target = &self.map * nalgebra::DVector::from_column_slice(prompt);
        let tn = target.norm();
        let on = dot(output, output).sqrt();
        if tn == 0.0 || on == 0.0 {
            return Err(Error::invalid(
                "fidelity is undefined for zero vectors (check the scorer map)",
            ));
        }
        let cos = target.iter().zip(output).map(|(a, b)| a * b).sum::<f64>() / (tn * on);
        Ok(self.shift + self.scale * cos)
    }
}

/// One round's context: the sampled cluster and prompt, plus the dataset
/// record index when replaying.
#[derive(Debug, Clone)]
pub struct RoundContext {
    pub cluster: usize,
    pub prompt: Vec<f64>,
    pub record: Option<usize>,
}

/// What a policy needs from an environment: prompt contexts, per-arm
/// conditional generation, and a fidelity score for the produced pair.
pub trait GenerativeEnv {
    fn arm_count(&self) -> usize;
    fn prompt_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn cluster_count(&self) -> usize;
    fn next_context(&mut self, rng: &mut ChaCha12Rng) -> Result<RoundContext>;
    fn generate(&self, arm: usize, ctx: &RoundContext, rng: &mut ChaCha12Rng) -> Result<Vec<f64>>;
    fn fidelity(&self, arm: usize, ctx: &RoundContext, output: &[f64]) -> Result<f64>;
}

/// Synthetic environment: a prompt sampler, a set of arms, and a scorer.
#[derive(Debug, Clone)]
pub struct SyntheticEnv {
    pub sampler: PromptSampler,
    pub arms: Vec<SyntheticArm>,
    pub scorer: FidelityScorer,
}

impl SyntheticEnv {
    pub fn new(
        sampler: PromptSampler,
        arms: Vec<SyntheticArm>,
        scorer: FidelityScorer,
    ) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::invalid("environment needs at least one arm"));
        }
        for arm in &arms {
            if arm.cluster_count() != sampler.cluster_count() {
                return Err(Error::invalid(format!(
                    "arm {} models {} clusters but the sampler has {}",
                    arm.id,
                    arm.cluster_count(),
                    sampler.cluster_count()
                )));
            }
        }
        Ok(SyntheticEnv {
            sampler,
            arms,
            scorer,
        })
    }
}

impl GenerativeEnv for SyntheticEnv {
    fn arm_count(&self) -> usize {
        self.arms.len()
    }

    fn prompt_dim(&self) -> usize {
        self.sampler.prompt_dim()
    }

    fn output_dim(&self) -> usize {
        self.arms[0].output_dim()
    }

    fn cluster_count(&self) -> usize {
        self.sampler.cluster_count()
    }

    fn next_context(&mut self, rng: &mut ChaCha12Rng) -> Result<RoundContext> {
        let (cluster, prompt) = self.sampler.sample(rng);
        Ok(RoundContext {
            cluster,
            prompt,
            record: None,
        })
    }

    fn generate(&self, arm: usize, ctx: &RoundContext, rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        self.arms
            .get(arm)
            .ok_or_else(|| Error::invalid(format!("unknown arm {arm}")))?
            .generate(ctx.cluster, &ctx.prompt, rng)
    }

    fn fidelity(&self, _arm: usize, ctx: &RoundContext, output: &[f64]) -> Result<f64> {
        self.scorer.score(&ctx.prompt, output)
    }
}

/// A random unit vector (gaussian direction, normalized).
pub fn random_unit_vector(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
