//! Shared fixtures for the integration suites: seeded corpora and the
//! synthetic environments the behavioral checks run on.

#![allow(dead_code)]

pub mod oracles;

use dakucb::env::{
    FidelityScorer, ModeSelection, PromptCluster, PromptSampler, SyntheticArm, SyntheticEnv,
};
use dakucb::scores::{EmbeddedPair, PairedCorpus};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_vec(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
}

pub fn random_corpus(n: usize, dt: usize, dx: usize, seed: u64) -> PairedCorpus {
    let mut r = rng(seed);
    let mut corpus = PairedCorpus::new();
    for _ in 0..n {
        let t = random_vec(dt, &mut r);
        let x = random_vec(dx, &mut r);
        corpus.push(EmbeddedPair::new(t, x)).unwrap();
    }
    corpus
}

/// A unit vector orthogonal to the first axis, scaled to `radius`.
pub fn off_axis_anchor(dim: usize, radius: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut v = dakucb::env::random_unit_vector(dim, rng);
    v[0] = 0.0;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.iter().map(|x| radius * x / norm).collect()
}

/// The rank-one scorer map used by the synthetic fixtures:
/// `t -> (u . t) e_0` with `u` the normalized all-ones direction.
pub fn axis_scorer_map(out_dim: usize, prompt_dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(out_dim, prompt_dim);
    let u = 1.0 / (prompt_dim as f64).sqrt();
    for j in 0..prompt_dim {
        m[(0, j)] = u;
    }
    m
}

/// Cluster means orthogonal to the scorer direction plus a fixed offset
/// along it, so fidelity stays well-defined.
pub fn cluster_means(
    count: usize,
    dim: usize,
    separation: f64,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<f64>> {
    let u = 1.0 / (dim as f64).sqrt();
    (0..count)
        .map(|_| {
            let mut v = dakucb::env::random_unit_vector(dim, rng);
            let along: f64 = v.iter().map(|x| x * u).sum();
            for x in v.iter_mut() {
                *x -= along * u;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|x| separation * x / norm + 2.0 * u).collect()
        })
        .collect()
}

pub struct TwoArmSpec {
    pub clusters: usize,
    pub cluster_scale: f64,
    pub diverse_modes: usize,
    pub noise: f64,
    /// Alignment gain for the collapsed arm (fidelity edge; 0 = equal).
    pub collapsed_alignment: f64,
    pub seed: u64,
}

impl Default for TwoArmSpec {
    fn default() -> Self {
        TwoArmSpec {
            clusters: 2,
            cluster_scale: 0.25,
            diverse_modes: 8,
            noise: 0.1,
            collapsed_alignment: 0.0,
            seed: 0xE0,
        }
    }
}

/// Arm 0 collapsed (one anchor per cluster), arm 1 uniform over
/// `diverse_modes` distant anchors per cluster; anchors orthogonal to the
/// scorer axis so mean fidelity matches unless an alignment edge is asked
/// for. Dimensions 16/16.
pub fn two_arm_env(spec: &TwoArmSpec) -> SyntheticEnv {
    let dt = 16;
    let dx = 16;
    let mut structure = rng(spec.seed);
    let means = cluster_means(spec.clusters, dt, 4.0, &mut structure);
    let sampler = PromptSampler::uniform(
        means
            .into_iter()
            .map(|mean| PromptCluster {
                mean,
                scale: spec.cluster_scale,
            })
            .collect(),
    )
    .unwrap();

    let collapsed_anchors: Vec<Vec<Vec<f64>>> = (0..spec.clusters)
        .map(|_| vec![off_axis_anchor(dx, 3.0, &mut structure)])
        .collect();
    let diverse_anchors: Vec<Vec<Vec<f64>>> = (0..spec.clusters)
        .map(|_| {
            (0..spec.diverse_modes)
                .map(|_| off_axis_anchor(dx, 3.0, &mut structure))
                .collect()
        })
        .collect();

    let alignment = |gain: f64| {
        let mut m = DMatrix::zeros(dx, dt);
        let u = 1.0 / (dt as f64).sqrt();
        if gain != 0.0 {
            for j in 0..dt {
                m[(0, j)] = gain * u;
            }
        }
        m
    };
    let arms = vec![
        SyntheticArm::new(
            0,
            collapsed_anchors,
            ModeSelection::Collapsed,
            spec.noise,
            alignment(spec.collapsed_alignment),
        )
        .unwrap(),
        SyntheticArm::new(
            1,
            diverse_anchors,
            ModeSelection::UniformOverModes,
            spec.noise,
            alignment(0.0),
        )
        .unwrap(),
    ];
    let scorer = FidelityScorer::affine_cosine(axis_scorer_map(dx, dt)).unwrap();
    SyntheticEnv::new(sampler, arms, scorer).unwrap()
}

/// Three mutually collapsed arms with distant anchors and equal fidelity.
pub fn collapsed_trio_env(seed: u64) -> SyntheticEnv {
    let dt = 16;
    let dx = 16;
    let clusters = 2;
    let mut structure = rng(seed);
    let means = cluster_means(clusters, dt, 4.0, &mut structure);
    let sampler = PromptSampler::uniform(
        means
            .into_iter()
            .map(|mean| PromptCluster { mean, scale: 0.25 })
            .collect(),
    )
    .unwrap();
    let arms = (0..3)
        .map(|id| {
            let anchors: Vec<Vec<Vec<f64>>> = (0..clusters)
                .map(|_| vec![off_axis_anchor(dx, 3.0, &mut structure)])
                .collect();
            SyntheticArm::new(
                id,
                anchors,
                ModeSelection::Collapsed,
                0.1,
                DMatrix::zeros(dx, dt),
            )
            .unwrap()
        })
        .collect();
    let scorer = FidelityScorer::affine_cosine(axis_scorer_map(dx, dt)).unwrap();
    SyntheticEnv::new(sampler, arms, scorer).unwrap()
}

/// A fully deterministic environment: prompts sit exactly on the cluster
/// means (zero scale), arms are noise-free and collapsed, so the true
/// objective of every arm at every prompt is an exact finite computation.
///
/// `anchor_angles[arm][cluster]` gives the angle between the arm's anchor and
/// the scorer axis; fidelity at cluster `c` is `(1 + cos(angle))/2`.
pub fn discrete_env(anchor_angles: &[Vec<f64>], seed: u64) -> SyntheticEnv {
    let dt = 16;
    let dx = 16;
    let clusters = anchor_angles[0].len();
    let mut structure = rng(seed);
    let means = cluster_means(clusters, dt, 4.0, &mut structure);
    let sampler = PromptSampler::uniform(
        means
            .into_iter()
            .map(|mean| PromptCluster { mean, scale: 0.0 })
            .collect(),
    )
    .unwrap();
    let arms = anchor_angles
        .iter()
        .enumerate()
        .map(|(id, angles)| {
            let anchors: Vec<Vec<Vec<f64>>> = angles
                .iter()
                .map(|angle| {
                    let mut a = off_axis_anchor(dx, 3.0 * angle.sin(), &mut structure);
                    a[0] = 3.0 * angle.cos();
                    vec![a]
                })
                .collect();
            SyntheticArm::new(
                id,
                anchors,
                ModeSelection::Collapsed,
                0.0,
                DMatrix::zeros(dx, dt),
            )
            .unwrap()
        })
        .collect();
    let scorer = FidelityScorer::affine_cosine(axis_scorer_map(dx, dt)).unwrap();
    SyntheticEnv::new(sampler, arms, scorer).unwrap()
}
