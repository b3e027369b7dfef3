//! Kernel evaluation, Gram matrices, product (joint) kernels, and random
//! Fourier feature approximation.
//!
//! Every kernel here is meant to be used normalized (`k(x,x) = 1`): the
//! gaussian family is normalized by construction, and the polynomial and
//! cosine families carry a `normalize` flag that rescales them. The scores
//! and confidence bounds built on top assume this.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn default_true() -> bool {
    true
}

/// Kernel family plus parameters.
///
/// Serializes with a `family` tag, e.g. `{ family = "gaussian", sigma = 1.0 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-||x - y||^2 / (2 sigma^2))`. Satisfies `k(x,x) = 1` and
    /// `k(x,y) ∈ (0,1]` for any bandwidth `sigma > 0`.
    Gaussian { sigma: f64 },
    /// `(1 + gain * <x,y>)^degree`, divided by `sqrt(k(x,x) k(y,y))` when
    /// `normalize` is set.
    Polynomial {
        gain: f64,
        degree: u32,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    /// `<x,y>`, divided by `||x|| ||y||` when `normalize` is set (cosine
    /// similarity); the raw inner product otherwise.
    Cosine {
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec::Gaussian { sigma }
    }

    /// Checks parameter validity (positive bandwidth/gain, degree >= 1).
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Gaussian { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::invalid(format!(
                        "gaussian bandwidth must be a positive real, got {sigma}"
                    )));
                }
            }
            KernelSpec::Polynomial { gain, degree, .. } => {
                if !(gain.is_finite() && gain > 0.0) {
                    return Err(Error::invalid(format!(
                        "polynomial gain must be a positive real, got {gain}"
                    )));
                }
                if degree == 0 {
                    return Err(Error::invalid("polynomial degree must be >= 1"));
                }
            }
            KernelSpec::Cosine { .. } => {}
        }
        Ok(())
    }

    /// Whether `k(x,x) = 1` holds for this spec.
    pub fn is_normalized(&self) -> bool {
        match *self {
            KernelSpec::Gaussian { .. } => true,
            KernelSpec::Polynomial { normalize, .. } => normalize,
            KernelSpec::Cosine { normalize } => normalize,
        }
    }

    /// Evaluates `k(x, y)`.
    ///
    /// Errors on dimension mismatch, non-finite input, invalid parameters,
    /// and on zero vectors when a normalized cosine/polynomial evaluation
    /// would divide by zero.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.validate()?;
        check_pair(x, y)?;
        self.eval_unchecked(x, y)
    }

    /// Evaluates the squared kernel `k(x, y)^2`.
    ///
    /// For the gaussian family this uses the exact bandwidth transform
    /// `sigma -> sigma / sqrt(2)`; other families square the evaluation.
    pub fn eval_squared(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.validate()?;
        check_pair(x, y)?;
        self.eval_squared_unchecked(x, y)
    }

    /// The spec whose plain evaluation equals this kernel squared, when one
    /// exists in the same family (`gaussian(sigma)^2 = gaussian(sigma/sqrt 2)`).
    pub fn squared_spec(&self) -> Option<KernelSpec> {
        match *self {
            KernelSpec::Gaussian { sigma } => Some(KernelSpec::Gaussian {
                sigma: sigma / std::f64::consts::SQRT_2,
            }),
            _ => None,
        }
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        debug_assert_eq!(x.len(), y.len());
        match *self {
            KernelSpec::Gaussian { sigma } => {
                let d2 = squared_distance(x, y);
                Ok((-d2 / (2.0 * sigma * sigma)).exp())
            }
            KernelSpec::Polynomial {
                gain,
                degree,
                normalize,
            } => {
                let raw = |a: &[f64], b: &[f64]| (1.0 + gain * dot(a, b)).powi(degree as i32);
                let k = raw(x, y);
                if normalize {
                    let denom = (raw(x, x) * raw(y, y)).sqrt();
                    if denom <= 0.0 || denom.is_nan() {
                        return Err(Error::invalid(
                            "polynomial kernel cannot be normalized at this input (k(x,x) <= 0)",
                        ));
                    }
                    Ok(k / denom)
                } else {
                    Ok(k)
                }
            }
            KernelSpec::Cosine { normalize } => {
                let k = dot(x, y);
                if normalize {
                    let denom = (dot(x, x) * dot(y, y)).sqrt();
                    if denom <= 0.0 {
                        return Err(Error::invalid(
                            "cosine kernel is undefined for zero vectors",
                        ));
                    }
                    Ok(k / denom)
                } else {
                    Ok(k)
                }
            }
        }
    }

    pub(crate) fn eval_squared_unchecked(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self.squared_spec() {
            Some(spec) => spec.eval_unchecked(x, y),
            None => Ok(self.eval_unchecked(x, y)?.powi(2)),
        }
    }
}

/// Product kernel over (prompt, output) pairs:
/// `k((t,x),(t',x')) = k_T(t,t') * k_X(x,x')`, with both factors squared
/// componentwise when `squared` is set (the form the RKE-family scores use).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointKernelSpec {
    pub text: KernelSpec,
    pub data: KernelSpec,
    #[serde(default)]
    pub squared: bool,
}

impl JointKernelSpec {
    pub fn new(text: KernelSpec, data: KernelSpec) -> Self {
        JointKernelSpec {
            text,
            data,
            squared: false,
        }
    }

    pub fn squared(text: KernelSpec, data: KernelSpec) -> Self {
        JointKernelSpec {
            text,
            data,
            squared: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.data.validate()
    }

    /// Evaluates the joint kernel on two (prompt, output) pairs.
    pub fn eval(&self, t: &[f64], x: &[f64], t2: &[f64], x2: &[f64]) -> Result<f64> {
        self.validate()?;
        check_pair(t, t2)?;
        check_pair(x, x2)?;
        Ok(self.eval_text(t, t2)? * self.eval_data(x, x2)?)
    }

    /// The prompt factor, squared when the joint spec says so.
    pub(crate) fn eval_text(&self, t: &[f64], t2: &[f64]) -> Result<f64> {
        if self.squared {
            self.text.eval_squared_unchecked(t, t2)
        } else {
            self.text.eval_unchecked(t, t2)
        }
    }

    /// The output factor, squared when the joint spec says so.
    pub(crate) fn eval_data(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if self.squared {
            self.data.eval_squared_unchecked(x, x2)
        } else {
            self.data.eval_unchecked(x, x2)
        }
    }
}

/// Gram matrix `K[i][j] = k(x_i, x_j)`.
///
/// Symmetric by construction; positive semidefinite up to floating-point
/// tolerance for valid kernels.
pub fn gram_matrix(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::invalid("gram_matrix requires a nonempty point set"));
    }
    check_points(points)?;
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spec.eval_unchecked(&points[i], &points[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Random Fourier feature map for a gaussian kernel: `z(x) . z(y) -> k(x,y)`
/// as the feature count grows. Deterministic given the seed.
#[derive(Debug, Clone)]
pub struct RffMap {
    feature_dim: usize,
    input_dim: usize,
    /// Row-major `feature_dim x input_dim` frequencies from the gaussian
    /// spectral density N(0, I / sigma^2).
    frequencies: Vec<f64>,
    /// Phases uniform on [0, 2π).
    phases: Vec<f64>,
    source: KernelSpec,
    seed: u64,
}

impl RffMap {
    /// Draws a feature map for `source` (gaussian only).
    pub fn new(
        source: &KernelSpec,
        input_dim: usize,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        source.validate()?;
        let sigma = match *source {
            KernelSpec::Gaussian { sigma } => sigma,
            _ => {
                return Err(Error::invalid(
                    "random Fourier features are only defined for the gaussian family",
                ))
            }
        };
        if input_dim == 0 || feature_dim == 0 {
            return Err(Error::invalid("RffMap dimensions must be positive"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / sigma).expect("valid std");
        let mut frequencies = Vec::with_capacity(feature_dim * input_dim);
        for _ in 0..feature_dim * input_dim {
            frequencies.push(normal.sample(&mut rng));
        }
        let phases = (0..feature_dim)
            .map(|_| rng.random::<f64>() * 2.0 * std::f64::consts::PI)
            .collect();
        Ok(RffMap {
            feature_dim,
            input_dim,
            frequencies,
            phases,
            source: source.clone(),
            seed,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn source(&self) -> &KernelSpec {
        &self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `z(x) = sqrt(2/d) * [cos(w_i . x + b_i)]_i`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "RffMap expects dimension {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        check_finite(x)?;
        let scale = (2.0 / self.feature_dim as f64).sqrt();
        let mut z = Vec::with_capacity(self.feature_dim);
        for i in 0..self.feature_dim {
            let row = &self.frequencies[i * self.input_dim..(i + 1) * self.input_dim];
            z.push(scale * (dot(row, x) + self.phases[i]).cos());
        }
        Ok(z)
    }
}

/// Median pairwise Euclidean distance of a calibration sample — the default
/// bandwidth when none is configured. `None` when fewer than two points or
/// when every pairwise distance is zero.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let mut distances = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            distances.push(squared_distance(&points[i], &points[j]).sqrt());
        }
    }
    distances.sort_by(|a, b| a.total_cmp(b));
    let median = if distances.len() % 2 == 1 {
        distances[distances.len() / 2]
    } else {
        0.5 * (distances[distances.len() / 2 - 1] + distances[distances.len() / 2])
    };
    (median > 0.0).then_some(median)
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

pub(crate) fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite entry in input vector"));
    }
    Ok(())
}

pub(crate) fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty input vector"));
    }
    check_finite(x)?;
    check_finite(y)
}

pub(crate) fn check_points(points: &[Vec<f64>]) -> Result<()> {
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::invalid("zero-dimensional points"));
    }
    for p in points {
        if p.len() != dim {
            return Err(Error::invalid(format!(
                "inhomogeneous point dimensions: {} vs {}",
                p.len(),
                dim
            )));
        }
        check_finite(p)?;
    }
    Ok(())
}
