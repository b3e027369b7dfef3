//! Kernel-based scores over embedded corpora: kernel distance (squared MMD),
//! Rényi kernel entropy, their joint prompt-aware variants, a Vendi-style
//! spectral entropy score, and the per-sample labels whose corpus means
//! recover the joint scores.
//!
//! Joint scores act on (prompt, output) pairs through a product kernel; the
//! RKE family squares both factors, the distance family does not. Unless a
//! score says otherwise, V-statistics (diagonals included) are used, which is
//! what makes the label/score decomposition identities exact.

use serde::{Deserialize, Serialize};

use crate::kernels::{check_finite, gram_matrix, JointKernelSpec, KernelSpec};
use crate::{Error, Result};

/// A single (prompt embedding, output embedding) datum — the atom every score
/// consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedPair {
    pub prompt: Vec<f64>,
    pub output: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
}

impl EmbeddedPair {
    pub fn new(prompt: Vec<f64>, output: Vec<f64>) -> Self {
        EmbeddedPair {
            prompt,
            output,
            arm: None,
            round: None,
        }
    }

    pub fn tagged(prompt: Vec<f64>, output: Vec<f64>, arm: usize, round: usize) -> Self {
        EmbeddedPair {
            prompt,
            output,
            arm: Some(arm),
            round: Some(round),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.output.is_empty() {
            return Err(Error::invalid("embedded pair has an empty vector"));
        }
        check_finite(&self.prompt)?;
        check_finite(&self.output)
    }
}

/// An ordered list of embedded pairs with homogeneous dimensions; the
/// empirical reference distribution for the joint scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedCorpus {
    pairs: Vec<EmbeddedPair>,
}

impl PairedCorpus {
    pub fn new() -> Self {
        PairedCorpus { pairs: Vec::new() }
    }

    pub fn from_pairs(pairs: Vec<EmbeddedPair>) -> Result<Self> {
        let mut corpus = PairedCorpus::new();
        for p in pairs {
            corpus.push(p)?;
        }
        Ok(corpus)
    }

    /// Appends a pair, enforcing finite entries and fixed dimensions.
    pub fn push(&mut self, pair: EmbeddedPair) -> Result<()> {
        pair.validate()?;
        if let Some(first) = self.pairs.first() {
            if first.prompt.len() != pair.prompt.len() || first.output.len() != pair.output.len() {
                return Err(Error::invalid(format!(
                    "corpus dimensions are ({}, {}) but pair has ({}, {})",
                    first.prompt.len(),
                    first.output.len(),
                    pair.prompt.len(),
                    pair.output.len()
                )));
            }
        }
        self.pairs.push(pair);
        Ok(())
    }

    pub fn outputs(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.output.clone()).collect()
    }

    /// The sub-corpus from `start` onward (for windowed evaluation).
    pub fn window_from(&self, start: usize) -> PairedCorpus {
        PairedCorpus {
            pairs: self.pairs[start.min(self.pairs.len())..].to_vec(),
        }
    }

    pub fn prompts(&self) -> Vec<Vec<f64>> {
        self.pairs.iter().map(|p| p.prompt.clone()).collect()
    }
}

impl std::ops::Deref for PairedCorpus {
    type Target = [EmbeddedPair];

    fn deref(&self) -> &[EmbeddedPair] {
        &self.pairs
    }
}

/// Which empirical form a two-sample statistic uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Diagonals included; nonnegative for kernel distance.
    VStatistic,
    /// Within-set diagonals excluded; unbiased.
    UStatistic,
}

/// A named score value with the sample count and estimator that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub name: String,
    pub value: f64,
    pub n: usize,
    pub estimator: Estimator,
}

impl ScoreReport {
    pub fn new(name: impl Into<String>, value: f64, n: usize, estimator: Estimator) -> Self {
        ScoreReport {
            name: name.into(),
            value,
            n,
            estimator,
        }
    }
}

/// Squared maximum mean discrepancy between two sample sets:
/// `mean k(P,P) + mean k(Q,Q) - 2 mean k(P,Q)`.
///
/// The V-statistic keeps within-set diagonals and is always nonnegative; the
/// U-statistic drops them.
pub fn kd_squared(
    p: &[Vec<f64>],
    q: &[Vec<f64>],
    spec: &KernelSpec,
    estimator: Estimator,
) -> Result<f64> {
    spec.validate()?;
    if p.len() < 2 || q.len() < 2 {
        return Err(Error::invalid(
            "kd_squared requires at least 2 samples on each side",
        ));
    }
    crate::kernels::check_points(p)?;
    crate::kernels::check_points(q)?;
    let within = |set: &[Vec<f64>]| -> Result<f64> {
        let n = set.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += spec.eval_unchecked(&set[i], &set[j])?;
            }
        }
        sum *= 2.0;
        match estimator {
            Estimator::VStatistic => {
                for x in set {
                    sum += spec.eval_unchecked(x, x)?;
                }
                Ok(sum / (n * n) as f64)
            }
            Estimator::UStatistic => Ok(sum / (n * (n - 1)) as f64),
        }
    };
    let mut cross = 0.0;
    for x in p {
        for y in q {
            cross += spec.eval_unchecked(x, y)?;
        }
    }
    cross /= (p.len() * q.len()) as f64;
    Ok(within(p)? + within(q)? - 2.0 * cross)
}

/// Rényi kernel entropy of a sample set: `||K/n||_F^{-2}` for the Gram matrix
/// `K`. Equals 1 on a fully collapsed set and approaches `n` when all
/// pairwise kernels vanish.
///
/// ```
/// use dakucb::kernels::KernelSpec;
/// use dakucb::scores::rke;
///
/// let spec = KernelSpec::gaussian(1.0);
/// let collapsed = vec![vec![0.5, 0.5]; 6];
/// assert!((rke(&collapsed, &spec).unwrap() - 1.0).abs() < 1e-12);
///
/// let spread: Vec<Vec<f64>> = (0..6).map(|i| vec![40.0 * i as f64, 0.0]).collect();
/// assert!((rke(&spread, &spec).unwrap() - 6.0).abs() < 1e-6);
/// ```
pub fn rke(samples: &[Vec<f64>], spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("rke requires a nonempty sample set"));
    }
    crate::kernels::check_points(samples)?;
    let n = samples.len();
    let mut frob2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let k = spec.eval_unchecked(&samples[i], &samples[j])?;
            frob2 += k * k;
        }
    }
    Ok((n * n) as f64 / frob2)
}

/// Joint kernel distance between two conditional samples observed at the same
/// prompts (paired design):
/// `(1/n^2) sum_ij k_T(t_i,t_j) [k_X(x_i,x_j) + k_X(y_i,y_j) - k_X(x_i,y_j) - k_X(x_j,y_i)]`.
///
/// Requires `squared = false` on the joint spec and bitwise-identical prompt
/// lists.
pub fn joint_kd(p: &PairedCorpus, q: &PairedCorpus, jspec: &JointKernelSpec) -> Result<f64> {
    jspec.validate()?;
    if jspec.squared {
        return Err(Error::invalid("joint_kd uses the unsquared joint kernel"));
    }
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("joint_kd requires nonempty corpora"));
    }
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "joint_kd is a paired estimator; corpus sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (a, b) in p.iter().zip(q.iter()) {
        if a.prompt != b.prompt {
            return Err(Error::invalid(
                "joint_kd requires the same prompt list in the same order",
            ));
        }
    }
    let n = p.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let kt = jspec.eval_text(&p[i].prompt, &p[j].prompt)?;
            let xx = jspec.eval_data(&p[i].output, &p[j].output)?;
            let yy = jspec.eval_data(&q[i].output, &q[j].output)?;
            let xy = jspec.eval_data(&p[i].output, &q[j].output)?;
            let yx = jspec.eval_data(&p[j].output, &q[i].output)?;
            total += kt * (xx + yy - xy - yx);
        }
    }
    Ok(total / (n * n) as f64)
}

/// Inverse joint RKE of a corpus:
/// `(1/n^2) sum_ij k_T(t_i,t_j)^2 k_X(x_i,x_j)^2`. Lies in [0,1] for
/// normalized kernels; the diversity penalty the bandit estimates.
pub fn i_jrke(corpus: &[EmbeddedPair], jspec: &JointKernelSpec) -> Result<f64> {
    jspec.validate()?;
    if !jspec.squared {
        return Err(Error::invalid("i_jrke uses the squared joint kernel"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("i_jrke requires a nonempty corpus"));
    }
    let n = corpus.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += jspec.eval_text(&corpus[i].prompt, &corpus[j].prompt)?
                * jspec.eval_data(&corpus[i].output, &corpus[j].output)?;
        }
    }
    Ok(total / (n * n) as f64)
}

/// Joint RKE — the reciprocal of [`i_jrke`]; at least 1 for normalized
/// kernels.
pub fn jrke(corpus: &[EmbeddedPair], jspec: &JointKernelSpec) -> Result<f64> {
    Ok(1.0 / i_jrke(corpus, jspec)?)
}

/// Per-sample diversity-penalty label: the mean over archived pairs of
/// `k_T(t,t')^2 k_X(x,x')^2`. Returns 0 on an empty history (no penalty
/// before any evidence), so labels stay in [0,1] from the first round.
///
/// Averaging this label over a corpus against itself reproduces [`i_jrke`]
/// exactly:
///
/// ```
/// use dakucb::kernels::{JointKernelSpec, KernelSpec};
/// use dakucb::scores::{i_jrke, label_ijrke, EmbeddedPair, PairedCorpus};
///
/// let jspec = JointKernelSpec::squared(KernelSpec::gaussian(1.0), KernelSpec::gaussian(1.0));
/// let corpus = PairedCorpus::from_pairs(vec![
///     EmbeddedPair::new(vec![0.0, 1.0], vec![1.0, 0.0]),
///     EmbeddedPair::new(vec![1.0, 0.0], vec![0.0, 1.0]),
///     EmbeddedPair::new(vec![0.5, 0.5], vec![0.3, -0.2]),
/// ]).unwrap();
/// let mean: f64 = corpus
///     .iter()
///     .map(|p| label_ijrke(&p.prompt, &p.output, &corpus, &jspec).unwrap())
///     .sum::<f64>() / corpus.len() as f64;
/// assert!((mean - i_jrke(&corpus, &jspec).unwrap()).abs() < 1e-12);
/// ```
pub fn label_ijrke(
    t: &[f64],
    x: &[f64],
    history: &[EmbeddedPair],
    jspec: &JointKernelSpec,
) -> Result<f64> {
    jspec.validate()?;
    if !jspec.squared {
        return Err(Error::invalid("label_ijrke uses the squared joint kernel"));
    }
    check_finite(t)?;
    check_finite(x)?;
    if history.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for entry in history {
        total += jspec.eval_text(t, &entry.prompt)? * jspec.eval_data(x, &entry.output)?;
    }
    Ok(total / history.len() as f64)
}

/// Per-sample distribution-matching label for comparing a model against a
/// reference: archived same-model terms minus archived reference terms,
/// each weighted by the prompt kernel,
/// `mean_{(t',x'_g)} k_T(t,t') k_X(x,x'_g) - mean_{(t',y')} k_T(t,t') k_X(x,y')`.
///
/// An empty same-model history contributes 0 for its term; the reference must
/// be nonempty.
pub fn label_jkd(
    t: &[f64],
    x: &[f64],
    same_model_history: &[EmbeddedPair],
    reference_history: &[EmbeddedPair],
    jspec: &JointKernelSpec,
) -> Result<f64> {
    jspec.validate()?;
    if jspec.squared {
        return Err(Error::invalid("label_jkd uses the unsquared joint kernel"));
    }
    if reference_history.is_empty() {
        return Err(Error::invalid("label_jkd requires a nonempty reference"));
    }
    check_finite(t)?;
    check_finite(x)?;
    let mean_against = |archive: &[EmbeddedPair]| -> Result<f64> {
        let mut total = 0.0;
        for entry in archive {
            total += jspec.eval_text(t, &entry.prompt)? * jspec.eval_data(x, &entry.output)?;
        }
        Ok(total / archive.len() as f64)
    };
    let same_term = if same_model_history.is_empty() {
        0.0
    } else {
        mean_against(same_model_history)?
    };
    Ok(same_term - mean_against(reference_history)?)
}

/// Vendi-style diversity score: `exp` of the Shannon entropy of the spectrum
/// of `K/n` (eigenvalues clipped at 0, `0 ln 0 = 0`). Ranges over [1, n] for
/// normalized kernels.
pub fn vendi(samples: &[Vec<f64>], spec: &KernelSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("vendi requires a nonempty sample set"));
    }
    let gram = gram_matrix(spec, samples)?;
    Ok(spectral_entropy_exp(gram))
}

/// [`vendi`] applied to the joint (prompt, output) kernel. A proxy for
/// conditional-Vendi style measures, reported as `vendi_joint_proxy`.
pub fn vendi_joint(corpus: &[EmbeddedPair], jspec: &JointKernelSpec) -> Result<f64> {
    jspec.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("vendi_joint requires a nonempty corpus"));
    }
    let n = corpus.len();
    let mut gram = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = jspec.eval_text(&corpus[i].prompt, &corpus[j].prompt)?
                * jspec.eval_data(&corpus[i].output, &corpus[j].output)?;
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(spectral_entropy_exp(gram))
}

fn spectral_entropy_exp(gram: nalgebra::DMatrix<f64>) -> f64 {
    let n = gram.nrows() as f64;
    let eigenvalues = (gram / n).symmetric_eigen().eigenvalues;
    let entropy: f64 = eigenvalues
        .iter()
        .map(|&lambda| {
            // negative eigenvalues are floating-point artifacts of near-PSD
            // matrices; clip before the log
            let lambda = lambda.max(0.0);
            if lambda > 0.0 {
                -lambda * lambda.ln()
            } else {
                0.0
            }
        })
        .sum();
    entropy.exp()
}
