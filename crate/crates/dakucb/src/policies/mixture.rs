//! Prompt-aware mixture selection: per-pair KRR estimates of the cross-model
//! diversity matrix, a PSD projection, and a concave quadratic program over
//! the simplex solved by projected gradient ascent.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::env::{GenerativeEnv, RoundContext};
use crate::kernels::{JointKernelSpec, KernelSpec};
use crate::krr::KrrState;
use crate::scores::{EmbeddedPair, PairedCorpus};
use crate::{Error, Result};

use super::{argmax_lowest_index, HistoryArchive, MixtureWeights, PolicyConfig, RoundRecord};

/// Nearest (Frobenius) positive semidefinite matrix: symmetrize, zero the
/// negative eigenvalues, reconstruct. Idempotent.
pub fn psd_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("psd_project expects a square matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("psd_project expects finite entries"));
    }
    let symmetric = (m + m.transpose()) * 0.5;
    let eigen = symmetric.symmetric_eigen();
    let clipped = eigen.eigenvalues.map(|l| l.max(0.0));
    let rebuilt =
        &eigen.eigenvectors * DMatrix::from_diagonal(&clipped) * eigen.eigenvectors.transpose();
    Ok((&rebuilt + rebuilt.transpose()) * 0.5)
}

/// Euclidean projection of a vector onto the probability simplex.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (j, &value) in sorted.iter().enumerate() {
        cumulative += value;
        let candidate = (cumulative - 1.0) / (j + 1) as f64;
        if value - candidate > 0.0 {
            threshold = candidate;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - threshold).max(0.0)).collect();
    // kill residual float drift so downstream simplex checks hold exactly
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        for x in &mut out {
            *x /= total;
        }
    } else {
        out.fill(1.0 / n as f64);
    }
    out
}

/// Maximizes `<alpha, s_ucb> - lambda alpha^T M alpha` over the simplex by
/// projected gradient ascent with step `1/(2 lambda ||M||_2 + 1)`, stopping
/// when the iterate moves less than `tolerance` (or after 10 000 iterations).
///
/// `lambda = 0` degenerates to the vertex at the argmax of `s_ucb` (lowest
/// index on ties).
pub fn simplex_qp(
    s_ucb: &[f64],
    m_psd: &DMatrix<f64>,
    lambda: f64,
    tolerance: f64,
) -> Result<MixtureWeights> {
    let arms = s_ucb.len();
    if arms == 0 {
        return Err(Error::invalid("simplex_qp needs at least one arm"));
    }
    if m_psd.nrows() != arms || m_psd.ncols() != arms {
        return Err(Error::invalid(format!(
            "matrix is {}x{} but there are {arms} arms",
            m_psd.nrows(),
            m_psd.ncols()
        )));
    }
    if s_ucb.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("simplex_qp scores must be finite"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    if lambda == 0.0 {
        return Ok(MixtureWeights::vertex(arms, argmax_lowest_index(s_ucb)));
    }
    let eigen = m_psd.clone().symmetric_eigen();
    let eigmin = eigen.eigenvalues.min();
    let scale = eigen.eigenvalues.amax().max(1.0);
    if eigmin < -1e-8 * scale {
        return Err(Error::invalid(format!(
            "simplex_qp expects a PSD matrix (eigmin {eigmin})"
        )));
    }
    let spectral = eigen.eigenvalues.max().max(0.0);
    let step = 1.0 / (2.0 * lambda * spectral + 1.0);

    let mut alpha = vec![1.0 / arms as f64; arms];
    for _ in 0..10_000 {
        let av = m_psd * nalgebra::DVector::from_column_slice(&alpha);
        let gradient: Vec<f64> = s_ucb
            .iter()
            .zip(av.iter())
            .map(|(s, mv)| s - 2.0 * lambda * mv)
            .collect();
        let proposal: Vec<f64> = alpha
            .iter()
            .zip(&gradient)
            .map(|(a, g)| a + step * g)
            .collect();
        let next = simplex_project(&proposal);
        let movement: f64 = next
            .iter()
            .zip(&alpha)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        alpha = next;
        if movement < tolerance {
            break;
        }
    }
    MixtureWeights::new(alpha)
}

/// Objective of the mixture QP at a point.
pub fn qp_objective(alpha: &[f64], s_ucb: &[f64], m: &DMatrix<f64>, lambda: f64) -> f64 {
    let a = nalgebra::DVector::from_column_slice(alpha);
    let linear: f64 = alpha.iter().zip(s_ucb).map(|(x, s)| x * s).sum();
    linear - lambda * (a.transpose() * m * a)[(0, 0)]
}

/// Cross-kernel panel label for a model pair: the mean over arm `g2`'s
/// archived panel entries `(t', x')` of `k_T(t,t')^2 k_X(x_g, x')^2`, where
/// `x_g` is arm `g`'s output at the current prompt; 0 on an empty archive.
///
/// The archive is whatever was frozen when the label is formed — callers
/// append the current round's outputs only afterwards.
pub fn pair_label(
    g: usize,
    g2: usize,
    prompt: &[f64],
    panel_outputs: &BTreeMap<usize, Vec<f64>>,
    panel_archive: &[PairedCorpus],
    jspec_squared: &JointKernelSpec,
) -> Result<f64> {
    if !jspec_squared.squared {
        return Err(Error::invalid("pair_label uses the squared joint kernel"));
    }
    let output = panel_outputs
        .get(&g)
        .ok_or_else(|| Error::invalid(format!("no panel output for arm {g}")))?;
    let archive = panel_archive
        .get(g2)
        .ok_or_else(|| Error::invalid(format!("no panel archive for arm {g2}")))?;
    if archive.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for entry in archive.iter() {
        total += jspec_squared.eval_text(prompt, &entry.prompt)?
            * jspec_squared.eval_data(output, &entry.output)?;
    }
    Ok(total / archive.len() as f64)
}

fn pair_index(g: usize, h: usize, arms: usize) -> usize {
    let (lo, hi) = if g <= h { (g, h) } else { (h, g) };
    lo * arms - lo * (lo + 1) / 2 + hi
}

/// Mixture-DAK-UCB: fidelity UCBs per arm, an LCB of the cross-model
/// diversity matrix projected to the PSD cone, a simplex QP for the mixture,
/// and multinomial sampling. Panel rounds (probability `panel_rate`) draw one
/// output from every arm so all matrix entries receive labels.
#[derive(Debug, Clone)]
pub struct MixturePolicy {
    config: PolicyConfig,
    jspec_squared: JointKernelSpec,
    fidelity_states: Vec<KrrState>,
    /// One state per unordered arm pair, triangular indexing.
    pair_states: Vec<KrrState>,
    panel_archive: Vec<PairedCorpus>,
    archive: HistoryArchive,
    round: usize,
}

impl MixturePolicy {
    pub fn new(
        arm_count: usize,
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
        let fidelity_states: Result<Vec<KrrState>> = (0..arm_count)
            .map(|_| KrrState::new(prompt_spec.clone(), config.ridge))
            .collect();
        let pair_states: Result<Vec<KrrState>> = (0..arm_count * (arm_count + 1) / 2)
            .map(|_| KrrState::new(prompt_spec.clone(), config.ridge))
            .collect();
        Ok(MixturePolicy {
            jspec_squared: JointKernelSpec::squared(prompt_spec, data_spec),
            fidelity_states: fidelity_states?,
            pair_states: pair_states?,
            panel_archive: vec![PairedCorpus::new(); arm_count],
            archive: HistoryArchive::new(arm_count),
            round: 0,
            config,
        })
    }

    pub fn archive(&self) -> &HistoryArchive {
        &self.archive
    }

    pub fn panel_archive(&self) -> &[PairedCorpus] {
        &self.panel_archive
    }

    /// The mixture the QP would play at a prompt right now (no state change).
    pub fn mixture_at(&self, prompt: &[f64]) -> Result<MixtureWeights> {
        let (s_ucb, m_lcb) = self.estimates(prompt)?;
        let m_psd = psd_project(&m_lcb)?;
        simplex_qp(&s_ucb, &m_psd, self.config.lambda, self.config.qp_tolerance)
    }

    fn estimates(&self, prompt: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let arms = self.fidelity_states.len();
        let mut s_ucb = Vec::with_capacity(arms);
        for state in &self.fidelity_states {
            let (mean, dev) = state.predict(prompt)?;
            s_ucb.push(mean + self.config.beta_s * dev);
        }
        let mut m_lcb = DMatrix::zeros(arms, arms);
        for g in 0..arms {
            for h in g..arms {
                let (mean, dev) = self.pair_states[pair_index(g, h, arms)].predict(prompt)?;
                let lcb = mean - self.config.beta_d * dev;
                m_lcb[(g, h)] = lcb;
                m_lcb[(h, g)] = lcb;
            }
        }
        Ok((s_ucb, m_lcb))
    }

    /// One round. Random stream order: multinomial draw, chosen-arm
    /// generation, panel coin, then panel generations in ascending arm order.
    pub fn round(
        &mut self,
        env: &mut dyn GenerativeEnv,
        ctx: &RoundContext,
        rng: &mut ChaCha12Rng,
    ) -> Result<RoundRecord> {
        let arms = self.fidelity_states.len();
        let (s_ucb, m_lcb) = self.estimates(&ctx.prompt)?;
        let m_psd = psd_project(&m_lcb)?;
        let alpha = simplex_qp(&s_ucb, &m_psd, self.config.lambda, self.config.qp_tolerance)?;

        let arm = alpha.sample(rng);
        let output = env.generate(arm, ctx, rng)?;
        let fidelity_label = env.fidelity(arm, ctx, &output)?;
        self.fidelity_states[arm].update(&ctx.prompt, fidelity_label)?;

        let panel = rng.random::<f64>() < self.config.panel_rate;
        let mut panel_outputs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        panel_outputs.insert(arm, output.clone());
        if panel {
            for g in 0..arms {
                if g != arm {
                    panel_outputs.insert(g, env.generate(g, ctx, rng)?);
                }
            }
        }

        // labels are formed against the frozen archive before any appends
        let diversity_label = pair_label(
            arm,
            arm,
            &ctx.prompt,
            &panel_outputs,
            &self.panel_archive,
            &self.jspec_squared,
        )?;
        if panel {
            for g in 0..arms {
                for h in g..arms {
                    let label = if g == h {
                        pair_label(
                            g,
                            g,
                            &ctx.prompt,
                            &panel_outputs,
                            &self.panel_archive,
                            &self.jspec_squared,
                        )?
                    } else {
                        // both directions are observable on a panel round;
                        // their mean estimates the symmetrized entry
                        0.5 * (pair_label(
                            g,
                            h,
                            &ctx.prompt,
                            &panel_outputs,
                            &self.panel_archive,
                            &self.jspec_squared,
                        )? + pair_label(
                            h,
                            g,
                            &ctx.prompt,
                            &panel_outputs,
                            &self.panel_archive,
                            &self.jspec_squared,
                        )?)
                    };
                    self.pair_states[pair_index(g, h, arms)].update(&ctx.prompt, label)?;
                }
            }
            for (g, out) in &panel_outputs {
                self.panel_archive[*g].push(EmbeddedPair::tagged(
                    ctx.prompt.clone(),
                    out.clone(),
                    *g,
                    self.round,
                ))?;
            }
        } else {
            // only pairs involving the sampled arm have an observable side
            for h in 0..arms {
                let label = pair_label(
                    arm,
                    h,
                    &ctx.prompt,
                    &panel_outputs,
                    &self.panel_archive,
                    &self.jspec_squared,
                )?;
                self.pair_states[pair_index(arm, h, arms)].update(&ctx.prompt, label)?;
            }
        }

        self.archive.push(
            arm,
            EmbeddedPair::tagged(ctx.prompt.clone(), output.clone(), arm, self.round),
        );
        let record = RoundRecord {
            round: self.round,
            cluster: ctx.cluster,
            arm,
            weights: alpha.into_vec(),
            fidelity_label,
            diversity_label,
            scores: s_ucb,
            output,
        };
        self.round += 1;
        Ok(record)
    }
}
