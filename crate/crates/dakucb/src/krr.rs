//! Incremental kernel ridge regression with posterior mean/deviation,
//! information gain, and UCB confidence radii.
//!
//! A state holds the observed prompts, their labels, the ridge, and a packed
//! lower-triangular Cholesky factor of `K + alpha I` that grows by one row
//! per observation in O(n^2). Predictions solve against the factor; a full
//! refactorization replaces it on a configurable schedule.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::kernels::{check_finite, dot, KernelSpec};
use crate::{Error, Result};

const DEFAULT_REFACTOR_INTERVAL: usize = 512;
const CHECKPOINT_MAGIC: &[u8; 8] = b"DAKKRR01";

/// Incremental KRR state over prompt vectors.
///
/// Invariants: `factor * factor^T = K + alpha I` (up to refactorization
/// drift), and the predicted deviation at any query is strictly positive and
/// at most `1/sqrt(alpha)` for normalized kernels.
#[derive(Debug, Clone)]
pub struct KrrState {
    spec: KernelSpec,
    ridge: f64,
    prompts: Vec<Vec<f64>>,
    labels: Vec<f64>,
    /// Packed rows of the lower-triangular factor: row i holds i+1 entries.
    factor: Vec<f64>,
    /// `factor^{-1} * labels`, maintained alongside the factor.
    solved: Vec<f64>,
    refactor_interval: usize,
    since_refactor: usize,
}

impl KrrState {
    pub fn new(spec: KernelSpec, ridge: f64) -> Result<Self> {
        Self::with_refactor_interval(spec, ridge, DEFAULT_REFACTOR_INTERVAL)
    }

    pub fn with_refactor_interval(
        spec: KernelSpec,
        ridge: f64,
        refactor_interval: usize,
    ) -> Result<Self> {
        spec.validate()?;
        if !(ridge.is_finite() && ridge > 0.0) {
            return Err(Error::invalid(format!(
                "ridge must be a positive real, got {ridge}"
            )));
        }
        if refactor_interval == 0 {
            return Err(Error::invalid("refactor interval must be >= 1"));
        }
        Ok(KrrState {
            spec,
            ridge,
            prompts: Vec::new(),
            labels: Vec::new(),
            factor: Vec::new(),
            solved: Vec::new(),
            refactor_interval,
            since_refactor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn prompts(&self) -> &[Vec<f64>] {
        &self.prompts
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Appends one observation, extending the Cholesky factor by a row.
    pub fn update(&mut self, prompt: &[f64], label: f64) -> Result<()> {
        if !label.is_finite() {
            return Err(Error::invalid(format!("non-finite label {label}")));
        }
        check_finite(prompt)?;
        if let Some(first) = self.prompts.first() {
            if first.len() != prompt.len() {
                return Err(Error::invalid(format!(
                    "prompt dimension {} does not match state dimension {}",
                    prompt.len(),
                    first.len()
                )));
            }
        }
        self.append_row(prompt, label)?;
        self.prompts.push(prompt.to_vec());
        self.labels.push(label);
        self.since_refactor += 1;
        if self.since_refactor >= self.refactor_interval {
            self.refactor()?;
        }
        Ok(())
    }

    /// Posterior mean and deviation at a query prompt.
    ///
    /// `mean = k(t)^T (K + alpha I)^{-1} y` and
    /// `dev^2 = (k(t,t) - k(t)^T (K + alpha I)^{-1} k(t)) / alpha`.
    /// An empty state yields `(0, sqrt(k(t,t)/alpha))`.
    pub fn predict(&self, prompt: &[f64]) -> Result<(f64, f64)> {
        check_finite(prompt)?;
        let k_self = self.spec.eval_unchecked(prompt, prompt)?;
        if self.prompts.is_empty() {
            return Ok((0.0, (k_self / self.ridge).sqrt()));
        }
        if prompt.len() != self.prompts[0].len() {
            return Err(Error::invalid(format!(
                "query dimension {} does not match state dimension {}",
                prompt.len(),
                self.prompts[0].len()
            )));
        }
        let mut k_vec = Vec::with_capacity(self.len());
        for p in &self.prompts {
            k_vec.push(self.spec.eval_unchecked(p, prompt)?);
        }
        let z = self.forward_substitute(&k_vec);
        let mean = dot(&z, &self.solved);
        let explained: f64 = z.iter().map(|v| v * v).sum();
        let variance = ((k_self - explained) / self.ridge).max(0.0);
        Ok((mean, variance.sqrt()))
    }

    /// Information gain of the observed set:
    /// `gamma = 1/2 log det(I + K/alpha)`, read off the stored factor.
    pub fn info_gain(&self) -> f64 {
        let n = self.len();
        let mut log_det = 0.0; // log det(K + alpha I) / 2
        for i in 0..n {
            log_det += self.diag(i).ln();
        }
        log_det - 0.5 * n as f64 * self.ridge.ln()
    }

    /// Rebuilds the factor from the stored observations.
    pub fn refactor(&mut self) -> Result<()> {
        let mut rebuilt = KrrState::with_refactor_interval(
            self.spec.clone(),
            self.ridge,
            self.refactor_interval,
        )?;
        for (p, &y) in self.prompts.iter().zip(&self.labels) {
            rebuilt.append_row(p, y)?;
            rebuilt.prompts.push(p.clone());
        }
        self.factor = rebuilt.factor;
        self.solved = rebuilt.solved;
        self.since_refactor = 0;
        Ok(())
    }

    fn append_row(&mut self, prompt: &[f64], label: f64) -> Result<()> {
        let mut k_vec = Vec::with_capacity(self.len());
        for p in &self.prompts {
            k_vec.push(self.spec.eval_unchecked(p, prompt)?);
        }
        let diag = self.spec.eval_unchecked(prompt, prompt)? + self.ridge;
        self.push_factor_row(&k_vec, diag, label)
    }

    fn push_factor_row(&mut self, k_vec: &[f64], diag: f64, label: f64) -> Result<()> {
        let w = self.forward_substitute(k_vec);
        let explained: f64 = w.iter().map(|v| v * v).sum();
        // the Schur complement is at least the ridge in exact arithmetic
        let pivot = diag - explained;
        if pivot.is_nan() || pivot <= 0.0 {
            return Err(Error::invalid(format!(
                "Cholesky pivot collapsed ({pivot}); kernel matrix numerically indefinite"
            )));
        }
        let pivot = pivot.sqrt();
        let c_new = (label - dot(&w, &self.solved)) / pivot;
        self.factor.extend_from_slice(&w);
        self.factor.push(pivot);
        self.solved.push(c_new);
        Ok(())
    }

    /// Solves `L z = rhs` for the packed lower-triangular factor.
    fn forward_substitute(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.row(i);
            let partial = dot(&row[..i], &z);
            z.push((rhs[i] - partial) / row[i]);
        }
        z
    }

    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.factor[start..start + i + 1]
    }

    fn diag(&self, i: usize) -> f64 {
        self.factor[i * (i + 1) / 2 + i]
    }

    /// Serializes prompts, labels, ridge and kernel spec to a binary
    /// checkpoint; the factor is rebuilt on load.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        let spec_json = serde_json::to_vec(&self.spec).map_err(|e| Error::Schema(e.to_string()))?;
        let dim = self.prompts.first().map_or(0, |p| p.len());
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&spec_json);
        buf.extend_from_slice(&self.ridge.to_le_bytes());
        buf.extend_from_slice(&(self.refactor_interval as u64).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
        for p in &self.prompts {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for y in &self.labels {
            buf.extend_from_slice(&y.to_le_bytes());
        }
        file.write_all(&buf)
            .map_err(|e| Error::io(path.to_path_buf(), e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.to_path_buf(), e))?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > bytes.len() {
                return Err(Error::Schema("truncated checkpoint".into()));
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };
        let read_u64 = |cursor: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        let read_f64 = |cursor: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        if take(&mut cursor, 8)? != CHECKPOINT_MAGIC {
            return Err(Error::Schema("not a KRR checkpoint".into()));
        }
        let spec_len = read_u64(&mut cursor)? as usize;
        let spec: KernelSpec = serde_json::from_slice(take(&mut cursor, spec_len)?)
            .map_err(|e| Error::Schema(format!("bad kernel spec in checkpoint: {e}")))?;
        let ridge = read_f64(&mut cursor)?;
        let refactor_interval = read_u64(&mut cursor)? as usize;
        let n = read_u64(&mut cursor)? as usize;
        let dim = read_u64(&mut cursor)? as usize;
        let mut state = KrrState::with_refactor_interval(spec, ridge, refactor_interval)?;
        let mut prompts = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = Vec::with_capacity(dim);
            for _ in 0..dim {
                p.push(read_f64(&mut cursor)?);
            }
            prompts.push(p);
        }
        for prompt in prompts {
            let y = read_f64(&mut cursor)?;
            state.update(&prompt, y)?;
        }
        Ok(state)
    }
}

/// Parameters of the theory-driven UCB confidence radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    /// Bound on the RKHS norm of the target function.
    pub rkhs_bound: f64,
    /// Sub-Gaussian scale of the observation noise.
    pub noise_scale: f64,
    /// Failure probability, in (0, 1).
    pub failure_prob: f64,
    /// Number of arms.
    pub arms: usize,
    /// Number of stages.
    pub stages: usize,
    /// Horizon.
    pub horizon: usize,
}

/// `beta = B sqrt(alpha) + sigma_n sqrt(2 ln(2 G M T / delta))`.
pub fn confidence_radius(params: &ConfidenceParams, ridge: f64) -> Result<f64> {
    if !(params.failure_prob > 0.0 && params.failure_prob < 1.0) {
        return Err(Error::invalid(format!(
            "failure probability must lie in (0,1), got {}",
            params.failure_prob
        )));
    }
    if !(params.rkhs_bound >= 0.0 && params.noise_scale >= 0.0 && ridge >= 0.0) {
        return Err(Error::invalid(
            "confidence radius parameters must be nonnegative",
        ));
    }
    if params.arms == 0 || params.stages == 0 || params.horizon == 0 {
        return Err(Error::invalid("arms, stages and horizon must be positive"));
    }
    let union = 2.0 * (params.arms * params.stages * params.horizon) as f64 / params.failure_prob;
    let radius = params.rkhs_bound * ridge.sqrt() + params.noise_scale * (2.0 * union.ln()).sqrt();
    if !radius.is_finite() {
        return Err(Error::invalid("confidence radius is not finite"));
    }
    Ok(radius)
}
