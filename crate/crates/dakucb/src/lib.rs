//! Diversity-aware kernelized contextual bandits for online selection among
//! prompt-conditioned generators.
//!
//! The crate is organized around the pieces of the selection problem:
//!
//! - [`kernels`] — kernel evaluation, Gram matrices, product (joint) kernels
//!   over (prompt, output) pairs, and random Fourier feature approximation.
//! - [`scores`] — kernel distance (squared MMD), Rényi kernel entropy, their
//!   joint prompt-aware variants (JKD, JRKE, I-JRKE), a Vendi-style entropy
//!   score, and the per-sample labels that feed the bandit.
//! - [`krr`] — incremental kernel ridge regression with posterior mean and
//!   deviation, information gain, and UCB confidence radii.
//! - [`policies`] — DAK-UCB, Mixture-DAK-UCB (simplex QP over a PSD-projected
//!   diversity matrix), Sup-DAK-UCB (staged variant with frozen archive
//!   snapshots), plus Random, One-Arm-Oracle and PAK-UCB baselines.
//! - [`env`] — synthetic prompt-conditioned generator arms with controllable
//!   diversity collapse, a cosine fidelity scorer, and replay of precomputed
//!   embedding datasets.
//! - [`harness`] — config-driven multi-trial experiment runner and CLI with
//!   CSV/JSON emission.
//!
//! All randomness is injected through seeded [`rand_chacha::ChaCha12Rng`]
//! streams, so a run is bit-reproducible given its config and seed.

pub mod env;
pub mod harness;
pub mod kernels;
pub mod krr;
pub mod policies;
pub mod scores;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received arguments violating its preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A run configuration failed validation; the message enumerates every
    /// violated field.
    #[error("config error: {0}")]
    Config(String),

    /// A record in an input file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An input file parsed but violated the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// An IO failure, annotated with the path involved.
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
