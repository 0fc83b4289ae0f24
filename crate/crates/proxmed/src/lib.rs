//! Estimation of controlled direct effects when the mediating variable is
//! hidden and only proxy measurements of it are observed.
//!
//! The library implements a partially linear proximal estimator: confounders
//! are residualized out of every working variable, nuisance parameters for the
//! primal and dual moment equations are fit with an l2-regularized adversarial
//! IV solver, and the final effect is read off a Neyman-orthogonal moment with
//! a plug-in standard error. Around that core sit the validity diagnostics
//! (primal/dual chi-square tests, weak-instrument F/z tests, proxy covariance
//! rank test), greedy proxy-subset selection, robustness tooling (weak-IV
//! confidence regions, influence scores, bootstrap stages, stratification) and
//! a semi-synthetic generator used for calibration.
//!
//! Typical entry points are [`dataset::load_csv`] + [`dataset::encode`] to get
//! a [`dataset::DesignMatrices`], then [`estimator::estimate_pipeline`].

pub mod adviv;
pub mod dataset;
pub mod diagnostics;
pub mod estimator;
pub mod numerics;
pub mod proxy_select;
pub mod regress;
pub mod robust;
pub mod semisynth;

#[cfg(test)]
pub(crate) mod testutil;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input files or unparseable cells.
    #[error("parse error: {0}")]
    Parse(String),
    /// A precondition on the inputs was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A numerical routine failed (non-convergence, singularity, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An error raised by a named stage of a multi-stage computation.
    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derives a per-stream seed from a master seed.
///
/// All randomness in the library flows from a single master seed; independent
/// units of work (bootstrap replicates, simulation repetitions, Monte Carlo
/// draws) receive seeds derived through this splittable counter so that
/// parallel execution never shares generator state.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_add(0x517C_C1B7_2722_0A95)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
