//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by the numerical and learning layers.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A caller broke an operation contract (shape mismatch, bad argument).
    Contract(String),
    /// A tensor was created with non-finite values in checked mode.
    NonFinite(String),
    /// A linear system was singular or too ill-conditioned to solve.
    Singular {
        /// Diagonal-ratio estimate of the condition number at failure.
        cond_estimate: f64,
    },
    /// Training loss became non-finite.
    Divergence {
        /// Optimizer step at which the loss left the finite range.
        step: usize,
    },
    /// The alternating-minimization state became non-finite.
    NonFiniteState {
        /// Solver iteration at which the state was rejected.
        iteration: usize,
    },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            CoreError::Singular { cond_estimate } => {
                write!(f, "singular or ill-conditioned matrix (cond estimate {cond_estimate:.3e})")
            }
            CoreError::Divergence { step } => write!(f, "training diverged at step {step}"),
            CoreError::NonFiniteState { iteration } => {
                write!(f, "solver state became non-finite at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for CoreError {}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;
