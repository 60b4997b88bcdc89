//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Forward or backward state left the finite range during simulation.
    #[error("non-finite state at path {path}, step {step}")]
    NonFiniteState { path: usize, step: usize },

    /// A user-supplied coefficient returned NaN or infinity at a probe point.
    #[error("coefficient {name} non-finite at probe point")]
    NonFiniteCoefficient { name: String },

    /// The regression normal equations could not be solved even with ridge.
    #[error("singular regression at step {step}")]
    SingularRegression { step: usize },

    /// Picard iteration for a coupled system failed to reach tolerance.
    /// Carries the full residual history so callers can report it.
    #[error("Picard iteration did not converge after {} sweeps (last residual {:.3e})",
            residuals.len(), residuals.last().copied().unwrap_or(f64::NAN))]
    PicardDiverged { residuals: Vec<f64> },

    /// A scenario batch or solver buffer would exceed the memory budget.
    #[error("allocation of {required} bytes exceeds budget of {budget} bytes")]
    ResourceLimit { required: u64, budget: u64 },

    /// Array or matrix dimensions do not match the problem specification.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The problem specification itself is unusable.
    #[error("invalid specification: {0}")]
    Invalid(String),

    /// A finite-difference perturbation left the admissible control set.
    #[error("perturbed control leaves the admissible set (admissible radius {radius:.3e})")]
    InadmissibleDirection { radius: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk artifact (scenario dump, control table, ...).
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
