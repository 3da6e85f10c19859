//! Explicit constants of the mixing, Lipschitz and moment assumptions, with
//! numerical falsification suites for each bound.

mod certificate;
mod constants;
mod doeblin;
mod envelopes;
mod gaussian;
mod orlicz;
pub mod suites;

pub use certificate::{
    certify_mixing, certify_variational, KernelBounds, MixingCertificate, ModelBounds,
    PositivityViolation, VariationalCertificate,
};
pub use constants::{
    backward_bounds, compute_integral_constants, compute_h_functions, compute_kappas, filter_bounds,
    filter_lipschitz_all, filter_lipschitz_l, moment_constants, upsilon_explicit, BackwardBounds,
    BoundConstants, IntegralConstants, HTable, Kappas, MomentReport,
};
pub use doeblin::{doeblin_contraction_check, DoeblinReport};
pub use envelopes::{
    kernel_envelopes, model_envelopes, row_envelope, KernelEnvelopes, ModelEnvelopes, GRID_POINTS,
};
pub use gaussian::{gaussian_alpha, gaussian_envelope};
pub use orlicz::orlicz_norm_estimate;

use alloc::string::String;
use serde::{Deserialize, Serialize};

/// Outcome of a bound check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// `worst_ratio` is the largest observed `lhs / rhs`.
    Holds {
        worst_ratio: f64,
    },
    Violated {
        witness: String,
    },
    Inapplicable {
        reason: String,
    },
}

impl Verdict {
    pub fn is_violated(&self) -> bool {
        matches!(self, Verdict::Violated { .. })
    }

    pub fn worst_ratio(&self) -> Option<f64> {
        match self {
            Verdict::Holds { worst_ratio } => Some(*worst_ratio),
            _ => None,
        }
    }
}
