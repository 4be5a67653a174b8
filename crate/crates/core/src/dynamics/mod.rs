//! Ensemble Kalman updates and the continuous-time flows built on them.
//!
//! Every right-hand side returns an `n x J` matrix whose column `j` is
//! `du^(j)/dt`. Shared statistics (mean, covariances, preconditioner) are
//! formed once per evaluation from the ensemble snapshot.

mod discrete;
mod flows;

pub use discrete::{eki_discrete_step, eki_discrete_step_unperturbed, projected_eki_step};
pub use flows::{
    eki_flow_rhs, esrf_flow_rhs, nonlinear_inflated_rhs, projected_flow_rhs, smoothed_flow_rhs,
    transformed_flow_rhs, Flow,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::ConstraintError;
use crate::ensemble::LinalgError;
use crate::forward::ForwardError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("barrier domain violated: {0}")]
    Domain(#[from] ConstraintError),
    #[error("particle {particle} is infeasible in component {component} (value {value})")]
    Infeasible {
        particle: usize,
        component: usize,
        value: f64,
    },
    #[error("singular innovation covariance")]
    SingularSystem,
    #[error("invalid flow parameters: {0}")]
    InvalidSpec(String),
}

impl FlowError {
    /// Errors that mean "the state left the flow's domain" rather than a
    /// genuine failure; the integrator may retry with a smaller step.
    pub fn is_domain_exit(&self) -> bool {
        matches!(
            self,
            FlowError::Domain(ConstraintError::NotInterior { .. }) | FlowError::Infeasible { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Perturbed-observation ensemble Kalman inversion.
    Eki,
    /// Ensemble square-root filter, innovation `y - ½G(u^(j)) - ½Ḡ`.
    Esrf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    /// Gated at the faces, no inflation.
    Projected,
    /// `ι v + Σ (1/h_i) ∇h_i` with the plain covariance preconditioner.
    BarrierSmoothed,
    /// Gated at the faces with the transformed preconditioner.
    Transformed,
    /// `-ι D(u) ∇Φ + Σ (1/h_i) ∇h_i`.
    TransformedSmoothed,
}

impl ConstraintMode {
    pub fn uses_barrier(self) -> bool {
        matches!(self, Self::BarrierSmoothed | Self::TransformedSmoothed)
    }

    pub fn uses_gating(self) -> bool {
        matches!(self, Self::Projected | Self::Transformed)
    }

    pub fn needs_box(self) -> bool {
        !matches!(self, Self::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// `ε(t) = ε`.
    Constant,
    /// `ε(t) = 1 / (t^α + R)`.
    Decaying { alpha: f64, r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NonlinearInflation {
    Off,
    /// Inflate the cross covariance by `θ ε(t) C₀ DG(ū)ᵀ`.
    Jacobian { theta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveSetRule {
    /// Faces touched by the ensemble mean.
    Mean,
    /// Union of the faces touched by individual particles.
    Union,
}

/// One right-hand-side family and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub family: Family,
    pub constraint_mode: ConstraintMode,
    /// Barrier weight `ι`.
    pub iota: f64,
    /// Inflation `ε` for the constant schedule.
    pub eps: f64,
    pub schedule: Schedule,
    /// Width of the linear ramp that gates motion at the faces.
    pub ramp_width: f64,
    pub nonlinear_inflation: NonlinearInflation,
    pub active_set: ActiveSetRule,
}

impl Default for FlowSpec {
    fn default() -> Self {
        Self {
            family: Family::Eki,
            constraint_mode: ConstraintMode::None,
            iota: 1e3,
            eps: 0.0,
            schedule: Schedule::Constant,
            ramp_width: 1e-3,
            nonlinear_inflation: NonlinearInflation::Off,
            active_set: ActiveSetRule::Mean,
        }
    }
}

impl FlowSpec {
    pub fn plain(family: Family) -> Self {
        Self {
            family,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: ConstraintMode) -> Self {
        self.constraint_mode = mode;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self.schedule = Schedule::Constant;
        self
    }

    pub fn with_decaying(mut self, alpha: f64, r: f64) -> Self {
        self.schedule = Schedule::Decaying { alpha, r };
        self
    }

    pub fn with_iota(mut self, iota: f64) -> Self {
        self.iota = iota;
        self
    }

    pub fn with_ramp(mut self, ramp: f64) -> Self {
        self.ramp_width = ramp;
        self
    }

    pub fn with_nonlinear_inflation(mut self, theta: f64) -> Self {
        self.nonlinear_inflation = NonlinearInflation::Jacobian { theta };
        self
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |msg: String| Err(FlowError::InvalidSpec(msg));
        if self.constraint_mode.uses_barrier() && !(self.iota > 0.0) {
            return bad(format!("barrier weight ι = {} must be positive", self.iota));
        }
        if self.constraint_mode.uses_gating() && !(self.ramp_width > 0.0) {
            return bad(format!("ramp width {} must be positive", self.ramp_width));
        }
        if !(self.eps >= 0.0) {
            return bad(format!("inflation ε = {} must be nonnegative", self.eps));
        }
        if let Schedule::Decaying { alpha, r } = self.schedule {
            if !(alpha > 0.0 && alpha < 1.0) {
                return bad(format!("decay exponent α = {alpha} must lie in (0, 1)"));
            }
            if !(r > 0.0) {
                return bad(format!("decay offset R = {r} must be positive"));
            }
        }
        if let NonlinearInflation::Jacobian { theta } = self.nonlinear_inflation {
            if !(theta >= 0.0) {
                return bad(format!("prior inflation θ = {theta} must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// `ε(t)`: the constant `ε`, or `1 / (t^α + R)`.
pub fn inflation_schedule(t: f64, spec: &FlowSpec) -> f64 {
    match spec.schedule {
        Schedule::Constant => spec.eps,
        Schedule::Decaying { alpha, r } => 1.0 / (t.max(0.0).powf(alpha) + r),
    }
}
