use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use super::{
    inflation_schedule, ActiveSetRule, ConstraintMode, Family, FlowError, FlowSpec,
    NonlinearInflation,
};
use crate::constraints::{
    active_index_set_union, transform_preconditioner_unchecked, BoxConstraint, FACE_TOLERANCE,
};
use crate::ensemble::{cross_cov, Ensemble};
use crate::forward::{InverseProblem, LinearProblem};

/// Whitened innovations `Γ^{-1}(y - G(u^(j)))` (EKI) or
/// `Γ^{-1}(y - ½G(u^(j)) - ½Ḡ)` (ESRF), one per column.
fn whitened_innovations(problem: &InverseProblem, images: &DMatrix<f64>, family: Family) -> DMatrix<f64> {
    let mut innov = -images.clone();
    if family == Family::Esrf {
        innov *= 0.5;
        let half_mean = images.column_mean() * 0.5;
        for mut col in innov.column_iter_mut() {
            col -= &half_mean;
        }
    }
    for mut col in innov.column_iter_mut() {
        col += &problem.data;
    }
    problem.noise.whiten_matrix(&innov)
}

fn kalman_rhs(e: &Ensemble, problem: &InverseProblem, family: Family) -> Result<DMatrix<f64>, FlowError> {
    let images = problem.forward.apply_ensemble(e)?;
    let cup = cross_cov(e, &images)?;
    Ok(cup * whitened_innovations(problem, &images, family))
}

/// `du^(j)/dt = C^{up} Γ^{-1} (y - G(u^(j)))`.
pub fn eki_flow_rhs(e: &Ensemble, problem: &InverseProblem) -> Result<DMatrix<f64>, FlowError> {
    kalman_rhs(e, problem, Family::Eki)
}

/// `du^(j)/dt = C^{up} Γ^{-1} (y - ½G(u^(j)) - ½Ḡ)`.
pub fn esrf_flow_rhs(e: &Ensemble, problem: &InverseProblem) -> Result<DMatrix<f64>, FlowError> {
    kalman_rhs(e, problem, Family::Esrf)
}

/// `(C^{up} + θ_t C₀ DG(ū)ᵀ) Γ^{-1} (innovation)` where `θ_t` is the
/// already scheduled inflation weight.
pub fn nonlinear_inflated_rhs(
    e: &Ensemble,
    problem: &InverseProblem,
    family: Family,
    weight: f64,
    prior_cov: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FlowError> {
    let images = problem.forward.apply_ensemble(e)?;
    let mut gain = cross_cov(e, &images)?;
    if weight != 0.0 {
        let jac = problem.forward.jacobian(&e.mean())?;
        gain += prior_cov * jac.transpose() * weight;
    }
    Ok(gain * whitened_innovations(problem, &images, family))
}

fn check_feasible(e: &Ensemble, b: &BoxConstraint) -> Result<(), FlowError> {
    let m = e.as_matrix();
    for j in 0..e.size() {
        for i in 0..b.constrained() {
            let v = m[(i, j)];
            if v < b.lower()[i] - FACE_TOLERANCE || v > b.upper()[i] + FACE_TOLERANCE || !v.is_finite() {
                return Err(FlowError::Infeasible {
                    particle: j,
                    component: i,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

fn gate_all(e: &Ensemble, mut v: DMatrix<f64>, b: &BoxConstraint, ramp: f64) -> DMatrix<f64> {
    let u = e.as_matrix();
    for j in 0..v.ncols() {
        for i in 0..b.constrained() {
            v[(i, j)] = b.gate(i, u[(i, j)], v[(i, j)], ramp);
        }
    }
    v
}

/// The Kalman velocity, gated at the faces.
pub fn projected_flow_rhs(
    e: &Ensemble,
    problem: &InverseProblem,
    b: &BoxConstraint,
    spec: &FlowSpec,
) -> Result<DMatrix<f64>, FlowError> {
    check_feasible(e, b)?;
    let v = kalman_rhs(e, problem, spec.family)?;
    Ok(gate_all(e, v, b, spec.ramp_width))
}

fn mean_active_set(mean: &DVector<f64>, grad: &DVector<f64>, b: &BoxConstraint) -> BTreeSet<usize> {
    (0..b.constrained())
        .filter(|&i| {
            ((mean[i] - b.lower()[i]).abs() <= FACE_TOLERANCE && grad[i] > 0.0)
                || ((mean[i] - b.upper()[i]).abs() <= FACE_TOLERANCE && grad[i] < 0.0)
        })
        .collect()
}

/// Ungated transformed direction, one particle per column.
fn transformed_direction(
    e: &Ensemble,
    problem: &InverseProblem,
    b: &BoxConstraint,
    spec: &FlowSpec,
    t: f64,
    prior_cov: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, FlowError> {
    let eps = inflation_schedule(t, spec);
    match (problem.as_linear(), spec.nonlinear_inflation) {
        (Some(linear), NonlinearInflation::Off) => Ok(linear_transformed_direction(e, &linear, b, spec, eps)),
        (_, inflation) => {
            let theta = match inflation {
                NonlinearInflation::Jacobian { theta } => theta,
                NonlinearInflation::Off => 0.0,
            };
            sampled_transformed_direction(e, problem, b, spec, theta * eps, prior_cov)
        }
    }
}

/// `-D(u) ∇Φ(u^(j))` (EKI) or `-D(u)(½∇Φ(u^(j)) + ½∇Φ(ū))` (ESRF).
fn linear_transformed_direction(
    e: &Ensemble,
    problem: &LinearProblem,
    b: &BoxConstraint,
    spec: &FlowSpec,
    eps: f64,
) -> DMatrix<f64> {
    let grads = problem.ensemble_gradients(e.as_matrix());
    let grad_mean = grads.column_mean();
    let active = match spec.active_set {
        ActiveSetRule::Mean => mean_active_set(&e.mean(), &grad_mean, b),
        ActiveSetRule::Union => active_index_set_union(e, &grads, b, FACE_TOLERANCE),
    };
    let d = transform_preconditioner_unchecked(&e.covariance(), &active, eps);
    let mut g = grads;
    if spec.family == Family::Esrf {
        g *= 0.5;
        let half = grad_mean * 0.5;
        for mut col in g.column_iter_mut() {
            col += &half;
        }
    }
    -(d * g)
}

/// Derivative-free form: `C^{up}` with the active rows removed, plus
/// `weight · C₀ DG(ū)ᵀ`, applied to the whitened innovations.
fn sampled_transformed_direction(
    e: &Ensemble,
    problem: &InverseProblem,
    b: &BoxConstraint,
    spec: &FlowSpec,
    weight: f64,
    prior_cov: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, FlowError> {
    let images = problem.forward.apply_ensemble(e)?;
    let w = whitened_innovations(problem, &images, spec.family);
    let mean = e.mean();
    let jac = problem.forward.jacobian(&mean)?;
    let residual_mean = problem.forward.apply(&mean)? - &problem.data;
    let active = match spec.active_set {
        ActiveSetRule::Mean => {
            let grad_mean = jac.transpose() * problem.noise.whiten(&residual_mean);
            mean_active_set(&mean, &grad_mean, b)
        }
        ActiveSetRule::Union => {
            // gradients linearized at the mean
            let mut r = images.clone();
            for mut col in r.column_iter_mut() {
                col -= &problem.data;
            }
            let grads = jac.transpose() * problem.noise.whiten_matrix(&r);
            active_index_set_union(e, &grads, b, FACE_TOLERANCE)
        }
    };
    let mut gain = cross_cov(e, &images)?;
    for &i in &active {
        gain.row_mut(i).fill(0.0);
    }
    if weight != 0.0 {
        let n = e.dim();
        let inflation = match prior_cov {
            Some(c0) => c0 * jac.transpose(),
            None => DMatrix::<f64>::identity(n, n) * jac.transpose(),
        };
        gain += inflation * weight;
    }
    Ok(gain * w)
}

/// The transformed flow: `-D(u)∇Φ` (or its ESRF form), gated at the faces.
pub fn transformed_flow_rhs(
    e: &Ensemble,
    problem: &InverseProblem,
    b: &BoxConstraint,
    spec: &FlowSpec,
    t: f64,
    prior_cov: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, FlowError> {
    check_feasible(e, b)?;
    let p = transformed_direction(e, problem, b, spec, t, prior_cov)?;
    Ok(gate_all(e, p, b, spec.ramp_width))
}

/// `ι · (preconditioned descent direction) + Σ (1/h_i) ∇h_i`, per particle.
pub fn smoothed_flow_rhs(
    e: &Ensemble,
    problem: &InverseProblem,
    b: &BoxConstraint,
    spec: &FlowSpec,
    t: f64,
    prior_cov: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>, FlowError> {
    let barrier = e
        .particles()
        .iter()
        .map(|u| b.barrier_gradient(u))
        .collect::<Result<Vec<_>, _>>()?;
    let direction = match spec.constraint_mode {
        ConstraintMode::TransformedSmoothed => transformed_direction(e, problem, b, spec, t, prior_cov)?,
        _ => kalman_rhs(e, problem, spec.family)?,
    };
    let mut out = direction * spec.iota;
    for (j, g) in barrier.iter().enumerate() {
        let mut col = out.column_mut(j);
        col += g;
    }
    Ok(out)
}

/// An inverse problem, an optional box and a [`FlowSpec`], packaged as an
/// autonomous-in-form right-hand side `(t, ensemble) ↦ velocities`.
#[derive(Debug, Clone)]
pub struct Flow {
    problem: InverseProblem,
    bounds: Option<BoxConstraint>,
    spec: FlowSpec,
    prior_cov: Option<DMatrix<f64>>,
}

impl Flow {
    pub fn new(problem: InverseProblem, bounds: Option<BoxConstraint>, spec: FlowSpec) -> Result<Self, FlowError> {
        spec.validate()?;
        if spec.constraint_mode.needs_box() && bounds.is_none() {
            return Err(FlowError::InvalidSpec(format!(
                "constraint mode {:?} needs a box",
                spec.constraint_mode
            )));
        }
        if let Some(b) = &bounds {
            if b.dim() != problem.param_dim() {
                return Err(FlowError::InvalidSpec(format!(
                    "box dimension {} does not match parameter dimension {}",
                    b.dim(),
                    problem.param_dim()
                )));
            }
        }
        Ok(Self {
            problem,
            bounds,
            spec,
            prior_cov: None,
        })
    }

    /// Prior covariance `C₀` used by the Jacobian inflation; identity if unset.
    pub fn with_prior_covariance(mut self, c0: DMatrix<f64>) -> Self {
        self.prior_cov = Some(c0);
        self
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn problem(&self) -> &InverseProblem {
        &self.problem
    }

    pub fn bounds(&self) -> Option<&BoxConstraint> {
        self.bounds.as_ref()
    }

    pub fn rhs(&self, t: f64, e: &Ensemble) -> Result<DMatrix<f64>, FlowError> {
        let spec = &self.spec;
        let c0 = self.prior_cov.as_ref();
        match (spec.constraint_mode, self.bounds.as_ref()) {
            (ConstraintMode::None, _) => match spec.nonlinear_inflation {
                NonlinearInflation::Jacobian { theta } => {
                    let identity;
                    let c0 = match c0 {
                        Some(c) => c,
                        None => {
                            identity = DMatrix::identity(e.dim(), e.dim());
                            &identity
                        }
                    };
                    let weight = theta * inflation_schedule(t, spec);
                    nonlinear_inflated_rhs(e, &self.problem, spec.family, weight, c0)
                }
                NonlinearInflation::Off => kalman_rhs(e, &self.problem, spec.family),
            },
            (ConstraintMode::Projected, Some(b)) => projected_flow_rhs(e, &self.problem, b, spec),
            (ConstraintMode::Transformed, Some(b)) => transformed_flow_rhs(e, &self.problem, b, spec, t, c0),
            (ConstraintMode::BarrierSmoothed | ConstraintMode::TransformedSmoothed, Some(b)) => {
                smoothed_flow_rhs(e, &self.problem, b, spec, t, c0)
            }
            (_, None) => unreachable!("checked in Flow::new"),
        }
    }

    /// Whether the ensemble lies in the domain of the flow: the open box for
    /// barrier flows, the closed box for gated flows, everything otherwise.
    pub fn in_domain(&self, e: &Ensemble) -> bool {
        match (&self.bounds, self.spec.constraint_mode) {
            (Some(b), mode) if mode.uses_barrier() => b.ensemble_strictly_interior(e),
            (Some(b), mode) if mode.uses_gating() => b.ensemble_contains(e, 0.0),
            _ => e.as_matrix().iter().all(|v| v.is_finite()),
        }
    }
}
