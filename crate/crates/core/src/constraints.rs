//! Box feasible sets `a_i ≤ u_i ≤ b_i` on the first `m` of `n` components.
//!
//! The box is also read as `2m` linear inequalities `h_j(u) ≤ 0` with
//! `h_i(u) = a_i - u_i` and `h_{i+m}(u) = u_i - b_i`; multiplier vectors
//! follow the same ordering (lower faces first).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ensemble::Ensemble;
use crate::forward::LinearProblem;

/// Absolute tolerance for deciding that a mean component sits on a face.
pub const FACE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("empty interval in component {index}: lower {lower} must be < upper {upper}")]
    EmptyInterval { index: usize, lower: f64, upper: f64 },
    #[error("bound vectors have lengths {lower} and {upper}")]
    BoundLengthMismatch { lower: usize, upper: usize },
    #[error("{m} constrained components exceed the dimension {n}")]
    TooManyConstrained { m: usize, n: usize },
    #[error("bound {index} is not finite")]
    NonFiniteBound { index: usize },
    #[error("point is not strictly interior: h_{index}(u) = {value:e} >= 0")]
    NotInterior { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inflation must be positive, got {0}")]
    NonPositiveInflation(f64),
}

/// Which face a smoothed indicator belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Smooths `1_[0,∞)`.
    Lower,
    /// Smooths `1_(-∞,0]`.
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    lower: DVector<f64>,
    upper: DVector<f64>,
    n: usize,
}

impl BoxConstraint {
    /// Box on the first `lower.len()` components of `R^n`.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, n: usize) -> Result<Self, ConstraintError> {
        if lower.len() != upper.len() {
            return Err(ConstraintError::BoundLengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        if lower.len() > n {
            return Err(ConstraintError::TooManyConstrained { m: lower.len(), n });
        }
        for (index, (&a, &b)) in lower.iter().zip(&upper).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(ConstraintError::NonFiniteBound { index });
            }
            if a >= b {
                return Err(ConstraintError::EmptyInterval {
                    index,
                    lower: a,
                    upper: b,
                });
            }
        }
        Ok(Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
            n,
        })
    }

    /// The same interval on every one of the `n` components.
    pub fn uniform(lower: f64, upper: f64, n: usize) -> Result<Self, ConstraintError> {
        Self::new(vec![lower; n], vec![upper; n], n)
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Number of constrained components `m`.
    pub fn constrained(&self) -> usize {
        self.lower.len()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Midpoint of each interval; unconstrained components are zero.
    pub fn center(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.n);
        for i in 0..self.constrained() {
            c[i] = 0.5 * (self.lower[i] + self.upper[i]);
        }
        c
    }

    /// The `2m` values `h_j(u)`.
    pub fn constraint_values(&self, u: &DVector<f64>) -> DVector<f64> {
        let m = self.constrained();
        DVector::from_fn(2 * m, |j, _| {
            if j < m {
                self.lower[j] - u[j]
            } else {
                u[j - m] - self.upper[j - m]
            }
        })
    }

    /// Largest constraint violation `max_j max(h_j(u), 0)`.
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        self.constraint_values(u).iter().fold(0.0_f64, |acc, &h| acc.max(h))
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.violation(u) <= tol
    }

    pub fn is_strictly_interior(&self, u: &DVector<f64>) -> bool {
        self.constraint_values(u).iter().all(|&h| h < 0.0)
    }

    pub fn ensemble_contains(&self, e: &Ensemble, tol: f64) -> bool {
        (0..e.size()).all(|j| self.contains(&e.particle(j), tol))
    }

    pub fn ensemble_strictly_interior(&self, e: &Ensemble) -> bool {
        (0..e.size()).all(|j| self.is_strictly_interior(&e.particle(j)))
    }

    /// Componentwise clamp onto the box.
    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut p = u.clone();
        for i in 0..self.constrained() {
            p[i] = p[i].clamp(self.lower[i], self.upper[i]);
        }
        p
    }

    pub fn project_ensemble(&self, e: &Ensemble) -> Ensemble {
        let mut out = e.clone();
        for mut col in out.as_matrix_mut().column_iter_mut() {
            for i in 0..self.constrained() {
                col[i] = col[i].clamp(self.lower[i], self.upper[i]);
            }
        }
        out
    }

    /// Project, then move every constrained component at least `margin`
    /// (capped at a quarter of the interval width) away from both faces.
    pub fn push_interior(&self, u: &DVector<f64>, margin: f64) -> DVector<f64> {
        let mut p = self.project(u);
        for i in 0..self.constrained() {
            let d = margin.min(0.25 * (self.upper[i] - self.lower[i]));
            p[i] = p[i].clamp(self.lower[i] + d, self.upper[i] - d);
        }
        p
    }

    pub fn push_ensemble_interior(&self, e: &Ensemble, margin: f64) -> Ensemble {
        let cols: Vec<DVector<f64>> = e
            .particles()
            .iter()
            .map(|u| self.push_interior(u, margin))
            .collect();
        Ensemble::from_particles(&cols).expect("same shape as the input ensemble")
    }

    /// `-Σ log(-h_j(u))`.
    pub fn barrier_value(&self, u: &DVector<f64>) -> Result<f64, ConstraintError> {
        let h = self.interior_values(u)?;
        Ok(-h.iter().map(|&v| (-v).ln()).sum::<f64>())
    }

    /// `Σ_j (1/h_j(u)) ∇h_j(u)`, the barrier drift of the smoothed flows.
    ///
    /// It is the negative gradient of `-Σ log(-h_j)`, so it points away
    /// from nearby faces.
    pub fn barrier_gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        let h = self.interior_values(u)?;
        let m = self.constrained();
        let mut g = DVector::zeros(self.n);
        for i in 0..m {
            // ∇h_i = -e_i, ∇h_{i+m} = +e_i
            g[i] = -1.0 / h[i] + 1.0 / h[i + m];
        }
        Ok(g)
    }

    /// Diagonal of the barrier Hessian, `1/(u_i-a_i)² + 1/(b_i-u_i)²`.
    pub fn barrier_hessian_diag(&self, u: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        let h = self.interior_values(u)?;
        let m = self.constrained();
        let mut d = DVector::zeros(self.n);
        for i in 0..m {
            d[i] = 1.0 / (h[i] * h[i]) + 1.0 / (h[i + m] * h[i + m]);
        }
        Ok(d)
    }

    fn interior_values(&self, u: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
        if u.len() != self.n {
            return Err(ConstraintError::DimensionMismatch {
                expected: self.n,
                got: u.len(),
            });
        }
        let h = self.constraint_values(u);
        if let Some((index, &value)) = h.iter().enumerate().find(|(_, v)| !(**v < 0.0)) {
            return Err(ConstraintError::NotInterior { index, value });
        }
        Ok(h)
    }

    /// Gate a velocity component at the faces of the box.
    ///
    /// Inward motion passes unchanged. Outward motion is scaled by a
    /// linear ramp in the distance to the face: full speed at distance
    /// `ramp` or more, zero on the face. With `ramp → 0` this recovers the
    /// indicator cases `1_[0,∞)(v)v` at `a_i` and `1_(-∞,0](v)v` at `b_i`.
    pub fn gate(&self, i: usize, position: f64, velocity: f64, ramp: f64) -> f64 {
        if i >= self.constrained() {
            return velocity;
        }
        if velocity < 0.0 {
            let w = smoothed_indicator(position - self.lower[i] - ramp, Side::Lower, ramp);
            velocity * w
        } else if velocity > 0.0 {
            let w = smoothed_indicator(position - self.upper[i] + ramp, Side::Upper, ramp);
            velocity * w
        } else {
            0.0
        }
    }
}

/// Piecewise-linear surrogate for the face indicators.
///
/// `Lower` is 1 for `v ≥ 0`, falls linearly to 0 at `v = -iota`, and is 0
/// below. `Upper` is the mirror image: 1 for `v ≤ 0`, 0 from `v = iota`.
pub fn smoothed_indicator(v: f64, side: Side, iota: f64) -> f64 {
    debug_assert!(iota > 0.0);
    let s = match side {
        Side::Lower => v,
        Side::Upper => -v,
    };
    if s >= 0.0 {
        1.0
    } else {
        (1.0 + s / iota).max(0.0)
    }
}

/// Mean-based active set: constrained components where `ū` sits on a face
/// (within `tol`) and the misfit gradient at `ū` points out of the box.
pub fn active_index_set(
    e: &Ensemble,
    grad_at_mean: &DVector<f64>,
    b: &BoxConstraint,
    tol: f64,
) -> BTreeSet<usize> {
    let mean = e.mean();
    face_active(&mean, grad_at_mean, b, tol)
}

/// Union over particles of the per-particle active sets.
///
/// `grads` holds `∇Φ(u^(j))` in column `j`.
pub fn active_index_set_union(
    e: &Ensemble,
    grads: &DMatrix<f64>,
    b: &BoxConstraint,
    tol: f64,
) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for j in 0..e.size() {
        let g = grads.column(j).into_owned();
        out.extend(face_active(&e.particle(j), &g, b, tol));
    }
    out
}

fn face_active(u: &DVector<f64>, g: &DVector<f64>, b: &BoxConstraint, tol: f64) -> BTreeSet<usize> {
    (0..b.constrained())
        .filter(|&i| {
            ((u[i] - b.lower[i]).abs() <= tol && g[i] > 0.0)
                || ((u[i] - b.upper[i]).abs() <= tol && g[i] < 0.0)
        })
        .collect()
}

/// The transformed preconditioner: `C + εI` with every row and column in
/// `active` replaced by `ε e_i`.
pub fn transform_preconditioner(
    c: &DMatrix<f64>,
    active: &BTreeSet<usize>,
    eps: f64,
) -> Result<DMatrix<f64>, ConstraintError> {
    if !(eps > 0.0) {
        return Err(ConstraintError::NonPositiveInflation(eps));
    }
    Ok(transform_preconditioner_unchecked(c, active, eps))
}

/// Same as [`transform_preconditioner`] but also accepts `eps = 0`, which
/// the un-inflated projected flows use.
pub(crate) fn transform_preconditioner_unchecked(
    c: &DMatrix<f64>,
    active: &BTreeSet<usize>,
    eps: f64,
) -> DMatrix<f64> {
    let n = c.nrows();
    let mut d = c.clone();
    for i in 0..n {
        d[(i, i)] += eps;
    }
    for &i in active {
        for k in 0..n {
            d[(i, k)] = 0.0;
            d[(k, i)] = 0.0;
        }
        d[(i, i)] = eps;
    }
    d
}

/// A KKT pair for the box-constrained least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct KktPoint {
    pub u_star: DVector<f64>,
    /// `2m` multipliers, lower faces first.
    pub multipliers: DVector<f64>,
    pub stationarity_residual: f64,
}

/// Largest violation among primal feasibility, dual feasibility,
/// complementary slackness and stationarity `‖∇Φ(u) + Σ λ_j ∇h_j‖`.
pub fn kkt_residual(
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    problem: &LinearProblem,
    b: &BoxConstraint,
) -> f64 {
    let (_, grad) = problem.misfit_and_grad(u);
    kkt_residual_with_gradient(u, lambda, &grad, b)
}

pub fn kkt_residual_with_gradient(
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    grad: &DVector<f64>,
    b: &BoxConstraint,
) -> f64 {
    let m = b.constrained();
    assert_eq!(lambda.len(), 2 * m, "one multiplier per inequality");
    let h = b.constraint_values(u);
    let mut worst = 0.0_f64;
    for j in 0..2 * m {
        worst = worst.max(h[j].max(0.0));
        worst = worst.max((-lambda[j]).max(0.0));
        worst = worst.max((lambda[j] * h[j]).abs());
    }
    let mut stat = grad.clone();
    for i in 0..m {
        stat[i] += -lambda[i] + lambda[i + m];
    }
    worst.max(stat.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn unit_box(n: usize) -> BoxConstraint {
        BoxConstraint::uniform(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn project_is_identity_on_feasible_points() {
        let b = unit_box(3);
        let u = DVector::from_vec(vec![0.2, 0.0, 1.0]);
        assert_eq!(b.project(&u), u);
    }

    #[test]
    fn project_clamps() {
        let b = unit_box(2);
        let u = DVector::from_vec(vec![2.0, 0.5]);
        assert_eq!(b.project(&u), DVector::from_vec(vec![1.0, 0.5]));
    }

    #[test]
    fn project_leaves_unconstrained_components() {
        let b = BoxConstraint::new(vec![0.0], vec![1.0], 3).unwrap();
        let u = DVector::from_vec(vec![-4.0, 7.0, -9.0]);
        assert_eq!(b.project(&u), DVector::from_vec(vec![0.0, 7.0, -9.0]));
    }

    #[test]
    fn counterexample_projection_step() {
        // x1 free, x2 ≤ 0: model the free side with a very wide interval.
        let b = BoxConstraint::new(vec![-1e300, -1e300], vec![1e300, 0.0], 2).unwrap();
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 10.0]);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let grad = DVector::from_vec(vec![2.0 * x[0] - 2.0 * x[1] + 1.0, -2.0 * x[0] + 6.0 * x[1]]);
        for alpha in [0.01, 0.1, 1.0] {
            let trial: DVector<f64> = &x - (&d * &grad) * alpha;
            assert_abs_diff_eq!(trial[1], 14.0 * alpha, epsilon = 1e-12);
            let next = b.project(&trial);
            assert_abs_diff_eq!(next, DVector::from_vec(vec![1.0 + alpha, 0.0]), epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_box_names_component() {
        let err = BoxConstraint::new(vec![0.0, 1.0], vec![1.0, 1.0], 2).unwrap_err();
        assert_eq!(
            err,
            ConstraintError::EmptyInterval {
                index: 1,
                lower: 1.0,
                upper: 1.0
            }
        );
        assert!(err.to_string().contains("component 1"));
    }

    #[test]
    fn barrier_gradient_at_center_vanishes() {
        let b = BoxConstraint::uniform(-1.0, 1.0, 1).unwrap();
        let g = b.barrier_gradient(&DVector::from_vec(vec![0.0])).unwrap();
        assert_abs_diff_eq!(g[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn barrier_gradient_hand_value() {
        let b = BoxConstraint::uniform(0.0, 2.0, 1).unwrap();
        let g = b.barrier_gradient(&DVector::from_vec(vec![0.5])).unwrap();
        assert_abs_diff_eq!(g[0], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn barrier_rejects_boundary_and_exterior() {
        let b = unit_box(2);
        for u in [vec![0.0, 0.5], vec![0.5, 1.0], vec![1.5, 0.5]] {
            assert!(matches!(
                b.barrier_gradient(&DVector::from_vec(u)),
                Err(ConstraintError::NotInterior { .. })
            ));
        }
    }

    #[test]
    fn barrier_components_beyond_m_are_zero() {
        let b = BoxConstraint::new(vec![0.0], vec![1.0], 3).unwrap();
        let g = b.barrier_gradient(&DVector::from_vec(vec![0.1, 5.0, -5.0])).unwrap();
        assert!(g[0] > 0.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn smoothed_indicator_values() {
        let iota = 1e-2;
        assert_eq!(smoothed_indicator(0.3, Side::Lower, iota), 1.0);
        assert_eq!(smoothed_indicator(0.0, Side::Lower, iota), 1.0);
        assert_abs_diff_eq!(smoothed_indicator(-iota, Side::Lower, iota), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(smoothed_indicator(-iota / 2.0, Side::Lower, iota), 0.5, epsilon = 1e-15);
        assert_eq!(smoothed_indicator(-1.0, Side::Lower, iota), 0.0);
        assert_eq!(smoothed_indicator(-0.3, Side::Upper, iota), 1.0);
        assert_abs_diff_eq!(smoothed_indicator(iota / 2.0, Side::Upper, iota), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn gating_converges_to_indicator_cases() {
        let b = unit_box(1);
        for ramp in [1e-2, 1e-4, 1e-8] {
            // interior: ungated for small enough ramps
            assert_eq!(b.gate(0, 0.5, -3.0, ramp), -3.0);
            assert_eq!(b.gate(0, 0.5, 2.0, ramp), 2.0);
            // on the lower face: inward passes, outward is blocked
            assert_eq!(b.gate(0, 0.0, 2.0, ramp), 2.0);
            assert_eq!(b.gate(0, 0.0, -2.0, ramp), 0.0);
            // on the upper face
            assert_eq!(b.gate(0, 1.0, -2.0, ramp), -2.0);
            assert_eq!(b.gate(0, 1.0, 2.0, ramp), 0.0);
        }
    }

    fn ensemble_at(points: &[[f64; 2]]) -> Ensemble {
        let ps: Vec<_> = points.iter().map(|p| DVector::from_vec(p.to_vec())).collect();
        Ensemble::from_particles(&ps).unwrap()
    }

    #[test]
    fn active_set_cases() {
        let b = unit_box(2);
        let interior = ensemble_at(&[[0.4, 0.5], [0.6, 0.5]]);
        let g = DVector::from_vec(vec![1.0, -1.0]);
        assert!(active_index_set(&interior, &g, &b, FACE_TOLERANCE).is_empty());

        let at_lower = ensemble_at(&[[0.0, 0.5], [0.0, 0.5]]);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(
            active_index_set(&at_lower, &g, &b, FACE_TOLERANCE),
            BTreeSet::from([0])
        );

        let at_upper = ensemble_at(&[[1.0, 0.5], [1.0, 0.5]]);
        assert!(active_index_set(&at_upper, &g, &b, FACE_TOLERANCE).is_empty());
    }

    #[test]
    fn union_active_set_collects_particles() {
        let b = unit_box(2);
        let e = ensemble_at(&[[0.0, 0.5], [0.5, 1.0]]);
        let grads = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert_eq!(
            active_index_set_union(&e, &grads, &b, FACE_TOLERANCE),
            BTreeSet::from([0, 1])
        );
        // the mean is interior in both components
        let g = DVector::from_vec(vec![1.0, -1.0]);
        assert!(active_index_set(&e, &g, &b, FACE_TOLERANCE).is_empty());
    }

    #[test]
    fn preconditioner_limits() {
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]);
        let eps = 0.25;
        let none = transform_preconditioner(&c, &BTreeSet::new(), eps).unwrap();
        assert_abs_diff_eq!(none, &c + DMatrix::identity(3, 3) * eps, epsilon = 1e-15);
        let all = transform_preconditioner(&c, &BTreeSet::from([0, 1, 2]), eps).unwrap();
        assert_abs_diff_eq!(all, DMatrix::identity(3, 3) * eps, epsilon = 1e-15);
    }

    #[test]
    fn preconditioner_block_structure() {
        let c = DMatrix::from_fn(4, 4, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let eps = 0.1;
        let d = transform_preconditioner(&c, &BTreeSet::from([0, 1]), eps).unwrap();
        let mut expected = DMatrix::zeros(4, 4);
        expected[(0, 0)] = eps;
        expected[(1, 1)] = eps;
        for i in 2..4 {
            for j in 2..4 {
                expected[(i, j)] = c[(i, j)] + if i == j { eps } else { 0.0 };
            }
        }
        assert_abs_diff_eq!(d, expected, epsilon = 1e-15);
    }

    #[test]
    fn preconditioner_rejects_nonpositive_eps() {
        let c = DMatrix::identity(2, 2);
        assert!(transform_preconditioner(&c, &BTreeSet::new(), 0.0).is_err());
        assert!(transform_preconditioner(&c, &BTreeSet::new(), -1.0).is_err());
    }

    #[test]
    fn pinned_ensemble_covariance_is_already_diagonal() {
        // every particle on the face a_0 = 0: row 0 of C vanishes off the diagonal
        let e = ensemble_at(&[[0.0, 0.1], [0.0, 0.7], [0.0, 0.4]]);
        let c = e.covariance();
        let b = unit_box(2);
        let g = DVector::from_vec(vec![2.0, 0.0]);
        let active = active_index_set(&e, &g, &b, FACE_TOLERANCE);
        assert_eq!(active, BTreeSet::from([0]));
        for &i in &active {
            for k in 0..2 {
                if k != i {
                    assert_eq!(c[(i, k)], 0.0);
                }
            }
        }
        let eps = 0.3;
        let d = transform_preconditioner(&c, &active, eps).unwrap();
        assert_abs_diff_eq!(d, &c + DMatrix::identity(2, 2) * eps, epsilon = 1e-15);
    }

    fn barrier_fd_gradient(b: &BoxConstraint, u: &DVector<f64>) -> DVector<f64> {
        // central differences of Σ log(-h_j), the negative of the barrier value
        let f = |v: &DVector<f64>| -b.barrier_value(v).unwrap();
        DVector::from_fn(u.len(), |i, _| {
            let step = 1e-6 * (1.0 + u[i].abs());
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += step;
            dn[i] -= step;
            (f(&up) - f(&dn)) / (2.0 * step)
        })
    }

    proptest! {
        #[test]
        fn project_is_idempotent_and_nonexpansive(
            u in proptest::collection::vec(-5.0f64..5.0, 4),
            v in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let b = BoxConstraint::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 3.0], 4).unwrap();
            let u = DVector::from_vec(u);
            let v = DVector::from_vec(v);
            let pu = b.project(&u);
            prop_assert_eq!(b.project(&pu), pu.clone());
            let pv = b.project(&v);
            for i in 0..4 {
                prop_assert!((pu[i] - pv[i]).abs() <= (u[i] - v[i]).abs());
            }
        }

        #[test]
        fn barrier_gradient_matches_finite_differences(
            t in proptest::collection::vec(0.02f64..0.98, 3),
        ) {
            let b = BoxConstraint::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 3.0], 3).unwrap();
            let u = DVector::from_fn(3, |i, _| b.lower()[i] + t[i] * (b.upper()[i] - b.lower()[i]));
            let g = b.barrier_gradient(&u).unwrap();
            let fd = barrier_fd_gradient(&b, &u);
            for i in 0..3 {
                let scale = g[i].abs().max(1.0);
                prop_assert!((g[i] - fd[i]).abs() / scale < 1e-6);
            }
        }

        #[test]
        fn preconditioner_is_spd_with_eps_floor(
            seed in 0u64..10_000,
            mask in proptest::collection::vec(any::<bool>(), 5),
            eps in 1e-3f64..2.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ps: Vec<_> = (0..4).map(|_| DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0))).collect();
            let c = Ensemble::from_particles(&ps).unwrap().covariance();
            let active: BTreeSet<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
            let d = transform_preconditioner(&c, &active, eps).unwrap();
            prop_assert_eq!(&d, &d.transpose());
            prop_assert!(d.symmetric_eigen().eigenvalues.min() >= eps - 1e-10);
        }
    }
}
