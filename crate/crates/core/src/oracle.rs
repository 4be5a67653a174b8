//! Reference solvers for the box-constrained and barrier-smoothed problems.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::constraints::{kkt_residual_with_gradient, BoxConstraint, ConstraintError, KktPoint};
use crate::forward::{ForwardError, InverseProblem, LinearProblem};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    IterationCap { iterations: usize, residual: f64 },
    #[error("line search stalled with residual {residual:e}")]
    Stalled { residual: f64 },
    #[error("brute force is limited to n ≤ 5, got {n}")]
    DimensionTooLarge { n: usize },
    #[error("brute force needs every component bounded ({constrained} of {n} are)")]
    PartiallyConstrained { constrained: usize, n: usize },
    #[error("need at least two grid points per dimension")]
    GridTooCoarse,
    #[error("barrier Hessian is not positive definite")]
    SingularHessian,
    #[error("barrier weight ι = {0} must be positive")]
    InvalidIota(f64),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Stop once `‖u - P(u - ∇Φ(u))‖` falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

trait Objective {
    fn value(&self, u: &DVector<f64>) -> Result<f64, OracleError>;
    /// `(Φ, ∇Φ, Hessian or Gauss–Newton matrix)`.
    fn second_order(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>), OracleError>;
    /// Whether the second-order model is exact, so Newton steps need no damping.
    fn is_quadratic(&self) -> bool {
        false
    }
}

struct LinearObjective<'a> {
    problem: &'a LinearProblem,
    hessian: DMatrix<f64>,
}

impl Objective for LinearObjective<'_> {
    fn value(&self, u: &DVector<f64>) -> Result<f64, OracleError> {
        Ok(self.problem.misfit(u))
    }

    fn second_order(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>), OracleError> {
        let (v, g) = self.problem.misfit_and_grad(u);
        Ok((v, g, self.hessian.clone()))
    }

    fn is_quadratic(&self) -> bool {
        true
    }
}

struct NonlinearObjective<'a> {
    problem: &'a InverseProblem,
}

impl NonlinearObjective<'_> {
    /// Central differences, columns in parallel.
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>, OracleError> {
        let step = 1e-5 * (1.0 + u.amax());
        let cols = (0..u.len())
            .into_par_iter()
            .map(|j| {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[j] += step;
                dn[j] -= step;
                let f = &self.problem.forward;
                Ok((f.apply(&up)? - f.apply(&dn)?) / (2.0 * step))
            })
            .collect::<Result<Vec<_>, ForwardError>>()?;
        Ok(DMatrix::from_columns(&cols))
    }
}

impl Objective for NonlinearObjective<'_> {
    fn value(&self, u: &DVector<f64>) -> Result<f64, OracleError> {
        Ok(self.problem.misfit(u)?)
    }

    fn second_order(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>), OracleError> {
        let r = self.problem.forward.apply(u)? - &self.problem.data;
        let jac = match self.problem.forward.linear_operator() {
            Some(a) => a.clone(),
            None => self.jacobian(u)?,
        };
        let w = self.problem.noise.whiten(&r);
        let h = jac.transpose() * self.problem.noise.whiten_matrix(&jac);
        Ok((0.5 * r.dot(&w), jac.transpose() * w, (&h + h.transpose()) * 0.5))
    }
}

fn projected_gradient_norm(u: &DVector<f64>, g: &DVector<f64>, b: &BoxConstraint) -> f64 {
    (u - b.project(&(u - g))).norm()
}

/// Pseudo-inverse solve of a symmetric positive semidefinite system.
fn psd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = h.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    let eig = h.clone().symmetric_eigen();
    let cutoff = eig.eigenvalues.amax() * 1e-12;
    let mut x = DVector::zeros(rhs.len());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(rhs) / lam);
        }
    }
    x
}

/// Armijo search along the projection arc `P(u + α d)`.
fn arc_search<O: Objective>(
    obj: &O,
    b: &BoxConstraint,
    u: &DVector<f64>,
    phi: f64,
    g: &DVector<f64>,
    d: &DVector<f64>,
    alpha0: f64,
) -> Result<Option<(DVector<f64>, f64)>, OracleError> {
    // returns the accepted point and step length
    let mut alpha = alpha0;
    for _ in 0..60 {
        let trial = b.project(&(u + d * alpha));
        let decrease = g.dot(&(&trial - u));
        if decrease < 0.0 {
            let v = obj.value(&trial)?;
            if v <= phi + 1e-4 * decrease {
                return Ok(Some((trial, alpha)));
            }
        }
        alpha *= 0.5;
    }
    Ok(None)
}

struct NewtonOutcome {
    u: DVector<f64>,
    g: DVector<f64>,
    residual: f64,
    /// The line search made no progress before reaching the tolerance.
    stalled: bool,
}

/// Projected Newton iteration with a binding set in the style of
/// Bertsekas: scaled gradient steps on near-active components whose
/// gradient points outward, Newton steps on the rest, projected
/// gradient as a fallback.
fn projected_newton<O: Objective>(
    obj: &O,
    b: &BoxConstraint,
    start: DVector<f64>,
    opts: &OracleOptions,
    gradient_step: f64,
) -> Result<NewtonOutcome, OracleError> {
    let mut u = b.project(&start);
    let m = b.constrained();
    let mut residual = f64::INFINITY;
    // Levenberg–Marquardt damping of the free block for non-quadratic models
    let mut damping = 0.0;
    for _ in 0..opts.max_iter {
        let (phi, g, h) = obj.second_order(&u)?;
        residual = projected_gradient_norm(&u, &g, b);
        if residual <= opts.tol {
            return Ok(NewtonOutcome { u, g, residual, stalled: false });
        }
        let width = residual.min(1e-3);
        let binding: Vec<bool> = (0..u.len())
            .map(|i| {
                i < m
                    && ((u[i] <= b.lower()[i] + width && g[i] > 0.0)
                        || (u[i] >= b.upper()[i] - width && g[i] < 0.0))
            })
            .collect();
        let free: Vec<usize> = (0..u.len()).filter(|&i| !binding[i]).collect();
        let mut d = -&g;
        if !free.is_empty() {
            let mut h_ff = h.select_rows(&free).select_columns(&free);
            for k in 0..free.len() {
                h_ff[(k, k)] += damping;
            }
            let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
            let step = psd_solve(&h_ff, &(-g_f));
            for (k, &i) in free.iter().enumerate() {
                d[i] = step[k];
            }
            let diag = h.diagonal();
            for i in 0..u.len() {
                if binding[i] && diag[i] > 0.0 {
                    d[i] = -g[i] / diag[i];
                }
            }
        }
        let newton = arc_search(obj, b, &u, phi, &g, &d, 1.0)?;
        if !obj.is_quadratic() {
            let floor = 1e-12 * h.diagonal().amax();
            damping = match &newton {
                Some((_, alpha)) if *alpha == 1.0 => damping * 0.1,
                _ => (damping * 10.0).max(floor),
            };
        }
        let next = match newton {
            Some(found) => Some(found),
            None => arc_search(obj, b, &u, phi, &g, &(-&g), gradient_step)?,
        };
        match next {
            Some((v, _)) if v != u => u = v,
            _ => {
                let (_, g, _) = obj.second_order(&u)?;
                residual = projected_gradient_norm(&u, &g, b);
                let stalled = residual > opts.tol;
                return Ok(NewtonOutcome { u, g, residual, stalled });
            }
        }
    }
    Err(OracleError::IterationCap {
        iterations: opts.max_iter,
        residual,
    })
}

/// Multipliers read off the faces: `λ_i = ∂_iΦ` on a lower face with
/// outward gradient, `λ_{i+m} = -∂_iΦ` on an upper face, zero elsewhere.
pub fn recover_multipliers(u: &DVector<f64>, grad: &DVector<f64>, b: &BoxConstraint) -> DVector<f64> {
    let m = b.constrained();
    let mut lambda = DVector::zeros(2 * m);
    for i in 0..m {
        if u[i] <= b.lower()[i] && grad[i] > 0.0 {
            lambda[i] = grad[i];
        } else if u[i] >= b.upper()[i] && grad[i] < 0.0 {
            lambda[i + m] = -grad[i];
        }
    }
    lambda
}

fn kkt_point(u: DVector<f64>, g: &DVector<f64>, b: &BoxConstraint) -> KktPoint {
    let multipliers = recover_multipliers(&u, g, b);
    let stationarity_residual = kkt_residual_with_gradient(&u, &multipliers, g, b);
    KktPoint {
        u_star: u,
        multipliers,
        stationarity_residual,
    }
}

/// Minimize `½‖y - Au‖²_Γ` over the box, starting from its center.
pub fn solve_box_ls(problem: &LinearProblem, b: &BoxConstraint) -> Result<KktPoint, OracleError> {
    solve_box_ls_from(problem, b, &b.center(), &OracleOptions::default())
}

pub fn solve_box_ls_from(
    problem: &LinearProblem,
    b: &BoxConstraint,
    start: &DVector<f64>,
    opts: &OracleOptions,
) -> Result<KktPoint, OracleError> {
    let hessian = problem.normal_matrix();
    let lmax = hessian.clone().symmetric_eigen().eigenvalues.amax().max(f64::MIN_POSITIVE);
    let obj = LinearObjective { problem, hessian };
    let out = projected_newton(&obj, b, start.clone(), opts, 1.0 / lmax)?;
    if out.stalled {
        return Err(OracleError::Stalled { residual: out.residual });
    }
    Ok(kkt_point(out.u, &out.g, b))
}

/// Box-constrained minimizer of the nonlinear misfit by projected
/// Gauss–Newton with central-difference Jacobians.
///
/// The tolerance applies to the projected gradient relative to its value
/// at the start.
pub fn solve_box_nls(
    problem: &InverseProblem,
    b: &BoxConstraint,
    start: &DVector<f64>,
    opts: &OracleOptions,
) -> Result<KktPoint, OracleError> {
    let obj = NonlinearObjective { problem };
    let (_, g0, h0) = obj.second_order(&b.project(start))?;
    let scaled = OracleOptions {
        tol: opts.tol * (1.0 + projected_gradient_norm(&b.project(start), &g0, b)),
        ..*opts
    };
    let lmax = h0.symmetric_eigen().eigenvalues.amax().max(f64::MIN_POSITIVE);
    let out = projected_newton(&obj, b, start.clone(), &scaled, 1.0 / lmax)?;
    // finite-difference noise can stall the last digits
    if out.stalled && out.residual > 1e3 * scaled.tol {
        return Err(OracleError::Stalled { residual: out.residual });
    }
    Ok(kkt_point(out.u, &out.g, b))
}

/// Minimizer of `ι Φ(u) - Σ log(-h_j(u))` by damped Newton from the box
/// center.
///
/// Stops when the gradient norm is below `1e-10` or below the rounding
/// floor `100 ε_mach ‖H‖_max (1 + ‖u‖∞) √n` of the Hessian `H`, whichever is
/// larger.
pub fn solve_barrier(problem: &LinearProblem, b: &BoxConstraint, iota: f64) -> Result<DVector<f64>, OracleError> {
    if !(iota > 0.0) {
        return Err(OracleError::InvalidIota(iota));
    }
    let normal = problem.normal_matrix() * iota;
    let objective = |u: &DVector<f64>| -> Option<f64> {
        b.barrier_value(u).ok().map(|bv| iota * problem.misfit(u) + bv)
    };
    let mut u = b.center();
    let tol: f64 = 1e-10;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..500 {
        let (_, g) = problem.misfit_and_grad(&u);
        let grad = g * iota - b.barrier_gradient(&u)?;
        grad_norm = grad.norm();
        let mut hess = normal.clone();
        let diag = b.barrier_hessian_diag(&u)?;
        for i in 0..u.len() {
            hess[(i, i)] += diag[i];
        }
        // Near a face the barrier gradient cannot be resolved better than
        // the rounding of u times the curvature.
        let floor = 100.0 * f64::EPSILON * hess.amax() * (1.0 + u.amax()) * (u.len() as f64).sqrt();
        if grad_norm <= tol.max(floor) {
            return Ok(u);
        }
        let chol = hess.cholesky().ok_or(OracleError::SingularHessian)?;
        let d = chol.solve(&(-&grad));
        let slope = grad.dot(&d);
        let f0 = objective(&u).expect("iterates stay interior");
        // Once the predicted decrease is below the rounding of f, Armijo
        // cannot tell progress from noise; take pure Newton steps instead.
        let resolvable = -slope > 1e3 * f64::EPSILON * (1.0 + f0.abs());
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..80 {
            let trial = &u + &d * alpha;
            if let Some(f) = objective(&trial) {
                if !resolvable || f <= f0 + 0.25 * alpha * slope {
                    moved = true;
                    u = trial;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            return Err(OracleError::Stalled { residual: grad_norm });
        }
    }
    Err(OracleError::IterationCap {
        iterations: 500,
        residual: grad_norm,
    })
}

/// Exhaustive search over the tensor grid with `points` nodes per
/// dimension, faces included.
pub fn brute_force_box(problem: &LinearProblem, b: &BoxConstraint, points: usize) -> Result<DVector<f64>, OracleError> {
    let n = b.dim();
    if n > 5 {
        return Err(OracleError::DimensionTooLarge { n });
    }
    if b.constrained() != n {
        return Err(OracleError::PartiallyConstrained {
            constrained: b.constrained(),
            n,
        });
    }
    if points < 2 {
        return Err(OracleError::GridTooCoarse);
    }
    let node = |i: usize, k: usize| {
        if k == points - 1 {
            b.upper()[i]
        } else {
            b.lower()[i] + (b.upper()[i] - b.lower()[i]) * k as f64 / (points - 1) as f64
        }
    };
    let total = points.pow(n as u32);
    let (best_index, _) = (0..total)
        .into_par_iter()
        .map(|idx| {
            let mut rem = idx;
            let u = DVector::from_fn(n, |i, _| {
                let k = rem % points;
                rem /= points;
                node(i, k)
            });
            (idx, problem.misfit(&u))
        })
        .reduce(
            || (usize::MAX, f64::INFINITY),
            |a, c| if c.1 < a.1 || (c.1 == a.1 && c.0 < a.0) { c } else { a },
        );
    let mut rem = best_index;
    Ok(DVector::from_fn(n, |i, _| {
        let k = rem % points;
        rem /= points;
        node(i, k)
    }))
}
