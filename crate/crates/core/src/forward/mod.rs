//! Parameter-to-observation maps and the least-squares misfit.

mod darcy;
mod elliptic;

pub use darcy::DarcyProblem2D;
pub use elliptic::{assemble_elliptic_1d, EllipticProblem1D, DEFAULT_ELEMENTS};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ensemble::{Ensemble, LinalgError, NoiseModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error("linear solve failed: {0}")]
    SolveFailed(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("invalid forward-model setup: {0}")]
    InvalidSetup(String),
    #[error("non-finite input parameter")]
    NonFinite,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// A map `G: R^n → R^K`.
pub trait ForwardModel: Send + Sync {
    fn param_dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn apply(&self, u: &DVector<f64>) -> Result<DVector<f64>, ForwardError>;

    /// `DG(u)`; the default is a forward-difference approximation with step
    /// `1e-6 (1 + ‖u‖∞)`.
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>, ForwardError> {
        forward_difference_jacobian(self, u, fd_step(u))
    }

    /// The matrix `A` when `G(u) = A u`.
    fn linear_operator(&self) -> Option<&DMatrix<f64>> {
        None
    }

    /// Images of all particles, one per column.
    fn apply_ensemble(&self, e: &Ensemble) -> Result<DMatrix<f64>, ForwardError> {
        if let Some(a) = self.linear_operator() {
            return Ok(a * e.as_matrix());
        }
        let cols = (0..e.size())
            .map(|j| self.apply(&e.particle(j)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DMatrix::from_columns(&cols))
    }
}

pub(crate) fn fd_step(u: &DVector<f64>) -> f64 {
    1e-6 * (1.0 + u.amax())
}

/// Column `j` is `(G(u + δ e_j) - G(u)) / δ`.
pub fn forward_difference_jacobian<F: ForwardModel + ?Sized>(
    model: &F,
    u: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>, ForwardError> {
    let base = model.apply(u)?;
    let cols = (0..u.len())
        .map(|j| {
            let mut shifted = u.clone();
            shifted[j] += step;
            model.apply(&shifted).map(|g| (g - &base) / step)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// `G(u) = A u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearForwardOperator {
    matrix: DMatrix<f64>,
}

impl LinearForwardOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, ForwardError> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(ForwardError::InvalidSetup("non-finite operator entry".into()));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Keep only the listed observation rows.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self, ForwardError> {
        for &r in rows {
            if r >= self.matrix.nrows() {
                return Err(ForwardError::InvalidSetup(format!(
                    "observation row {r} out of range 0..{}",
                    self.matrix.nrows()
                )));
            }
        }
        Self::new(self.matrix.select_rows(rows))
    }
}

impl ForwardModel for LinearForwardOperator {
    fn param_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, u: &DVector<f64>) -> Result<DVector<f64>, ForwardError> {
        if u.len() != self.param_dim() {
            return Err(ForwardError::DimensionMismatch {
                expected: self.param_dim(),
                got: u.len(),
                context: "parameter",
            });
        }
        Ok(&self.matrix * u)
    }

    fn jacobian(&self, _u: &DVector<f64>) -> Result<DMatrix<f64>, ForwardError> {
        Ok(self.matrix.clone())
    }

    fn linear_operator(&self) -> Option<&DMatrix<f64>> {
        Some(&self.matrix)
    }
}

/// Data `y`, noise `Γ` and a forward model: the inverse problem
/// `y = G(u) + η`.
#[derive(Clone)]
pub struct InverseProblem {
    pub forward: Arc<dyn ForwardModel>,
    pub data: DVector<f64>,
    pub noise: NoiseModel,
}

impl std::fmt::Debug for InverseProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InverseProblem")
            .field("param_dim", &self.forward.param_dim())
            .field("obs_dim", &self.forward.obs_dim())
            .field("linear", &self.forward.linear_operator().is_some())
            .finish()
    }
}

impl InverseProblem {
    pub fn new(
        forward: Arc<dyn ForwardModel>,
        data: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self, ForwardError> {
        let k = forward.obs_dim();
        if data.len() != k {
            return Err(ForwardError::DimensionMismatch {
                expected: k,
                got: data.len(),
                context: "data vector",
            });
        }
        if noise.dim() != k {
            return Err(ForwardError::DimensionMismatch {
                expected: k,
                got: noise.dim(),
                context: "noise covariance",
            });
        }
        Ok(Self {
            forward,
            data,
            noise,
        })
    }

    pub fn linear(problem: LinearProblem) -> Self {
        Self {
            forward: Arc::new(problem.operator),
            data: problem.data,
            noise: problem.noise,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.forward.param_dim()
    }

    /// The linear least-squares view, when the forward model is linear.
    pub fn as_linear(&self) -> Option<LinearProblem> {
        self.forward.linear_operator().map(|a| LinearProblem {
            operator: LinearForwardOperator { matrix: a.clone() },
            data: self.data.clone(),
            noise: self.noise.clone(),
        })
    }

    /// `Φ(u) = ½‖y - G(u)‖²_Γ`.
    pub fn misfit(&self, u: &DVector<f64>) -> Result<f64, ForwardError> {
        let r = &self.data - self.forward.apply(u)?;
        Ok(0.5 * self.noise.norm_squared(&r))
    }

    /// `∇Φ(u) = DG(u)ᵀ Γ^{-1} (G(u) - y)`.
    pub fn misfit_gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>, ForwardError> {
        let r = self.forward.apply(u)? - &self.data;
        let jac = self.forward.jacobian(u)?;
        Ok(jac.transpose() * self.noise.whiten(&r))
    }
}

/// `Φ(u) = ½‖y - A u‖²_Γ` with the operator, data and noise bundled.
#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub operator: LinearForwardOperator,
    pub data: DVector<f64>,
    pub noise: NoiseModel,
}

impl LinearProblem {
    pub fn new(
        operator: LinearForwardOperator,
        data: DVector<f64>,
        noise: NoiseModel,
    ) -> Result<Self, ForwardError> {
        let k = operator.obs_dim();
        if data.len() != k || noise.dim() != k {
            return Err(ForwardError::DimensionMismatch {
                expected: k,
                got: if data.len() != k { data.len() } else { noise.dim() },
                context: "observation dimension",
            });
        }
        Ok(Self {
            operator,
            data,
            noise,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        self.operator.matrix()
    }

    pub fn dim(&self) -> usize {
        self.operator.param_dim()
    }

    /// `Aᵀ Γ^{-1} A`.
    pub fn normal_matrix(&self) -> DMatrix<f64> {
        let a = self.matrix();
        let m = a.transpose() * self.noise.whiten_matrix(a);
        (&m + m.transpose()) * 0.5
    }

    pub fn misfit(&self, u: &DVector<f64>) -> f64 {
        let r = &self.data - self.matrix() * u;
        0.5 * self.noise.norm_squared(&r)
    }

    /// `(Φ(u), Aᵀ Γ^{-1} (A u - y))`.
    pub fn misfit_and_grad(&self, u: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = self.matrix() * u - &self.data;
        let w = self.noise.whiten(&r);
        (0.5 * r.dot(&w), self.matrix().transpose() * w)
    }

    /// Gradients `∇Φ(u^(j))` of all particles, one per column.
    pub fn ensemble_gradients(&self, particles: &DMatrix<f64>) -> DMatrix<f64> {
        let mut r = self.matrix() * particles;
        for mut col in r.column_iter_mut() {
            col -= &self.data;
        }
        self.matrix().transpose() * self.noise.whiten_matrix(&r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_problem(seed: u64, k: usize, n: usize) -> LinearProblem {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let noise = NoiseModel::new(DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                0.5 + i as f64
            } else {
                0.1
            }
        }))
        .unwrap();
        LinearProblem::new(LinearForwardOperator::new(a).unwrap(), y, noise).unwrap()
    }

    #[test]
    fn exact_fit_has_zero_misfit_and_gradient() {
        let mut p = random_problem(1, 3, 3);
        let u = DVector::from_vec(vec![0.3, -0.2, 1.0]);
        p.data = p.matrix() * &u;
        let (v, g) = p.misfit_and_grad(&u);
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(g, DVector::zeros(3), epsilon = 1e-14);
    }

    #[test]
    fn linear_jacobian_is_the_matrix() {
        let p = random_problem(2, 4, 3);
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(&p.operator.jacobian(&u).unwrap(), p.matrix());
        let fd = forward_difference_jacobian(&p.operator, &u, fd_step(&u)).unwrap();
        assert_abs_diff_eq!(fd, p.matrix().clone(), epsilon = 1e-8);
    }

    #[test]
    fn inverse_problem_rejects_wrong_data_length() {
        let p = random_problem(3, 3, 2);
        let err = InverseProblem::new(Arc::new(p.operator.clone()), DVector::zeros(2), p.noise.clone());
        assert!(matches!(err, Err(ForwardError::DimensionMismatch { .. })));
    }

    #[test]
    fn generic_gradient_matches_linear_gradient() {
        let p = random_problem(4, 3, 4);
        let ip = InverseProblem::linear(p.clone());
        let u = DVector::from_vec(vec![0.1, -0.4, 0.7, 0.2]);
        let (_, g) = p.misfit_and_grad(&u);
        assert_abs_diff_eq!(ip.misfit_gradient(&u).unwrap(), g, epsilon = 1e-12);
        assert_abs_diff_eq!(ip.misfit(&u).unwrap(), p.misfit(&u), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(seed in 0u64..5_000) {
            let p = random_problem(seed, 4, 3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let u = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let (_, g) = p.misfit_and_grad(&u);
            for i in 0..3 {
                let h = 1e-5;
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (p.misfit(&up) - p.misfit(&dn)) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1.0));
            }
        }

        #[test]
        fn quadratic_taylor_identity(seed in 0u64..5_000) {
            let p = random_problem(seed, 3, 3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let u = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let v = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let (phi, g) = p.misfit_and_grad(&u);
            let av = p.matrix() * &v;
            let rhs = phi + g.dot(&v) + 0.5 * p.noise.norm_squared(&av);
            prop_assert!((p.misfit(&(&u + &v)) - rhs).abs() < 1e-10 * rhs.abs().max(1.0));
        }
    }
}
