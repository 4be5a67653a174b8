use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{ForwardError, LinearForwardOperator};

/// `-p'' + p = u` on `(0, π)` with `p(0) = p(π) = 0`, discretized with
/// piecewise-linear finite elements on a uniform mesh.
///
/// The parameter `u` is piecewise constant on `n_params` equal cells, which
/// must align with the mesh.
#[derive(Debug, Clone)]
pub struct EllipticProblem1D {
    elements: usize,
    n_params: usize,
    obs_points: Vec<f64>,
}

/// Default number of finite elements (mesh width `π / 256`).
pub const DEFAULT_ELEMENTS: usize = 256;

impl EllipticProblem1D {
    pub fn new(elements: usize, n_params: usize, obs_points: Vec<f64>) -> Result<Self, ForwardError> {
        if elements < 2 {
            return Err(ForwardError::InvalidSetup("need at least two elements".into()));
        }
        if n_params == 0 || elements % n_params != 0 {
            return Err(ForwardError::InvalidSetup(format!(
                "{n_params} parameter cells do not divide {elements} elements"
            )));
        }
        if let Some(x) = obs_points.iter().find(|&&x| !(x > 0.0 && x < PI)) {
            return Err(ForwardError::InvalidSetup(format!(
                "observation point {x} is not inside (0, π)"
            )));
        }
        Ok(Self {
            elements,
            n_params,
            obs_points,
        })
    }

    /// Midpoints of `k` equal cells of `(0, π)`.
    pub fn cell_midpoints(k: usize) -> Vec<f64> {
        (0..k).map(|i| (i as f64 + 0.5) * PI / k as f64).collect()
    }

    pub fn mesh_width(&self) -> f64 {
        PI / self.elements as f64
    }

    pub fn elements(&self) -> usize {
        self.elements
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn obs_points(&self) -> &[f64] {
        &self.obs_points
    }

    /// Centers of the parameter cells.
    pub fn param_nodes(&self) -> Vec<f64> {
        Self::cell_midpoints(self.n_params)
    }

    /// Stiffness plus consistent mass matrix on the interior nodes, as
    /// (diagonal, off-diagonal) of a symmetric tridiagonal matrix.
    fn system(&self) -> (f64, f64) {
        let h = self.mesh_width();
        (2.0 / h + 4.0 * h / 6.0, -1.0 / h + h / 6.0)
    }

    /// The assembled system matrix, dense. Only used for inspection.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        let (d, o) = self.system();
        let m = self.elements - 1;
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                d
            } else if i.abs_diff(j) == 1 {
                o
            } else {
                0.0
            }
        })
    }

    fn solve_tridiagonal(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, ForwardError> {
        let (d, o) = self.system();
        let m = rhs.len();
        let mut c = vec![0.0; m];
        let mut x = rhs.clone();
        let mut denom = d;
        if denom <= 0.0 {
            return Err(ForwardError::SolveFailed("singular FEM system".into()));
        }
        c[0] = o / denom;
        x[0] /= denom;
        for i in 1..m {
            denom = d - o * c[i - 1];
            if denom.abs() < 1e-300 {
                return Err(ForwardError::SolveFailed("singular FEM system".into()));
            }
            c[i] = o / denom;
            x[i] = (x[i] - o * x[i - 1]) / denom;
        }
        for i in (0..m - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        Ok(x)
    }

    /// Nodal values (boundary zeros included) for a general source, with the
    /// load vector integrated by 3-point Gauss quadrature per element.
    pub fn solve_with_source<F: Fn(f64) -> f64>(&self, f: F) -> Result<DVector<f64>, ForwardError> {
        let h = self.mesh_width();
        let gauss = [
            (-(0.6_f64).sqrt(), 5.0 / 9.0),
            (0.0, 8.0 / 9.0),
            ((0.6_f64).sqrt(), 5.0 / 9.0),
        ];
        let m = self.elements - 1;
        let mut load = DVector::zeros(m);
        for e in 0..self.elements {
            let x0 = e as f64 * h;
            for &(xi, w) in &gauss {
                let s = 0.5 * (xi + 1.0);
                let fx = f(x0 + s * h) * w * 0.5 * h;
                // left node e gets (1-s), right node e+1 gets s
                if e >= 1 {
                    load[e - 1] += fx * (1.0 - s);
                }
                if e + 1 <= m {
                    load[e] += fx * s;
                }
            }
        }
        let interior = self.solve_tridiagonal(&load)?;
        let mut p = DVector::zeros(self.elements + 1);
        p.rows_mut(1, m).copy_from(&interior);
        Ok(p)
    }

    /// Piecewise-linear interpolation of nodal values at `x`.
    pub fn interpolate(&self, nodal: &DVector<f64>, x: f64) -> f64 {
        let h = self.mesh_width();
        let s = (x / h).clamp(0.0, self.elements as f64);
        let k = (s.floor() as usize).min(self.elements - 1);
        let t = s - k as f64;
        (1.0 - t) * nodal[k] + t * nodal[k + 1]
    }

    /// Exact load of the piecewise-constant parameter basis: column `c` is
    /// `∫ 1_{cell c} φ_k` for every interior hat function `φ_k`.
    fn load_basis(&self) -> DMatrix<f64> {
        let h = self.mesh_width();
        let per_cell = self.elements / self.n_params;
        let m = self.elements - 1;
        let mut b = DMatrix::zeros(m, self.n_params);
        for e in 0..self.elements {
            let cell = e / per_cell;
            // each element contributes h/2 to both of its end nodes
            if e >= 1 {
                b[(e - 1, cell)] += 0.5 * h;
            }
            if e + 1 <= m {
                b[(e, cell)] += 0.5 * h;
            }
        }
        b
    }

    /// `A = O ∘ G`: observations of the FEM solution as a linear map of `u`.
    pub fn assemble(&self) -> Result<LinearForwardOperator, ForwardError> {
        let basis = self.load_basis();
        let m = self.elements - 1;
        let mut a = DMatrix::zeros(self.obs_points.len(), self.n_params);
        for c in 0..self.n_params {
            let interior = self.solve_tridiagonal(&basis.column(c).into_owned())?;
            let mut nodal = DVector::zeros(self.elements + 1);
            nodal.rows_mut(1, m).copy_from(&interior);
            for (k, &x) in self.obs_points.iter().enumerate() {
                a[(k, c)] = self.interpolate(&nodal, x);
            }
        }
        LinearForwardOperator::new(a)
    }

    /// Parameter field value at `x` for coefficient vector `u`.
    pub fn parameter_field(&self, u: &DVector<f64>, x: f64) -> f64 {
        let cell = ((x / PI * self.n_params as f64).floor() as usize).min(self.n_params - 1);
        u[cell]
    }
}

/// Assemble the linear operator for `n_params` cells observed at
/// `obs_points`, on the default mesh.
pub fn assemble_elliptic_1d(
    n_params: usize,
    obs_points: Vec<f64>,
) -> Result<LinearForwardOperator, ForwardError> {
    EllipticProblem1D::new(DEFAULT_ELEMENTS, n_params, obs_points)?.assemble()
}
