use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{fd_step, ForwardError, ForwardModel};
use crate::priors::KlPrior;

/// `-∇·(exp(u) ∇p) = 1` on the unit square with `p = 0` on the boundary,
/// discretized by the 5-point centred scheme. The log-permeability `u` is
/// given by KL coefficients, and the observations are point values of `p`.
#[derive(Debug, Clone)]
pub struct DarcyProblem2D {
    cells: usize,
    prior: KlPrior,
    obs_points: Vec<(f64, f64)>,
    /// KL modes at the midpoints of x-directed faces `(x_{i+1/2}, y_j)`.
    x_faces: DMatrix<f64>,
    /// KL modes at the midpoints of y-directed faces `(x_i, y_{j+1/2})`.
    y_faces: DMatrix<f64>,
}

/// Pressure on the full `(cells+1)²` node grid, boundary included.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureField {
    cells: usize,
    values: DVector<f64>,
}

impl PressureField {
    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.values[i + j * (self.cells + 1)]
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// Bilinear interpolation.
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let n = self.cells as f64;
        let sx = (x * n).clamp(0.0, n);
        let sy = (y * n).clamp(0.0, n);
        let i = (sx.floor() as usize).min(self.cells - 1);
        let j = (sy.floor() as usize).min(self.cells - 1);
        let (tx, ty) = (sx - i as f64, sy - j as f64);
        (1.0 - tx) * (1.0 - ty) * self.node(i, j)
            + tx * (1.0 - ty) * self.node(i + 1, j)
            + (1.0 - tx) * ty * self.node(i, j + 1)
            + tx * ty * self.node(i + 1, j + 1)
    }
}

impl DarcyProblem2D {
    pub fn new(cells: usize, prior: KlPrior, obs_points: Vec<(f64, f64)>) -> Result<Self, ForwardError> {
        if cells < 2 {
            return Err(ForwardError::InvalidSetup("need at least two cells per side".into()));
        }
        if let Some(p) = obs_points
            .iter()
            .find(|(x, y)| !(*x > 0.0 && *x < 1.0 && *y > 0.0 && *y < 1.0))
        {
            return Err(ForwardError::InvalidSetup(format!(
                "observation point {p:?} is not inside the unit square"
            )));
        }
        let h = 1.0 / cells as f64;
        let modes = prior.truncation();
        let x_faces = DMatrix::from_fn(cells * (cells - 1), modes, |row, m| {
            let (i, j) = (row % cells, row / cells + 1);
            prior.eigenfunction(m, (i as f64 + 0.5) * h, j as f64 * h)
        });
        let y_faces = DMatrix::from_fn(cells * (cells - 1), modes, |row, m| {
            let (i, j) = (row % (cells - 1) + 1, row / (cells - 1));
            prior.eigenfunction(m, i as f64 * h, (j as f64 + 0.5) * h)
        });
        Ok(Self {
            cells,
            prior,
            obs_points,
            x_faces,
            y_faces,
        })
    }

    /// The `4 x 4` grid of cell centres of a uniform `4 x 4` partition.
    pub fn default_observation_points() -> Vec<(f64, f64)> {
        let c: Vec<f64> = (0..4).map(|a| (2 * a + 1) as f64 / 8.0).collect();
        c.iter().flat_map(|&y| c.iter().map(move |&x| (x, y))).collect()
    }

    /// Scale mode `j` by `scales[j]`, so the field is `Σ s_j u_j φ_j`.
    /// With `s_j = √λ_j` the parameters are whitened KL coordinates.
    pub fn with_mode_scales(mut self, scales: Vec<f64>) -> Result<Self, ForwardError> {
        if scales.len() != self.prior.truncation() {
            return Err(ForwardError::DimensionMismatch {
                expected: self.prior.truncation(),
                got: scales.len(),
                context: "mode scales",
            });
        }
        for (j, s) in scales.iter().enumerate() {
            self.x_faces.column_mut(j).scale_mut(*s);
            self.y_faces.column_mut(j).scale_mut(*s);
        }
        Ok(self)
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn prior(&self) -> &KlPrior {
        &self.prior
    }

    pub fn obs_points(&self) -> &[(f64, f64)] {
        &self.obs_points
    }

    /// Pressure for KL coefficients `u`.
    pub fn pressure(&self, u: &DVector<f64>) -> Result<PressureField, ForwardError> {
        if u.len() != self.prior.truncation() {
            return Err(ForwardError::DimensionMismatch {
                expected: self.prior.truncation(),
                got: u.len(),
                context: "KL coefficients",
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(ForwardError::NonFinite);
        }
        let kx = (&self.x_faces * u).map(f64::exp);
        let ky = (&self.y_faces * u).map(f64::exp);
        self.solve(&kx, &ky)
    }

    /// Pressure for an explicit log-permeability field.
    pub fn pressure_for_field<F: Fn(f64, f64) -> f64>(&self, log_kappa: F) -> Result<PressureField, ForwardError> {
        let n = self.cells;
        let h = 1.0 / n as f64;
        let kx = DVector::from_fn(n * (n - 1), |row, _| {
            let (i, j) = (row % n, row / n + 1);
            log_kappa((i as f64 + 0.5) * h, j as f64 * h).exp()
        });
        let ky = DVector::from_fn(n * (n - 1), |row, _| {
            let (i, j) = (row % (n - 1) + 1, row / (n - 1));
            log_kappa(i as f64 * h, (j as f64 + 0.5) * h).exp()
        });
        self.solve(&kx, &ky)
    }

    pub fn observe(&self, p: &PressureField) -> DVector<f64> {
        DVector::from_iterator(self.obs_points.len(), self.obs_points.iter().map(|&(x, y)| p.at(x, y)))
    }

    fn solve(&self, kx: &DVector<f64>, ky: &DVector<f64>) -> Result<PressureField, ForwardError> {
        let n = self.cells;
        let m = n - 1;
        let h = 1.0 / n as f64;
        let unknowns = m * m;
        let bw = m;
        // face permeabilities; faces on the boundary only touch the diagonal
        let kx_at = |i: usize, j: usize| kx[i + (j - 1) * n]; // face between x-nodes i and i+1 on row j
        let ky_at = |i: usize, j: usize| ky[(i - 1) + j * m]; // face between y-nodes j and j+1 on column i
        let mut band = BandedSpd::zeros(unknowns, bw);
        for j in 1..n {
            for i in 1..n {
                let r = (i - 1) + (j - 1) * m;
                let (w, e) = (kx_at(i - 1, j), kx_at(i, j));
                let (s, nn) = (ky_at(i, j - 1), ky_at(i, j));
                band.set(r, r, w + e + s + nn);
                if i > 1 {
                    band.set(r, r - 1, -w);
                }
                if j > 1 {
                    band.set(r, r - m, -s);
                }
            }
        }
        band.factor()?;
        let rhs = DVector::from_element(unknowns, h * h);
        let interior = band.solve(rhs);
        let mut values = DVector::zeros((n + 1) * (n + 1));
        for j in 1..n {
            for i in 1..n {
                values[i + j * (n + 1)] = interior[(i - 1) + (j - 1) * m];
            }
        }
        Ok(PressureField { cells: n, values })
    }
}

impl ForwardModel for DarcyProblem2D {
    fn param_dim(&self) -> usize {
        self.prior.truncation()
    }

    fn obs_dim(&self) -> usize {
        self.obs_points.len()
    }

    fn apply(&self, u: &DVector<f64>) -> Result<DVector<f64>, ForwardError> {
        Ok(self.observe(&self.pressure(u)?))
    }

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>, ForwardError> {
        let step = fd_step(u);
        let base = self.apply(u)?;
        let cols = (0..u.len())
            .into_par_iter()
            .map(|j| {
                let mut shifted = u.clone();
                shifted[j] += step;
                self.apply(&shifted).map(|g| (g - &base) / step)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    fn apply_ensemble(&self, e: &crate::ensemble::Ensemble) -> Result<DMatrix<f64>, ForwardError> {
        let cols = (0..e.size())
            .into_par_iter()
            .map(|j| self.apply(&e.particle(j)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DMatrix::from_columns(&cols))
    }
}

/// Symmetric positive definite band matrix with in-place Cholesky.
/// Row `r` stores entries `(r, r - d)` for `d = 0..=bw`.
struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c <= r && r - c <= self.bw);
        r * (self.bw + 1) + (r - c)
    }

    fn set(&mut self, r: usize, c: usize, v: f64) {
        let k = self.idx(r, c);
        self.data[k] = v;
    }

    fn get(&self, r: usize, c: usize) -> f64 {
        self.data[self.idx(r, c)]
    }

    fn factor(&mut self) -> Result<(), ForwardError> {
        for j in 0..self.n {
            let lo = j.saturating_sub(self.bw);
            let mut d = self.get(j, j);
            for k in lo..j {
                let l = self.get(j, k);
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(ForwardError::SolveFailed(format!(
                    "Darcy system not positive definite at row {j}"
                )));
            }
            let d = d.sqrt();
            self.set(j, j, d);
            for i in j + 1..(j + self.bw + 1).min(self.n) {
                let lo_i = i.saturating_sub(self.bw);
                let mut s = self.get(i, j);
                for k in lo_i.max(lo)..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                self.set(i, j, s / d);
            }
        }
        Ok(())
    }

    fn solve(&self, mut b: DVector<f64>) -> DVector<f64> {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.get(i, k) * b[k];
            }
            b[i] = s / self.get(i, i);
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.get(k, i) * b[k];
            }
            b[i] = s / self.get(i, i);
        }
        b
    }
}
