//! Ensemble container, observation-noise model and empirical moments.
//!
//! All moments use the `1/J` normalization, so a single particle has zero
//! covariance and `{(1,0), (-1,0)}` has unit variance in the first
//! coordinate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Errors raised by the dense linear-algebra layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("matrix is not symmetric positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("matrix is not symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),
    #[error("an ensemble needs at least one particle")]
    EmptyEnsemble,
}

/// An ordered collection of `J` particles in `R^n`.
///
/// Particles are stored as the columns of an `n x J` matrix. Cloning yields
/// an independent snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
}

impl Ensemble {
    pub fn from_matrix(particles: DMatrix<f64>) -> Result<Self, LinalgError> {
        if particles.ncols() == 0 {
            return Err(LinalgError::EmptyEnsemble);
        }
        Ok(Self { particles })
    }

    pub fn from_particles(particles: &[DVector<f64>]) -> Result<Self, LinalgError> {
        let first = particles.first().ok_or(LinalgError::EmptyEnsemble)?;
        let n = first.len();
        for p in particles {
            if p.len() != n {
                return Err(LinalgError::DimensionMismatch {
                    expected: n,
                    got: p.len(),
                    context: "particle dimension",
                });
            }
        }
        Ok(Self {
            particles: DMatrix::from_columns(particles),
        })
    }

    /// `j` copies of the same vector.
    pub fn replicate(v: &DVector<f64>, j: usize) -> Result<Self, LinalgError> {
        if j == 0 {
            return Err(LinalgError::EmptyEnsemble);
        }
        Ok(Self {
            particles: DMatrix::from_fn(v.len(), j, |i, _| v[i]),
        })
    }

    /// Parameter dimension `n`.
    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// Ensemble size `J`.
    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn particle(&self, j: usize) -> DVector<f64> {
        self.particles.column(j).into_owned()
    }

    pub fn particles(&self) -> Vec<DVector<f64>> {
        (0..self.size()).map(|j| self.particle(j)).collect()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn as_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.particles
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.particles
    }

    /// Columns `u^(j) - ū`.
    pub fn deviations(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut dev = self.particles.clone();
        for mut col in dev.column_iter_mut() {
            col -= &mean;
        }
        dev
    }

    pub fn mean(&self) -> DVector<f64> {
        empirical_mean(self)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        empirical_cov(self)
    }

    /// `(1/J) Σ |u^(j) - ū|²`, the trace of the empirical covariance.
    pub fn spread(&self) -> f64 {
        self.deviations().norm_squared() / self.size() as f64
    }
}

pub fn empirical_mean(e: &Ensemble) -> DVector<f64> {
    e.particles.column_mean()
}

pub fn empirical_cov(e: &Ensemble) -> DMatrix<f64> {
    let dev = e.deviations();
    let mut c = &dev * dev.transpose() / e.size() as f64;
    // The product is symmetric up to rounding; make it exact.
    c = (&c + c.transpose()) * 0.5;
    c
}

/// Cross covariance `(1/J) Σ (u^(j) - ū) ⊗ (g^(j) - ḡ)` between the
/// particles and their images, returned as an `n x K` matrix.
///
/// `images` holds one image per column, in particle order.
pub fn cross_cov(e: &Ensemble, images: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    if images.ncols() != e.size() {
        return Err(LinalgError::DimensionMismatch {
            expected: e.size(),
            got: images.ncols(),
            context: "number of images",
        });
    }
    let dev = e.deviations();
    let image_mean = images.column_mean();
    let mut image_dev = images.clone();
    for mut col in image_dev.column_iter_mut() {
        col -= &image_mean;
    }
    Ok(dev * image_dev.transpose() / e.size() as f64)
}

/// Output covariance `(1/J) Σ (g^(j) - ḡ) ⊗ (g^(j) - ḡ)`.
pub fn image_cov(images: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = images.column_mean();
    let mut dev = images.clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    &dev * dev.transpose() / images.ncols() as f64
}

/// Gaussian observation noise `N(0, Γ)` with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    gamma: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl NoiseModel {
    pub fn new(gamma: DMatrix<f64>) -> Result<Self, LinalgError> {
        if !gamma.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: gamma.nrows(),
                got: gamma.ncols(),
                context: "noise covariance must be square",
            });
        }
        let scale = gamma.amax().max(f64::MIN_POSITIVE);
        let asym = (&gamma - gamma.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(LinalgError::NotSymmetric(asym));
        }
        let chol = Cholesky::new(gamma.clone())
            .ok_or(LinalgError::NotPositiveDefinite("noise covariance"))?;
        Ok(Self { gamma, chol })
    }

    /// `Γ = γ² I_K`.
    pub fn isotropic(k: usize, std_dev: f64) -> Result<Self, LinalgError> {
        Self::new(DMatrix::identity(k, k) * (std_dev * std_dev))
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    /// Lower-triangular factor `L` with `Γ = L Lᵀ`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `Γ^{-1} r`.
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(r)
    }

    /// `Γ^{-1} R` applied column by column.
    pub fn whiten_matrix(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(r)
    }

    /// `⟨a, b⟩_Γ = aᵀ Γ^{-1} b`.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&self.chol.solve(b))
    }

    /// `‖r‖²_Γ = rᵀ Γ^{-1} r`.
    pub fn norm_squared(&self, r: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(r)
            .expect("Cholesky factor has a nonzero diagonal");
        z.norm_squared()
    }
}

/// `½ rᵀ Γ^{-1} r`.
pub fn weighted_misfit(r: &DVector<f64>, noise: &NoiseModel) -> Result<f64, LinalgError> {
    if r.len() != noise.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: noise.dim(),
            got: r.len(),
            context: "residual length",
        });
    }
    Ok(0.5 * noise.norm_squared(r))
}
