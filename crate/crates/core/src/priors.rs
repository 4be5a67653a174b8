//! Gaussian priors through Karhunen–Loève expansions, and initial ensembles.
//!
//! The covariance `σ² (I - Δ)^{-ν}` uses the Dirichlet Laplacian on the unit
//! square, so eigenpairs are known in closed form:
//! `λ_{k,l} = σ² (1 + π²(k² + l²))^{-ν}` with eigenfunctions
//! `2 sin(kπx) sin(lπy)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::constraints::BoxConstraint;
use crate::ensemble::Ensemble;

/// Distance kept from every face when an initial ensemble is delivered to
/// a constrained flow.
pub const INTERIOR_PUSHBACK: f64 = 1e-6;

/// Sine modes in the Fourier initial ensemble.
pub const FOURIER_MODES: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("smoothness ν = {nu} must exceed d/2 = 1")]
    NotSmoothEnough { nu: f64 },
    #[error("truncation {requested} exceeds the {available} modes the grid resolves")]
    TruncationTooLarge { requested: usize, available: usize },
    #[error("invalid prior setup: {0}")]
    Invalid(String),
}

/// Truncated KL expansion of `N(0, σ²(I - Δ)^{-ν})` on `(0,1)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlPrior {
    grid_cells: usize,
    sigma2: f64,
    nu: f64,
    modes: Vec<(usize, usize)>,
    eigenvalues: Vec<f64>,
}

/// Build the top-`truncation` eigenpairs on a grid with `grid_cells` cells
/// per side (mesh width `1 / grid_cells`).
pub fn build_kl_prior(
    grid_cells: usize,
    sigma2: f64,
    nu: f64,
    truncation: usize,
) -> Result<KlPrior, PriorError> {
    if !(nu > 1.0) {
        return Err(PriorError::NotSmoothEnough { nu });
    }
    if !(sigma2 > 0.0) {
        return Err(PriorError::Invalid(format!("σ² = {sigma2} must be positive")));
    }
    if grid_cells < 2 {
        return Err(PriorError::Invalid("grid needs at least two cells per side".into()));
    }
    let per_side = grid_cells - 1;
    let available = per_side * per_side;
    if truncation > available || truncation == 0 {
        return Err(PriorError::TruncationTooLarge {
            requested: truncation,
            available,
        });
    }
    let mut modes: Vec<(usize, usize)> = (1..=per_side)
        .flat_map(|k| (1..=per_side).map(move |l| (k, l)))
        .collect();
    modes.sort_by_key(|&(k, l)| (k * k + l * l, k, l));
    modes.truncate(truncation);
    let eigenvalues = modes
        .iter()
        .map(|&(k, l)| kl_eigenvalue(sigma2, nu, k, l))
        .collect();
    Ok(KlPrior {
        grid_cells,
        sigma2,
        nu,
        modes,
        eigenvalues,
    })
}

pub fn kl_eigenvalue(sigma2: f64, nu: f64, k: usize, l: usize) -> f64 {
    let wave = PI * PI * ((k * k + l * l) as f64);
    sigma2 * (1.0 + wave).powf(-nu)
}

impl KlPrior {
    pub fn truncation(&self) -> usize {
        self.modes.len()
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_cells
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn modes(&self) -> &[(usize, usize)] {
        &self.modes
    }

    /// Descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Prior covariance of the coefficient vector: `diag(λ_j)`.
    pub fn coefficient_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues))
    }

    /// `φ_j(x, y)`.
    pub fn eigenfunction(&self, j: usize, x: f64, y: f64) -> f64 {
        let (k, l) = self.modes[j];
        2.0 * (k as f64 * PI * x).sin() * (l as f64 * PI * y).sin()
    }

    /// Eigenfunctions at the interior grid nodes, one mode per column.
    /// Rows enumerate nodes `(i, j)` with `i` fastest.
    pub fn grid_eigenfunctions(&self) -> DMatrix<f64> {
        let n = self.grid_cells - 1;
        let h = 1.0 / self.grid_cells as f64;
        DMatrix::from_fn(n * n, self.truncation(), |row, j| {
            let (ix, iy) = (row % n + 1, row / n + 1);
            self.eigenfunction(j, ix as f64 * h, iy as f64 * h)
        })
    }

    /// Field `Σ_j c_j φ_j` at a point, for coefficient vector `c`.
    pub fn field_at(&self, coefficients: &DVector<f64>, x: f64, y: f64) -> f64 {
        (0..self.truncation())
            .map(|j| coefficients[j] * self.eigenfunction(j, x, y))
            .sum()
    }

    /// Coefficients `√λ_j ξ_j`.
    pub fn coefficients_from_xi(&self, xi: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.truncation(), |j, _| self.eigenvalues[j].sqrt() * xi[j])
    }
}

/// `count` independent KL coefficient draws, reproducible from `seed`.
pub fn kl_sample(prior: &KlPrior, count: usize, seed: u64) -> Ensemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<DVector<f64>> = (0..count.max(1))
        .map(|_| {
            let xi = DVector::from_fn(prior.truncation(), |_, _| StandardNormal.sample(&mut rng));
            prior.coefficients_from_xi(&xi)
        })
        .collect();
    Ensemble::from_particles(&cols).expect("at least one particle")
}

/// Random sine series `Σ_{k≤10} ξ_k sin(k x)`, `ξ_k ~ N(0, k^{-2})`,
/// evaluated at the `n` cell midpoints of `(0, π)`, then moved strictly
/// inside the box.
pub fn fourier_initial_ensemble(n: usize, count: usize, seed: u64, b: &BoxConstraint) -> Ensemble {
    let nodes: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * PI / n as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<DVector<f64>> = (0..count.max(1))
        .map(|_| {
            let xi: Vec<f64> = (1..=FOURIER_MODES)
                .map(|k| {
                    Normal::new(0.0, 1.0 / k as f64)
                        .expect("positive standard deviation")
                        .sample(&mut rng)
                })
                .collect();
            let u = DVector::from_fn(n, |i, _| {
                xi.iter()
                    .enumerate()
                    .map(|(k, c)| c * ((k + 1) as f64 * nodes[i]).sin())
                    .sum()
            });
            b.push_interior(&u, INTERIOR_PUSHBACK)
        })
        .collect();
    Ensemble::from_particles(&cols).expect("at least one particle")
}
