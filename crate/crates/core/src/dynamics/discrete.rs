use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FlowError;
use crate::constraints::BoxConstraint;
use crate::ensemble::{cross_cov, image_cov, Ensemble};
use crate::forward::InverseProblem;

/// `u^(j) + C^{up} S^{-1} (y^(j) - G(u^(j)))` with `S = C^{pp} + noise_cov`.
fn kalman_update(
    e: &Ensemble,
    images: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<Ensemble, FlowError> {
    let cup = cross_cov(e, images)?;
    let s = image_cov(images) + noise_cov;
    let chol = s.cholesky().ok_or(FlowError::SingularSystem)?;
    let innovations = targets - images;
    let shift = cup * chol.solve(&innovations);
    Ok(Ensemble::from_matrix(e.as_matrix() + shift)?)
}

/// One analysis step with perturbed observations `y + η^(j)`,
/// `η^(j) ~ N(0, Γ)`.
///
/// A single `u64` is taken from `rng`; particle `j` then draws its noise
/// from its own stream `j` of a ChaCha generator seeded with that value, so
/// results do not depend on evaluation order.
pub fn eki_discrete_step<R: Rng + ?Sized>(
    e: &Ensemble,
    problem: &InverseProblem,
    rng: &mut R,
) -> Result<Ensemble, FlowError> {
    let images = problem.forward.apply_ensemble(e)?;
    let k = problem.data.len();
    let l = problem.noise.cholesky_factor();
    let base: u64 = rng.random();
    let mut targets = DMatrix::zeros(k, e.size());
    for j in 0..e.size() {
        let mut stream = ChaCha8Rng::seed_from_u64(base);
        stream.set_stream(j as u64);
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut stream));
        targets.set_column(j, &(&problem.data + &l * z));
    }
    kalman_update(e, &images, problem.noise.covariance(), &targets)
}

/// Analysis step without perturbations (every particle sees `y`).
pub fn eki_discrete_step_unperturbed(e: &Ensemble, problem: &InverseProblem) -> Result<Ensemble, FlowError> {
    let images = problem.forward.apply_ensemble(e)?;
    let targets = replicate_data(&problem.data, e.size());
    kalman_update(e, &images, problem.noise.covariance(), &targets)
}

fn replicate_data(y: &DVector<f64>, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(y.len(), j, |i, _| y[i])
}

/// Project, update with noise covariance `Γ / h`, project again.
pub fn projected_eki_step(
    e: &Ensemble,
    problem: &InverseProblem,
    b: &BoxConstraint,
    h: f64,
) -> Result<Ensemble, FlowError> {
    if !(h > 0.0) {
        return Err(FlowError::InvalidSpec(format!("step size {h} must be positive")));
    }
    let projected = b.project_ensemble(e);
    let images = problem.forward.apply_ensemble(&projected)?;
    let scaled_noise = problem.noise.covariance() / h;
    let targets = replicate_data(&problem.data, e.size());
    let updated = kalman_update(&projected, &images, &scaled_noise, &targets)?;
    Ok(b.project_ensemble(&updated))
}
