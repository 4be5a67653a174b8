use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DarcyConfig, ExperimentConfig, LinearEllipticConfig, ProblemConfig};
use super::ExperimentError;
use crate::constraints::{BoxConstraint, KktPoint};
use crate::ensemble::{Ensemble, NoiseModel};
use crate::forward::{DarcyProblem2D, EllipticProblem1D, ForwardModel, InverseProblem, LinearProblem};
use crate::oracle::{solve_box_ls, solve_box_nls, OracleOptions};
use crate::priors::{build_kl_prior, fourier_initial_ensemble, INTERIOR_PUSHBACK};

/// Everything the methods of one experiment share.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub problem: InverseProblem,
    pub bounds: BoxConstraint,
    pub truth: DVector<f64>,
    pub initial: Ensemble,
    /// Prior covariance of the parameters, when the problem has one.
    pub prior_cov: Option<DMatrix<f64>>,
    /// Reference KKT point of the box-constrained misfit.
    pub optimum: KktPoint,
}

/// `sin 3x + 0.75 sin x`, the shape of the linear truth.
pub fn linear_truth_shape(x: f64) -> f64 {
    (3.0 * x).sin() + 0.75 * x.sin()
}

fn setup_error(context: &str) -> impl Fn(String) -> ExperimentError + '_ {
    move |e| ExperimentError::Setup(format!("{context}: {e}"))
}

fn linear_setup(
    c: &LinearEllipticConfig,
    bounds: BoxConstraint,
    j: usize,
    seed: u64,
) -> Result<ExperimentSetup, ExperimentError> {
    let points: Vec<f64> = EllipticProblem1D::cell_midpoints(c.params)
        .into_iter()
        .take(c.observations)
        .collect();
    let model = EllipticProblem1D::new(c.elements, c.params, points).map_err(|e| setup_error("forward model")(e.to_string()))?;
    let operator = model.assemble().map_err(|e| setup_error("forward model")(e.to_string()))?;
    let truth = DVector::from_iterator(
        c.params,
        model.param_nodes().into_iter().map(|x| c.truth_scale * linear_truth_shape(x)),
    );
    let data = operator.matrix() * &truth;
    let noise = NoiseModel::isotropic(c.observations, c.noise_std).map_err(|e| setup_error("noise")(e.to_string()))?;
    let linear = LinearProblem::new(operator, data, noise).map_err(|e| setup_error("problem")(e.to_string()))?;
    let optimum = solve_box_ls(&linear, &bounds).map_err(|e| ExperimentError::Solver(format!("reference solver: {e}")))?;
    let initial = fourier_initial_ensemble(c.params, j, seed, &bounds);
    Ok(ExperimentSetup {
        problem: InverseProblem::linear(linear),
        bounds,
        truth,
        initial,
        prior_cov: None,
        optimum,
    })
}

fn darcy_setup(c: &DarcyConfig, bounds: BoxConstraint, j: usize, seed: u64) -> Result<ExperimentSetup, ExperimentError> {
    let prior = build_kl_prior(c.cells, c.sigma2, c.nu, c.modes).map_err(|e| setup_error("prior")(e.to_string()))?;
    let scales: Vec<f64> = prior.eigenvalues().iter().map(|l| l.sqrt()).collect();
    let model = DarcyProblem2D::new(c.cells, prior, DarcyProblem2D::default_observation_points())
        .and_then(|m| m.with_mode_scales(scales))
        .map_err(|e| setup_error("forward model")(e.to_string()))?;
    let k = model.obs_dim();
    let mut truth_rng = ChaCha8Rng::seed_from_u64(c.truth_seed);
    let truth = DVector::from_fn(c.modes, |_, _| {
        let z: f64 = StandardNormal.sample(&mut truth_rng);
        c.truth_scale * z
    });
    let data = model.apply(&truth).map_err(|e| setup_error("truth")(e.to_string()))?;
    let noise = NoiseModel::isotropic(k, c.noise_std).map_err(|e| setup_error("noise")(e.to_string()))?;
    let problem = InverseProblem::new(Arc::new(model), data, noise).map_err(|e| setup_error("problem")(e.to_string()))?;
    // whitened coordinates: the prior is N(0, I)
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<DVector<f64>> = (0..j)
        .map(|_| {
            let xi = DVector::from_fn(c.modes, |_, _| StandardNormal.sample(&mut rng));
            bounds.push_interior(&xi, INTERIOR_PUSHBACK)
        })
        .collect();
    let initial = Ensemble::from_particles(&draws).map_err(|e| setup_error("initial ensemble")(e.to_string()))?;
    let optimum = solve_box_nls(&problem, &bounds, &bounds.project(&truth), &OracleOptions { tol: 1e-8, max_iter: 500 })
        .map_err(|e| ExperimentError::Solver(format!("reference solver: {e}")))?;
    Ok(ExperimentSetup {
        problem,
        bounds,
        truth,
        initial,
        prior_cov: Some(DMatrix::identity(c.modes, c.modes)),
        optimum,
    })
}

/// Build the problem, box, truth, initial ensemble and reference optimum.
pub fn build_setup(cfg: &ExperimentConfig) -> Result<ExperimentSetup, ExperimentError> {
    cfg.validate()?;
    let bounds = cfg.bounds()?;
    let (j, seed) = (cfg.method.ensemble_size, cfg.method.seed);
    match &cfg.problem {
        ProblemConfig::LinearElliptic(c) => linear_setup(c, bounds, j, seed),
        ProblemConfig::Darcy(c) => darcy_setup(c, bounds, j, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::kkt_residual;

    fn config(json: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(json).unwrap()
    }

    #[test]
    fn linear_truth_leaves_the_box_in_several_components() {
        let s = build_setup(&config(r#"{"problem": {"kind": "linear_elliptic"}}"#)).unwrap();
        let outside = s.truth.iter().filter(|v| v.abs() > 0.5).count();
        assert!(outside >= 3, "{outside}");
        assert!(s.bounds.ensemble_strictly_interior(&s.initial));
        let lp = s.problem.as_linear().unwrap();
        assert!(kkt_residual(&s.optimum.u_star, &s.optimum.multipliers, &lp, &s.bounds) < 1e-6);
    }

    #[test]
    fn low_observation_case_keeps_the_first_points() {
        let s = build_setup(&config(r#"{"problem": {"kind": "linear_elliptic", "observations": 15}}"#)).unwrap();
        assert_eq!(s.problem.data.len(), 15);
        let m = s.problem.as_linear().unwrap().normal_matrix();
        let ev = m.symmetric_eigen().eigenvalues;
        assert!(ev.min() < 1e-8 * ev.max());
    }

    #[test]
    fn seed_controls_only_the_ensemble() {
        let a = build_setup(&config(r#"{"problem": {"kind": "linear_elliptic"}, "method": {"seed": 3}}"#)).unwrap();
        let b = build_setup(&config(r#"{"problem": {"kind": "linear_elliptic"}, "method": {"seed": 3}}"#)).unwrap();
        let c = build_setup(&config(r#"{"problem": {"kind": "linear_elliptic"}, "method": {"seed": 4}}"#)).unwrap();
        assert_eq!(a.initial, b.initial);
        assert_ne!(a.initial, c.initial);
        assert_eq!(a.problem.data, c.problem.data);
    }

    #[test]
    fn data_is_the_clean_image_of_the_truth() {
        let s = build_setup(&config(r#"{"problem": {"kind": "linear_elliptic"}}"#)).unwrap();
        let clean = s.problem.forward.apply(&s.truth).unwrap();
        assert_eq!(s.problem.data, clean);
    }

    #[test]
    fn darcy_reference_optimum_is_stationary() {
        let s = build_setup(&config(r#"{"problem": {"kind": "darcy"}}"#)).unwrap();
        assert!(s.optimum.stationarity_residual < 1e-6, "{}", s.optimum.stationarity_residual);
        assert!(s.bounds.contains(&s.optimum.u_star, 0.0));
        let outside = s.truth.iter().filter(|v| v.abs() > 1.0).count();
        assert!(outside > 0);
    }
}
