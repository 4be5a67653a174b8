//! Adaptive Dormand–Prince 5(4) integration of ensemble flows.
//!
//! The state is the `n x J` particle matrix. Steps are clamped so that every
//! checkpoint is hit exactly; the proposed step size survives the clamp.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{Flow, FlowError};
use crate::ensemble::Ensemble;

#[derive(Debug, Error, Clone)]
pub enum IntegrateError {
    #[error("step size underflow at t = {t:e} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64, state: Box<Ensemble> },
    #[error("step budget of {max_steps} exhausted at t = {t:e}")]
    TooManySteps {
        t: f64,
        max_steps: usize,
        state: Box<Ensemble>,
    },
    #[error("right-hand side failed at t = {t:e}: {source}")]
    Rhs { t: f64, source: FlowError },
    #[error("initial ensemble is outside the domain of the flow")]
    InitialStateOutsideDomain,
    #[error("invalid integration settings: {0}")]
    InvalidConfig(String),
}

impl IntegrateError {
    /// Time at which the integration stopped, when there is one.
    pub fn time(&self) -> Option<f64> {
        match self {
            Self::StepUnderflow { t, .. } | Self::TooManySteps { t, .. } | Self::Rhs { t, .. } => Some(*t),
            _ => None,
        }
    }
}

/// A right-hand side `du/dt = f(t, u)` on ensembles.
pub trait EnsembleRhs {
    fn eval(&self, t: f64, e: &Ensemble) -> Result<DMatrix<f64>, FlowError>;

    /// Accepted states must satisfy this.
    fn in_domain(&self, _e: &Ensemble) -> bool {
        true
    }
}

impl EnsembleRhs for Flow {
    fn eval(&self, t: f64, e: &Ensemble) -> Result<DMatrix<f64>, FlowError> {
        self.rhs(t, e)
    }

    fn in_domain(&self, e: &Ensemble) -> bool {
        Flow::in_domain(self, e)
    }
}

/// Wraps a closure as an unconstrained right-hand side.
pub struct FnRhs<F>(pub F);

impl<F> EnsembleRhs for FnRhs<F>
where
    F: Fn(f64, &Ensemble) -> Result<DMatrix<f64>, FlowError>,
{
    fn eval(&self, t: f64, e: &Ensemble) -> Result<DMatrix<f64>, FlowError> {
        (self.0)(t, e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationConfig {
    pub t_end: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step size; `None` means unbounded.
    pub max_step: Option<f64>,
    /// Number of log-spaced checkpoints after `t = 0`.
    pub checkpoints: usize,
    pub feasibility_guard: bool,
    pub max_steps: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            t_end: 1e6,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            max_step: None,
            checkpoints: 65,
            feasibility_guard: true,
            max_steps: 20_000_000,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<(), IntegrateError> {
        let bad = |m: String| Err(IntegrateError::InvalidConfig(m));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end = {} must be positive and finite", self.t_end));
        }
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return bad(format!("max_step = {h} must be positive"));
            }
        }
        if self.checkpoints < 2 {
            return bad("need at least two checkpoints".into());
        }
        Ok(())
    }
}

/// `t = 0` followed by `count` log-spaced times from `1e-2` to `t_end`.
///
/// When `t_end ≤ 1e-2` the log grid starts two decades below `t_end`.
pub fn checkpoint_grid(t_end: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2, "checkpoint grid needs at least two points");
    let start = if t_end > 1e-2 { 1e-2 } else { t_end * 1e-2 };
    let (l0, l1) = (start.log10(), t_end.log10());
    let mut times = Vec::with_capacity(count + 1);
    times.push(0.0);
    for k in 0..count {
        times.push(10f64.powf(l0 + (l1 - l0) * k as f64 / (count - 1) as f64));
    }
    times[1] = start;
    times[count] = t_end;
    times
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct IntegrationStats {
    pub accepted: usize,
    pub rejected: usize,
    pub domain_rejections: usize,
    pub rhs_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<Ensemble>,
    pub stats: IntegrationStats,
}

impl Trajectory {
    pub fn last(&self) -> &Ensemble {
        self.snapshots.last().expect("a trajectory holds at least the initial state")
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// Step-size controller (Hairer, Nørsett & Wanner, DOPRI5 defaults with PI stabilization).
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const EXPO: f64 = 0.2 - BETA * 0.75;

enum StepOutcome {
    Accepted { y: DMatrix<f64>, k_last: DMatrix<f64>, err: f64 },
    Rejected { err: f64 },
    LeftDomain,
}

struct Stepper<'a, R: EnsembleRhs + ?Sized> {
    rhs: &'a R,
    cfg: &'a IntegrationConfig,
    stats: IntegrationStats,
}

impl<R: EnsembleRhs + ?Sized> Stepper<'_, R> {
    fn eval(&mut self, t: f64, y: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>, IntegrateError> {
        self.stats.rhs_evaluations += 1;
        let e = Ensemble::from_matrix(y.clone()).expect("state keeps its shape");
        match self.rhs.eval(t, &e) {
            Ok(k) if k.iter().all(|v| v.is_finite()) => Ok(Some(k)),
            Ok(_) => Ok(None),
            Err(err) if self.cfg.feasibility_guard && err.is_domain_exit() => Ok(None),
            Err(source) => Err(IntegrateError::Rhs { t, source }),
        }
    }

    fn error_norm(&self, y: &DMatrix<f64>, y_new: &DMatrix<f64>, err: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for ((a, b), e) in y.iter().zip(y_new.iter()).zip(err.iter()) {
            let sc = self.cfg.abs_tol + self.cfg.rel_tol * a.abs().max(b.abs());
            acc += (e / sc).powi(2);
        }
        (acc / y.len() as f64).sqrt()
    }

    fn try_step(&mut self, t: f64, y: &DMatrix<f64>, k1: &DMatrix<f64>, h: f64) -> Result<StepOutcome, IntegrateError> {
        macro_rules! stage {
            ($tt:expr, $yy:expr) => {
                match self.eval($tt, &$yy)? {
                    Some(k) => k,
                    None => return Ok(StepOutcome::LeftDomain),
                }
            };
        }
        let k2 = stage!(t + C2 * h, y + k1 * (h * A21));
        let k3 = stage!(t + C3 * h, y + (k1 * A31 + &k2 * A32) * h);
        let k4 = stage!(t + C4 * h, y + (k1 * A41 + &k2 * A42 + &k3 * A43) * h);
        let k5 = stage!(t + C5 * h, y + (k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h);
        let k6 = stage!(t + h, y + (k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h);
        let y_new = y + (k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
        if self.cfg.feasibility_guard {
            let e = Ensemble::from_matrix(y_new.clone()).expect("state keeps its shape");
            if !self.rhs.in_domain(&e) {
                return Ok(StepOutcome::LeftDomain);
            }
        }
        let k7 = stage!(t + h, y_new);
        let err_vec = (k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        let err = self.error_norm(y, &y_new, &err_vec);
        if !err.is_finite() {
            return Ok(StepOutcome::Rejected { err: f64::INFINITY });
        }
        if err <= 1.0 {
            Ok(StepOutcome::Accepted { y: y_new, k_last: k7, err })
        } else {
            Ok(StepOutcome::Rejected { err })
        }
    }

    fn initial_step(&mut self, t: f64, y: &DMatrix<f64>, k1: &DMatrix<f64>, t_span: f64) -> Result<f64, IntegrateError> {
        let scale = |v: &DMatrix<f64>, s: &DMatrix<f64>| {
            let mut acc = 0.0;
            for (a, b) in v.iter().zip(s.iter()) {
                acc += (a / (self.cfg.abs_tol + self.cfg.rel_tol * b.abs())).powi(2);
            }
            (acc / v.len() as f64).sqrt()
        };
        let d0 = scale(y, y);
        let d1 = scale(k1, y);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(t_span);
        let y1 = y + k1 * h0;
        let h1 = match self.eval(t + h0, &y1)? {
            Some(k2) => {
                let d2 = scale(&(k2 - k1), y) / h0;
                let big = d1.max(d2);
                if big <= 1e-15 {
                    (h0 * 1e-3).max(1e-6)
                } else {
                    (0.01 / big).powf(0.2)
                }
            }
            None => h0 * 1e-3,
        };
        Ok((100.0 * h0).min(h1).min(t_span))
    }
}

/// Integrate `rhs` from `e0` at `t = 0` through `times` (ascending, first
/// entry 0), returning the ensemble at each requested time.
pub fn integrate_at<R: EnsembleRhs + ?Sized>(
    rhs: &R,
    e0: &Ensemble,
    times: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Trajectory, IntegrateError> {
    let mut snapshots = Vec::with_capacity(times.len());
    let stats = integrate_with(rhs, e0, times, cfg, |_, e| snapshots.push(e.clone()))?;
    Ok(Trajectory {
        times: times.to_vec(),
        snapshots,
        stats,
    })
}

/// Like [`integrate_at`], but hands each checkpoint state to `observe` as
/// soon as it is reached, so callers keep everything recorded before a
/// failure.
pub fn integrate_with<R, F>(
    rhs: &R,
    e0: &Ensemble,
    times: &[f64],
    cfg: &IntegrationConfig,
    mut observe: F,
) -> Result<IntegrationStats, IntegrateError>
where
    R: EnsembleRhs + ?Sized,
    F: FnMut(f64, &Ensemble),
{
    if times.is_empty() || times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IntegrateError::InvalidConfig(
            "checkpoint times must start at 0 and increase strictly".into(),
        ));
    }
    if !(cfg.rel_tol > 0.0 && cfg.abs_tol > 0.0) {
        return Err(IntegrateError::InvalidConfig("tolerances must be positive".into()));
    }
    if !rhs.in_domain(e0) {
        return Err(IntegrateError::InitialStateOutsideDomain);
    }
    let mut stepper = Stepper {
        rhs,
        cfg,
        stats: IntegrationStats::default(),
    };
    let mut t = 0.0;
    let mut y = e0.as_matrix().clone();
    let mut k1 = match stepper.eval(t, &y)? {
        Some(k) => k,
        None => return Err(IntegrateError::InitialStateOutsideDomain),
    };
    let t_final = *times.last().expect("nonempty");
    let mut h = if t_final > 0.0 {
        stepper.initial_step(t, &y, &k1, t_final)?
    } else {
        0.0
    };
    if let Some(hmax) = cfg.max_step {
        h = h.min(hmax);
    }
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    observe(0.0, e0);
    let mut steps = 0usize;

    for &target in &times[1..] {
        while t < target {
            let state = || Box::new(Ensemble::from_matrix(y.clone()).expect("state keeps its shape"));
            if steps >= cfg.max_steps {
                return Err(IntegrateError::TooManySteps {
                    t,
                    max_steps: cfg.max_steps,
                    state: state(),
                });
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(IntegrateError::StepUnderflow { t, h, state: state() });
            }
            steps += 1;
            let remaining = target - t;
            let lands = h >= remaining;
            let h_try = if lands { remaining } else { h };
            match stepper.try_step(t, &y, &k1, h_try)? {
                StepOutcome::Accepted { y: y_new, k_last, err } => {
                    stepper.stats.accepted += 1;
                    let err = err.max(1e-10);
                    let mut fac = err.powf(EXPO) / err_old.powf(BETA);
                    fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                    let mut h_new = h_try / fac;
                    if last_rejected {
                        h_new = h_new.min(h_try);
                    }
                    err_old = err.max(1e-4);
                    last_rejected = false;
                    t = if lands { target } else { t + h_try };
                    y = y_new;
                    k1 = k_last;
                    // a short landing step does not shrink the proposal
                    h = if lands { h_new.max(h) } else { h_new };
                    if let Some(hmax) = cfg.max_step {
                        h = h.min(hmax);
                    }
                }
                StepOutcome::Rejected { err } => {
                    stepper.stats.rejected += 1;
                    let fac = if err.is_finite() {
                        (err.powf(EXPO) / SAFETY).min(1.0 / FAC_MIN)
                    } else {
                        1.0 / FAC_MIN
                    };
                    h = h_try / fac;
                    last_rejected = true;
                }
                StepOutcome::LeftDomain => {
                    stepper.stats.rejected += 1;
                    stepper.stats.domain_rejections += 1;
                    h = 0.5 * h_try;
                    last_rejected = true;
                }
            }
        }
        observe(target, &Ensemble::from_matrix(y.clone()).expect("state keeps its shape"));
    }
    Ok(stepper.stats)
}

/// Integrate to `cfg.t_end`, recording the ensemble on
/// [`checkpoint_grid`]`(cfg.t_end, cfg.checkpoints)`.
pub fn integrate<R: EnsembleRhs + ?Sized>(
    rhs: &R,
    e0: &Ensemble,
    cfg: &IntegrationConfig,
) -> Result<Trajectory, IntegrateError> {
    cfg.validate()?;
    integrate_at(rhs, e0, &checkpoint_grid(cfg.t_end, cfg.checkpoints), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> Ensemble {
        Ensemble::from_matrix(DMatrix::from_element(1, 1, v)).unwrap()
    }

    fn cfg(t_end: f64, rel_tol: f64) -> IntegrationConfig {
        IntegrationConfig {
            t_end,
            rel_tol,
            abs_tol: rel_tol * 1e-3,
            checkpoints: 5,
            ..IntegrationConfig::default()
        }
    }

    #[test]
    fn grid_examples() {
        assert_eq!(checkpoint_grid(100.0, 3), vec![0.0, 0.01, 1.0, 100.0]);
        let g = checkpoint_grid(1e6, 65);
        assert_eq!(g.len(), 66);
        assert_eq!(*g.last().unwrap(), 1e6);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let short = checkpoint_grid(1e-3, 4);
        assert_eq!(*short.last().unwrap(), 1e-3);
        assert!(short.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let e0 = Ensemble::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let rhs = FnRhs(|_t: f64, e: &Ensemble| Ok(DMatrix::zeros(e.dim(), e.size())));
        let traj = integrate(&rhs, &e0, &cfg(10.0, 1e-6)).unwrap();
        assert!(traj.snapshots.iter().all(|s| s == &e0));
        assert_eq!(traj.snapshots.len(), traj.times.len());
    }

    #[test]
    fn exponential_decay() {
        let rhs = FnRhs(|_t: f64, e: &Ensemble| Ok(-e.as_matrix().clone()));
        let traj = integrate_at(&rhs, &scalar(1.0), &[0.0, 0.5, 1.0], &cfg(1.0, 1e-6)).unwrap();
        assert_relative_eq!(traj.last().as_matrix()[(0, 0)], (-1.0f64).exp(), max_relative = 1e-6);
        assert_relative_eq!(traj.snapshots[1].as_matrix()[(0, 0)], (-0.5f64).exp(), max_relative = 1e-6);
    }

    #[test]
    fn long_horizon_decay_with_log_checkpoints() {
        // u' = -u / (1 + t) has u = 1 / (1 + t)
        let rhs = FnRhs(|t: f64, e: &Ensemble| Ok(-e.as_matrix() / (1.0 + t)));
        let c = IntegrationConfig {
            t_end: 1e6,
            checkpoints: 25,
            ..IntegrationConfig::default()
        };
        let traj = integrate(&rhs, &scalar(1.0), &c).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.snapshots) {
            assert_relative_eq!(s.as_matrix()[(0, 0)], 1.0 / (1.0 + t), max_relative = 1e-5);
        }
    }

    /// Two particles in one dimension under the linear EKI flow with
    /// `A = 1`, `Γ = 1`, `y = 0`: the mean obeys `m' = -C m` and the variance
    /// `C' = -2C²`, so `C(t) = C₀ / (1 + 2 C₀ t)`.
    #[test]
    fn riccati_variance_decay() {
        let rhs = FnRhs(|_t: f64, e: &Ensemble| {
            let c = e.covariance()[(0, 0)];
            Ok(-e.as_matrix() * c)
        });
        let e0 = Ensemble::from_matrix(DMatrix::from_row_slice(1, 2, &[0.5, 1.5])).unwrap();
        let traj = integrate_at(&rhs, &e0, &[0.0, 1.0, 10.0, 100.0], &cfg(100.0, 1e-8)).unwrap();
        let c0 = e0.covariance()[(0, 0)];
        for (t, s) in traj.times.iter().zip(&traj.snapshots) {
            assert_relative_eq!(s.covariance()[(0, 0)], c0 / (1.0 + 2.0 * c0 * t), max_relative = 1e-6);
        }
        // reference: classical RK4 on a fine uniform grid
        let mut y = e0.as_matrix().clone();
        let f = |y: &DMatrix<f64>| {
            let e = Ensemble::from_matrix(y.clone()).unwrap();
            -y * e.covariance()[(0, 0)]
        };
        let h = 1e-3;
        for _ in 0..10_000 {
            let k1 = f(&y);
            let k2 = f(&(&y + &k1 * (h / 2.0)));
            let k3 = f(&(&y + &k2 * (h / 2.0)));
            let k4 = f(&(&y + &k3 * h));
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        assert_relative_eq!(traj.snapshots[2].as_matrix().clone(), y, max_relative = 1e-6);
    }

    #[test]
    fn halving_tolerance_is_self_convergent() {
        let rhs = FnRhs(|t: f64, e: &Ensemble| {
            let m = e.as_matrix();
            Ok(DMatrix::from_fn(2, 1, |i, _| if i == 0 { m[(1, 0)] } else { -m[(0, 0)] - 0.1 * m[(1, 0)] + t.sin() }))
        });
        let e0 = Ensemble::from_matrix(DMatrix::from_row_slice(2, 1, &[1.0, 0.0])).unwrap();
        let coarse_tol = 1e-6;
        let run = |tol: f64| integrate_at(&rhs, &e0, &[0.0, 20.0], &cfg(20.0, tol)).unwrap().last().clone();
        let coarse = run(coarse_tol);
        let fine = run(coarse_tol / 2.0);
        let diff = (coarse.as_matrix() - fine.as_matrix()).amax();
        assert!(diff < coarse_tol * 10.0, "difference {diff}");
    }

    #[test]
    fn guard_rejects_steps_leaving_the_domain() {
        // u' = -√u leaves u > 0 at t = 2; the domain check stops it
        struct Wall;
        impl EnsembleRhs for Wall {
            fn eval(&self, _t: f64, e: &Ensemble) -> Result<DMatrix<f64>, FlowError> {
                Ok(DMatrix::from_element(1, e.size(), -1.0) * e.as_matrix()[(0, 0)].max(0.0).sqrt())
            }
            fn in_domain(&self, e: &Ensemble) -> bool {
                e.as_matrix()[(0, 0)] > 0.0
            }
        }
        let traj = integrate_at(&Wall, &scalar(1.0), &[0.0, 1.0, 3.0], &cfg(3.0, 1e-6));
        match traj {
            Ok(t) => assert!(t.snapshots.iter().all(|s| s.as_matrix()[(0, 0)] > 0.0)),
            Err(IntegrateError::StepUnderflow { state, .. }) => assert!(state.as_matrix()[(0, 0)] > 0.0),
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn domain_errors_propagate_without_guard() {
        let rhs = FnRhs(|_t: f64, e: &Ensemble| {
            if e.as_matrix()[(0, 0)] < 0.5 {
                Err(FlowError::Infeasible { particle: 0, component: 0, value: 0.0 })
            } else {
                Ok(-DMatrix::from_element(1, 1, 1.0))
            }
        });
        let mut c = cfg(1.0, 1e-6);
        c.feasibility_guard = false;
        let err = integrate_at(&rhs, &scalar(1.0), &[0.0, 1.0], &c).unwrap_err();
        assert!(matches!(err, IntegrateError::Rhs { .. }));
    }

    #[test]
    fn rejects_bad_configuration() {
        let rhs = FnRhs(|_t: f64, e: &Ensemble| Ok(DMatrix::zeros(e.dim(), e.size())));
        let mut c = cfg(1.0, 1e-6);
        c.t_end = -1.0;
        assert!(integrate(&rhs, &scalar(1.0), &c).is_err());
        assert!(integrate_at(&rhs, &scalar(1.0), &[0.0, 1.0, 0.5], &cfg(1.0, 1e-6)).is_err());
    }
}
