use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Method};
use super::setup::{build_setup, ExperimentSetup};
use super::ExperimentError;
use crate::diagnostics::{estimate_rate, write_csv, DiagnosticsContext, DiagnosticsRecord, Metric, RateWindow};
use crate::dynamics::Flow;
use crate::ensemble::Ensemble;
use crate::integrate::{checkpoint_grid, integrate_with, IntegrationStats};

/// How one method's integration ended.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MethodStatus {
    Completed,
    /// Stopped early; the records cover `[0, t]`.
    Failed { t: Option<f64>, message: String },
}

/// The trajectory diagnostics of one method.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub records: Vec<DiagnosticsRecord>,
    pub status: MethodStatus,
    pub stats: Option<IntegrationStats>,
    /// Ensemble at the last recorded checkpoint.
    pub final_ensemble: Ensemble,
    /// Every recorded checkpoint lay in the closed box.
    pub feasible_throughout: bool,
}

impl MethodOutcome {
    pub fn failed(&self) -> bool {
        self.status != MethodStatus::Completed
    }

    pub fn terminal(&self) -> &DiagnosticsRecord {
        self.records.last().expect("the initial state is always recorded")
    }

    pub fn terminal_mean(&self) -> DVector<f64> {
        self.final_ensemble.mean()
    }

    /// Tail slopes for every metric that admits one.
    pub fn slopes(&self) -> BTreeMap<&'static str, f64> {
        Metric::ALL
            .iter()
            .filter_map(|&m| {
                estimate_rate(&self.records, m, RateWindow::LastDecade)
                    .ok()
                    .map(|s| (m.name(), s))
            })
            .collect()
    }
}

/// The outcome of [`execute`]: the shared setup and one entry per method in
/// the order the config lists them.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub setup: ExperimentSetup,
    pub outcomes: Vec<MethodOutcome>,
}

impl RunReport {
    pub fn any_failed(&self) -> bool {
        self.outcomes.iter().any(MethodOutcome::failed)
    }

    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

/// Integrate one method from the shared initial ensemble, recording
/// diagnostics at every checkpoint.
pub fn run_method(
    cfg: &ExperimentConfig,
    setup: &ExperimentSetup,
    method: Method,
) -> Result<MethodOutcome, ExperimentError> {
    let spec = cfg.flow.spec_for(method);
    let bounds = method.is_constrained().then(|| setup.bounds.clone());
    let mut flow = Flow::new(setup.problem.clone(), bounds, spec)
        .map_err(|e| ExperimentError::Validation(format!("flow ({method}): {e}")))?;
    if let Some(c0) = &setup.prior_cov {
        flow = flow.with_prior_covariance(c0.clone());
    }
    let context = DiagnosticsContext::new(setup.problem.clone(), setup.truth.clone(), setup.optimum.u_star.clone())
        .map_err(|e| ExperimentError::Setup(e.to_string()))?;
    let times = checkpoint_grid(cfg.integration.t_end, cfg.integration.checkpoints);
    let mut records = Vec::with_capacity(times.len());
    let mut last = setup.initial.clone();
    let mut feasible = true;
    let mut record_error = None;
    let result = integrate_with(&flow, &setup.initial, &times, &cfg.integration, |t, e| {
        if method.is_constrained() {
            feasible &= setup.bounds.ensemble_contains(e, 0.0);
        }
        match context.record(e, t) {
            Ok(r) => records.push(r),
            Err(err) => {
                record_error.get_or_insert(err);
            }
        }
        last = e.clone();
    });
    if let Some(err) = record_error {
        return Err(ExperimentError::Solver(format!("{method}: diagnostics failed: {err}")));
    }
    let (status, stats) = match result {
        Ok(stats) => (MethodStatus::Completed, Some(stats)),
        Err(err) => (
            MethodStatus::Failed {
                t: err.time(),
                message: err.to_string(),
            },
            None,
        ),
    };
    if records.is_empty() {
        return Err(ExperimentError::Solver(format!("{method}: {status:?}")));
    }
    Ok(MethodOutcome {
        method,
        records,
        status,
        stats,
        final_ensemble: last,
        feasible_throughout: feasible,
    })
}

/// Build the setup and run every configured method, in parallel, without
/// touching the file system.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    let setup = build_setup(cfg)?;
    let outcomes = cfg
        .method
        .methods
        .par_iter()
        .map(|&m| run_method(cfg, &setup, m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport {
        config: cfg.clone(),
        setup,
        outcomes,
    })
}

#[derive(Serialize)]
struct OptimumSummary<'a> {
    u_star: &'a [f64],
    misfit: f64,
    kkt_residual: f64,
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    method: Method,
    #[serde(flatten)]
    status: &'a MethodStatus,
    partial: bool,
    terminal: &'a DiagnosticsRecord,
    slopes: BTreeMap<&'static str, f64>,
    terminal_mean: Vec<f64>,
    /// Largest bound violation of the terminal mean.
    terminal_violation: f64,
    feasible_throughout: Option<bool>,
    stats: Option<IntegrationStats>,
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    t_end: f64,
    failed: bool,
    optimum: OptimumSummary<'a>,
    methods: Vec<MethodSummary<'a>>,
    transformed_beats_projected: Option<bool>,
}

/// The JSON written to `summary.json`.
pub fn summary_json(report: &RunReport) -> Result<String, ExperimentError> {
    let setup = &report.setup;
    let methods = report
        .outcomes
        .iter()
        .map(|o| {
            let mean = o.terminal_mean();
            MethodSummary {
                method: o.method,
                status: &o.status,
                partial: o.failed(),
                terminal: o.terminal(),
                slopes: o.slopes(),
                terminal_violation: setup.bounds.violation(&mean),
                terminal_mean: mean.as_slice().to_vec(),
                feasible_throughout: o.method.is_constrained().then_some(o.feasible_throughout),
                stats: o.stats,
            }
        })
        .collect();
    let summary = Summary {
        seed: report.config.method.seed,
        t_end: report.config.integration.t_end,
        failed: report.any_failed(),
        optimum: OptimumSummary {
            u_star: setup.optimum.u_star.as_slice(),
            misfit: setup
                .problem
                .misfit(&setup.optimum.u_star)
                .map_err(|e| ExperimentError::Setup(e.to_string()))?,
            kkt_residual: setup.optimum.stationarity_residual,
        },
        methods,
        transformed_beats_projected: compare_methods(&report.outcomes).transformed_beats_projected,
    };
    serde_json::to_string_pretty(&summary).map_err(|e| ExperimentError::Io(e.to_string()))
}

/// Write `<method>.csv` per method, `summary.json` and the resolved
/// `config.json` into `dir`.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<(), ExperimentError> {
    let io = |e: std::io::Error| ExperimentError::Io(format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    for o in &report.outcomes {
        let file = fs::File::create(dir.join(format!("{}.csv", o.method))).map_err(io)?;
        write_csv(&o.records, BufWriter::new(file)).map_err(io)?;
    }
    fs::write(dir.join("summary.json"), summary_json(report)? + "\n").map_err(io)?;
    fs::write(dir.join("config.json"), report.config.to_json() + "\n").map_err(io)?;
    Ok(())
}

/// Validate, run and write outputs to `cfg.output.dir`.
///
/// Method failures do not make this an error: the report flags them and
/// the partial records are written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    let report = execute(cfg)?;
    write_outputs(&report, &cfg.output.dir)?;
    Ok(report)
}

/// Terminal metrics of several methods side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<(Method, DiagnosticsRecord)>,
    /// `Some` when both methods ran: whether the transformed method ends
    /// with a smaller cost gap than the projected one.
    pub transformed_beats_projected: Option<bool>,
}

pub fn compare_methods(outcomes: &[MethodOutcome]) -> Comparison {
    let rows: Vec<_> = outcomes.iter().map(|o| (o.method, *o.terminal())).collect();
    let gap = |m: Method| rows.iter().find(|(k, _)| *k == m).map(|(_, r)| r.cost_gap);
    let transformed_beats_projected = match (gap(Method::Transformed), gap(Method::Projected)) {
        (Some(t), Some(p)) => Some(t < p),
        _ => None,
    };
    Comparison {
        rows,
        transformed_beats_projected,
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<22}", "method")?;
        for m in Metric::ALL {
            write!(f, " {:>12}", m.name())?;
        }
        writeln!(f)?;
        for (method, r) in &self.rows {
            write!(f, "{:<22}", method.name())?;
            for m in Metric::ALL {
                write!(f, " {:>12.4e}", r.get(m))?;
            }
            writeln!(f)?;
        }
        if let Some(b) = self.transformed_beats_projected {
            writeln!(f, "transformed cost_gap below projected: {b}")?;
        }
        Ok(())
    }
}
