//! Per-checkpoint error metrics, decay-rate fits and the CSV format.

use std::io::{self, BufRead, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::Ensemble;
use crate::forward::{ForwardError, InverseProblem};

pub const CSV_HEADER: &str = "t,spread,residual,kkt_residual,obs_spread,obs_residual,cost_gap";

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("rate fit needs at least 5 records in the window, found {found}")]
    TooFewRecords { found: usize },
    #[error("{metric} is not positive at t = {t:e} ({value:e}); cannot take logarithms")]
    NonPositive { metric: Metric, t: f64, value: f64 },
    #[error("malformed CSV line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Spread,
    Residual,
    KktResidual,
    ObsSpread,
    ObsResidual,
    CostGap,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Spread,
        Metric::Residual,
        Metric::KktResidual,
        Metric::ObsSpread,
        Metric::ObsResidual,
        Metric::CostGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Spread => "spread",
            Metric::Residual => "residual",
            Metric::KktResidual => "kkt_residual",
            Metric::ObsSpread => "obs_spread",
            Metric::ObsResidual => "obs_residual",
            Metric::CostGap => "cost_gap",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Particle-averaged error metrics at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    /// `(1/J) Σ |u^(j) - ū|²`.
    pub spread: f64,
    /// `(1/J) Σ |u^(j) - u†|²`.
    pub residual: f64,
    /// `(1/J) Σ |u^(j) - u*|²`.
    pub kkt_residual: f64,
    /// `(1/J) Σ ‖G(u^(j)) - Ḡ‖²_Γ`.
    pub obs_spread: f64,
    /// `(1/J) Σ ‖G(u^(j)) - G(u†)‖²_Γ`.
    pub obs_residual: f64,
    /// `(1/J) Σ |Φ(u^(j)) - Φ(u*)|²`.
    pub cost_gap: f64,
}

impl DiagnosticsRecord {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Spread => self.spread,
            Metric::Residual => self.residual,
            Metric::KktResidual => self.kkt_residual,
            Metric::ObsSpread => self.obs_spread,
            Metric::ObsResidual => self.obs_residual,
            Metric::CostGap => self.cost_gap,
        }
    }
}

/// Reference quantities shared by all checkpoints of a run.
#[derive(Debug, Clone)]
pub struct DiagnosticsContext {
    problem: InverseProblem,
    truth: DVector<f64>,
    truth_image: DVector<f64>,
    optimum: DVector<f64>,
    optimum_misfit: f64,
}

impl DiagnosticsContext {
    pub fn new(problem: InverseProblem, truth: DVector<f64>, optimum: DVector<f64>) -> Result<Self, ForwardError> {
        let n = problem.param_dim();
        for (v, what) in [(&truth, "truth"), (&optimum, "constrained minimizer")] {
            if v.len() != n {
                return Err(ForwardError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                    context: what,
                });
            }
        }
        let truth_image = problem.forward.apply(&truth)?;
        let optimum_misfit = problem.misfit(&optimum)?;
        Ok(Self {
            problem,
            truth,
            truth_image,
            optimum,
            optimum_misfit,
        })
    }

    pub fn optimum_misfit(&self) -> f64 {
        self.optimum_misfit
    }

    pub fn record(&self, e: &Ensemble, t: f64) -> Result<DiagnosticsRecord, ForwardError> {
        let j = e.size() as f64;
        let images = self.problem.forward.apply_ensemble(e)?;
        let image_mean = images.column_mean();
        let mean = e.mean();
        let noise = &self.problem.noise;
        let mut rec = DiagnosticsRecord {
            t,
            spread: 0.0,
            residual: 0.0,
            kkt_residual: 0.0,
            obs_spread: 0.0,
            obs_residual: 0.0,
            cost_gap: 0.0,
        };
        for (k, u) in e.as_matrix().column_iter().enumerate() {
            let g = images.column(k).into_owned();
            rec.spread += (u - &mean).norm_squared();
            rec.residual += (u - &self.truth).norm_squared();
            rec.kkt_residual += (u - &self.optimum).norm_squared();
            rec.obs_spread += noise.norm_squared(&(&g - &image_mean));
            rec.obs_residual += noise.norm_squared(&(&g - &self.truth_image));
            let phi = 0.5 * noise.norm_squared(&(&self.problem.data - &g));
            rec.cost_gap += (phi - self.optimum_misfit).powi(2);
        }
        rec.spread /= j;
        rec.residual /= j;
        rec.kkt_residual /= j;
        rec.obs_spread /= j;
        rec.obs_residual /= j;
        rec.cost_gap /= j;
        Ok(rec)
    }
}

/// One-shot form of [`DiagnosticsContext::record`].
pub fn compute_record(
    e: &Ensemble,
    truth: &DVector<f64>,
    optimum: &DVector<f64>,
    problem: &InverseProblem,
    t: f64,
) -> Result<DiagnosticsRecord, ForwardError> {
    DiagnosticsContext::new(problem.clone(), truth.clone(), optimum.clone())?.record(e, t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateWindow {
    /// Records with `t ≥ t_last / 10`.
    LastDecade,
    /// Records with `t0 ≤ t ≤ t1`.
    Between(f64, f64),
}

/// Least-squares slope of `log(metric)` against `log(t)` over the window.
pub fn estimate_rate(records: &[DiagnosticsRecord], metric: Metric, window: RateWindow) -> Result<f64, DiagnosticsError> {
    let (lo, hi) = match window {
        RateWindow::LastDecade => {
            let last = records.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
            (last / 10.0 * (1.0 - 1e-12), last)
        }
        RateWindow::Between(a, b) => (a, b),
    };
    let selected: Vec<&DiagnosticsRecord> = records.iter().filter(|r| r.t > 0.0 && r.t >= lo && r.t <= hi).collect();
    if selected.len() < 5 {
        return Err(DiagnosticsError::TooFewRecords { found: selected.len() });
    }
    let mut pts = Vec::with_capacity(selected.len());
    for r in selected {
        let v = r.get(metric);
        if !(v > 0.0) {
            return Err(DiagnosticsError::NonPositive { metric, t: r.t, value: v });
        }
        pts.push((r.t.ln(), v.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Header plus one row per record, every value in `{:.12e}` notation.
pub fn write_csv<W: Write>(records: &[DiagnosticsRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.t, r.spread, r.residual, r.kkt_residual, r.obs_spread, r.obs_residual, r.cost_gap
        )?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<DiagnosticsRecord>, DiagnosticsError> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == CSV_HEADER => {}
        Some(Ok(h)) => {
            return Err(DiagnosticsError::Malformed {
                line: 1,
                reason: format!("unexpected header {h:?}"),
            })
        }
        Some(Err(e)) => return Err(e.into()),
        None => {
            return Err(DiagnosticsError::Malformed {
                line: 1,
                reason: "empty file".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DiagnosticsError::Malformed {
                line: k + 2,
                reason: e.to_string(),
            })?;
        if vals.len() != 7 {
            return Err(DiagnosticsError::Malformed {
                line: k + 2,
                reason: format!("expected 7 fields, found {}", vals.len()),
            });
        }
        out.push(DiagnosticsRecord {
            t: vals[0],
            spread: vals[1],
            residual: vals[2],
            kkt_residual: vals[3],
            obs_spread: vals[4],
            obs_residual: vals[5],
            cost_gap: vals[6],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::NoiseModel;
    use crate::forward::{LinearForwardOperator, LinearProblem};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn identity_problem(gamma_std: f64) -> InverseProblem {
        let lp = LinearProblem::new(
            LinearForwardOperator::new(DMatrix::identity(2, 2)).unwrap(),
            DVector::from_vec(vec![1.0, 0.0]),
            NoiseModel::isotropic(2, gamma_std).unwrap(),
        )
        .unwrap();
        InverseProblem::linear(lp)
    }

    #[test]
    fn hand_computed_two_particle_record() {
        // A = I, Γ = 4I, y = u† = (1, 0), u* = (0.5, 0), particles (0,0), (1,1)
        let p = identity_problem(2.0);
        let e = Ensemble::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let truth = DVector::from_vec(vec![1.0, 0.0]);
        let opt = DVector::from_vec(vec![0.5, 0.0]);
        let r = compute_record(&e, &truth, &opt, &p, 3.0).unwrap();
        assert_eq!(r.t, 3.0);
        assert_abs_diff_eq!(r.spread, 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(r.residual, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.kkt_residual, 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(r.obs_spread, 0.125, epsilon = 1e-14);
        assert_abs_diff_eq!(r.obs_residual, 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(r.cost_gap, 0.0087890625, epsilon = 1e-14);
    }

    #[test]
    fn collapse_onto_reference_points() {
        let p = identity_problem(1.0);
        let truth = DVector::from_vec(vec![1.0, 0.0]);
        let opt = DVector::from_vec(vec![0.5, 0.0]);
        let at_opt = compute_record(&Ensemble::replicate(&opt, 3).unwrap(), &truth, &opt, &p, 1.0).unwrap();
        assert_eq!(at_opt.kkt_residual, 0.0);
        assert_eq!(at_opt.cost_gap, 0.0);
        let at_truth = compute_record(&Ensemble::replicate(&truth, 3).unwrap(), &truth, &opt, &p, 1.0).unwrap();
        assert_eq!(at_truth.residual, 0.0);
        assert_eq!(at_truth.obs_residual, 0.0);
    }

    fn power_law(exponent: f64) -> Vec<DiagnosticsRecord> {
        (0..=40)
            .map(|k| {
                let t = 10f64.powf(-2.0 + k as f64 * 0.2);
                let v = t.powf(exponent);
                DiagnosticsRecord {
                    t,
                    spread: v,
                    residual: 1.0,
                    kkt_residual: v,
                    obs_spread: v,
                    obs_residual: v,
                    cost_gap: v,
                }
            })
            .collect()
    }

    #[test]
    fn rate_of_exact_power_law() {
        let recs = power_law(-0.25);
        let slope = estimate_rate(&recs, Metric::Spread, RateWindow::LastDecade).unwrap();
        assert_abs_diff_eq!(slope, -0.25, epsilon = 1e-6);
        let slope = estimate_rate(&recs, Metric::CostGap, RateWindow::Between(1.0, 100.0)).unwrap();
        assert_abs_diff_eq!(slope, -0.25, epsilon = 1e-6);
        assert_abs_diff_eq!(estimate_rate(&recs, Metric::Residual, RateWindow::LastDecade).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_needs_enough_positive_records() {
        let mut recs = power_law(-1.0);
        assert!(matches!(
            estimate_rate(&recs, Metric::Spread, RateWindow::Between(1.0, 3.0)),
            Err(DiagnosticsError::TooFewRecords { .. })
        ));
        let last = recs.len() - 1;
        recs[last].spread = 0.0;
        assert!(matches!(
            estimate_rate(&recs, Metric::Spread, RateWindow::LastDecade),
            Err(DiagnosticsError::NonPositive { .. })
        ));
    }

    #[test]
    fn csv_round_trip_and_format() {
        let recs = power_law(-0.5);
        let mut buf = Vec::new();
        write_csv(&recs[..3], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        for field in lines.next().unwrap().split(',') {
            let (mantissa, exponent) = field.split_once('e').unwrap();
            assert_eq!(mantissa.trim_start_matches('-').len(), 14, "{field}");
            assert!(exponent.parse::<i32>().is_ok(), "{field}");
        }
        let back = read_csv(io::Cursor::new(buf)).unwrap();
        for (a, b) in back.iter().zip(&recs[..3]) {
            assert_abs_diff_eq!(a.spread, b.spread, epsilon = 1e-12 * b.spread);
        }
        assert!(read_csv(io::Cursor::new(b"t,x\n".to_vec())).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_permutation_invariant_and_nonnegative(seed in 0u64..2_000, shift in 0usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
            let e = Ensemble::from_matrix(m.clone()).unwrap();
            let mut perm = m.clone();
            for j in 0..4 {
                perm.set_column(j, &m.column((j + shift) % 4));
            }
            let ep = Ensemble::from_matrix(perm).unwrap();
            let p = identity_problem(0.7);
            let truth = DVector::from_vec(vec![1.0, 0.0]);
            let opt = DVector::from_vec(vec![0.3, 0.1]);
            let a = compute_record(&e, &truth, &opt, &p, 1.0).unwrap();
            let b = compute_record(&ep, &truth, &opt, &p, 1.0).unwrap();
            for metric in Metric::ALL {
                prop_assert!(a.get(metric) >= 0.0);
                prop_assert!((a.get(metric) - b.get(metric)).abs() <= 1e-12 * a.get(metric).max(1.0));
            }
        }
    }
}
