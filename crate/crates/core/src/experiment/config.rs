use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::constraints::BoxConstraint;
use crate::dynamics::{
    ActiveSetRule, ConstraintMode, Family, FlowSpec, NonlinearInflation, Schedule,
};
use crate::forward::DEFAULT_ELEMENTS;
use crate::integrate::IntegrationConfig;

/// A full experiment description, one section per concern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    LinearElliptic(LinearEllipticConfig),
    Darcy(DarcyConfig),
}

/// A bound given once for every component or per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bound {
    Uniform(f64),
    PerComponent(Vec<f64>),
}

impl Bound {
    fn expand(&self, n: usize) -> Vec<f64> {
        match self {
            Bound::Uniform(v) => vec![*v; n],
            Bound::PerComponent(v) => v.clone(),
        }
    }
}

/// `-p'' + p = u` on `(0, π)`, observed at cell midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearEllipticConfig {
    /// Number of piecewise-constant parameter cells.
    pub params: usize,
    pub elements: usize,
    /// Keep the first `observations` of the `params` cell midpoints.
    pub observations: usize,
    /// The truth is `truth_scale · (sin 3x + 0.75 sin x)` at the cell midpoints.
    pub truth_scale: f64,
    pub lower: Bound,
    pub upper: Bound,
    /// Standard deviation `γ` of the noise model `Γ = γ² I`. The data
    /// itself is the noise-free image of the truth.
    pub noise_std: f64,
}

impl Default for LinearEllipticConfig {
    fn default() -> Self {
        Self {
            params: 16,
            elements: DEFAULT_ELEMENTS,
            observations: 16,
            truth_scale: 0.5,
            lower: Bound::Uniform(-0.5),
            upper: Bound::Uniform(0.5),
            noise_std: 0.01,
        }
    }
}

/// Log-permeability inversion on the unit square, parameterized by
/// whitened KL coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DarcyConfig {
    /// Finite-difference cells per side.
    pub cells: usize,
    /// KL modes kept.
    pub modes: usize,
    pub sigma2: f64,
    pub nu: f64,
    /// Each whitened coordinate lies in `[-box_beta, box_beta]`.
    pub box_beta: f64,
    /// The truth is `truth_scale · ξ` with `ξ ~ N(0, I)` drawn from `truth_seed`.
    pub truth_seed: u64,
    pub truth_scale: f64,
    pub noise_std: f64,
}

impl Default for DarcyConfig {
    fn default() -> Self {
        Self {
            cells: 16,
            modes: 64,
            sigma2: 1.0,
            nu: 2.0,
            box_beta: 1.0,
            truth_seed: 7,
            truth_scale: 2.0,
            noise_std: 0.01,
        }
    }
}

/// The flows an experiment can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Unconstrained flow.
    Eki,
    /// Gated at the faces, no inflation.
    Projected,
    /// Gated at the faces with the transformed preconditioner and inflation.
    Transformed,
    /// Log-barrier flow with the plain covariance preconditioner.
    BarrierSmoothed,
    /// Log-barrier flow with the transformed preconditioner.
    TransformedSmoothed,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Eki,
        Method::Projected,
        Method::Transformed,
        Method::BarrierSmoothed,
        Method::TransformedSmoothed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Eki => "eki",
            Method::Projected => "projected",
            Method::Transformed => "transformed",
            Method::BarrierSmoothed => "barrier_smoothed",
            Method::TransformedSmoothed => "transformed_smoothed",
        }
    }

    pub fn constraint_mode(self) -> ConstraintMode {
        match self {
            Method::Eki => ConstraintMode::None,
            Method::Projected => ConstraintMode::Projected,
            Method::Transformed => ConstraintMode::Transformed,
            Method::BarrierSmoothed => ConstraintMode::BarrierSmoothed,
            Method::TransformedSmoothed => ConstraintMode::TransformedSmoothed,
        }
    }

    /// Whether trajectories must stay in the box.
    pub fn is_constrained(self) -> bool {
        self != Method::Eki
    }

    /// Whether the flow uses variance inflation.
    pub fn is_inflated(self) -> bool {
        matches!(self, Method::Transformed | Method::TransformedSmoothed)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                ExperimentError::Validation(format!(
                    "method.methods: unknown method `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub ensemble_size: usize,
    /// Drives the initial ensemble.
    pub seed: u64,
    pub methods: Vec<Method>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            seed: 1,
            methods: vec![Method::Eki, Method::Projected, Method::Transformed],
        }
    }
}

/// Flow parameters shared by all methods; each method picks what it uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub family: Family,
    /// Barrier weight of the smoothed methods.
    pub iota: f64,
    pub ramp_width: f64,
    /// Inflation level for the constant schedule.
    pub eps: f64,
    pub schedule: Schedule,
    pub nonlinear_inflation: NonlinearInflation,
    pub active_set: ActiveSetRule,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let spec = FlowSpec::default();
        Self {
            family: spec.family,
            iota: spec.iota,
            ramp_width: spec.ramp_width,
            eps: 1.0,
            schedule: Schedule::Decaying { alpha: 0.75, r: 1.0 },
            nonlinear_inflation: NonlinearInflation::Off,
            active_set: spec.active_set,
        }
    }
}

impl FlowConfig {
    /// The right-hand side used for `method`. Methods without inflation
    /// ignore the schedule.
    pub fn spec_for(&self, method: Method) -> FlowSpec {
        let base = FlowSpec {
            family: self.family,
            constraint_mode: method.constraint_mode(),
            iota: self.iota,
            ramp_width: self.ramp_width,
            active_set: self.active_set,
            ..FlowSpec::default()
        };
        if method.is_inflated() {
            FlowSpec {
                eps: self.eps,
                schedule: self.schedule,
                nonlinear_inflation: self.nonlinear_inflation,
                ..base
            }
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Validation(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// Dimension of the parameter vector.
    pub fn param_dim(&self) -> usize {
        match &self.problem {
            ProblemConfig::LinearElliptic(c) => c.params,
            ProblemConfig::Darcy(c) => c.modes,
        }
    }

    /// The box, checked component by component.
    pub fn bounds(&self) -> Result<BoxConstraint, ExperimentError> {
        let n = self.param_dim();
        let (lower, upper) = match &self.problem {
            ProblemConfig::LinearElliptic(c) => (c.lower.expand(n), c.upper.expand(n)),
            ProblemConfig::Darcy(c) => (vec![-c.box_beta; n], vec![c.box_beta; n]),
        };
        if lower.len() != n || upper.len() != n {
            return Err(ExperimentError::Validation(format!(
                "problem: bounds need {n} components, got {} lower and {} upper",
                lower.len(),
                upper.len()
            )));
        }
        BoxConstraint::new(lower, upper, n).map_err(|e| ExperimentError::Validation(format!("problem: {e}")))
    }

    /// Check every section; messages name the offending field.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |m: String| Err(ExperimentError::Validation(m));
        match &self.problem {
            ProblemConfig::LinearElliptic(c) => {
                if c.params == 0 || c.elements % c.params != 0 {
                    return invalid(format!(
                        "problem.params: {} cells must divide problem.elements = {}",
                        c.params, c.elements
                    ));
                }
                if c.observations == 0 || c.observations > c.params {
                    return invalid(format!(
                        "problem.observations: {} must lie in 1..={}",
                        c.observations, c.params
                    ));
                }
                if !c.truth_scale.is_finite() {
                    return invalid("problem.truth_scale: must be finite".into());
                }
                if !(c.noise_std > 0.0 && c.noise_std.is_finite()) {
                    return invalid(format!("problem.noise_std: {} must be positive", c.noise_std));
                }
            }
            ProblemConfig::Darcy(c) => {
                if c.cells < 2 {
                    return invalid(format!("problem.cells: {} must be at least 2", c.cells));
                }
                if c.modes == 0 {
                    return invalid("problem.modes: must be positive".into());
                }
                if !(c.sigma2 > 0.0) {
                    return invalid(format!("problem.sigma2: {} must be positive", c.sigma2));
                }
                if !(c.nu > 1.0) {
                    return invalid(format!("problem.nu: {} must exceed d/2 = 1", c.nu));
                }
                if !(c.box_beta > 0.0 && c.box_beta.is_finite()) {
                    return invalid(format!("problem.box_beta: {} must be positive", c.box_beta));
                }
                if !c.truth_scale.is_finite() {
                    return invalid("problem.truth_scale: must be finite".into());
                }
                if !(c.noise_std > 0.0 && c.noise_std.is_finite()) {
                    return invalid(format!("problem.noise_std: {} must be positive", c.noise_std));
                }
            }
        }
        self.bounds()?;
        if self.method.ensemble_size < 2 {
            return invalid(format!(
                "method.ensemble_size: {} must be at least 2",
                self.method.ensemble_size
            ));
        }
        if self.method.methods.is_empty() {
            return invalid("method.methods: list at least one method".into());
        }
        let mut seen = self.method.methods.clone();
        seen.sort();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return invalid(format!("method.methods: `{}` is listed twice", w[0]));
        }
        for &m in &self.method.methods {
            self.flow
                .spec_for(m)
                .validate()
                .map_err(|e| ExperimentError::Validation(format!("flow ({m}): {e}")))?;
        }
        if !(self.flow.ramp_width > 0.0) {
            return invalid(format!("flow.ramp_width: {} must be positive", self.flow.ramp_width));
        }
        self.integration
            .validate()
            .map_err(|e| ExperimentError::Validation(format!("integration: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> ExperimentConfig {
        ExperimentConfig::from_json(r#"{"problem": {"kind": "linear_elliptic"}}"#).unwrap()
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let c = linear();
        assert_eq!(c.method.ensemble_size, 5);
        assert_eq!(c.integration.t_end, 1e6);
        assert_eq!(c.flow.schedule, Schedule::Decaying { alpha: 0.75, r: 1.0 });
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let c = linear();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn empty_interval_names_the_component() {
        let c = ExperimentConfig::from_json(
            r#"{"problem": {"kind": "linear_elliptic", "params": 4, "elements": 8, "observations": 4,
                "lower": [0, 0, 1, 0], "upper": [1, 1, 1, 1]}}"#,
        )
        .unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("component 2"), "{msg}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"problem": {"kind": "linear_elliptic"}, "flow": {"iotta": 1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("ekf".parse::<Method>().is_err());
    }

    #[test]
    fn duplicate_methods_are_rejected() {
        let mut c = linear();
        c.method.methods = vec![Method::Eki, Method::Eki];
        assert!(c.validate().is_err());
    }

    #[test]
    fn only_inflated_methods_see_the_schedule() {
        let f = FlowConfig::default();
        assert_eq!(f.spec_for(Method::Projected).schedule, Schedule::Constant);
        assert_eq!(f.spec_for(Method::Projected).eps, 0.0);
        assert_eq!(f.spec_for(Method::Transformed).schedule, f.schedule);
    }
}
