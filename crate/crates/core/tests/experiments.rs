//! The bundled linear experiments, shortened, through the public runner.

use std::path::PathBuf;

use boxeki::experiment::{execute, ExperimentConfig, Method};

fn bundled(name: &str, t_end: f64) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let mut cfg = ExperimentConfig::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
    cfg.integration.t_end = t_end;
    cfg.integration.checkpoints = 21;
    cfg
}

#[test]
fn constrained_methods_stay_feasible_while_eki_leaves_the_box() {
    for name in ["linear_full.cfg", "linear_lowobs.cfg"] {
        let report = execute(&bundled(name, 1e3)).unwrap();
        assert!(!report.any_failed(), "{name}");
        for o in &report.outcomes {
            if o.method.is_constrained() {
                assert!(o.feasible_throughout, "{name}: {} left the box", o.method);
            }
        }
        let eki = report.outcome(Method::Eki).unwrap();
        let b = &report.setup.bounds;
        let violation = b.violation(&eki.terminal_mean());
        assert!(violation > 1e-3, "{name}: eki terminal mean violation {violation}");
    }
}

#[test]
fn transformed_flow_reaches_the_constrained_minimum() {
    let report = execute(&bundled("linear_full.cfg", 1e4)).unwrap();
    let transformed = report.outcome(Method::Transformed).unwrap().terminal();
    let projected = report.outcome(Method::Projected).unwrap().terminal();
    assert!(transformed.kkt_residual < 1e-6, "{}", transformed.kkt_residual);
    assert!(transformed.cost_gap < projected.cost_gap);
}
