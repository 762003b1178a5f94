//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! fails. Agents trained for the end-to-end criterion are reused by the
//! certificate and robust Sarsa criteria.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use sarl_cli::checks::{self, CheckOutcome, E2eArtifacts, E2eConfig};

fn artifacts() -> &'static anyhow::Result<E2eArtifacts> {
    static ART: OnceLock<anyhow::Result<E2eArtifacts>> = OnceLock::new();
    ART.get_or_init(|| checks::train_e2e(&E2eConfig::default()))
}

fn with_artifacts(name: &str, f: fn(&E2eArtifacts) -> CheckOutcome) -> CheckOutcome {
    match artifacts() {
        Ok(a) => f(a),
        Err(e) => CheckOutcome {
            name: name.into(),
            passed: false,
            detail: format!("training failed: {e:#}"),
            seconds: 0.0,
            budget_seconds: 0.0,
        },
    }
}

fn main() -> ExitCode {
    let seed = 0;
    let t = Instant::now();
    let criteria: Vec<(&str, Box<dyn Fn() -> CheckOutcome>)> = vec![
        ("appendix_a_values", Box::new(checks::appendix_a_values)),
        ("contraction", Box::new(move || checks::contraction(seed))),
        ("gap_bound", Box::new(move || checks::gap_bound(seed))),
        ("witnesses", Box::new(checks::witnesses)),
        ("relaxation_soundness", Box::new(move || checks::relaxation_soundness(seed))),
        ("closed_forms", Box::new(move || checks::closed_forms(seed))),
        ("gradient_checks", Box::new(move || checks::gradient_checks(seed))),
        ("certificate_soundness", Box::new(|| with_artifacts("certificate_soundness", checks::certificate_soundness))),
        ("end_to_end", Box::new(|| with_artifacts("end_to_end", checks::end_to_end))),
        ("attack_sandwich", Box::new(move || checks::attack_sandwich(seed))),
        ("robust_sarsa_efficacy", Box::new(|| with_artifacts("robust_sarsa_efficacy", checks::robust_sarsa_efficacy))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    println!("acceptance: {} criteria", criteria.len());
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("{}", o.line());
        ran += 1;
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed in {:.1} s", ran - failed, t.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
