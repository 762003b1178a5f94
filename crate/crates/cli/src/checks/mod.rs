//! Acceptance checks. Each compares a library result against an independent
//! oracle (linear algebra, sampling, quadrature, finite differences,
//! exhaustive grids) and reports pass/fail with its wall time.

mod e2e;
mod exact;
mod oracles;

use std::time::{Duration, Instant};

use serde::Serialize;

pub use e2e::{
    certificate_soundness, end_to_end, robust_sarsa_efficacy, train_e2e, AgentEval, E2eArtifacts, E2eConfig, PairedRun,
    SA_DDPG_KAPPA, SA_DQN_KAPPA, SA_PPO_KAPPA,
};
pub use exact::{appendix_a_values, contraction, gap_bound, witnesses};
pub use oracles::{
    attack_sandwich, closed_forms, gaussian_tv_quadrature, gradient_checks, linf_lipschitz, relaxation_soundness,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CheckOutcome {
    /// One line: `PASS name (1.23 s / 10 s) detail`.
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2} s / {} s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.budget_seconds,
            self.detail
        )
    }
}

/// Runs `f`, failing the check on error or when it exceeds `budget`.
pub fn timed<F>(name: &str, budget: Duration, f: F) -> CheckOutcome
where
    F: FnOnce() -> anyhow::Result<(bool, String)>,
{
    let t = Instant::now();
    let res = f();
    finish(name, budget, t.elapsed(), res)
}

/// As [`timed`] for work whose duration was measured elsewhere.
pub fn finish(name: &str, budget: Duration, elapsed: Duration, res: anyhow::Result<(bool, String)>) -> CheckOutcome {
    let (ok, mut detail) = match res {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    let in_time = elapsed <= budget;
    if !in_time {
        detail = format!("over time budget; {detail}");
    }
    CheckOutcome {
        name: name.to_string(),
        passed: ok && in_time,
        detail,
        seconds: elapsed.as_secs_f64(),
        budget_seconds: budget.as_secs_f64(),
    }
}

/// Every check that needs no trained agent.
pub fn fast_suite(seed: u64) -> Vec<CheckOutcome> {
    vec![
        appendix_a_values(),
        contraction(seed),
        gap_bound(seed),
        witnesses(),
        relaxation_soundness(seed),
        closed_forms(seed),
        gradient_checks(seed),
        attack_sandwich(seed),
    ]
}
