//! Checks against exact tabular results.

use std::time::Duration;

use anyhow::Result;
use rand::Rng;

use sarl_core::envs::three_state_mdp;
use sarl_core::tabular::{
    bellman_adversarial, dominating_index, enumerate_deterministic_policies, evaluate_optimal_adversary, performance_gap_bound,
    random_mdp, random_policy, RandomMdpSpec, TabularPolicy, ValueVector,
};
use sarl_core::{par, seed};

use super::{timed, CheckOutcome};
use crate::commands::{sweep_rows, tabular_report};

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn appendix_a_values() -> CheckOutcome {
    timed("appendix_a_values", Duration::from_secs(1), || {
        let mdp = three_state_mdp();
        let g: f64 = mdp.gamma();
        let opt = tabular_report(&mdp, &TabularPolicy::from_first_action_probs(&[0.0, 1.0, 1.0])?, 1e-8)?;
        let uni = tabular_report(&mdp, &TabularPolicy::uniform(3, 2), 1e-8)?;
        let cyc = tabular_report(&mdp, &TabularPolicy::from_first_action_probs(&[0.0, 0.0, 0.0])?, 1e-8)?;
        let d = 1.0 - g.powi(3);
        let errs = [
            max_err(&opt.v_mdp, &[100.0; 3]),
            max_err(&opt.v_adv, &[0.0; 3]),
            max_err(&uni.v_adv, &[50.0; 3]),
            max_err(&cyc.v_adv, &[1.0 / d, g * g / d, g / d]),
        ];
        let worst = errs.iter().copied().fold(0.0, f64::max);
        Ok((worst <= 1e-6, format!("max abs error {worst:.2e} over V_opt, Ṽ_opt, Ṽ_uniform, Ṽ_cycle")))
    })
}

fn random_spec(rng: &mut seed::Rng, n_states: Option<usize>) -> RandomMdpSpec {
    RandomMdpSpec {
        n_states: n_states.unwrap_or_else(|| rng.gen_range(2..8)),
        n_actions: rng.gen_range(1..4),
        gamma: rng.gen_range(0.05..0.99),
        perturb_prob: rng.gen_range(0.0..1.0),
    }
}

pub fn contraction(seed_: u64) -> CheckOutcome {
    timed("contraction", Duration::from_secs(10), || {
        let ratios = par::try_collect(par::map_range(200, |i| -> Result<(bool, f64)> {
            let mut rng = seed::child_rng(seed_, i as u64);
            let spec = random_spec(&mut rng, None);
            let mdp = random_mdp(spec, rng.gen())?;
            let pi = random_policy(spec.n_states, spec.n_actions, rng.gen());
            let v1: Vec<f64> = (0..spec.n_states).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let v2: Vec<f64> = (0..spec.n_states).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let (l1, _) = bellman_adversarial(&mdp, &pi, &v1);
            let (l2, _) = bellman_adversarial(&mdp, &pi, &v2);
            let lhs = max_err(&l1, &l2);
            let rhs = max_err(&v1, &v2);
            Ok((lhs <= spec.gamma * rhs + 1e-12, lhs / (spec.gamma * rhs)))
        }))?;
        let fails = ratios.iter().filter(|r| !r.0).count();
        let worst = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
        Ok((fails == 0, format!("200 instances, {fails} violations, max ‖LV1−LV2‖/(γ‖V1−V2‖) = {worst:.4}")))
    })
}

pub fn gap_bound(seed_: u64) -> CheckOutcome {
    timed("gap_bound", Duration::from_secs(30), || {
        let res = par::try_collect(par::map_range(100, |i| -> Result<(f64, f64)> {
            let mut rng = seed::child_rng(seed_ ^ 0x5a5a, i as u64);
            let spec = random_spec(&mut rng, Some(4));
            let mdp = random_mdp(spec, rng.gen())?;
            let pi = random_policy(4, spec.n_actions, rng.gen());
            let b = performance_gap_bound(&mdp, &pi, 1e-10)?;
            Ok((b.gap, b.bound))
        }))?;
        let fails = res.iter().filter(|(g, b)| g > &(b + 1e-9)).count();
        let tightest = res.iter().filter(|(_, b)| *b > 0.0).map(|(g, b)| g / b).fold(0.0, f64::max);
        Ok((fails == 0, format!("100 instances, {fails} violations, max gap/bound = {tightest:.4}")))
    })
}

pub fn witnesses() -> CheckOutcome {
    timed("witnesses", Duration::from_secs(60), || {
        let mdp = three_state_mdp();
        let (uniform, _) = evaluate_optimal_adversary(&mdp, &TabularPolicy::uniform(3, 2), 1e-8)?;
        let dets = enumerate_deterministic_policies(&mdp, 1 << 10)?;
        let mut beaten = 0;
        for d in &dets {
            let (v, _) = evaluate_optimal_adversary(&mdp, d, 1e-8)?;
            if (0..3).any(|s| v.0[s] < uniform.0[s] - 1e-6) {
                beaten += 1;
            }
        }
        let rows = sweep_rows(21, 1e-8)?;
        let values: Vec<ValueVector> = rows.iter().map(|r| ValueVector(vec![r.v_s1, r.v_s2, r.v_s3])).collect();
        let dom = dominating_index(&values, 1e-9);
        let ok = dets.len() == 8 && beaten == 8 && dom.is_none() && rows.len() == 21 * 21 * 21;
        Ok((ok, format!("{beaten}/{} deterministic policies beaten by uniform; dominating grid policy: {dom:?}", dets.len())))
    })
}
