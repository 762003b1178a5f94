use proptest::prelude::*;
use sarl_core::envs::{three_state_mdp, S1, S2, S3};
use sarl_core::tabular::*;

const TOL: f64 = 1e-10;

/// Dense Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Value of the merged policy `π∘ν` from the linear system `(I − γP)v = r`.
fn linear_oracle(mdp: &TabularMdp, pi: &TabularPolicy, nu: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s][s] = 1.0;
        for act in 0..mdp.n_actions() {
            let w = pi.probs(nu[s])[act];
            for t in 0..n {
                let pt = w * mdp.transition(s, act, t);
                a[s][t] -= mdp.gamma() * pt;
                b[s] += pt * mdp.reward(s, act, t);
            }
        }
    }
    solve(a, b)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn optimal_mdp_policy() -> TabularPolicy {
    TabularPolicy::from_first_action_probs(&[0.0, 1.0, 1.0]).unwrap()
}

fn spec(n_states: usize, n_actions: usize, gamma: f64, perturb_prob: f64) -> RandomMdpSpec {
    RandomMdpSpec { n_states, n_actions, gamma, perturb_prob }
}

#[test]
fn three_state_values() {
    let mdp = three_state_mdp();
    let g: f64 = 0.99;
    let opt = optimal_mdp_policy();
    assert_close(&mdp_policy_evaluation(&mdp, &opt, 1e-8).unwrap(), &[100.0; 3], 1e-6);
    let fixed = evaluate_fixed(&mdp, &opt, &TabularAdversary { nu: vec![S2, S1, S1] }, 1e-8).unwrap();
    assert_close(&fixed, &[0.0; 3], 1e-6);
    let (v, _) = evaluate_optimal_adversary(&mdp, &opt, 1e-8).unwrap();
    assert_close(&v, &[0.0; 3], 1e-6);

    let (v, _) = evaluate_optimal_adversary(&mdp, &TabularPolicy::uniform(3, 2), 1e-8).unwrap();
    assert_close(&v, &[50.0; 3], 1e-6);

    let cyc = TabularPolicy::from_first_action_probs(&[0.0, 0.0, 0.0]).unwrap();
    let (v, _) = evaluate_optimal_adversary(&mdp, &cyc, 1e-8).unwrap();
    let d = 1.0 - g.powi(3);
    assert_close(&v, &[1.0 / d, g * g / d, g / d], 1e-6);
}

#[test]
fn three_state_sweep_corners() {
    let mdp = three_state_mdp();
    let (v, _) = evaluate_optimal_adversary(&mdp, &TabularPolicy::from_first_action_probs(&[1.0; 3]).unwrap(), 1e-8).unwrap();
    assert_close(&v, &[0.0, 100.0, 100.0], 1e-6);
}

#[test]
fn fixed_evaluation_matches_linear_oracle() {
    for seed in 0..20 {
        let mdp = random_mdp(spec(2 + seed as usize % 4, 3, 0.9, 0.5), seed).unwrap();
        let pi = random_policy(mdp.n_states(), 3, seed + 100);
        let nu: Vec<usize> = (0..mdp.n_states()).map(|s| *mdp.perturbation_set(s).last().unwrap()).collect();
        let got = evaluate_fixed(&mdp, &pi, &TabularAdversary { nu: nu.clone() }, 1e-9).unwrap();
        assert_close(&got, &linear_oracle(&mdp, &pi, &nu), 1e-9);
        let ident: Vec<usize> = (0..mdp.n_states()).collect();
        let plain = mdp_policy_evaluation(&mdp, &pi, 1e-9).unwrap();
        assert_close(&plain, &linear_oracle(&mdp, &pi, &ident), 1e-9);
    }
}

#[test]
fn theorem3_and_theorem4_witnesses() {
    let mdp = three_state_mdp();
    let (uniform, _) = evaluate_optimal_adversary(&mdp, &TabularPolicy::uniform(3, 2), 1e-8).unwrap();
    let dets = enumerate_deterministic_policies(&mdp, 1 << 10).unwrap();
    assert_eq!(dets.len(), 8);
    for d in &dets {
        let (v, _) = evaluate_optimal_adversary(&mdp, d, 1e-8).unwrap();
        assert!((0..3).any(|s| v[s] < uniform[s] - 1e-6), "{:?} is never beaten: {v:?}", d.rows());
    }
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let mut values = Vec::new();
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                let p = TabularPolicy::from_first_action_probs(&[a, b, c]).unwrap();
                values.push(evaluate_optimal_adversary(&mdp, &p, 1e-8).unwrap().0);
            }
        }
    }
    assert_eq!(values.len(), 21 * 21 * 21);
    assert_eq!(dominating_index(&values, 1e-9), None);
}

#[test]
fn enumeration_counts_and_cap() {
    let one = random_mdp(spec(1, 1, 0.5, 0.0), 0).unwrap();
    assert_eq!(enumerate_deterministic_policies(&one, 10).unwrap().len(), 1);
    let two = random_mdp(spec(2, 3, 0.5, 0.0), 0).unwrap();
    let all = enumerate_deterministic_policies(&two, 10).unwrap();
    assert_eq!(all.len(), 9);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
    assert!(enumerate_deterministic_policies(&two, 8).is_err());
}

#[test]
fn uniform_policy_has_zero_gap_and_bound() {
    let b = performance_gap_bound(&three_state_mdp(), &TabularPolicy::uniform(3, 2), 1e-8).unwrap();
    assert_eq!(b.max_tv, 0.0);
    assert_eq!(b.bound, 0.0);
    assert!(b.gap.abs() < 1e-9);
    assert!((gap_bound_constant(0.99, 1.0) - 19802.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adversarial_operator_contracts(seed in 0u64..1_000_000, n in 2usize..7, na in 1usize..4,
                                      gamma in 0.05f64..0.99) {
        let mdp = random_mdp(spec(n, na, gamma, 0.5), seed).unwrap();
        let pi = random_policy(n, na, seed ^ 1);
        let mut rng = sarl_core::seed::rng(seed ^ 2);
        use rand::Rng;
        let v1: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let v2: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let (l1, _) = bellman_adversarial(&mdp, &pi, &v1);
        let (l2, _) = bellman_adversarial(&mdp, &pi, &v2);
        let lhs = l1.iter().zip(&l2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rhs = v1.iter().zip(&v2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(lhs <= gamma * rhs + 1e-12);
    }

    #[test]
    fn optimal_adversary_is_minimal(seed in 0u64..1_000_000, n in 2usize..6) {
        let mdp = random_mdp(spec(n, 2, 0.9, 0.6), seed).unwrap();
        let pi = random_policy(n, 2, seed ^ 7);
        let (best, nu_star) = evaluate_optimal_adversary(&mdp, &pi, 1e-10).unwrap();
        for s in 0..n {
            prop_assert!(mdp.perturbation_set(s).contains(&nu_star.nu[s]));
        }
        let mut rng = sarl_core::seed::rng(seed ^ 3);
        use rand::seq::SliceRandom;
        for _ in 0..100 {
            let nu: Vec<usize> = (0..n).map(|s| *mdp.perturbation_set(s).choose(&mut rng).unwrap()).collect();
            let v = evaluate_fixed(&mdp, &pi, &TabularAdversary { nu }, 1e-10).unwrap();
            for s in 0..n {
                prop_assert!(best[s] <= v[s] + TOL);
            }
        }
    }

    #[test]
    fn singleton_sets_make_the_adversary_powerless(seed in 0u64..1_000_000, n in 1usize..6, na in 1usize..4) {
        let mdp = random_mdp(spec(n, na, 0.8, 0.7), seed).unwrap().with_singleton_perturbations();
        let pi = random_policy(n, na, seed ^ 5);
        let (adv, _) = evaluate_optimal_adversary(&mdp, &pi, 1e-10).unwrap();
        let plain = mdp_policy_evaluation(&mdp, &pi, 1e-10).unwrap();
        for s in 0..n {
            prop_assert!((adv[s] - plain[s]).abs() <= 1e-9);
        }
    }

    #[test]
    fn gap_never_exceeds_tv_bound(seed in 0u64..1_000_000, gamma in 0.1f64..0.95, p in 0.0f64..1.0) {
        let mdp = random_mdp(spec(4, 2, gamma, p), seed).unwrap();
        let pi = random_policy(4, 2, seed ^ 11);
        let b = performance_gap_bound(&mdp, &pi, 1e-10).unwrap();
        prop_assert!(b.gap >= -1e-9);
        prop_assert!(b.gap <= b.bound + 1e-9, "gap {} bound {}", b.gap, b.bound);
    }
}
