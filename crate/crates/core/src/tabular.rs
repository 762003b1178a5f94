//! Exact machinery for finite state-adversarial MDPs.
//!
//! An adversary `ν` replaces the observation of the true state `s` by some
//! `ν(s) ∈ B(s)`; the agent acts with `π(·|ν(s))` while the environment keeps
//! transitioning from `s`. For a fixed policy the worst-case adversary is the
//! fixed point of a γ-contraction ([`bellman_adversarial`]), so everything in
//! this module reduces to value iteration plus an exact linear-solve polish.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const ITERATION_CAP: usize = 1_000_000;
pub const DEFAULT_ENUMERATION_CAP: usize = 1 << 20;

/// Largest state count for which the linear-solve polish is attempted.
const POLISH_MAX_STATES: usize = 512;
const PROB_TOL: f64 = 1e-12;

/// Finite MDP together with per-state perturbation sets `B(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp", into = "RawMdp")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<Vec<f64>>>,
    perturb: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<Vec<f64>>>,
    perturb: Vec<Vec<usize>>,
}

impl TryFrom<RawMdp> for TabularMdp {
    type Error = Error;

    fn try_from(raw: RawMdp) -> Result<Self> {
        TabularMdp::new(raw.gamma, raw.p, raw.r, raw.perturb).and_then(|m| {
            if m.n_states != raw.n_states || m.n_actions != raw.n_actions {
                Err(Error::InvalidMdp(format!(
                    "declared shape ({}, {}) does not match tensors ({}, {})",
                    raw.n_states, raw.n_actions, m.n_states, m.n_actions
                )))
            } else {
                Ok(m)
            }
        })
    }
}

impl From<TabularMdp> for RawMdp {
    fn from(m: TabularMdp) -> Self {
        RawMdp {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            p: m.p,
            r: m.r,
            perturb: m.perturb,
        }
    }
}

impl TabularMdp {
    /// Builds and validates an MDP. Perturbation sets are sorted and
    /// deduplicated; each must contain its own state.
    pub fn new(
        gamma: f64,
        p: Vec<Vec<Vec<f64>>>,
        r: Vec<Vec<Vec<f64>>>,
        mut perturb: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n_states = p.len();
        if n_states == 0 {
            return Err(Error::InvalidMdp("no states".into()));
        }
        let n_actions = p[0].len();
        if n_actions == 0 {
            return Err(Error::InvalidMdp("no actions".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} outside (0, 1)")));
        }
        if r.len() != n_states || perturb.len() != n_states {
            return Err(Error::InvalidMdp("p, r and perturb disagree on state count".into()));
        }
        for s in 0..n_states {
            if p[s].len() != n_actions || r[s].len() != n_actions {
                return Err(Error::InvalidMdp(format!("state {s} has wrong action count")));
            }
            for a in 0..n_actions {
                let row = &p[s][a];
                if row.len() != n_states || r[s][a].len() != n_states {
                    return Err(Error::InvalidMdp(format!("row ({s}, {a}) has wrong length")));
                }
                if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                    return Err(Error::InvalidMdp(format!("row ({s}, {a}) has entries outside [0, 1]")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return Err(Error::InvalidMdp(format!("row ({s}, {a}) sums to {total}")));
                }
                if r[s][a].iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidMdp(format!("row ({s}, {a}) has non-finite rewards")));
                }
            }
            let set = &mut perturb[s];
            set.sort_unstable();
            set.dedup();
            if set.iter().any(|&t| t >= n_states) {
                return Err(Error::InvalidMdp(format!("perturbation set of {s} references unknown state")));
            }
            if set.binary_search(&s).is_err() {
                return Err(Error::InvalidMdp(format!("perturbation set of {s} does not contain {s}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            p,
            r,
            perturb,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.p[s][a][next]
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.r[s][a][next]
    }

    pub fn perturbation_set(&self, s: usize) -> &[usize] {
        &self.perturb[s]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.r
            .iter()
            .flatten()
            .flatten()
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Same dynamics with `B(s) = {s}`: the adversary has no power.
    pub fn with_singleton_perturbations(&self) -> Self {
        let mut out = self.clone();
        out.perturb = (0..self.n_states).map(|s| vec![s]).collect();
        out
    }

    pub fn with_perturbations(&self, perturb: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(self.gamma, self.p.clone(), self.r.clone(), perturb)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidMdp(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("MDP serialization is infallible")
    }

    /// Expected one-step reward plus discounted continuation at true state
    /// `s` when the agent acts on observation `observed`.
    fn backup(&self, policy: &TabularPolicy, s: usize, observed: usize, v: &[f64]) -> f64 {
        let mut total = 0.0;
        for a in 0..self.n_actions {
            let pa = policy.pi[observed][a];
            if pa == 0.0 {
                continue;
            }
            let mut q = 0.0;
            for next in 0..self.n_states {
                let pr = self.p[s][a][next];
                if pr != 0.0 {
                    q += pr * (self.r[s][a][next] + self.gamma * v[next]);
                }
            }
            total += pa * q;
        }
        total
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<()> {
        if policy.n_states() != self.n_states {
            return Err(Error::dim("policy states", self.n_states, policy.n_states()));
        }
        if policy.n_actions() != self.n_actions {
            return Err(Error::dim("policy actions", self.n_actions, policy.n_actions()));
        }
        Ok(())
    }

    fn check_adversary(&self, adversary: &TabularAdversary) -> Result<()> {
        if adversary.nu.len() != self.n_states {
            return Err(Error::dim("adversary states", self.n_states, adversary.nu.len()));
        }
        for (s, &t) in adversary.nu.iter().enumerate() {
            if self.perturb[s].binary_search(&t).is_err() {
                return Err(Error::AdversaryOutOfSet { state: s, target: t });
            }
        }
        Ok(())
    }
}

/// Row-stochastic action table `π(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    pi: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = Error;
    fn try_from(pi: Vec<Vec<f64>>) -> Result<Self> {
        TabularPolicy::new(pi)
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        p.pi
    }
}

impl TabularPolicy {
    pub fn new(pi: Vec<Vec<f64>>) -> Result<Self> {
        if pi.is_empty() || pi[0].is_empty() {
            return Err(Error::InvalidPolicy("empty table".into()));
        }
        let n_actions = pi[0].len();
        for (s, row) in pi.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::InvalidPolicy(format!("row {s} has {} actions", row.len())));
            }
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidPolicy(format!("row {s} has entries outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(Self { pi })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            pi: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let pi = actions
            .iter()
            .map(|&a| {
                if a >= n_actions {
                    return Err(Error::InvalidPolicy(format!("action {a} out of range")));
                }
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pi)
    }

    /// Two-action policy from the per-state probability of taking action 0.
    pub fn from_first_action_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.iter().map(|&p| vec![p, 1.0 - p]).collect())
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn n_actions(&self) -> usize {
        self.pi[0].len()
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        &self.pi[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.pi
    }
}

/// Deterministic perturbation map `ν(s)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TabularAdversary {
    pub nu: Vec<usize>,
}

impl TabularAdversary {
    pub fn identity(n_states: usize) -> Self {
        Self {
            nu: (0..n_states).collect(),
        }
    }
}

/// Per-state values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueVector(pub Vec<f64>);

impl std::ops::Deref for ValueVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One application of the fixed-adversary Bellman operator.
pub fn bellman_fixed(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    adversary: &TabularAdversary,
    v: &[f64],
) -> Vec<f64> {
    (0..mdp.n_states)
        .map(|s| mdp.backup(policy, s, adversary.nu[s], v))
        .collect()
}

/// One application of the adversarial Bellman operator
/// `(L V)(s) = min_{ŝ ∈ B(s)} Σ_a π(a|ŝ) Σ_{s'} p(s'|s,a) [R + γ V(s')]`,
/// together with the minimizing adversary (lowest index among ties).
pub fn bellman_adversarial(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    v: &[f64],
) -> (Vec<f64>, TabularAdversary) {
    let mut out = Vec::with_capacity(mdp.n_states);
    let mut nu = Vec::with_capacity(mdp.n_states);
    for s in 0..mdp.n_states {
        let (best, arg) = greedy_min(mdp, policy, s, v);
        out.push(best);
        nu.push(arg);
    }
    (out, TabularAdversary { nu })
}

fn greedy_min(mdp: &TabularMdp, policy: &TabularPolicy, s: usize, v: &[f64]) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut arg = s;
    for &t in &mdp.perturb[s] {
        let q = mdp.backup(policy, s, t, v);
        if q < best {
            best = q;
            arg = t;
        }
    }
    (best, arg)
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("tolerance must be positive, got {tol}")))
    }
}

fn iterate<F>(n: usize, tol: f64, mut op: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..ITERATION_CAP {
        let next = op(&v);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("value iteration".into()));
        }
        residual = sup_diff(&next, &v);
        v = next;
        if residual < tol {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        iterations: ITERATION_CAP,
        residual,
    })
}

/// Exact value of the merged policy `π∘ν` via `(I − γ P) v = r`.
fn solve_merged(mdp: &TabularMdp, policy: &TabularPolicy, adversary: &TabularAdversary) -> Option<Vec<f64>> {
    let n = mdp.n_states;
    if n > POLISH_MAX_STATES {
        return None;
    }
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        let obs = adversary.nu[s];
        for act in 0..mdp.n_actions {
            let pa = policy.pi[obs][act];
            for next in 0..n {
                let w = pa * mdp.p[s][act][next];
                a[(s, next)] -= mdp.gamma * w;
                b[s] += w * mdp.r[s][act][next];
            }
        }
    }
    let x = a.lu().solve(&b)?;
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

/// Value of `π` under a fixed adversary `ν`.
pub fn evaluate_fixed(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    adversary: &TabularAdversary,
    tol: f64,
) -> Result<ValueVector> {
    check_tol(tol)?;
    mdp.check_policy(policy)?;
    mdp.check_adversary(adversary)?;
    let v = iterate(mdp.n_states, tol, |v| bellman_fixed(mdp, policy, adversary, v))?;
    Ok(ValueVector(solve_merged(mdp, policy, adversary).unwrap_or(v)))
}

/// Plain (unattacked) policy evaluation.
pub fn mdp_policy_evaluation(mdp: &TabularMdp, policy: &TabularPolicy, tol: f64) -> Result<ValueVector> {
    mdp.check_policy(policy)?;
    evaluate_fixed(mdp, policy, &TabularAdversary::identity(mdp.n_states), tol)
}

/// Value of `π` under the optimal (value-minimizing) adversary, with one
/// minimizing adversary.
///
/// Value iteration on the adversarial operator runs to the requested
/// residual; the adversary it induces is then refined by policy iteration
/// with exact linear solves until no state can be strictly improved.
pub fn evaluate_optimal_adversary(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    tol: f64,
) -> Result<(ValueVector, TabularAdversary)> {
    check_tol(tol)?;
    mdp.check_policy(policy)?;
    let mut v = iterate(mdp.n_states, tol, |v| bellman_adversarial(mdp, policy, v).0)?;
    let (_, mut adversary) = bellman_adversarial(mdp, policy, &v);

    for _ in 0..100 {
        let Some(exact) = solve_merged(mdp, policy, &adversary) else {
            break;
        };
        v = exact;
        let mut changed = false;
        for s in 0..mdp.n_states {
            let current = mdp.backup(policy, s, adversary.nu[s], &v);
            let (best, arg) = greedy_min(mdp, policy, s, &v);
            if best < current - 1e-12 * (1.0 + current.abs()) {
                adversary.nu[s] = arg;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // canonical adversary: lowest index within round-off of the minimum
    for s in 0..mdp.n_states {
        let (best, _) = greedy_min(mdp, policy, s, &v);
        let slack = 1e-12 * (1.0 + best.abs());
        adversary.nu[s] = mdp.perturb[s]
            .iter()
            .copied()
            .find(|&t| mdp.backup(policy, s, t, &v) <= best + slack)
            .unwrap_or(adversary.nu[s]);
    }
    Ok((ValueVector(v), adversary))
}

/// `½ Σ_a |p(a) − q(a)|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Largest policy change an adversary can induce: `max_s max_{ŝ∈B(s)} TV`.
pub fn max_perturbed_tv(mdp: &TabularMdp, policy: &TabularPolicy) -> f64 {
    (0..mdp.n_states)
        .flat_map(|s| {
            mdp.perturb[s]
                .iter()
                .map(move |&t| tv_distance(policy.probs(s), policy.probs(t)))
        })
        .fold(0.0, f64::max)
}

/// `α = 2 [1 + γ / (1 − γ)²] · max |R|`.
pub fn gap_bound_constant(gamma: f64, max_abs_reward: f64) -> f64 {
    2.0 * (1.0 + gamma / ((1.0 - gamma) * (1.0 - gamma))) * max_abs_reward
}

/// Worst-case performance loss of a policy under its optimal adversary and
/// the total-variation bound on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    pub gap: f64,
    pub bound: f64,
    pub alpha: f64,
    pub max_tv: f64,
}

pub fn performance_gap_bound(mdp: &TabularMdp, policy: &TabularPolicy, tol: f64) -> Result<GapBound> {
    let natural = mdp_policy_evaluation(mdp, policy, tol)?;
    let (adversarial, _) = evaluate_optimal_adversary(mdp, policy, tol)?;
    let gap = natural
        .iter()
        .zip(adversarial.iter())
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    let alpha = gap_bound_constant(mdp.gamma, mdp.max_abs_reward());
    let max_tv = max_perturbed_tv(mdp, policy);
    Ok(GapBound {
        gap,
        bound: alpha * max_tv,
        alpha,
        max_tv,
    })
}

/// All `|A|^|S|` deterministic policies, in lexicographic order of the
/// action vector (state 0 most significant).
pub fn enumerate_deterministic_policies(mdp: &TabularMdp, cap: usize) -> Result<Vec<TabularPolicy>> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let requested = (na as f64).powi(ns as i32);
    if requested > cap as f64 {
        return Err(Error::EnumerationCap { requested, cap });
    }
    let total = requested as usize;
    let mut out = Vec::with_capacity(total);
    let mut actions = vec![0usize; ns];
    for _ in 0..total {
        out.push(TabularPolicy::deterministic(&actions, na)?);
        for digit in actions.iter_mut().rev() {
            *digit += 1;
            if *digit < na {
                break;
            }
            *digit = 0;
        }
    }
    Ok(out)
}

/// Index of a value vector that is ≥ every other one in every state
/// (within `tol`), if any.
pub fn dominating_index(values: &[ValueVector], tol: f64) -> Option<usize> {
    let n = values.first()?.len();
    let best: Vec<f64> = (0..n)
        .map(|s| values.iter().map(|v| v[s]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    values
        .iter()
        .position(|v| v.iter().zip(&best).all(|(x, m)| *x >= m - tol))
}

/// Parameters of the random instance generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Probability that another state joins `B(s)`.
    pub perturb_prob: f64,
}

/// Dirichlet(1, …, 1) transition rows, rewards uniform in [−1, 1].
pub fn random_mdp(spec: RandomMdpSpec, seed: u64) -> Result<TabularMdp> {
    let mut rng = seed::rng(seed);
    let (ns, na) = (spec.n_states, spec.n_actions);
    let mut p = vec![vec![vec![0.0; ns]; na]; ns];
    let mut r = vec![vec![vec![0.0; ns]; na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let draws: Vec<f64> = (0..ns).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut row: Vec<f64> = draws.iter().map(|x| x / total).collect();
            // push the rounding residue into the largest entry
            let residue = 1.0 - row.iter().sum::<f64>();
            let imax = (0..ns).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
            row[imax] += residue;
            p[s][a] = row;
            for next in 0..ns {
                r[s][a][next] = rng.gen_range(-1.0..=1.0);
            }
        }
    }
    let perturb = (0..ns)
        .map(|s| {
            (0..ns)
                .filter(|&t| t == s || rng.gen_bool(spec.perturb_prob.clamp(0.0, 1.0)))
                .collect()
        })
        .collect();
    TabularMdp::new(spec.gamma, p, r, perturb)
}

/// Random stochastic policy with Dirichlet(1) rows.
pub fn random_policy(n_states: usize, n_actions: usize, seed: u64) -> TabularPolicy {
    let mut rng = seed::rng(seed);
    let pi = (0..n_states)
        .map(|_| {
            let draws: Vec<f64> = (0..n_actions).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut row: Vec<f64> = draws.iter().map(|x| x / total).collect();
            let residue = 1.0 - row.iter().sum::<f64>();
            row[0] = (row[0] + residue).clamp(0.0, 1.0);
            row
        })
        .collect();
    TabularPolicy { pi }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state() -> TabularMdp {
        TabularMdp::new(
            0.9,
            vec![
                vec![vec![0.7, 0.3], vec![0.2, 0.8]],
                vec![vec![0.5, 0.5], vec![1.0, 0.0]],
            ],
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 2.0]],
                vec![vec![-1.0, 0.5], vec![0.3, 0.0]],
            ],
            vec![vec![0, 1], vec![0, 1]],
        )
        .unwrap()
    }

    /// Cramer's-rule solve of the 2×2 system `(I − γ P) v = r`.
    fn solve2(gamma: f64, pm: [[f64; 2]; 2], rm: [f64; 2]) -> [f64; 2] {
        let a = [
            [1.0 - gamma * pm[0][0], -gamma * pm[0][1]],
            [-gamma * pm[1][0], 1.0 - gamma * pm[1][1]],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [
            (rm[0] * a[1][1] - a[0][1] * rm[1]) / det,
            (a[0][0] * rm[1] - rm[0] * a[1][0]) / det,
        ]
    }

    #[test]
    fn fixed_adversary_matches_linear_system() {
        let mdp = two_state();
        let pol = TabularPolicy::new(vec![vec![0.25, 0.75], vec![0.6, 0.4]]).unwrap();
        let adv = TabularAdversary { nu: vec![1, 0] };
        // merged policy: state 0 acts like state 1, state 1 like state 0
        let m0 = [0.6, 0.4];
        let m1 = [0.25, 0.75];
        let pm = [
            [m0[0] * 0.7 + m0[1] * 0.2, m0[0] * 0.3 + m0[1] * 0.8],
            [m1[0] * 0.5 + m1[1] * 1.0, m1[0] * 0.5],
        ];
        let rm = [
            m0[0] * (0.7 * 1.0) + m0[1] * (0.8 * 2.0),
            m1[0] * (0.5 * -1.0 + 0.5 * 0.5) + m1[1] * 0.3,
        ];
        let expected = solve2(0.9, pm, rm);
        let v = evaluate_fixed(&mdp, &pol, &adv, 1e-10).unwrap();
        assert_abs_diff_eq!(v[0], expected[0], epsilon = 1e-9);
        assert_abs_diff_eq!(v[1], expected[1], epsilon = 1e-9);
    }

    #[test]
    fn identity_adversary_is_policy_evaluation() {
        let mdp = random_mdp(
            RandomMdpSpec { n_states: 5, n_actions: 3, gamma: 0.95, perturb_prob: 0.5 },
            3,
        )
        .unwrap();
        let pol = random_policy(5, 3, 4);
        let a = evaluate_fixed(&mdp, &pol, &TabularAdversary::identity(5), 1e-10).unwrap();
        let b = mdp_policy_evaluation(&mdp, &pol, 1e-10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adversary_outside_set_is_rejected() {
        let mdp = two_state().with_singleton_perturbations();
        let pol = TabularPolicy::uniform(2, 2);
        let err = evaluate_fixed(&mdp, &pol, &TabularAdversary { nu: vec![1, 1] }, 1e-8).unwrap_err();
        assert_eq!(err, Error::AdversaryOutOfSet { state: 0, target: 1 });
    }

    #[test]
    fn self_loop_without_reward_has_zero_value() {
        let mdp = TabularMdp::new(
            0.9,
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]],
            vec![vec![vec![0.0, 0.0], vec![0.0, 5.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]],
            vec![vec![0], vec![1]],
        )
        .unwrap();
        let pol = TabularPolicy::deterministic(&[0, 0], 2).unwrap();
        let v = mdp_policy_evaluation(&mdp, &pol, 1e-8).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn optimal_adversary_with_singletons_is_plain_evaluation() {
        let mdp = random_mdp(
            RandomMdpSpec { n_states: 4, n_actions: 2, gamma: 0.9, perturb_prob: 0.0 },
            11,
        )
        .unwrap();
        let pol = random_policy(4, 2, 12);
        let (v, adv) = evaluate_optimal_adversary(&mdp, &pol, 1e-8).unwrap();
        let w = mdp_policy_evaluation(&mdp, &pol, 1e-8).unwrap();
        assert_eq!(adv, TabularAdversary::identity(4));
        for s in 0..4 {
            assert_abs_diff_eq!(v[s], w[s], epsilon = 1e-9);
        }
    }

    #[test]
    fn alpha_formula() {
        assert_abs_diff_eq!(gap_bound_constant(0.99, 1.0), 19802.0, epsilon = 1e-6);
    }

    #[test]
    fn enumeration_counts() {
        let mdp = TabularMdp::new(0.5, vec![vec![vec![1.0]]], vec![vec![vec![0.0]]], vec![vec![0]]).unwrap();
        assert_eq!(enumerate_deterministic_policies(&mdp, 10).unwrap().len(), 1);

        let mdp = random_mdp(
            RandomMdpSpec { n_states: 2, n_actions: 3, gamma: 0.9, perturb_prob: 0.0 },
            0,
        )
        .unwrap();
        let all = enumerate_deterministic_policies(&mdp, 100).unwrap();
        // counting oracle: 3^2 action vectors, all distinct
        assert_eq!(all.len(), 9);
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
        assert!(matches!(
            enumerate_deterministic_policies(&mdp, 8),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn invalid_mdps_are_rejected() {
        let bad_gamma = TabularMdp::new(1.0, vec![vec![vec![1.0]]], vec![vec![vec![0.0]]], vec![vec![0]]);
        assert!(bad_gamma.is_err());
        let bad_row = TabularMdp::new(0.9, vec![vec![vec![0.5]]], vec![vec![vec![0.0]]], vec![vec![0]]);
        assert!(bad_row.is_err());
        let missing_self = TabularMdp::new(
            0.9,
            vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            vec![vec![vec![0.0, 0.0]], vec![vec![0.0, 0.0]]],
            vec![vec![1], vec![1]],
        );
        assert!(missing_self.is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let mdp = two_state();
        let back = TabularMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(mdp, back);
        let mut v: serde_json::Value = serde_json::from_str(&mdp.to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(TabularMdp::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn tolerance_must_be_positive() {
        let mdp = two_state();
        let pol = TabularPolicy::uniform(2, 2);
        assert!(mdp_policy_evaluation(&mdp, &pol, 0.0).is_err());
    }
}
