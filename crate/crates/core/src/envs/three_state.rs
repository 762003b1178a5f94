use crate::tabular::TabularMdp;

pub const S1: usize = 0;
pub const S2: usize = 1;
pub const S3: usize = 2;
const A1: usize = 0;
const A2: usize = 1;

/// The three-state, two-action counterexample MDP with γ = 0.99 and an
/// adversary that may report any state.
///
/// `A1` keeps the agent in place (rewarded in `S2` and `S3`, not in `S1`);
/// `A2` cycles `S1 → S2 → S3 → S1` and is rewarded only when leaving `S1`.
pub fn three_state_mdp() -> TabularMdp {
    let mut p = vec![vec![vec![0.0; 3]; 2]; 3];
    let mut r = vec![vec![vec![0.0; 3]; 2]; 3];
    p[S1][A1][S1] = 1.0;
    p[S1][A2][S2] = 1.0;
    p[S2][A1][S2] = 1.0;
    p[S2][A2][S3] = 1.0;
    p[S3][A1][S3] = 1.0;
    p[S3][A2][S1] = 1.0;
    r[S1][A2][S2] = 1.0;
    r[S2][A1][S2] = 1.0;
    r[S3][A1][S3] = 1.0;
    let all = vec![S1, S2, S3];
    TabularMdp::new(0.99, p, r, vec![all.clone(), all.clone(), all])
        .expect("three-state MDP is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listed_entries() {
        let m = three_state_mdp();
        assert_eq!(m.transition(S1, A2, S2), 1.0);
        assert_eq!(m.reward(S1, A2, S2), 1.0);
        assert_eq!(m.gamma(), 0.99);
        for s in 0..3 {
            assert_eq!(m.perturbation_set(s), &[0, 1, 2]);
            for a in 0..2 {
                let total: f64 = (0..3).map(|n| m.transition(s, a, n)).sum();
                assert_eq!(total, 1.0);
            }
        }
    }
}
