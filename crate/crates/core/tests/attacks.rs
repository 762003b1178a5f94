use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use sarl_core::agents::{Agent, ContinuousPolicy, DdpgAgent, DdpgConfig, DqnAgent, DqnConfig};
use sarl_core::attacks::*;
use sarl_core::envs::{Action, ActionSpace, EnvConfig, EnvStep, Environment, GridWorldConfig, PointMassConfig};
use sarl_core::net::{Activation, Layer, Mlp};
use sarl_core::optim::{random_maximize, BallSpec};
use sarl_core::{seed, Result};

/// Unclipped policy `a = net(s)` with unit action scale.
struct NetPolicy(Mlp);

impl ContinuousPolicy for NetPolicy {
    fn obs_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn action_dim(&self) -> usize {
        self.0.output_dim()
    }
    fn action(&self, s: &Array1<f64>) -> Result<Array1<f64>> {
        self.0.forward(s)
    }
    fn action_vjp(&self, s: &Array1<f64>, upstream: &Array1<f64>) -> Result<Array1<f64>> {
        self.0.input_gradient(s, upstream)
    }
    fn action_scale(&self) -> Array1<f64> {
        Array1::ones(self.0.output_dim())
    }
    fn critic(&self) -> Option<&Mlp> {
        None
    }
}

fn linear(w: Array2<f64>, b: Array1<f64>) -> Mlp {
    Mlp::new(vec![Layer { weight: w, bias: b, activation: Activation::Identity }]).unwrap()
}

/// `Q(s, a) = −|a − a_ref|` for a scalar action, via two ReLUs.
fn distance_critic(state_dim: usize, a_ref: f64) -> Mlp {
    let mut w1 = Array2::zeros((2, state_dim + 1));
    w1[[0, state_dim]] = 1.0;
    w1[[1, state_dim]] = -1.0;
    let hidden = Layer { weight: w1, bias: array![-a_ref, a_ref], activation: Activation::Relu };
    let head = Layer { weight: array![[-1.0, -1.0]], bias: array![0.0], activation: Activation::Identity };
    Mlp::new(vec![hidden, head]).unwrap()
}

fn random_vec(n: usize, seed_: u64, scale: f64) -> Array1<f64> {
    let mut rng = seed::rng(seed_);
    Array1::from_shape_fn(n, |_| rng.gen_range(-scale..scale))
}

#[test]
fn critic_attack_matches_sign_solution() {
    for s in 0..10 {
        let w = random_vec(3, s, 0.5).into_shape_with_order((1, 3)).unwrap();
        let policy = NetPolicy(linear(w.clone(), array![0.0]));
        let s0 = random_vec(3, s + 100, 0.5);
        let a_ref = policy.action(&s0).unwrap()[0] - 0.05;
        let q = distance_critic(3, a_ref);
        let eps = 0.1;
        let cfg = AttackConfig::new(AttackKind::Critic, eps);
        let x = critic_attack(&q, &policy, &BallSpec::new(s0.clone(), eps).unwrap(), &cfg).unwrap();
        let expected = &s0 + &w.row(0).mapv(|v| eps * v.signum());
        for i in 0..3 {
            assert!((x[i] - expected[i]).abs() < 1e-12, "{x} vs {expected}");
        }
        let (q0, _) = critic_objective(&q, &policy, &s0, &s0).unwrap();
        let (q1, _) = critic_objective(&q, &policy, &s0, &x).unwrap();
        assert!(q1 <= q0);
    }
}

#[test]
fn critic_objective_freezes_the_state_argument() {
    let q = Mlp::random(&[3, 8, 1], Activation::Tanh, 4);
    let policy = NetPolicy(Mlp::random(&[2, 4, 1], Activation::Tanh, 5));
    let s0 = array![0.1, -0.2];
    let x = array![0.15, -0.1];
    let (v, g) = critic_objective(&q, &policy, &s0, &x).unwrap();
    let a = policy.action(&x).unwrap();
    assert_eq!(v, q.forward(&array![0.1, -0.2, a[0]]).unwrap()[0]);
    let h = 1e-6;
    for i in 0..2 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        let fd = (critic_objective(&q, &policy, &s0, &xp).unwrap().0 - critic_objective(&q, &policy, &s0, &xm).unwrap().0) / (2.0 * h);
        assert!((fd - g[i]).abs() < 1e-6);
    }
}

#[test]
fn mad_reaches_closed_form_on_linear_policy() {
    let mut hits = 0;
    for s in 0..50 {
        let w = random_vec(4, s, 1.0).into_shape_with_order((1, 4)).unwrap();
        let policy = NetPolicy(linear(w.clone(), array![0.2]));
        let s0 = random_vec(4, s + 1000, 0.5);
        let eps = 0.1;
        let mut cfg = AttackConfig::new(AttackKind::Mad, eps);
        cfg.seed = s;
        let x = mad_attack(&policy, &BallSpec::new(s0.clone(), eps).unwrap(), &cfg).unwrap();
        let a0 = policy.action(&s0).unwrap();
        let (v, _) = mad_objective(&policy, &a0, &x).unwrap();
        let closed = 0.5 * (eps * w.iter().map(|v| v.abs()).sum::<f64>()).powi(2);
        assert!(v <= closed + 1e-12);
        if v >= 0.9 * closed {
            hits += 1;
        }
    }
    assert!(hits >= 45, "{hits}/50");
}

#[test]
fn mad_beats_random_sampling() {
    let mut wins = 0;
    for s in 0..50 {
        let policy = NetPolicy(Mlp::random(&[3, 16, 16, 2], Activation::Relu, s));
        let s0 = random_vec(3, s + 1000, 0.5);
        let eps = 0.1;
        let ball = BallSpec::new(s0.clone(), eps).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Mad, eps);
        cfg.seed = s;
        let a0 = policy.action(&s0).unwrap();
        let x = mad_attack(&policy, &ball, &cfg).unwrap();
        let (v, _) = mad_objective(&policy, &a0, &x).unwrap();
        let r = random_maximize(|x| Ok(mad_objective(&policy, &a0, x)?.0), &ball, 100, s + 7).unwrap();
        if v >= r.value {
            wins += 1;
        }
    }
    assert!(wins >= 45, "{wins}/50");
}

#[test]
fn hybrid_objective_endpoints() {
    let policy = NetPolicy(Mlp::random(&[2, 8, 1], Activation::Tanh, 1));
    let sarsa = SarsaCritic::new(Mlp::random(&[3, 8, 1], Activation::Relu, 2), 2, 1.0, 0.1).unwrap();
    let s0 = array![0.3, -0.4];
    let a0 = policy.action(&s0).unwrap();
    for k in 0..5 {
        let x = &s0 + &random_vec(2, k, 0.1);
        let (q, gq) = critic_objective(&sarsa.qnet, &policy, &s0, &x).unwrap();
        let (m, gm) = mad_objective(&policy, &a0, &x).unwrap();
        let (h1, g1) = hybrid_objective(&sarsa, &policy, &s0, &a0, 1.0, &x).unwrap();
        let (h0, g0) = hybrid_objective(&sarsa, &policy, &s0, &a0, 0.0, &x).unwrap();
        assert_eq!((h1, g1), (q, gq));
        assert_eq!((h0, g0), (-m, -gm));
    }
    let ball = BallSpec::new(s0.clone(), 0.1).unwrap();
    let mut cfg = AttackConfig::new(AttackKind::RsMad, 0.1);
    assert!(hybrid_rs_mad(&sarsa, &policy, &ball, &cfg).is_err());
    cfg.alpha_rs_mad = Some(0.5);
    assert!(ball.contains(&hybrid_rs_mad(&sarsa, &policy, &ball, &cfg).unwrap(), 1e-12));
}

#[test]
fn pgd_dqn_keeps_certified_actions() {
    // action 2 leads every other action by at least 1 over the whole ball
    let q = linear(array![[0.5, -0.5], [-0.3, 0.2], [0.1, 0.1]], array![0.0, 0.0, 2.0]);
    let s0 = array![0.4, 0.6];
    let eps = 0.1;
    assert!(sarl_core::agents::certify::dqn_certified(&q, &s0, eps, sarl_core::relax::BoundMethod::Ibp).unwrap());
    let mut cfg = AttackConfig::new(AttackKind::PgdDqn, eps);
    cfg.steps = 50;
    cfg.restarts = 5;
    let x = pgd_dqn_attack(&q, &BallSpec::new(s0.clone(), eps).unwrap(), &cfg).unwrap();
    assert_eq!(sarl_core::agents::argmax(&q.forward(&x).unwrap()), 2);
    let zero = pgd_dqn_attack(&q, &BallSpec::new(s0.clone(), 0.0).unwrap(), &cfg).unwrap();
    assert_eq!(zero, s0);
}

#[test]
fn pgd_dqn_flips_a_narrow_margin() {
    let q = linear(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
    let s0 = array![0.52, 0.5];
    let cfg = AttackConfig::new(AttackKind::PgdDqn, 0.1);
    let x = pgd_dqn_attack(&q, &BallSpec::new(s0, 0.1).unwrap(), &cfg).unwrap();
    assert_eq!(sarl_core::agents::argmax(&q.forward(&x).unwrap()), 1);
}

fn ddpg_agent(seed_: u64) -> Agent {
    Agent::Ddpg(DdpgAgent::new(DdpgConfig::default(), 2, 1, seed_).unwrap())
}

fn dqn_agent(seed_: u64) -> Agent {
    Agent::Dqn(DqnAgent::new(DqnConfig::default(), 2, 4, seed_).unwrap())
}

#[test]
fn zero_eps_attacks_return_the_observation() {
    let agent = ddpg_agent(0);
    let sarsa = SarsaCritic::new(Mlp::random(&[3, 8, 1], Activation::Relu, 2), 2, 1.0, 0.1).unwrap();
    let target = AttackTarget { agent: &agent, sarsa: Some(&sarsa) };
    let clamp = (Array1::from_elem(2, -1.0), Array1::from_elem(2, 1.0));
    let s0 = array![0.25, -0.5];
    for kind in [AttackKind::Random, AttackKind::Critic, AttackKind::Mad, AttackKind::Rs, AttackKind::RsMad] {
        assert_eq!(perturb(target, &s0, &clamp, &AttackConfig::new(kind, 0.0)).unwrap(), s0);
    }
    let dqn = dqn_agent(0);
    let t = AttackTarget { agent: &dqn, sarsa: None };
    assert_eq!(perturb(t, &s0, &clamp, &AttackConfig::new(AttackKind::PgdDqn, 0.0)).unwrap(), s0);
    assert!(perturb(t, &s0, &clamp, &AttackConfig::new(AttackKind::Mad, 0.1)).is_err());
    assert!(perturb(target, &s0, &clamp, &AttackConfig::new(AttackKind::PgdDqn, 0.1)).is_err());
}

#[test]
fn zero_eps_random_attack_equals_natural_rollouts() {
    let env = EnvConfig::PointMass(PointMassConfig::default());
    let agent = ddpg_agent(3);
    let mut cfg = AttackConfig::new(AttackKind::Random, 0.0);
    cfg.seed = 11;
    let attacked = evaluate_under_attack(AttackTarget { agent: &agent, sarsa: None }, &env, &cfg, 6).unwrap();
    assert_eq!(attacked, evaluate_natural(&agent, &env, 6, 11).unwrap());
}

#[test]
fn suite_reports_the_lowest_mean_as_best() {
    let env = EnvConfig::Gridworld(GridWorldConfig::default());
    let agent = dqn_agent(1);
    let suite: Vec<AttackConfig> = default_suite(&agent, false).into_iter().map(|k| AttackConfig::new(k, 0.1)).collect();
    let reports = evaluate_suite(AttackTarget { agent: &agent, sarsa: None }, &env, &suite, 3).unwrap();
    let lowest = reports.iter().map(|r| r.stats.mean).fold(f64::INFINITY, f64::min);
    assert_eq!(best_attack(&reports).unwrap().stats.mean, lowest);
    assert!(evaluate_suite(AttackTarget { agent: &agent, sarsa: None }, &env, &[], 3).is_err());
}

/// Constant reward `c`, never terminates before the horizon.
struct ConstantEnv {
    c: f64,
    t: usize,
    x: f64,
}

impl Environment for ConstantEnv {
    fn name(&self) -> &'static str {
        "constant"
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(1)
    }
    fn obs_bounds(&self) -> (Array1<f64>, Array1<f64>) {
        (array![-1.0], array![1.0])
    }
    fn horizon(&self) -> usize {
        50
    }
    fn reset(&mut self, seed_: u64) -> Array1<f64> {
        self.t = 0;
        self.x = seed::rng(seed_).gen_range(-1.0..1.0);
        array![self.x]
    }
    fn step(&mut self, _action: &Action) -> Result<EnvStep> {
        self.t += 1;
        self.x = (self.x * 0.9 + 0.05).clamp(-1.0, 1.0);
        let done = self.t >= 50;
        Ok(EnvStep { next_obs: array![self.x], reward: self.c, done, truncated: done })
    }
    fn true_state(&self) -> Vec<f64> {
        vec![self.x]
    }
}

#[test]
fn sarsa_recovers_constant_reward_fixed_point() {
    let policy = NetPolicy(linear(array![[0.3]], array![0.0]));
    let mut env = ConstantEnv { c: 0.5, t: 0, x: 0.0 };
    let cfg = SarsaConfig { gamma: 0.8, lambda_rs: 0.0, updates: 3000, rollout_steps: 2000, target_sync: 100, ..SarsaConfig::default() };
    let critic = train_robust_sarsa(&policy, &mut env, &cfg, 3).unwrap();
    for x in [-0.8, -0.2, 0.3, 0.7] {
        let s = array![x];
        let q = critic.q(&s, &policy.action(&s).unwrap()).unwrap();
        assert!((q - 0.5 / 0.2).abs() < 0.1, "Q({x}) = {q}");
    }
}

#[test]
fn robust_sarsa_flattens_the_critic_over_the_action_ball() {
    let env_cfg = EnvConfig::PointMass(PointMassConfig::default());
    let agent = ddpg_agent(5);
    let policy = agent.as_continuous().unwrap();
    let base = SarsaConfig { rollout_steps: 3000, updates: 1500, ..SarsaConfig::default() };
    let plain = train_robust_sarsa(policy, env_cfg.build().unwrap().as_mut(), &SarsaConfig { lambda_rs: 0.0, ..base.clone() }, 9).unwrap();
    let robust = train_robust_sarsa(policy, env_cfg.build().unwrap().as_mut(), &SarsaConfig { lambda_rs: 10.0, ..base.clone() }, 9).unwrap();
    let radius = base.action_radius();
    let (mut p, mut r) = (0.0, 0.0);
    let mut rng = seed::rng(77);
    for _ in 0..100 {
        let s = array![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let a = policy.action(&s).unwrap();
        p += plain.robust_penalty(&s, &a, radius).unwrap().0;
        r += robust.robust_penalty(&s, &a, radius).unwrap().0;
    }
    assert!(r * 2.0 <= p, "robust {r} vs plain {p}");
}

#[test]
fn attacks_never_touch_the_dynamics() {
    let env_cfg = EnvConfig::PointMass(PointMassConfig::default());
    let agent = ddpg_agent(2);
    for kind in [AttackKind::Random, AttackKind::Critic, AttackKind::Mad] {
        let mut cfg = AttackConfig::new(kind, 0.1);
        cfg.seed = 5;
        let mut env = env_cfg.build().unwrap();
        let ep = attacked_episode(AttackTarget { agent: &agent, sarsa: None }, env.as_mut(), &cfg, 42).unwrap();
        let mut replay = env_cfg.build().unwrap();
        replay.reset(42);
        let mut states = vec![replay.true_state()];
        for a in &ep.actions {
            replay.step(&Action::Continuous(Array1::from(a.clone()))).unwrap();
            states.push(replay.true_state());
        }
        assert_eq!(states, ep.true_states);
    }
    let grid = EnvConfig::Gridworld(GridWorldConfig::default());
    let dqn = dqn_agent(4);
    let mut env = grid.build().unwrap();
    let ep = attacked_episode(AttackTarget { agent: &dqn, sarsa: None }, env.as_mut(), &AttackConfig::new(AttackKind::PgdDqn, 0.1), 3).unwrap();
    let mut replay = grid.build().unwrap();
    replay.reset(3);
    let mut states = vec![replay.true_state()];
    for a in &ep.actions {
        replay.step(&Action::Discrete(a[0] as usize)).unwrap();
        states.push(replay.true_state());
    }
    assert_eq!(states, ep.true_states);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attack_outputs_are_feasible(seed_ in 0u64..10_000, eps in 0.0f64..0.3, x in -1.0f64..1.0, v in -1.0f64..1.0) {
        let agent = ddpg_agent(seed_ % 7);
        let sarsa = SarsaCritic::new(Mlp::random(&[3, 8, 1], Activation::Relu, seed_), 2, 1.0, 0.1).unwrap();
        let target = AttackTarget { agent: &agent, sarsa: Some(&sarsa) };
        let clamp = (Array1::from_elem(2, -1.0), Array1::from_elem(2, 1.0));
        let s0 = array![x, v];
        let ball = BallSpec::new(s0.clone(), eps).unwrap().with_clamp(Some(clamp.0.clone()), Some(clamp.1.clone())).unwrap();
        for kind in [AttackKind::Random, AttackKind::Critic, AttackKind::Mad, AttackKind::Rs] {
            let mut cfg = AttackConfig::new(kind, eps);
            cfg.seed = seed_;
            let out = perturb(target, &s0, &clamp, &cfg).unwrap();
            prop_assert!(ball.contains(&out, 1e-12));
        }
        let dqn = dqn_agent(seed_ % 5);
        let grid_clamp = (Array1::zeros(2), Array1::ones(2));
        let s1 = array![(x + 1.0) / 2.0, (v + 1.0) / 2.0];
        let out = perturb(AttackTarget { agent: &dqn, sarsa: None }, &s1, &grid_clamp, &AttackConfig::new(AttackKind::PgdDqn, eps)).unwrap();
        let gball = BallSpec::new(s1, eps).unwrap().with_clamp(Some(grid_clamp.0), Some(grid_clamp.1)).unwrap();
        prop_assert!(gball.contains(&out, 1e-12));
    }
}
