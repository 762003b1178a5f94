use ndarray::{array, Array1};
use proptest::prelude::*;
use rand::Rng;
use sarl_core::net::{Activation, Mlp};
use sarl_core::optim::*;
use sarl_core::seed;

#[test]
fn sgld_lands_near_an_interior_maximizer() {
    let c = array![0.03, -0.02, 0.05];
    let ball = BallSpec::new(Array1::zeros(3), 0.1).unwrap();
    for s in 0..10 {
        let cfg = SgldConfig { steps: 40, eta: 0.01, beta: 1e7, update: SgldUpdate::Langevin };
        let m = sgld_maximize(
            |x| {
                let d = x - &c;
                Ok((-d.dot(&d), -2.0 * &d))
            },
            &ball,
            &cfg,
            s,
        )
        .unwrap();
        let dist = (&m.x - &c).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(dist <= 10.0 * cfg.eta, "{dist}");
    }
}

#[test]
fn zero_step_size_returns_the_center() {
    let ball = BallSpec::new(array![0.2, 0.4], 0.3).unwrap();
    let cfg = SgldConfig { eta: 0.0, ..SgldConfig::ppo(0.3) };
    let m = sgld_maximize(|x| Ok((x.sum(), Array1::ones(2))), &ball, &cfg, 1).unwrap();
    assert_eq!(m.x, ball.center);
}

#[test]
fn sgld_escapes_a_stationary_center() {
    // f(x) = ‖x − s‖² has zero gradient at the center, like the KL regularizer
    let s0 = array![0.1, -0.3, 0.2];
    let ball = BallSpec::new(s0.clone(), 0.1).unwrap();
    let f = |x: &Array1<f64>| {
        let d = x - &s0;
        Ok((d.dot(&d), 2.0 * &d))
    };
    let escaped = (0..200)
        .filter(|&s| sgld_maximize(f, &ball, &SgldConfig::ppo(0.1), s).unwrap().value > 0.0)
        .count();
    assert!(escaped as f64 >= 0.99 * 200.0, "{escaped}/200");
}

#[test]
fn longer_pgd_is_stronger_than_sampling() {
    let mut ordered = 0;
    for s in 0..50 {
        let net = Mlp::random(&[3, 16, 16, 3], Activation::Relu, s);
        let c = Array1::from_shape_fn(3, |i| 0.2 * i as f64 - 0.2);
        let a_star = sarl_core::agents::argmax(&net.forward(&c).unwrap());
        let other = (a_star + 1) % 3;
        let mut up = Array1::zeros(3);
        up[other] = 1.0;
        up[a_star] = -1.0;
        let ball = BallSpec::new(c, 0.1).unwrap();
        let f = |x: &Array1<f64>| Ok((net.forward(x)?.dot(&up), net.input_gradient(x, &up)?));
        let p50 = pgd_maximize(f, &ball, 50, None).unwrap().value;
        let p10 = pgd_maximize(f, &ball, 10, None).unwrap().value;
        let r = random_maximize(|x| Ok(f(x)?.0), &ball, 10, s).unwrap().value;
        if p50 >= p10 && p10 >= r {
            ordered += 1;
        }
    }
    assert!(ordered >= 45, "{ordered}/50");
}

#[test]
fn one_full_pgd_step_reaches_the_corner() {
    let w = array![0.5, -2.0, 0.0];
    let ball = BallSpec::new(array![0.1, 0.2, 0.3], 0.05).unwrap();
    let m = pgd_maximize(|x| Ok((w.dot(x), w.clone())), &ball, 1, Some(0.05)).unwrap();
    for (x, y) in m.x.iter().zip([0.15, 0.15, 0.3]) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_feasible(c in proptest::collection::vec(-2.0f64..2.0, 1..5), eps in 0.0f64..1.0,
                                             seed_ in 0u64..1000) {
        let n = c.len();
        let ball = BallSpec::new(Array1::from(c), eps).unwrap()
            .with_clamp(Some(Array1::from_elem(n, -1.0)), Some(Array1::from_elem(n, 1.0))).unwrap();
        let mut rng = seed::rng(seed_);
        let x = Array1::from_shape_fn(n, |_| rng.gen_range(-5.0..5.0));
        let p = ball.project(&x).unwrap();
        prop_assert_eq!(ball.project(&p).unwrap(), p.clone());
        for i in 0..n {
            prop_assert!(p[i] >= -1.0 && p[i] <= 1.0);
        }
    }

    #[test]
    fn solvers_stay_feasible_and_keep_the_best(seed_ in 0u64..10_000, eps in 0.0f64..0.5, steps in 1usize..30) {
        let net = Mlp::random(&[2, 8, 1], Activation::Tanh, seed_);
        let center = array![0.8, -0.9];
        let ball = BallSpec::new(center.clone(), eps).unwrap()
            .with_clamp(Some(Array1::from_elem(2, -1.0)), Some(Array1::from_elem(2, 1.0))).unwrap();
        let f = |x: &Array1<f64>| Ok((net.forward(x)?[0], net.input_gradient(x, &Array1::ones(1))?));
        let at_center = net.forward(&ball.project(&center).unwrap()).unwrap()[0];
        let cfg = SgldConfig { steps, eta: eps / 5.0, beta: 1e3, update: SgldUpdate::Sign };
        for m in [pgd_maximize(f, &ball, steps, None).unwrap(), sgld_maximize(f, &ball, &cfg, seed_).unwrap()] {
            prop_assert!(ball.contains(&m.x, 1e-12));
            prop_assert!(m.value >= at_center);
            prop_assert_eq!(m.value, net.forward(&m.x).unwrap()[0]);
        }
        let short = pgd_maximize(f, &ball, steps, Some(eps / 10.0)).unwrap();
        let long = pgd_maximize(f, &ball, steps + 5, Some(eps / 10.0)).unwrap();
        prop_assert!(long.value >= short.value);
    }
}
