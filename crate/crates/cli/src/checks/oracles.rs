//! Checks against sampling, quadrature, finite differences and exhaustive
//! grids.

use std::time::Duration;

use anyhow::Result;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use sarl_core::agents::{argmax, gaussian_kl, normal_cdf, smoothed_tv, smoothed_tv_leading};
use sarl_core::net::{Activation, Layer, Mlp};
use sarl_core::optim::{pgd_maximize, pgd_maximize_from, sgld_maximize, BallSpec, SgldConfig};
use sarl_core::relax::{bound_outputs, ub_action_l2, ub_kl_gaussian_reg, ub_logit_gap, BoundMethod};
use sarl_core::{par, seed};

use super::{timed, CheckOutcome};

/// Per-output ℓ∞ Lipschitz constant `|W_L|···|W_1|·1` of a network with
/// 1-Lipschitz activations.
pub fn linf_lipschitz(net: &Mlp) -> Array1<f64> {
    let mut v = Array1::ones(net.input_dim());
    for l in net.layers() {
        v = l.weight.mapv(f64::abs).dot(&v);
    }
    v
}

fn random_relu_net(rng: &mut seed::Rng) -> Mlp {
    let mut sizes = vec![rng.gen_range(1..5)];
    for _ in 0..rng.gen_range(1..3) {
        sizes.push(rng.gen_range(2..33));
    }
    sizes.push(rng.gen_range(1..4));
    Mlp::random(&sizes, Activation::Relu, rng.gen())
}

fn uniform_point(rng: &mut seed::Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(lo..hi))
}

/// Empirical min and max of each output over the ball from uniform samples
/// and PGD on each output in both directions.
fn empirical_range(net: &Mlp, ball: &BallSpec, samples: usize, rng: &mut seed::Rng) -> Result<(Array1<f64>, Array1<f64>)> {
    let m = net.output_dim();
    let mut lo = Array1::from_elem(m, f64::INFINITY);
    let mut hi = Array1::from_elem(m, f64::NEG_INFINITY);
    let mut see = |y: &Array1<f64>| {
        for i in 0..m {
            lo[i] = lo[i].min(y[i]);
            hi[i] = hi[i].max(y[i]);
        }
    };
    see(&net.forward(&ball.center)?);
    for _ in 0..samples {
        see(&net.forward(&ball.sample(rng))?);
    }
    for i in 0..m {
        for dir in [1.0, -1.0] {
            let mut up = Array1::zeros(m);
            up[i] = dir;
            let best = pgd_maximize(|x| Ok((dir * net.forward(x)?[i], net.input_gradient(x, &up)?)), ball, 50, None)?;
            see(&net.forward(&best.x)?);
        }
    }
    Ok((lo, hi))
}

fn random_linear_net(rng: &mut seed::Rng) -> Result<Mlp> {
    let depth = rng.gen_range(1..4);
    let mut sizes = vec![rng.gen_range(1..5)];
    for _ in 0..depth {
        sizes.push(rng.gen_range(1..6));
    }
    let layers = (0..depth)
        .map(|i| Layer {
            weight: Array2::from_shape_fn((sizes[i + 1], sizes[i]), |_| rng.gen_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(sizes[i + 1], |_| rng.gen_range(-1.0..1.0)),
            activation: Activation::Identity,
        })
        .collect();
    Ok(Mlp::new(layers)?)
}

pub fn relaxation_soundness(seed_: u64) -> CheckOutcome {
    timed("relaxation_soundness", Duration::from_secs(120), || {
        let per_net = par::try_collect(par::map_range(50, |k| -> Result<(usize, usize)> {
            let mut rng = seed::child_rng(seed_ ^ 0xb0b, k as u64);
            let net = random_relu_net(&mut rng);
            let center = uniform_point(&mut rng, net.input_dim(), -1.0, 1.0);
            let (mut unsound, mut wider) = (0, 0);
            for eps in [0.01, 0.1] {
                let ball = BallSpec::new(center.clone(), eps)?;
                let (lo, hi) = empirical_range(&net, &ball, 10_000, &mut rng)?;
                let ibp = bound_outputs(&net, &center, eps, BoundMethod::Ibp)?;
                let back = bound_outputs(&net, &center, eps, BoundMethod::IbpBackward)?;
                for b in [&ibp, &back] {
                    for i in 0..lo.len() {
                        if b.lower[i] > lo[i] + 1e-9 || b.upper[i] < hi[i] - 1e-9 {
                            unsound += 1;
                        }
                    }
                }
                wider += back.widths().iter().zip(ibp.widths().iter()).filter(|(b, i)| *b > &(*i + 1e-12)).count();
            }
            Ok((unsound, wider))
        }))?;
        let unsound: usize = per_net.iter().map(|p| p.0).sum();
        let wider: usize = per_net.iter().map(|p| p.1).sum();

        // Affine nets: the exact range is `Wc + b ± eps·|W|·1`.
        let mut rng = seed::child_rng(seed_ ^ 0xb0b, 1_000);
        let mut lin_err: f64 = 0.0;
        for _ in 0..20 {
            let net = random_linear_net(&mut rng)?;
            let c = uniform_point(&mut rng, net.input_dim(), -1.0, 1.0);
            let mut w = Array2::<f64>::eye(net.input_dim());
            for l in net.layers() {
                w = l.weight.dot(&w);
            }
            let y = net.forward(&c)?;
            let r = w.mapv(f64::abs).sum_axis(ndarray::Axis(1)) * 0.1;
            for method in [BoundMethod::Ibp, BoundMethod::IbpBackward] {
                let b = bound_outputs(&net, &c, 0.1, method)?;
                lin_err = lin_err.max((&b.lower - &(&y - &r)).fold(0.0, |m, v| m.max(v.abs())));
                lin_err = lin_err.max((&b.upper - &(&y + &r)).fold(0.0, |m, v| m.max(v.abs())));
            }
        }
        let ok = unsound == 0 && wider == 0 && lin_err <= 1e-10;
        Ok((
            ok,
            format!("50 nets × eps {{0.01, 0.1}}: {unsound} unsound bounds, {wider} backward widths above IBP; linear exactness error {lin_err:.1e}"),
        ))
    })
}

/// `∫|N(0, σ²) − N(d, σ²)|` by composite Simpson, split at the crossing
/// point `d/2`.
pub fn gaussian_tv_quadrature(d: f64, sigma: f64) -> f64 {
    let pdf = |x: f64, m: f64| (-(x - m) * (x - m) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |x: f64| (pdf(x, 0.0) - pdf(x, d)).abs();
    let simpson = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let mid = d / 2.0;
    let span = 12.0 * sigma + d;
    simpson(mid - span, mid, 20_000) + simpson(mid, mid + span, 20_000)
}

pub fn closed_forms(seed_: u64) -> CheckOutcome {
    timed("closed_forms", Duration::from_secs(30), || {
        let mut rng = seed::child_rng(seed_ ^ 0xc10, 0);
        let mut kl_worst_z: f64 = 0.0;
        for _ in 0..5 {
            let k = rng.gen_range(1..4);
            let mu1 = uniform_point(&mut rng, k, -1.0, 1.0);
            let mu2 = uniform_point(&mut rng, k, -1.0, 1.0);
            let v1 = uniform_point(&mut rng, k, 0.2, 2.0);
            let v2 = uniform_point(&mut rng, k, 0.2, 2.0);
            let exact = gaussian_kl(&mu1, &mu2, &v1, &v2)?;
            let log_pdf = |x: &Array1<f64>, mu: &Array1<f64>, v: &Array1<f64>| -> f64 {
                (0..x.len()).map(|i| -0.5 * ((x[i] - mu[i]).powi(2) / v[i] + v[i].ln() + (2.0 * std::f64::consts::PI).ln())).sum()
            };
            let n = 200_000;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let x = Array1::from_shape_fn(k, |i| mu1[i] + v1[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
                let r = log_pdf(&x, &mu1, &v1) - log_pdf(&x, &mu2, &v2);
                s += r;
                s2 += r * r;
            }
            let mean = s / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            kl_worst_z = kl_worst_z.max((mean - exact).abs() / se);
        }
        let mut quad_err: f64 = 0.0;
        for (d, sigma) in [(0.01, 1.0), (0.1, 0.3), (0.5, 1.0), (1.0, 0.5), (2.0, 0.7), (3.0, 1.0)] {
            quad_err = quad_err.max((smoothed_tv(d, sigma)? - gaussian_tv_quadrature(d, sigma)).abs());
        }
        let lead_err = (smoothed_tv(0.01, 1.0)? - smoothed_tv_leading(0.01, 1.0)).abs();
        let cdf_err = (normal_cdf(1.0) - 0.841_344_746_068_542_9).abs();
        let ok = kl_worst_z <= 3.0 && quad_err <= 1e-4 && lead_err <= 1e-6 && cdf_err < 1e-12;
        Ok((
            ok,
            format!("KL max |MC − exact|/SE = {kl_worst_z:.2}; TV vs quadrature {quad_err:.1e}; vs leading order at d/σ=0.01 {lead_err:.1e}"),
        ))
    })
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn with_param(net: &Mlp, layer: usize, idx: Option<(usize, usize)>, bias: usize, delta: f64) -> Result<Mlp> {
    let mut layers = net.layers().to_vec();
    match idx {
        Some((r, c)) => layers[layer].weight[[r, c]] += delta,
        None => layers[layer].bias[bias] += delta,
    }
    Ok(Mlp::new(layers)?)
}

pub fn gradient_checks(seed_: u64) -> CheckOutcome {
    timed("gradient_checks", Duration::from_secs(10), || {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for k in 0..20u64 {
            let mut rng = seed::child_rng(seed_ ^ 0x9ad, k);
            let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
            let sizes = [rng.gen_range(1..5), rng.gen_range(2..9), rng.gen_range(2..9), rng.gen_range(1..4)];
            let net = Mlp::random(&sizes, act, rng.gen());
            let x = uniform_point(&mut rng, sizes[0], -1.0, 1.0);
            let up = uniform_point(&mut rng, sizes[3], -1.0, 1.0);
            let loss = |n: &Mlp, x: &Array1<f64>| -> Result<f64> { Ok(n.forward(x)?.dot(&up)) };
            let g = net.backward(&x, &up)?;
            for (li, l) in net.layers().iter().enumerate() {
                for ((r, c), _) in l.weight.indexed_iter() {
                    let fd = (loss(&with_param(&net, li, Some((r, c)), 0, h)?, &x)?
                        - loss(&with_param(&net, li, Some((r, c)), 0, -h)?, &x)?)
                        / (2.0 * h);
                    worst = worst.max(relative_error(g.layers[li].weight[[r, c]], fd));
                    checked += 1;
                }
                for b in 0..l.bias.len() {
                    let fd = (loss(&with_param(&net, li, None, b, h)?, &x)? - loss(&with_param(&net, li, None, b, -h)?, &x)?) / (2.0 * h);
                    worst = worst.max(relative_error(g.layers[li].bias[b], fd));
                    checked += 1;
                }
            }
            let gi = net.input_gradient(&x, &up)?;
            for i in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                worst = worst.max(relative_error(gi[i], (loss(&net, &xp)? - loss(&net, &xm)?) / (2.0 * h)));
                checked += 1;
            }
        }
        Ok((worst < 1e-4, format!("{checked} partial derivatives on 20 nets, max relative error {worst:.1e}")))
    })
}

/// Values of `f` at every point of a `(n+1)²` grid over a 2-D ball.
fn grid_max<F: Fn(&Array1<f64>) -> Result<f64>>(ball: &BallSpec, n: usize, f: F) -> Result<f64> {
    let c = &ball.center;
    let eps = ball.eps;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=n {
        for j in 0..=n {
            let x = Array1::from(vec![
                c[0] - eps + 2.0 * eps * i as f64 / n as f64,
                c[1] - eps + 2.0 * eps * j as f64 / n as f64,
            ]);
            best = best.max(f(&x)?);
        }
    }
    Ok(best)
}

#[derive(Default)]
struct Sandwich {
    cases: usize,
    lower_fail: usize,
    upper_fail: usize,
}

impl Sandwich {
    fn record(&mut self, surrogate: f64, grid: f64, slack: f64, convex: f64) {
        self.cases += 1;
        if surrogate > grid + slack + 1e-12 {
            self.lower_fail += 1;
        }
        if grid > convex + 1e-9 {
            self.upper_fail += 1;
        }
    }
}

pub fn attack_sandwich(seed_: u64) -> CheckOutcome {
    timed("attack_sandwich", Duration::from_secs(120), || {
        const N: usize = 100;
        let method = BoundMethod::IbpBackward;
        let (mut ppo, mut ddpg, mut dqn) = (Sandwich::default(), Sandwich::default(), Sandwich::default());
        for k in 0..20u64 {
            let mut rng = seed::child_rng(seed_ ^ 0x5a4d, k);
            let eps = if k % 2 == 0 { 0.05 } else { 0.1 };
            let s = uniform_point(&mut rng, 2, -1.0, 1.0);
            let ball = BallSpec::new(s.clone(), eps)?;
            let h = 2.0 * eps / N as f64;

            // KL between equal-covariance Gaussian policies
            let net = Mlp::random(&[2, 8, 8, 2], Activation::Tanh, rng.gen());
            let sigma = uniform_point(&mut rng, 2, 0.3, 1.0);
            let var = sigma.mapv(|v| v * v);
            let mu = net.forward(&s)?;
            let kl = |x: &Array1<f64>| -> sarl_core::Result<(f64, Array1<f64>)> {
                let d = net.forward(x)? - &mu;
                let w = &d / &var;
                Ok((0.5 * d.dot(&w), net.input_gradient(x, &w)?))
            };
            let sur = sgld_maximize(kl, &ball, &SgldConfig::ppo(eps), rng.gen())?.value;
            let grid = grid_max(&ball, N, |x| Ok(kl(x)?.0))?;
            let b = bound_outputs(&net, &s, eps, method)?;
            let dev = ndarray::Zip::from(&b.upper).and(&b.lower).and(&mu).map_collect(|u, l, m| (u - m).max(m - l));
            let lip = linf_lipschitz(&net);
            let slack: f64 = (0..2).map(|i| dev[i] * lip[i] * h / 2.0 / var[i]).sum();
            ppo.record(sur, grid, slack, ub_kl_gaussian_reg(&net, &sigma, &s, eps, method)?);

            // squared action deviation of a deterministic policy
            let net = Mlp::random(&[2, 8, 8, 1], Activation::Relu, rng.gen());
            let a0 = net.forward(&s)?;
            let l2 = |x: &Array1<f64>| -> sarl_core::Result<(f64, Array1<f64>)> {
                let d = net.forward(x)? - &a0;
                Ok((d.dot(&d), net.input_gradient(x, &(2.0 * &d))?))
            };
            let sur = sgld_maximize(l2, &ball, &SgldConfig::ddpg(eps), rng.gen())?.value;
            let grid = grid_max(&ball, N, |x| Ok(l2(x)?.0))?;
            let ub = ub_action_l2(&net, &s, eps, method)?;
            let slack = 2.0 * ub * linf_lipschitz(&net)[0] * h / 2.0;
            ddpg.record(sur, grid, slack, ub * ub);

            // worst logit gap against the greedy action
            let net = Mlp::random(&[2, 8, 8, 3], Activation::Relu, rng.gen());
            let a_star = argmax(&net.forward(&s)?);
            let gap = |x: &Array1<f64>| -> Result<f64> {
                let q = net.forward(x)?;
                Ok((0..3).filter(|&a| a != a_star).map(|a| q[a] - q[a_star]).fold(f64::NEG_INFINITY, f64::max))
            };
            let mut sur = f64::NEG_INFINITY;
            for a in (0..3).filter(|&a| a != a_star) {
                let mut up = Array1::zeros(3);
                up[a] = 1.0;
                up[a_star] = -1.0;
                let obj = |x: &Array1<f64>| Ok((net.forward(x)?.dot(&up), net.input_gradient(x, &up)?));
                sur = sur.max(pgd_maximize_from(obj, &ball, &s, 20, None)?.value);
            }
            let grid = grid_max(&ball, N, gap)?;
            let lip = linf_lipschitz(&net);
            let slack = (0..3).filter(|&a| a != a_star).map(|a| lip[a] + lip[a_star]).fold(0.0, f64::max) * h / 2.0;
            let ub = ub_logit_gap(&net, &s, eps, a_star, method)?;
            let ub = (0..3).filter(|&a| a != a_star).map(|a| ub[a]).fold(f64::NEG_INFINITY, f64::max);
            dqn.record(sur, grid, slack, ub);
        }
        let fails: usize = [&ppo, &ddpg, &dqn].iter().map(|s| s.lower_fail + s.upper_fail).sum();
        Ok((
            fails == 0,
            format!(
                "{} cases per objective; violations (surrogate>grid, grid>convex): kl {}/{}, l2 {}/{}, logit gap {}/{}",
                ppo.cases, ppo.lower_fail, ppo.upper_fail, ddpg.lower_fail, ddpg.upper_fail, dqn.lower_fail, dqn.upper_fail
            ),
        ))
    })
}
