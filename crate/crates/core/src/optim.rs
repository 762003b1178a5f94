//! Inner maximization over ℓ∞ perturbation balls.
//!
//! Objectives are closures returning the value and its gradient at a point.
//! Both solvers start at the ball center (or a given start point) and return
//! the best iterate they visited, so the result never scores below the start.

use ndarray::{Array1, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BallSpec {
    pub center: Array1<f64>,
    pub eps: f64,
    pub clamp_lo: Option<Array1<f64>>,
    pub clamp_hi: Option<Array1<f64>>,
}

impl BallSpec {
    pub fn new(center: Array1<f64>, eps: f64) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::arg(format!("eps must be finite and non-negative, got {eps}")));
        }
        Ok(Self {
            center,
            eps,
            clamp_lo: None,
            clamp_hi: None,
        })
    }

    /// Restrict to the valid observation range `[lo, hi]`.
    pub fn with_clamp(mut self, lo: Option<Array1<f64>>, hi: Option<Array1<f64>>) -> Result<Self> {
        let n = self.center.len();
        for b in lo.iter().chain(hi.iter()) {
            if b.len() != n {
                return Err(Error::dim("clamp bound", n, b.len()));
            }
        }
        if let (Some(l), Some(h)) = (&lo, &hi) {
            if l.iter().zip(h).any(|(a, b)| a > b) {
                return Err(Error::arg("clamp lower bound exceeds upper bound"));
            }
        }
        self.clamp_lo = lo;
        self.clamp_hi = hi;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Clip to the box around the center, then to the clamp range.
    pub fn project(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim("projection input", self.dim(), x.len()));
        }
        let mut out = Zip::from(x)
            .and(&self.center)
            .map_collect(|&x, &c| x.clamp(c - self.eps, c + self.eps));
        if let Some(lo) = &self.clamp_lo {
            out.zip_mut_with(lo, |x, &l| *x = x.max(l));
        }
        if let Some(hi) = &self.clamp_hi {
            out.zip_mut_with(hi, |x, &h| *x = x.min(h));
        }
        Ok(out)
    }

    pub fn contains(&self, x: &Array1<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter().zip(&self.center).all(|(x, c)| (x - c).abs() <= self.eps + tol)
            && self.clamp_lo.as_ref().map_or(true, |lo| x.iter().zip(lo).all(|(x, l)| *x >= l - tol))
            && self.clamp_hi.as_ref().map_or(true, |hi| x.iter().zip(hi).all(|(x, h)| *x <= h + tol))
    }

    /// Uniform sample from the box, then clamped.
    pub fn sample(&self, rng: &mut seed::Rng) -> Array1<f64> {
        let x = self.center.mapv(|c| {
            if self.eps > 0.0 {
                c + rng.gen_range(-self.eps..=self.eps)
            } else {
                c
            }
        });
        self.project(&x).expect("same dimension")
    }
}

pub fn project(x: &Array1<f64>, ball: &BallSpec) -> Result<Array1<f64>> {
    ball.project(x)
}

/// Best point found and its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub x: Array1<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgldUpdate {
    /// `x ← proj(x + η∇f + √(2η/β)·ξ)`
    Langevin,
    /// `x ← proj(x + η·sign(∇f + √(2/(βη))·ξ))`
    Sign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgldConfig {
    pub steps: usize,
    pub eta: f64,
    /// Inverse temperature, held constant across steps.
    pub beta: f64,
    pub update: SgldUpdate,
}

impl SgldConfig {
    pub const DEFAULT_BETA: f64 = 1e-5;

    /// 10 steps of size `eps / 10`.
    pub fn ppo(eps: f64) -> Self {
        Self {
            steps: 10,
            eta: eps / 10.0,
            beta: Self::DEFAULT_BETA,
            update: SgldUpdate::Langevin,
        }
    }

    /// 5 steps of size `eps / 5`.
    pub fn ddpg(eps: f64) -> Self {
        Self {
            steps: 5,
            eta: eps / 5.0,
            beta: Self::DEFAULT_BETA,
            update: SgldUpdate::Langevin,
        }
    }
}

fn checked<F>(f: &mut F, x: &Array1<f64>) -> Result<(f64, Array1<f64>)>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    let (v, g) = f(x)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    if g.len() != x.len() {
        return Err(Error::dim("objective gradient", x.len(), g.len()));
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("objective gradient".into()));
    }
    Ok((v, g))
}

/// Stochastic gradient Langevin ascent with projection.
pub fn sgld_maximize<F>(f: F, ball: &BallSpec, cfg: &SgldConfig, seed: u64) -> Result<Maximum>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    sgld_maximize_from(f, ball, &ball.center, cfg, seed)
}

/// As [`sgld_maximize`], starting from the projection of `start`.
pub fn sgld_maximize_from<F>(mut f: F, ball: &BallSpec, start: &Array1<f64>, cfg: &SgldConfig, seed: u64) -> Result<Maximum>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    if cfg.steps == 0 {
        return Err(Error::arg("sgld needs at least one step"));
    }
    if !(cfg.eta >= 0.0 && cfg.eta.is_finite()) || !(cfg.beta > 0.0) {
        return Err(Error::arg("sgld needs eta >= 0 and beta > 0"));
    }
    let mut rng = seed::rng(seed);
    let mut x = ball.project(start)?;
    let (v0, mut g) = checked(&mut f, &x)?;
    let mut best = Maximum { x: x.clone(), value: v0 };
    for _ in 0..cfg.steps {
        let step = match cfg.update {
            SgldUpdate::Langevin => {
                let scale = (2.0 * cfg.eta / cfg.beta).sqrt();
                g.mapv(|gi| cfg.eta * gi + scale * rng.sample::<f64, _>(StandardNormal))
            }
            SgldUpdate::Sign => {
                let scale = if cfg.eta > 0.0 { (2.0 / (cfg.beta * cfg.eta)).sqrt() } else { 0.0 };
                g.mapv(|gi| cfg.eta * sign(gi + scale * rng.sample::<f64, _>(StandardNormal)))
            }
        };
        x = ball.project(&(&x + &step))?;
        let (v, gn) = checked(&mut f, &x)?;
        g = gn;
        if v > best.value {
            best = Maximum { x: x.clone(), value: v };
        }
    }
    Ok(best)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projected sign-gradient ascent; `eta` defaults to `eps / steps`.
pub fn pgd_maximize<F>(f: F, ball: &BallSpec, steps: usize, eta: Option<f64>) -> Result<Maximum>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    pgd_maximize_from(f, ball, &ball.center, steps, eta)
}

/// As [`pgd_maximize`], starting from the projection of `start`.
pub fn pgd_maximize_from<F>(mut f: F, ball: &BallSpec, start: &Array1<f64>, steps: usize, eta: Option<f64>) -> Result<Maximum>
where
    F: FnMut(&Array1<f64>) -> Result<(f64, Array1<f64>)>,
{
    if steps == 0 {
        return Err(Error::arg("pgd needs at least one step"));
    }
    let eta = eta.unwrap_or(ball.eps / steps as f64);
    let mut x = ball.project(start)?;
    let (v0, mut g) = checked(&mut f, &x)?;
    let mut best = Maximum { x: x.clone(), value: v0 };
    for _ in 0..steps {
        x = ball.project(&(&x + &g.mapv(|gi| eta * sign(gi))))?;
        let (v, gn) = checked(&mut f, &x)?;
        g = gn;
        if v > best.value {
            best = Maximum { x: x.clone(), value: v };
        }
    }
    Ok(best)
}

/// Best of `samples` uniform draws from the ball (plus the center).
pub fn random_maximize<F>(mut f: F, ball: &BallSpec, samples: usize, seed: u64) -> Result<Maximum>
where
    F: FnMut(&Array1<f64>) -> Result<f64>,
{
    let mut rng = seed::rng(seed);
    let x = ball.project(&ball.center)?;
    let v = f(&x)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let mut best = Maximum { x, value: v };
    for _ in 0..samples {
        let x = ball.sample(&mut rng);
        let v = f(&x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("objective value".into()));
        }
        if v > best.value {
            best = Maximum { x, value: v };
        }
    }
    Ok(best)
}
