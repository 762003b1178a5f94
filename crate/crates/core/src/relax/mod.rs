//! Sound output bounds of an [`Mlp`] over an ℓ∞ input ball.
//!
//! Two methods are provided. Interval bound propagation (`Ibp`) pushes a
//! center/radius box through each layer, folding consecutive linear layers
//! together. `IbpBackward` propagates linear relaxations of every
//! nonlinearity from the output back to the input, using the IBP intervals
//! for pre-activations, and then intersects the result with IBP.
//!
//! Every bound is built on a small gradient tape, so [`DiffBound`] can hand
//! back exact (piecewise) gradients of the bounds with respect to the network
//! parameters. Relaxation branch choices are frozen at the current
//! parameters; tanh relaxation coefficients are treated as constants.

mod tape;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::net::{Activation, GradientBundle, LayerGrad, Mlp};
use crate::{Error, Result};
use tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Ibp,
    IbpBackward,
}

impl BoundMethod {
    fn ibp_weight(self) -> f64 {
        match self {
            BoundMethod::Ibp => 1.0,
            BoundMethod::IbpBackward => 0.0,
        }
    }
}

/// `upper_coef · x + upper_offset` bounds the output from above for every
/// `x` in the ball (and likewise below).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub lower_coef: Array2<f64>,
    pub lower_offset: Array1<f64>,
    pub upper_coef: Array2<f64>,
    pub upper_offset: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
    pub method: BoundMethod,
    /// Input-linear bounds from the backward pass, before intersecting with
    /// IBP.
    pub linear: Option<LinearBounds>,
}

impl BoundResult {
    pub fn widths(&self) -> Array1<f64> {
        &self.upper - &self.lower
    }
}

struct Relaxation {
    au: NodeId,
    bu: NodeId,
    al: NodeId,
    bl: NodeId,
}

struct Graph {
    tape: Tape,
    params: Vec<(NodeId, NodeId)>,
    lower: NodeId,
    upper: NodeId,
    linear: Option<[NodeId; 4]>,
    input_dim: usize,
}

fn col(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(1))
}

fn flat(m: &Array2<f64>) -> Array1<f64> {
    m.column(0).to_owned()
}

fn relu_relaxation(t: &mut Tape, l: NodeId, u: NodeId) -> Relaxation {
    let (lv, uv) = (t.value(l).clone(), t.value(u).clone());
    let n = lv.nrows();
    let unstable = ndarray::Zip::from(&lv).and(&uv).map_collect(|&l, &u| f64::from(l < 0.0 && u > 0.0));
    let active = lv.mapv(|l| f64::from(l >= 0.0));
    let stable_pad = unstable.mapv(|m| 1.0 - m);
    let width = t.sub(u, l);
    let den = t.add_const(width, &stable_pad);
    let ratio = t.div(u, den);
    let au_unstable = t.mul_const(ratio, unstable.clone());
    let au = t.add_const(au_unstable, &active);
    let prod = t.mul(au_unstable, l);
    let bu = t.scale(prod, -1.0);
    let al_val = ndarray::Zip::from(&lv)
        .and(&uv)
        .map_collect(|&l, &u| if l >= 0.0 || (u > 0.0 && u > -l) { 1.0 } else { 0.0 });
    let al = t.constant(al_val);
    let bl = t.constant(Array2::zeros((n, 1)));
    Relaxation { au, bu, al, bl }
}

/// Two lines parallel to the secant that sandwich tanh on `[l, u]`.
fn tanh_lines(l: f64, u: f64) -> (f64, f64, f64) {
    let w = u - l;
    if w < 1e-9 {
        let m = 0.5 * (l + u);
        let k = 1.0 - m.tanh().powi(2);
        let b = m.tanh() - k * m;
        let slack = w * w + 1e-12;
        return (k, b - slack, b + slack);
    }
    let k = (u.tanh() - l.tanh()) / w;
    let g = |z: f64| z.tanh() - k * z;
    let mut lo = g(l).min(g(u));
    let mut hi = g(l).max(g(u));
    let c = (1.0 - k).max(0.0).sqrt();
    if c < 1.0 {
        let z = c.atanh();
        for z in [z, -z] {
            if z > l && z < u {
                lo = lo.min(g(z));
                hi = hi.max(g(z));
            }
        }
    }
    let slack = 1e-12 * (1.0 + l.abs().max(u.abs()));
    (k, lo - slack, hi + slack)
}

fn tanh_relaxation(t: &mut Tape, l: NodeId, u: NodeId) -> Relaxation {
    let (lv, uv) = (t.value(l).clone(), t.value(u).clone());
    let n = lv.nrows();
    let (mut k, mut lo, mut hi) = (Array2::zeros((n, 1)), Array2::zeros((n, 1)), Array2::zeros((n, 1)));
    for i in 0..n {
        let (ki, bl, bu) = tanh_lines(lv[[i, 0]], uv[[i, 0]]);
        k[[i, 0]] = ki;
        lo[[i, 0]] = bl;
        hi[[i, 0]] = bu;
    }
    let au = t.constant(k.clone());
    let al = t.constant(k);
    let bu = t.constant(hi);
    let bl = t.constant(lo);
    Relaxation { au, bu, al, bl }
}

fn apply_act(t: &mut Tape, act: Activation, x: NodeId) -> NodeId {
    match act {
        Activation::Relu => t.relu(x),
        Activation::Tanh => t.tanh(x),
        Activation::Identity => x,
    }
}

/// `Λ x0 ± |Λ| r + off`.
fn concretize(t: &mut Tape, lam: NodeId, off: NodeId, x0: NodeId, radius: NodeId, upper: bool) -> NodeId {
    let lx = t.matmul(lam, x0);
    let a = t.abs(lam);
    let rs = t.matmul(a, radius);
    let s = if upper { t.add(lx, rs) } else { t.sub(lx, rs) };
    t.add(s, off)
}

fn uniform_radius(n: usize, eps: f64) -> Result<Array1<f64>> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::arg(format!("eps must be finite and non-negative, got {eps}")));
    }
    Ok(Array1::from_elem(n, eps))
}

fn build(
    net: &Mlp,
    spec: Option<&Array2<f64>>,
    center: &Array1<f64>,
    radius: &Array1<f64>,
    ibp_weight: f64,
) -> Result<Graph> {
    let n_in = net.input_dim();
    if center.len() != n_in {
        return Err(Error::dim("bound center", n_in, center.len()));
    }
    if radius.len() != n_in {
        return Err(Error::dim("bound radius", n_in, radius.len()));
    }
    if !radius.iter().all(|r| *r >= 0.0 && r.is_finite()) {
        return Err(Error::arg("radii must be finite and non-negative"));
    }
    if !(0.0..=1.0).contains(&ibp_weight) {
        return Err(Error::arg("ibp weight must lie in [0, 1]"));
    }
    let spec = match spec {
        Some(c) if c.ncols() != net.output_dim() => return Err(Error::dim("spec matrix", net.output_dim(), c.ncols())),
        Some(c) => c.clone(),
        None => Array2::eye(net.output_dim()),
    };
    let m = spec.nrows();
    let layers = net.layers();
    let n_layers = layers.len();

    let mut t = Tape::new();
    let params: Vec<(NodeId, NodeId)> = layers
        .iter()
        .map(|l| (t.param(l.weight.clone()), t.param(col(&l.bias))))
        .collect();
    let x0 = t.constant(col(center));
    let rad = t.constant(col(radius));
    let cm = t.constant(spec.clone());

    // interval pass
    let mut c = x0;
    let mut r = rad;
    let mut pending: Option<(NodeId, NodeId)> = None;
    let mut relax: Vec<Option<Relaxation>> = (0..n_layers).map(|_| None).collect();
    for (k, layer) in layers.iter().enumerate() {
        let (w, b) = params[k];
        let (a, off) = match pending {
            None => (w, b),
            Some((a0, o0)) => {
                let a = t.matmul(w, a0);
                let wo = t.matmul(w, o0);
                (a, t.add(wo, b))
            }
        };
        if layer.activation == Activation::Identity {
            pending = Some((a, off));
            continue;
        }
        let ac = t.matmul(a, c);
        let zc = t.add(ac, off);
        let aa = t.abs(a);
        let zr = t.matmul(aa, r);
        let l = t.sub(zc, zr);
        let u = t.add(zc, zr);
        relax[k] = Some(match layer.activation {
            Activation::Relu => relu_relaxation(&mut t, l, u),
            Activation::Tanh => tanh_relaxation(&mut t, l, u),
            Activation::Identity => unreachable!(),
        });
        let hl = apply_act(&mut t, layer.activation, l);
        let hu = apply_act(&mut t, layer.activation, u);
        let s = t.add(hu, hl);
        let d = t.sub(hu, hl);
        c = t.scale(s, 0.5);
        r = t.scale(d, 0.5);
        pending = None;
    }
    let (a, off) = pending.expect("final layer is linear");
    let ca = t.matmul(cm, a);
    let co = t.matmul(cm, off);
    let cc = t.matmul(ca, c);
    let zc = t.add(cc, co);
    let caa = t.abs(ca);
    let zr = t.matmul(caa, r);
    let ibp_l = t.sub(zc, zr);
    let ibp_u = t.add(zc, zr);

    if ibp_weight >= 1.0 {
        return Ok(Graph {
            tape: t,
            params,
            lower: ibp_l,
            upper: ibp_u,
            linear: None,
            input_dim: n_in,
        });
    }

    // backward pass, once for each side
    let side = |t: &mut Tape, upper: bool| -> (NodeId, NodeId, NodeId) {
        let mut lam = cm;
        let mut off = t.constant(Array2::zeros((m, 1)));
        for k in (0..n_layers).rev() {
            let (w, b) = params[k];
            let lb = t.matmul(lam, b);
            off = t.add(off, lb);
            lam = t.matmul(lam, w);
            if k == 0 {
                break;
            }
            let Some(rel) = &relax[k - 1] else { continue };
            let pos = t.relu(lam);
            let neg = t.sub(lam, pos);
            let (pa, pb, na, nb) = if upper {
                (rel.au, rel.bu, rel.al, rel.bl)
            } else {
                (rel.al, rel.bl, rel.au, rel.bu)
            };
            let p1 = t.scale_cols(pos, pa);
            let n1 = t.scale_cols(neg, na);
            let p2 = t.matmul(pos, pb);
            let n2 = t.matmul(neg, nb);
            lam = t.add(p1, n1);
            let o = t.add(p2, n2);
            off = t.add(off, o);
        }
        let bound = concretize(t, lam, off, x0, rad, upper);
        (bound, lam, off)
    };
    let (bu, lam_u, off_u) = side(&mut t, true);
    let (bl, lam_l, off_l) = side(&mut t, false);
    let mut upper = t.min(bu, ibp_u);
    let mut lower = t.max(bl, ibp_l);
    if ibp_weight > 0.0 {
        let a = t.scale(ibp_u, ibp_weight);
        let b = t.scale(upper, 1.0 - ibp_weight);
        upper = t.add(a, b);
        let a = t.scale(ibp_l, ibp_weight);
        let b = t.scale(lower, 1.0 - ibp_weight);
        lower = t.add(a, b);
    }
    Ok(Graph {
        tape: t,
        params,
        lower,
        upper,
        linear: Some([lam_l, off_l, lam_u, off_u]),
        input_dim: n_in,
    })
}

impl Graph {
    fn result(&self, method: BoundMethod) -> BoundResult {
        let v = |id| flat(self.tape.value(id));
        BoundResult {
            lower: v(self.lower),
            upper: v(self.upper),
            method,
            linear: self.linear.map(|[ll, ol, lu, ou]| LinearBounds {
                lower_coef: self.tape.value(ll).clone(),
                lower_offset: v(ol),
                upper_coef: self.tape.value(lu).clone(),
                upper_offset: v(ou),
            }),
        }
    }
}

/// Bounds on every network output over `{x : ‖x − center‖∞ ≤ eps}`.
pub fn bound_outputs(net: &Mlp, center: &Array1<f64>, eps: f64, method: BoundMethod) -> Result<BoundResult> {
    let radius = uniform_radius(center.len(), eps)?;
    Ok(build(net, None, center, &radius, method.ibp_weight())?.result(method))
}

/// Bounds over the axis-aligned box `center ± radius`.
pub fn bound_outputs_box(
    net: &Mlp,
    center: &Array1<f64>,
    radius: &Array1<f64>,
    method: BoundMethod,
) -> Result<BoundResult> {
    Ok(build(net, None, center, radius, method.ibp_weight())?.result(method))
}

/// Bounds on `spec · net(x)` over the ball, with `spec` folded into the last
/// layer before any relaxation.
pub fn bound_spec(
    net: &Mlp,
    spec: &Array2<f64>,
    center: &Array1<f64>,
    eps: f64,
    method: BoundMethod,
) -> Result<BoundResult> {
    let radius = uniform_radius(center.len(), eps)?;
    Ok(build(net, Some(spec), center, &radius, method.ibp_weight())?.result(method))
}

/// Rows `e_a − e_{a*}`; the `a*` row is zero.
pub fn logit_gap_spec(n_actions: usize, a_star: usize) -> Array2<f64> {
    let mut c = Array2::zeros((n_actions, n_actions));
    for a in 0..n_actions {
        if a != a_star {
            c[[a, a]] = 1.0;
            c[[a, a_star]] = -1.0;
        }
    }
    c
}

/// Upper bounds on `Q(ŝ, a) − Q(ŝ, a*)` over the ball, for every `a`.
pub fn ub_logit_gap(qnet: &Mlp, s: &Array1<f64>, eps: f64, a_star: usize, method: BoundMethod) -> Result<Array1<f64>> {
    let n = qnet.output_dim();
    if a_star >= n {
        return Err(Error::arg(format!("action {a_star} out of range for {n} actions")));
    }
    Ok(bound_spec(qnet, &logit_gap_spec(n, a_star), s, eps, method)?.upper)
}

/// Worst-case per-coordinate deviation `max(u − p, p − l)`.
fn deviations(l: &Array1<f64>, u: &Array1<f64>, p: &Array1<f64>) -> Array1<f64> {
    ndarray::Zip::from(l)
        .and(u)
        .and(p)
        .map_collect(|&l, &u, &p| (u - p).max(p - l).max(0.0))
}

/// Certified bounds on how far an action can move inside the ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDeviation {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    /// `‖u − l‖₁ / dim`.
    pub range: f64,
}

pub fn action_deviation(l: &Array1<f64>, u: &Array1<f64>, p: &Array1<f64>) -> ActionDeviation {
    let d = deviations(l, u, p);
    ActionDeviation {
        l1: d.sum(),
        l2: d.dot(&d).sqrt(),
        linf: d.fold(0.0, |m, &x| m.max(x)),
        range: (u - l).sum() / l.len().max(1) as f64,
    }
}

pub fn action_deviation_bounds(net: &Mlp, s: &Array1<f64>, eps: f64, method: BoundMethod) -> Result<ActionDeviation> {
    if eps == 0.0 {
        // degenerate ball: skip rounding noise between the two evaluations
        net.forward(s)?;
        return Ok(ActionDeviation { l1: 0.0, l2: 0.0, linf: 0.0, range: 0.0 });
    }
    let b = bound_outputs(net, s, eps, method)?;
    let p = net.forward(s)?;
    Ok(action_deviation(&b.lower, &b.upper, &p))
}

/// Upper bound on `max_{ŝ} ‖π(ŝ) − π(s)‖₂`.
pub fn ub_action_l2(policy_net: &Mlp, s: &Array1<f64>, eps: f64, method: BoundMethod) -> Result<f64> {
    Ok(action_deviation_bounds(policy_net, s, eps, method)?.l2)
}

/// Upper bound on `½ max_{ŝ} (μ(ŝ) − μ(s))ᵀ Σ⁻¹ (μ(ŝ) − μ(s))` for diagonal
/// `Σ = diag(σ²)`.
pub fn ub_kl_gaussian_reg(
    mean_net: &Mlp,
    sigma_diag: &Array1<f64>,
    s: &Array1<f64>,
    eps: f64,
    method: BoundMethod,
) -> Result<f64> {
    if sigma_diag.len() != mean_net.output_dim() {
        return Err(Error::dim("sigma", mean_net.output_dim(), sigma_diag.len()));
    }
    if !sigma_diag.iter().all(|&x| x > 0.0 && x.is_finite()) {
        return Err(Error::arg("standard deviations must be positive"));
    }
    if eps == 0.0 {
        mean_net.forward(s)?;
        return Ok(0.0);
    }
    let b = bound_outputs(mean_net, s, eps, method)?;
    let mu = mean_net.forward(s)?;
    Ok(kl_reg_grad(&b.lower, &b.upper, &mu, sigma_diag).value)
}

/// A scalar built from `(l, u)` bounds and a reference output `p`, with its
/// partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundLoss {
    pub value: f64,
    pub dl: Array1<f64>,
    pub du: Array1<f64>,
    pub dp: Array1<f64>,
    /// Only set by [`kl_reg_grad`].
    pub dsigma: Option<Array1<f64>>,
}

/// Per-coordinate partials of `d_i = max(u_i − p_i, p_i − l_i)`, as
/// `(∂d/∂l, ∂d/∂u, ∂d/∂p)`.
fn deviation_partials(l: f64, u: f64, p: f64) -> (f64, f64, f64) {
    if u - p >= p - l {
        if u - p > 0.0 {
            (0.0, 1.0, -1.0)
        } else {
            (0.0, 0.0, 0.0)
        }
    } else {
        (-1.0, 0.0, 1.0)
    }
}

/// `sqrt(Σ_i d_i²)` and its partials.
pub fn deviation_l2_grad(l: &Array1<f64>, u: &Array1<f64>, p: &Array1<f64>) -> BoundLoss {
    let d = deviations(l, u, p);
    let value = d.dot(&d).sqrt();
    let n = d.len();
    let (mut dl, mut du, mut dp) = (Array1::zeros(n), Array1::zeros(n), Array1::zeros(n));
    if value > 0.0 {
        for i in 0..n {
            let (a, b, c) = deviation_partials(l[i], u[i], p[i]);
            let s = d[i] / value;
            dl[i] = a * s;
            du[i] = b * s;
            dp[i] = c * s;
        }
    }
    BoundLoss { value, dl, du, dp, dsigma: None }
}

/// `½ Σ_i d_i² / σ_i²` and its partials, including with respect to σ.
pub fn kl_reg_grad(l: &Array1<f64>, u: &Array1<f64>, mu: &Array1<f64>, sigma: &Array1<f64>) -> BoundLoss {
    let d = deviations(l, u, mu);
    let n = d.len();
    let (mut dl, mut du, mut dp, mut ds) = (Array1::zeros(n), Array1::zeros(n), Array1::zeros(n), Array1::zeros(n));
    let mut value = 0.0;
    for i in 0..n {
        let s2 = sigma[i] * sigma[i];
        value += 0.5 * d[i] * d[i] / s2;
        let (a, b, c) = deviation_partials(l[i], u[i], mu[i]);
        let g = d[i] / s2;
        dl[i] = a * g;
        du[i] = b * g;
        dp[i] = c * g;
        ds[i] = -d[i] * d[i] / (s2 * sigma[i]);
    }
    BoundLoss { value, dl, du, dp, dsigma: Some(ds) }
}

/// Bounds that can be differentiated with respect to the network
/// parameters.
pub struct DiffBound {
    graph: Graph,
}

impl DiffBound {
    /// `ibp_weight` blends the two methods: 1 is pure IBP, 0 is the backward
    /// method (intersected with IBP).
    pub fn new(net: &Mlp, spec: Option<&Array2<f64>>, center: &Array1<f64>, eps: f64, ibp_weight: f64) -> Result<Self> {
        let radius = uniform_radius(center.len(), eps)?;
        Self::new_box(net, spec, center, &radius, ibp_weight)
    }

    /// As [`DiffBound::new`] over the box `center ± radius`.
    pub fn new_box(
        net: &Mlp,
        spec: Option<&Array2<f64>>,
        center: &Array1<f64>,
        radius: &Array1<f64>,
        ibp_weight: f64,
    ) -> Result<Self> {
        Ok(Self {
            graph: build(net, spec, center, radius, ibp_weight)?,
        })
    }

    pub fn lower(&self) -> Array1<f64> {
        flat(self.graph.tape.value(self.graph.lower))
    }

    pub fn upper(&self) -> Array1<f64> {
        flat(self.graph.tape.value(self.graph.upper))
    }

    /// Parameter gradients of `⟨dl, lower⟩ + ⟨du, upper⟩`. The input
    /// gradient is left at zero.
    pub fn backprop(&self, dl: &Array1<f64>, du: &Array1<f64>) -> Result<GradientBundle> {
        let g = &self.graph;
        let m = g.tape.value(g.upper).nrows();
        if dl.len() != m || du.len() != m {
            return Err(Error::dim("bound seed", m, dl.len().max(du.len())));
        }
        let grads = g.tape.backward(&[(g.lower, col(dl)), (g.upper, col(du))]);
        let layers = g
            .params
            .iter()
            .map(|&(w, b)| LayerGrad {
                weight: grads[w].clone().unwrap_or_else(|| Array2::zeros(g.tape.value(w).raw_dim())),
                bias: grads[b]
                    .as_ref()
                    .map(flat)
                    .unwrap_or_else(|| Array1::zeros(g.tape.value(b).nrows())),
            })
            .collect();
        Ok(GradientBundle {
            layers,
            input: Array1::zeros(g.input_dim),
        })
    }
}
