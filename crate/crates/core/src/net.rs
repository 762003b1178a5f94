//! Fully-connected networks with exact reverse-mode gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Zip};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and output `h`. ReLU uses 0 at
    /// `z = 0`.
    pub fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Multi-layer perceptron; the last layer is always linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Values recorded by a forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Array1<f64>,
    pub pre: Vec<Array1<f64>>,
    pub post: Vec<Array1<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array1<f64> {
        self.post.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    pub input: Array1<f64>,
}

impl GradientBundle {
    pub fn zeros_for(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            input: Array1::zeros(net.input_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(factor, &b.weight);
            a.bias.scaled_add(factor, &b.bias);
        }
        if self.input.len() == other.input.len() {
            self.input.scaled_add(factor, &other.input);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
        self.input *= factor;
    }

    /// Euclidean norm over parameter gradients only.
    pub fn param_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the parameter norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.param_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
            && self.input.iter().all(|x| x.is_finite())
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::arg("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.nrows() != l.bias.len() {
                return Err(Error::dim("layer bias", l.weight.nrows(), l.bias.len()));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::dim("layer chaining", layers[i - 1].weight.nrows(), l.weight.ncols()));
            }
            if !l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::arg("final layer must be linear"));
        }
        Ok(Self { layers })
    }

    /// Layer sizes `[in, h1, …, out]`, hidden activation `hidden`, weights
    /// and biases uniform in `±1/√fan_in`.
    pub fn random(sizes: &[usize], hidden: Activation, seed: u64) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut rng = seed::rng(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bound..bound));
                let activation = if i + 1 == n { Activation::Identity } else { hidden };
                Layer { weight, bias, activation }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Multiply the final layer's weights and bias by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(l) = self.layers.last_mut() {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = l.weight.dot(&h);
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &Array1<f64>) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("network input", self.input_dim(), x.len()));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let mut z = l.weight.dot(&h);
            z += &l.bias;
            h = z.mapv(|v| l.activation.apply(v));
            pre.push(z);
            post.push(h.clone());
        }
        Ok(Trace {
            input: x.clone(),
            pre,
            post,
        })
    }

    /// Gradients of `⟨upstream, forward(x)⟩`.
    pub fn backward(&self, x: &Array1<f64>, upstream: &Array1<f64>) -> Result<GradientBundle> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, upstream)
    }

    pub fn backward_trace(&self, trace: &Trace, upstream: &Array1<f64>) -> Result<GradientBundle> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dim("upstream gradient", self.output_dim(), upstream.len()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            Zip::from(&mut g)
                .and(&trace.pre[i])
                .and(&trace.post[i])
                .for_each(|g, &z, &h| *g *= l.activation.derivative(z, h));
            let input = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            let weight = outer(&g, input);
            let bias = g.clone();
            g = l.weight.t().dot(&g);
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok(GradientBundle { layers: grads, input: g })
    }

    /// Input gradient only; skips parameter gradients.
    pub fn input_gradient(&self, x: &Array1<f64>, upstream: &Array1<f64>) -> Result<Array1<f64>> {
        let trace = self.forward_trace(x)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::dim("upstream gradient", self.output_dim(), upstream.len()));
        }
        let mut g = upstream.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            Zip::from(&mut g)
                .and(&trace.pre[i])
                .and(&trace.post[i])
                .for_each(|g, &z, &h| *g *= l.activation.derivative(z, h));
            g = l.weight.t().dot(&g);
        }
        Ok(g)
    }

    /// `θ ← τ θ_src + (1 − τ) θ`.
    pub fn soft_update(&mut self, src: &Mlp, tau: f64) {
        for (dst, s) in self.layers.iter_mut().zip(&src.layers) {
            dst.weight.zip_mut_with(&s.weight, |d, &v| *d = tau * v + (1.0 - tau) * *d);
            dst.bias.zip_mut_with(&s.bias, |d, &v| *d = tau * v + (1.0 - tau) * *d);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
    t: i32,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(net: &Mlp) -> Self {
        let zeros = GradientBundle::zeros_for(net).layers;
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &GradientBundle, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((layer, g), (m, v)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            update(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight, lr, c1, c2);
            update(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, lr, c1, c2);
        }
    }
}

/// Adam over a free parameter vector (same constants as [`Adam`]).
#[derive(Debug, Clone)]
pub struct AdamVec {
    m: Array1<f64>,
    v: Array1<f64>,
    t: i32,
}

impl AdamVec {
    pub fn new(n: usize) -> Self {
        Self {
            m: Array1::zeros(n),
            v: Array1::zeros(n),
            t: 0,
        }
    }

    pub fn step(&mut self, param: &mut Array1<f64>, grad: &Array1<f64>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Adam::BETA1.powi(self.t);
        let c2 = 1.0 - Adam::BETA2.powi(self.t);
        update(param, grad, &mut self.m, &mut self.v, lr, c1, c2);
    }
}

fn update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    c1: f64,
    c2: f64,
) {
    Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = Adam::BETA1 * *m + (1.0 - Adam::BETA1) * g;
        *v = Adam::BETA2 * *v + (1.0 - Adam::BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + Adam::EPS);
    });
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpRecord {
    layers: Vec<LayerRecord>,
}

impl TryFrom<MlpRecord> for Mlp {
    type Error = Error;

    fn try_from(rec: MlpRecord) -> Result<Self> {
        let layers = rec
            .layers
            .into_iter()
            .map(|l| {
                let rows = l.weight.len();
                let cols = l.weight.first().map_or(0, Vec::len);
                if l.weight.iter().any(|r| r.len() != cols) {
                    return Err(Error::arg("ragged weight matrix"));
                }
                let flat: Vec<f64> = l.weight.into_iter().flatten().collect();
                let weight = Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::arg(e.to_string()))?;
                Ok(Layer {
                    weight,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }
}

impl From<Mlp> for MlpRecord {
    fn from(net: Mlp) -> Self {
        MlpRecord {
            layers: net
                .layers
                .into_iter()
                .map(|l| LayerRecord {
                    weight: l.weight.outer_iter().map(|r| r.to_vec()).collect(),
                    bias: l.bias.to_vec(),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: usize,
    pub env: String,
}

/// On-disk form of a trained agent: named networks, metadata and the
/// agent's hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub metadata: CheckpointMeta,
    pub networks: BTreeMap<String, Mlp>,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::arg(format!("bad checkpoint: {e}")))
    }

    pub fn network(&self, name: &str) -> Result<&Mlp> {
        self.networks
            .get(name)
            .ok_or_else(|| Error::arg(format!("checkpoint has no network named {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear(w: Array2<f64>, b: Array1<f64>) -> Mlp {
        Mlp::new(vec![Layer { weight: w, bias: b, activation: Activation::Identity }]).unwrap()
    }

    #[test]
    fn identity_layer() {
        let net = linear(Array2::eye(2), Array1::zeros(2));
        assert_eq!(net.forward(&array![1.0, 2.0]).unwrap(), array![1.0, 2.0]);
    }

    #[test]
    fn relu_then_linear_head() {
        let net = Mlp::new(vec![
            Layer { weight: array![[1.0, -1.0]], bias: array![-1.0], activation: Activation::Relu },
            Layer { weight: array![[1.0]], bias: array![0.0], activation: Activation::Identity },
        ])
        .unwrap();
        assert_eq!(net.forward(&array![1.0, 1.0]).unwrap(), array![0.0]);
    }

    #[test]
    fn relu_at_zero_has_zero_subgradient() {
        let net = Mlp::new(vec![
            Layer { weight: array![[1.0]], bias: array![0.0], activation: Activation::Relu },
            Layer { weight: array![[2.0]], bias: array![0.0], activation: Activation::Identity },
        ])
        .unwrap();
        let g = net.backward(&array![0.0], &array![1.0]).unwrap();
        assert_eq!(g.input, array![0.0]);
        assert!(g.is_finite());
    }

    #[test]
    fn linear_input_gradient_is_transpose_product() {
        let w = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]];
        let net = linear(w.clone(), array![0.1, -0.2]);
        let up = array![2.0, -1.0];
        let g = net.backward(&array![0.3, 0.4, 0.5], &up).unwrap();
        assert_eq!(g.input, w.t().dot(&up));
        assert_eq!(net.input_gradient(&array![0.3, 0.4, 0.5], &up).unwrap(), g.input);
    }

    #[test]
    fn dimension_errors() {
        let net = Mlp::random(&[3, 4, 2], Activation::Relu, 0);
        assert!(net.forward(&array![1.0]).is_err());
        assert!(net.backward(&array![1.0, 2.0, 3.0], &array![1.0]).is_err());
        let bad = Mlp::new(vec![
            Layer { weight: Array2::zeros((2, 3)), bias: Array1::zeros(2), activation: Activation::Relu },
            Layer { weight: Array2::zeros((1, 3)), bias: Array1::zeros(1), activation: Activation::Identity },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut net = Mlp::random(&[2, 3, 1], Activation::Tanh, 5);
        let before = net.clone();
        let mut opt = Adam::new(&net);
        let zeros = GradientBundle::zeros_for(&net);
        opt.step(&mut net, &zeros, 1e-2);
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut net = linear(array![[0.5]], array![0.0]);
        let mut g = GradientBundle::zeros_for(&net);
        g.layers[0].weight[[0, 0]] = 0.3;
        let mut opt = Adam::new(&net);
        opt.step(&mut net, &g, 0.01);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        let expected = 0.5 - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((net.layers()[0].weight[[0, 0]] - expected).abs() < 1e-15);
        assert_eq!(net.layers()[0].bias[0], 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let base = Mlp::random(&[2, 4, 2], Activation::Relu, 9);
        let g = base.backward(&array![0.2, -0.7], &array![1.0, -2.0]).unwrap();
        let run = || {
            let mut net = base.clone();
            let mut opt = Adam::new(&net);
            opt.step(&mut net, &g, 1e-3);
            opt.step(&mut net, &g, 1e-3);
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn soft_update_with_unit_tau_copies() {
        let src = Mlp::random(&[2, 3, 1], Activation::Relu, 1);
        let mut dst = Mlp::random(&[2, 3, 1], Activation::Relu, 2);
        dst.soft_update(&src, 1.0);
        assert_eq!(dst, src);
    }

    #[test]
    fn checkpoint_json() {
        let net = Mlp::random(&[2, 3, 1], Activation::Tanh, 4);
        let ck = Checkpoint {
            metadata: CheckpointMeta { seed: 4, step: 10, env: "gridworld".into() },
            networks: BTreeMap::from([("q".to_string(), net.clone())]),
            hyperparameters: serde_json::json!({"kappa": 0.1}),
        };
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back.network("q").unwrap(), &net);
        let v: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
        assert_eq!(v["networks"]["q"]["layers"][0]["activation"], "tanh");
    }
}
