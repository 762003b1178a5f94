//! Reverse-mode differentiation over dense matrices, just enough to push
//! gradients through bound propagation. Vectors are stored as `n × 1`.

use ndarray::{Array2, Axis, Zip};

pub(crate) type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Array2<f64>),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Min(NodeId, NodeId),
    /// `out[i, j] = a[i, j] · v[j]`
    ScaleCols(NodeId, NodeId),
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Tape {
    ops: Vec<Op>,
    vals: Vec<Array2<f64>>,
    grad: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, val: Array2<f64>, grad: bool) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        self.grad.push(grad);
        self.vals.len() - 1
    }

    fn any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.grad[i])
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.vals[id]
    }

    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, v, false)
    }

    pub fn param(&mut self, v: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, v, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a].dot(&self.vals[b]);
        let g = self.any(&[a, b]);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] + &self.vals[b];
        let g = self.any(&[a, b]);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] - &self.vals[b];
        let g = self.any(&[a, b]);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        let v = &self.vals[a] + c;
        let g = self.grad[a];
        self.push(Op::AddConst(a), v, g)
    }

    pub fn scale(&mut self, a: NodeId, f: f64) -> NodeId {
        let v = &self.vals[a] * f;
        let g = self.grad[a];
        self.push(Op::Scale(a, f), v, g)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = &self.vals[a] * &c;
        let g = self.grad[a];
        self.push(Op::MulConst(a, c), v, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] * &self.vals[b];
        let g = self.any(&[a, b]);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.vals[a] / &self.vals[b];
        let g = self.any(&[a, b]);
        self.push(Op::Div(a, b), v, g)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::abs);
        let g = self.grad[a];
        self.push(Op::Abs(a), v, g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(|x| x.max(0.0));
        let g = self.grad[a];
        self.push(Op::Relu(a), v, g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a].mapv(f64::tanh);
        let g = self.grad[a];
        self.push(Op::Tanh(a), v, g)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = Zip::from(&self.vals[a]).and(&self.vals[b]).map_collect(|&x, &y| x.min(y));
        let g = self.any(&[a, b]);
        self.push(Op::Min(a, b), v, g)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        // max(a, b) = -min(-a, -b)
        let na = self.scale(a, -1.0);
        let nb = self.scale(b, -1.0);
        let m = self.min(na, nb);
        self.scale(m, -1.0)
    }

    pub fn scale_cols(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let col = self.vals[v].column(0).to_owned();
        let out = &self.vals[a] * &col.insert_axis(Axis(0));
        let g = self.any(&[a, v]);
        self.push(Op::ScaleCols(a, v), out, g)
    }

    /// Gradients of `Σ_k ⟨seed_k, node_k⟩` for every node that depends on a
    /// parameter; other entries stay `None`.
    pub fn backward(&self, seeds: &[(NodeId, Array2<f64>)]) -> Vec<Option<Array2<f64>>> {
        let mut g: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        for (id, s) in seeds {
            if self.grad[*id] {
                acc(&mut g, *id, s.clone());
            }
        }
        for id in (0..self.vals.len()).rev() {
            let Some(gi) = g[id].take() else { continue };
            match &self.ops[id] {
                Op::Leaf => {
                    g[id] = Some(gi);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.grad[*a] {
                        acc(&mut g, *a, gi.dot(&self.vals[*b].t()));
                    }
                    if self.grad[*b] {
                        acc(&mut g, *b, self.vals[*a].t().dot(&gi));
                    }
                }
                Op::Add(a, b) => {
                    if self.grad[*a] {
                        acc(&mut g, *a, gi.clone());
                    }
                    if self.grad[*b] {
                        acc(&mut g, *b, gi);
                    }
                }
                Op::Sub(a, b) => {
                    if self.grad[*a] {
                        acc(&mut g, *a, gi.clone());
                    }
                    if self.grad[*b] {
                        acc(&mut g, *b, -gi);
                    }
                }
                Op::AddConst(a) => acc(&mut g, *a, gi),
                Op::Scale(a, f) => acc(&mut g, *a, gi * *f),
                Op::MulConst(a, c) => acc(&mut g, *a, gi * c),
                Op::Mul(a, b) => {
                    if self.grad[*a] {
                        acc(&mut g, *a, &gi * &self.vals[*b]);
                    }
                    if self.grad[*b] {
                        acc(&mut g, *b, &gi * &self.vals[*a]);
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.vals[*b];
                    if self.grad[*a] {
                        acc(&mut g, *a, &gi / bv);
                    }
                    if self.grad[*b] {
                        let d = Zip::from(&gi)
                            .and(&self.vals[*a])
                            .and(bv)
                            .map_collect(|&g, &x, &y| -g * x / (y * y));
                        acc(&mut g, *b, d);
                    }
                }
                Op::Abs(a) => {
                    let d = Zip::from(&gi).and(&self.vals[*a]).map_collect(|&g, &x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    acc(&mut g, *a, d);
                }
                Op::Relu(a) => {
                    let d = Zip::from(&gi)
                        .and(&self.vals[*a])
                        .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                    acc(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let d = Zip::from(&gi).and(&self.vals[id]).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut g, *a, d);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (&self.vals[*a], &self.vals[*b]);
                    if self.grad[*a] {
                        let d = Zip::from(&gi)
                            .and(av)
                            .and(bv)
                            .map_collect(|&g, &x, &y| if x <= y { g } else { 0.0 });
                        acc(&mut g, *a, d);
                    }
                    if self.grad[*b] {
                        let d = Zip::from(&gi)
                            .and(av)
                            .and(bv)
                            .map_collect(|&g, &x, &y| if x <= y { 0.0 } else { g });
                        acc(&mut g, *b, d);
                    }
                }
                Op::ScaleCols(a, v) => {
                    let col = self.vals[*v].column(0).to_owned();
                    if self.grad[*a] {
                        acc(&mut g, *a, &gi * &col.clone().insert_axis(Axis(0)));
                    }
                    if self.grad[*v] {
                        let d = (&gi * &self.vals[*a]).sum_axis(Axis(0)).insert_axis(Axis(1));
                        acc(&mut g, *v, d);
                    }
                }
            }
        }
        g
    }
}

fn acc(g: &mut [Option<Array2<f64>>], id: NodeId, d: Array2<f64>) {
    match &mut g[id] {
        Some(x) => *x += &d,
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, NodeId) -> NodeId, x0: Array2<f64>) {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let y = build(&mut t, x);
        let ones = Array2::ones(t.value(y).raw_dim());
        let g = t.backward(&[(y, ones)])[x].clone().unwrap();
        let h = 1e-6;
        for idx in ndarray::indices(x0.raw_dim()) {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p[idx] += h;
            m[idx] -= h;
            let f = |v: Array2<f64>| {
                let mut t = Tape::new();
                let x = t.param(v);
                let y = build(&mut t, x);
                t.value(y).sum()
            };
            let fd = (f(p) - f(m)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let w = array![[0.3, -1.2], [0.7, 0.4], [-0.5, 0.9]];
        fd_check(
            |t, x| {
                let c = t.constant(array![[1.0, 2.0, -1.0], [0.5, 0.1, 0.3]]);
                let y = t.matmul(c, x);
                let ones = t.constant(array![[1.0], [-2.0]]);
                let y = t.matmul(y, ones);
                let a = t.abs(y);
                let r = t.relu(x);
                let s = t.scale_cols(r, a);
                let s = t.tanh(s);
                let q = t.sub(x, r);
                let sq = t.mul(q, q);
                let den = t.add_const(sq, &Array2::ones((3, 2)));
                let d = t.div(s, den);
                t.max(d, q)
            },
            w,
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0]]);
        let p = t.param(array![[2.0]]);
        let y = t.mul(c, p);
        let g = t.backward(&[(y, array![[1.0]])]);
        assert!(g[c].is_none());
        assert_eq!(g[p].as_ref().unwrap()[[0, 0]], 1.0);
    }
}
