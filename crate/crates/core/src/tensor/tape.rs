//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! read. Nodes are only ever appended, so the tape is topologically ordered
//! by construction and `backward` is a single reverse sweep.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`. ReLU uses a
    /// zero subgradient at the kink.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Backward rule for operations defined outside this module.
pub trait Backward {
    /// One entry per input; `None` means the input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64])
        -> Vec<Option<Vec<f64>>>;
}

pub(super) enum Op {
    Leaf,
    MatMul(Var, Var),
    ContractSpatial(Var, Var),
    ContractTemporal(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Square(Var),
    AddBias(Var, Var),
    Activation(Var, Activation),
    Reshape(Var),
    MeanNodes(Var),
    BroadcastNodes(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    MeanPerSample(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(super) nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Splits a `[T,V,C]` or `[N,T,V,C]` shape into `(N, T, V, C)`.
fn graph_dims(shape: &[usize]) -> Option<(usize, usize, usize, usize)> {
    match *shape {
        [t, v, c] => Some((1, t, v, c)),
        [n, t, v, c] => Some((n, t, v, c)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(super) fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Per frame `t`: `out[t] = A_s[t] · X[t]`, with `A_s: [T,V,V]` and
    /// `X: [T,V,C]` or batched `[N,T,V,C]`.
    pub fn contract_spatial(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.value(adj).shape(), self.value(x).shape());
        let Some((n, t, v, c)) = graph_dims(sx) else {
            return Err(Error::dim("contract_spatial", sa, sx));
        };
        if sa != [t, v, v] {
            return Err(Error::dim("contract_spatial", sa, sx));
        }
        let (a, xd) = (self.value(adj).data(), self.value(x).data());
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ti in 0..t {
                let base = (s * t + ti) * v * c;
                let abase = ti * v * v;
                for vi in 0..v {
                    let orow = &mut out[base + vi * c..base + (vi + 1) * c];
                    for u in 0..v {
                        let w = a[abase + vi * v + u];
                        if w == 0.0 {
                            continue;
                        }
                        let xrow = &xd[base + u * c..base + (u + 1) * c];
                        orow.iter_mut().zip(xrow).for_each(|(o, xv)| *o += w * xv);
                    }
                }
            }
        }
        let shape = sx.to_vec();
        let needs = self.needs(&[adj, x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ContractSpatial(adj, x), needs))
    }

    /// Per joint `v`: `out[:,v,:] = A_t[v] · X[:,v,:]`, with `A_t: [V,T,T]`.
    pub fn contract_temporal(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.value(adj).shape(), self.value(x).shape());
        let Some((n, t, v, c)) = graph_dims(sx) else {
            return Err(Error::dim("contract_temporal", sa, sx));
        };
        if sa != [v, t, t] {
            return Err(Error::dim("contract_temporal", sa, sx));
        }
        let (a, xd) = (self.value(adj).data(), self.value(x).data());
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            let sbase = s * t * v * c;
            for vi in 0..v {
                let abase = vi * t * t;
                for ti in 0..t {
                    let obase = sbase + (ti * v + vi) * c;
                    for si in 0..t {
                        let w = a[abase + ti * t + si];
                        if w == 0.0 {
                            continue;
                        }
                        let xbase = sbase + (si * v + vi) * c;
                        out[obase..obase + c]
                            .iter_mut()
                            .zip(&xd[xbase..xbase + c])
                            .for_each(|(o, xv)| *o += w * xv);
                    }
                }
            }
        }
        let shape = sx.to_vec();
        let needs = self.needs(&[adj, x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ContractTemporal(adj, x), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sub(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let src = self.value(a);
        let out: Vec<f64> = src.data().iter().map(|x| x * k).collect();
        let t = Tensor::new(src.shape(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, Op::Scale(a, k), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let out: Vec<f64> = src.data().iter().map(|x| x * x).collect();
        let t = Tensor::new(src.shape(), out).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(t, Op::Square(a), needs)
    }

    /// Adds a `[F]` bias to every row of `[N,F]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let f = sx[1];
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % f])
            .collect();
        let shape = sx.to_vec();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias(x, bias), needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let src = self.value(x);
        let out: Vec<f64> = src.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(src.shape(), out).expect("same shape");
        let needs = self.needs(&[x]);
        self.push(t, Op::Activation(x, kind), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Mean over the node axis: `[N,R,C] -> [N,C]`.
    pub fn mean_nodes(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let [n, r, c] = *s else {
            return Err(Error::dim("mean_nodes", s, &[]));
        };
        let d = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for si in 0..n {
            for ri in 0..r {
                let row = &d[(si * r + ri) * c..(si * r + ri + 1) * c];
                out[si * c..(si + 1) * c]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(o, v)| *o += v);
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n, c], out)?, Op::MeanNodes(x), needs))
    }

    /// Copies each row of `[N,C]` to `nodes` positions: `[N,nodes,C]`.
    pub fn broadcast_nodes(&mut self, x: Var, nodes: usize) -> Result<Var> {
        let s = self.value(x).shape();
        let [n, c] = *s else {
            return Err(Error::dim("broadcast_nodes", s, &[]));
        };
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * nodes * c);
        for si in 0..n {
            for _ in 0..nodes {
                out.extend_from_slice(&d[si * c..(si + 1) * c]);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[n, nodes, c], out)?,
            Op::BroadcastNodes(x),
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), needs)
    }

    /// Mean over all axes but the first: `[N,...] -> [N]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() || s[0] == 0 {
            return Err(Error::dim("mean_per_sample", s, &[]));
        }
        let n = s[0];
        let d = self.value(x).data();
        let per = d.len() / n;
        let out: Vec<f64> = d
            .chunks(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[n], out)?, Op::MeanPerSample(x), needs))
    }

    /// Records an externally computed value with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        let needs = self.needs(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            needs,
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&contribution).for_each(|(b, c)| *b += c),
            slot => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    // g [m,n] · bᵀ [n,k]
                    let bd = val(*b).data();
                    let mut ga = vec![0.0; m * k];
                    for (grow, garow) in g.chunks_exact(n).zip(ga.chunks_exact_mut(k)) {
                        for (gap, brow) in garow.iter_mut().zip(bd.chunks_exact(n)) {
                            *gap = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if want(*b) {
                    // aᵀ [k,m] · g [m,n]
                    let ad = val(*a).data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, gv)| *o += aip * gv);
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::ContractSpatial(adj, x) => {
                let (n, t, v, c) = graph_dims(val(*x).shape()).expect("checked in forward");
                let (a, xd) = (val(*adj).data(), val(*x).data());
                let mut ga = want(*adj).then(|| vec![0.0; t * v * v]);
                let mut gx = want(*x).then(|| vec![0.0; xd.len()]);
                for s in 0..n {
                    for ti in 0..t {
                        let base = (s * t + ti) * v * c;
                        let abase = ti * v * v;
                        for vi in 0..v {
                            let grow = &g[base + vi * c..base + (vi + 1) * c];
                            for u in 0..v {
                                let xrow = &xd[base + u * c..base + (u + 1) * c];
                                if let Some(ga) = ga.as_mut() {
                                    ga[abase + vi * v + u] +=
                                        grow.iter().zip(xrow).map(|(p, q)| p * q).sum::<f64>();
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let w = a[abase + vi * v + u];
                                    gx[base + u * c..base + (u + 1) * c]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(o, gv)| *o += w * gv);
                                }
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.accumulate(grads, *adj, ga);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ContractTemporal(adj, x) => {
                let (n, t, v, c) = graph_dims(val(*x).shape()).expect("checked in forward");
                let (a, xd) = (val(*adj).data(), val(*x).data());
                let mut ga = want(*adj).then(|| vec![0.0; v * t * t]);
                let mut gx = want(*x).then(|| vec![0.0; xd.len()]);
                for s in 0..n {
                    let sbase = s * t * v * c;
                    for vi in 0..v {
                        let abase = vi * t * t;
                        for ti in 0..t {
                            let obase = sbase + (ti * v + vi) * c;
                            for si in 0..t {
                                let xbase = sbase + (si * v + vi) * c;
                                let grow = &g[obase..obase + c];
                                if let Some(ga) = ga.as_mut() {
                                    ga[abase + ti * t + si] += grow
                                        .iter()
                                        .zip(&xd[xbase..xbase + c])
                                        .map(|(p, q)| p * q)
                                        .sum::<f64>();
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let w = a[abase + ti * t + si];
                                    gx[xbase..xbase + c]
                                        .iter_mut()
                                        .zip(grow)
                                        .for_each(|(o, gv)| *o += w * gv);
                                }
                            }
                        }
                    }
                }
                if let Some(ga) = ga {
                    self.accumulate(grads, *adj, ga);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.iter().map(|x| x * k).collect());
            }
            Op::Square(a) => {
                let ad = val(*a).data();
                self.accumulate(grads, *a, g.iter().zip(ad).map(|(gv, x)| 2.0 * x * gv).collect());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if want(*b) {
                    let f = val(*b).numel();
                    let mut gb = vec![0.0; f];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % f] += gv;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Activation(x, kind) => {
                let (xd, yd) = (val(*x).data(), node.value.data());
                let gx = g
                    .iter()
                    .zip(xd.iter().zip(yd))
                    .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::MeanNodes(x) => {
                let [n, r, c] = *val(*x).shape() else {
                    unreachable!()
                };
                let inv = 1.0 / r as f64;
                let mut gx = Vec::with_capacity(n * r * c);
                for si in 0..n {
                    for _ in 0..r {
                        gx.extend(g[si * c..(si + 1) * c].iter().map(|v| v * inv));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BroadcastNodes(x) => {
                let [n, c] = *val(*x).shape() else {
                    unreachable!()
                };
                let r = node.value.shape()[1];
                let mut gx = vec![0.0; n * c];
                for si in 0..n {
                    for ri in 0..r {
                        let src = &g[(si * r + ri) * c..(si * r + ri + 1) * c];
                        gx[si * c..(si + 1) * c]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, v)| *o += v);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumSquares(x) => {
                let gx = val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::MeanPerSample(x) => {
                let n = node.value.numel();
                let per = val(*x).numel() / n;
                let mut gx = Vec::with_capacity(n * per);
                for gv in g {
                    gx.extend(std::iter::repeat_n(gv / per as f64, per));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let gd = val(*gamma).data();
                if want(*gamma) {
                    let mut gg = vec![0.0; f];
                    for (i, gv) in g.iter().enumerate() {
                        gg[i % f] += gv * xhat[i];
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if want(*beta) {
                    let mut gb = vec![0.0; f];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % f] += gv;
                    }
                    self.accumulate(grads, *beta, gb);
                }
                if want(*x) {
                    let mut gx = vec![0.0; n * f];
                    if *train {
                        // dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        for j in 0..f {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for i in 0..n {
                                let d = g[i * f + j] * gd[j];
                                sum_d += d;
                                sum_dx += d * xhat[i * f + j];
                            }
                            let nf = n as f64;
                            for i in 0..n {
                                let d = g[i * f + j] * gd[j];
                                gx[i * f + j] =
                                    inv_std[j] / nf * (nf * d - sum_d - xhat[i * f + j] * sum_dx);
                            }
                        }
                    } else {
                        for (i, gv) in g.iter().enumerate() {
                            gx[i] = gv * gd[i % f] * inv_std[i % f];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let outs = rule.backward(&vals, &node.value, g);
                for (v, gi) in inputs.iter().zip(outs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{grad_check, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let err = grad_check(&[a, b], |tape, v| {
            let p = tape.matmul(v[0], v[1]).unwrap();
            tape.sum(p)
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn spatial_contraction_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 1], &[1., 2.]));
        let swap = tape.constant(t(&[1, 2, 2], &[0., 1., 1., 0.]));
        let out = tape.contract_spatial(swap, x).unwrap();
        assert_eq!(tape.value(out).data(), &[2., 1.]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random_tensor(&mut rng, &[3, 4, 2]);
        let x = tape.constant(xv.clone());
        let eye = tape.constant(Tensor::eye_stack(3, 4));
        let out = tape.contract_spatial(eye, x).unwrap();
        assert_eq!(tape.value(out).data(), xv.data());

        let bad = tape.constant(Tensor::eye_stack(2, 4));
        assert!(tape.contract_spatial(bad, x).is_err());
    }

    #[test]
    fn temporal_contraction_cases() {
        let mut tape = Tape::new();
        // T=2, V=1, C=1
        let x = tape.constant(t(&[2, 1, 1], &[1., 3.]));
        let swap = tape.constant(t(&[1, 2, 2], &[0., 1., 1., 0.]));
        let out = tape.contract_temporal(swap, x).unwrap();
        assert_eq!(tape.value(out).data(), &[3., 1.]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = random_tensor(&mut rng, &[4, 3, 2]);
        let x = tape.constant(xv.clone());
        let eye = tape.constant(Tensor::eye_stack(3, 4));
        let out = tape.contract_temporal(eye, x).unwrap();
        assert_eq!(tape.value(out).data(), xv.data());

        let bad = tape.constant(Tensor::eye_stack(4, 4));
        assert!(tape.contract_temporal(bad, x).is_err());
    }

    #[test]
    fn contraction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a_s = random_tensor(&mut rng, &[3, 4, 4]);
        let x = random_tensor(&mut rng, &[3, 4, 2]);
        let w = random_tensor(&mut rng, &[3, 4, 2]);
        let err = grad_check(&[a_s, x], |tape, v| {
            let o = tape.contract_spatial(v[0], v[1]).unwrap();
            weighted_sum(tape, o, &w)
        });
        assert!(err < 1e-6, "spatial rel err {err}");

        let a_t = random_tensor(&mut rng, &[3, 4, 4]);
        let x = random_tensor(&mut rng, &[4, 3, 2]);
        let w = random_tensor(&mut rng, &[4, 3, 2]);
        let err = grad_check(&[a_t, x], |tape, v| {
            let o = tape.contract_temporal(v[0], v[1]).unwrap();
            weighted_sum(tape, o, &w)
        });
        assert!(err < 1e-6, "temporal rel err {err}");
    }

    // A non-uniform readout so the checks do not reduce to plain sums.
    fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Var {
        let wv = tape.constant(w.clone());
        let sq = tape.square(x);
        let lin = tape.add(x, sq).unwrap();
        let prod = tape.custom(
            &[lin, wv],
            Tensor::scalar(
                tape.value(lin)
                    .data()
                    .iter()
                    .zip(w.data())
                    .map(|(a, b)| a * b)
                    .sum(),
            ),
            Box::new(Dot),
        );
        prod
    }

    struct Dot;
    impl Backward for Dot {
        fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
            vec![
                Some(inputs[1].data().iter().map(|w| w * g[0]).collect()),
                Some(inputs[0].data().iter().map(|w| w * g[0]).collect()),
            ]
        }
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![-1., 0., 2.]));
        let y = tape.activation(x, Activation::Relu);
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let z = tape.constant(Tensor::from_vec(vec![0.]));
        let y = tape.activation(z, Activation::Tanh);
        assert_eq!(tape.value(y).data(), &[0.]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 1.0]).with_grad());
        let y = tape.activation(x, Activation::Relu);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn tanh_gradient_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.5]).with_grad());
        let y = tape.activation(x, Activation::Tanh);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().get(x).unwrap()[0];
        let closed = 1.0 - 0.5f64.tanh().powi(2);
        assert!((g - closed).abs() < 1e-15);
        assert!((g - 0.786448).abs() < 1e-6);
        let err = grad_check(&[Tensor::from_vec(vec![0.5])], |tape, v| {
            let y = tape.activation(v[0], Activation::Tanh);
            tape.sum(y)
        });
        assert!(err < 1e-8);
    }

    #[test]
    fn fan_out_accumulates_like_duplicated_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_tensor(&mut rng, &[3, 3]);
        // x used twice: loss = sum(x · x)
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone().with_grad());
        let p = tape.matmul(x, x).unwrap();
        let s = tape.sum(p);
        let shared = tape.backward(s).unwrap().get(x).unwrap().to_vec();

        let mut tape = Tape::new();
        let x1 = tape.leaf(a.clone().with_grad());
        let x2 = tape.leaf(a.with_grad());
        let p = tape.matmul(x1, x2).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        let split: Vec<f64> = g
            .get(x1)
            .unwrap()
            .iter()
            .zip(g.get(x2).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in shared.iter().zip(&split) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let a = random_tensor(&mut rng, &[2, 4, 4]);
            let x = random_tensor(&mut rng, &[2, 4, 3]);
            let mut tape = Tape::new();
            let a = tape.constant(a);
            let x = tape.constant(x);
            let o = tape.contract_spatial(a, x).unwrap();
            tape.value(o).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn pooling_and_broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[2, 5, 3]);
        let err = grad_check(&[x], |tape, v| {
            let m = tape.mean_nodes(v[0]).unwrap();
            let b = tape.broadcast_nodes(m, 4).unwrap();
            let sq = tape.square(b);
            let per = tape.mean_per_sample(sq).unwrap();
            let s = tape.sum_squares(per);
            let mu = tape.mean(m);
            let mu2 = tape.scale(mu, 3.0);
            tape.add(s, mu2).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }
}
