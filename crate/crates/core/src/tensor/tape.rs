//! Reverse-mode tape.
//!
//! Every value produced during a forward pass is appended to the tape, so
//! node order is a topological order and `backward` walks it in reverse.
//! Nodes whose inputs carry no gradient are still recorded (the tape is also
//! the value store) but are skipped during the backward sweep.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{self, ConvGeom};
use super::{SparseMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m, n] * [m, 1]` broadcast over columns.
    MulCol(Var, Var),
    /// `x * s` with `s` a one-element tensor.
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Spmm(Rc<SparseMatrix>, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    SegmentSoftmax(Var, Rc<Vec<usize>>, usize),
    Conv2d(Var, Var, ConvGeom),
    ConvTranspose2d(Var, Var, ConvGeom),
    /// `[N, C, H, W] + [C]`.
    AddChannel(Var, Var),
    MaxPool2(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: true,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: false,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` if no gradient
    /// reached the node.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.val(a).dims2("matmul")?;
        let (k2, n) = self.val(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let out = matmul_raw(self.val(a).data(), self.val(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.val(a), self.val(b))?;
        let out: Vec<f64> = zip_map(self.val(a), self.val(b), |x, y| x + y);
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.val(a), self.val(b))?;
        let out: Vec<f64> = zip_map(self.val(a), self.val(b), |x, y| x - y);
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.val(a), self.val(b))?;
        let out: Vec<f64> = zip_map(self.val(a), self.val(b), |x, y| x * y);
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector `[n]` to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.val(a).dims2("add_row")?;
        if self.val(bias).numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("[{m}, {n}] + {:?}", self.val(bias).shape()),
            ));
        }
        let b = self.val(bias).data();
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x + b[k % n])
            .collect();
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Scales row `i` of `[m, n]` by `w[i]` (`w` has `m` elements).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (m, n) = self.val(a).dims2("mul_col")?;
        if self.val(w).numel() != m {
            return Err(Error::shape(
                "mul_col",
                format!("[{m}, {n}] * {:?}", self.val(w).shape()),
            ));
        }
        let c = self.val(w).data();
        let out: Vec<f64> = self
            .val(a)
            .data()
            .iter()
            .enumerate()
            .map(|(k, x)| x * c[k / n.max(1)])
            .collect();
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(a, w), &[a, w]))
    }

    /// Multiplies every element by the single value held in `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.val(s).numel() != 1 {
            return Err(Error::shape(
                "mul_scalar_var",
                format!("scale must have one element, got {:?}", self.val(s).shape()),
            ));
        }
        let k = self.val(s).data()[0];
        let out: Vec<f64> = self.val(a).data().iter().map(|x| x * k).collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::MulScalarVar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.val(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * k).collect()).unwrap();
        self.push(out, Op::Scale(a, k), &[a])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.val(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap();
        self.push(out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Inverted dropout. Identity (no node recorded) when `training` is off
    /// or `p == 0`; otherwise the mask is a pure function of `seed`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::shape("dropout", format!("p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.val(a).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.val(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = self.val(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(a), &[a]))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "nothing to concatenate"));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.val(p).dims2("concat")?);
        }
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.val(p).data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Fixed sparse operator times a dense `[n, k]` input.
    pub fn spmm(&mut self, m: &Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let (n, k) = self.val(x).dims2("spmm")?;
        if m.n_cols != n {
            return Err(Error::shape(
                "spmm",
                format!("[{}, {}] x [{n}, {k}]", m.n_rows, m.n_cols),
            ));
        }
        let out = m.mul_dense(self.val(x).data(), k);
        Ok(self.push(Tensor::new(vec![m.n_rows, k], out)?, Op::Spmm(Rc::clone(m), x), &[x]))
    }

    /// Rows of `[n, k]` picked by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &Rc<Vec<usize>>) -> Result<Var> {
        let (n, k) = self.val(x).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(idx.len() * k);
        for &i in idx.iter() {
            out.extend_from_slice(&src[i * k..(i + 1) * k]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), k], out)?,
            Op::GatherRows(x, Rc::clone(idx)),
            &[x],
        ))
    }

    /// Sums row `e` of `[E, k]` into output row `idx[e]` of `[n_out, k]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &Rc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let (e, k) = self.val(x).dims2("scatter_add_rows")?;
        if idx.len() != e {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {e} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", format!("target {bad} out of {n_out}")));
        }
        let src = self.val(x).data();
        let mut out = vec![0.0; n_out * k];
        for (r, &t) in idx.iter().enumerate() {
            for c in 0..k {
                out[t * k + c] += src[r * k + c];
            }
        }
        Ok(self.push(
            Tensor::new(vec![n_out, k], out)?,
            Op::ScatterAddRows(x, Rc::clone(idx)),
            &[x],
        ))
    }

    /// Softmax of a flat score vector within groups given by `segment[i]`.
    pub fn segment_softmax(&mut self, x: Var, segment: &Rc<Vec<usize>>, n_segments: usize) -> Result<Var> {
        let t = self.val(x);
        if t.numel() != segment.len() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} scores for {} segment ids", t.numel(), segment.len()),
            ));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(Error::shape("segment_softmax", format!("segment {bad} out of {n_segments}")));
        }
        let d = t.data();
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (v, &s) in d.iter().zip(segment.iter()) {
            max[s] = max[s].max(*v);
        }
        let e: Vec<f64> = d.iter().zip(segment.iter()).map(|(v, &s)| (v - max[s]).exp()).collect();
        let mut denom = vec![0.0; n_segments];
        for (v, &s) in e.iter().zip(segment.iter()) {
            denom[s] += v;
        }
        let out: Vec<f64> = e.iter().zip(segment.iter()).map(|(v, &s)| v / denom[s]).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax(x, Rc::clone(segment), n_segments),
            &[x],
        ))
    }

    /// Convolution of `[N, C, H, W]` with `[O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::new(self.val(x).shape(), self.val(w).shape(), stride, pad, "conv2d")?;
        let out = conv::conv_forward(self.val(x).data(), self.val(w).data(), &g);
        Ok(self.push(Tensor::new(g.out_shape().to_vec(), out)?, Op::Conv2d(x, w, g), &[x, w]))
    }

    /// Stride-1 convolution with odd kernel and "same" padding.
    pub fn conv2d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = *self.val(w).shape().last().unwrap_or(&1);
        if k.is_multiple_of(2) {
            return Err(Error::shape("conv2d", format!("same padding needs an odd kernel, got {k}")));
        }
        self.conv2d(x, w, 1, k / 2)
    }

    /// Transposed convolution of `[N, I, H, W]` with `[I, O, K, K]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeom::for_transpose(
            self.val(x).shape(),
            self.val(w).shape(),
            stride,
            pad,
            "conv_transpose2d",
        )?;
        let out = conv::conv_input_grad(self.val(x).data(), self.val(w).data(), &g);
        Ok(self.push(
            Tensor::new(g.in_shape().to_vec(), out)?,
            Op::ConvTranspose2d(x, w, g),
            &[x, w],
        ))
    }

    /// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.val(x).shape().to_vec();
        let (c, hw) = match shape.as_slice() {
            [_, c, h, w] => (*c, h * w),
            s => return Err(Error::shape("add_channel", format!("input must be [N,C,H,W], got {s:?}"))),
        };
        if self.val(b).numel() != c {
            return Err(Error::shape(
                "add_channel",
                format!("{c} channels, bias {:?}", self.val(b).shape()),
            ));
        }
        let bias = self.val(b).data();
        let out: Vec<f64> = self
            .val(x)
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v + bias[(k / hw) % c])
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddChannel(x, b), &[x, b]))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg, shape) = conv::maxpool2_forward(self.val(x).data(), self.val(x).shape())?;
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::MaxPool2(x, arg), &[x]))
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of every tracked node with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::numeric(
                "backward called twice on the same tape; run a fresh forward pass",
            ));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.val(loss).shape()),
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        let mut contrib: Vec<(Var, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.local_grads(i, &g, &mut contrib)?;
            self.grads[i] = Some(g);
            for (v, d) in contrib.drain(..) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64], out: &mut Vec<(Var, Vec<f64>)>) -> Result<()> {
        let tracked = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(*a).dims2("matmul")?;
                let (_, n) = self.val(*b).dims2("matmul")?;
                if tracked(*a) {
                    // dA = G · Bᵀ
                    let bd = self.val(*b).data();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bd[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    out.push((*a, da));
                }
                if tracked(*b) {
                    // dB = Aᵀ · G
                    let ad = self.val(*a).data();
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let av = ad[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[c * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                out.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                out.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            Op::AddRow(a, bias) => {
                out.push((*a, g.to_vec()));
                if tracked(*bias) {
                    let n = self.val(*bias).numel();
                    let mut db = vec![0.0; n];
                    for (k, gv) in g.iter().enumerate() {
                        db[k % n] += gv;
                    }
                    out.push((*bias, db));
                }
            }
            Op::MulCol(a, w) => {
                let (m, n) = self.val(*a).dims2("mul_col")?;
                let wv = self.val(*w).data();
                let av = self.val(*a).data();
                if tracked(*a) {
                    out.push((*a, g.iter().enumerate().map(|(k, g)| g * wv[k / n.max(1)]).collect()));
                }
                if tracked(*w) {
                    let mut dw = vec![0.0; m];
                    for r in 0..m {
                        for c in 0..n {
                            dw[r] += g[r * n + c] * av[r * n + c];
                        }
                    }
                    out.push((*w, dw));
                }
            }
            Op::MulScalarVar(a, s) => {
                let k = self.val(*s).data()[0];
                let av = self.val(*a).data();
                out.push((*a, g.iter().map(|g| g * k).collect()));
                out.push((*s, vec![g.iter().zip(av).map(|(g, a)| g * a).sum()]));
            }
            Op::Scale(a, k) => out.push((*a, g.iter().map(|g| g * k).collect())),
            Op::Relu(a) => {
                let av = self.val(*a).data();
                out.push((*a, g.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::LeakyRelu(a, alpha) => {
                let av = self.val(*a).data();
                out.push((
                    *a,
                    g.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { alpha * g }).collect(),
                ));
            }
            Op::Abs(a) => {
                let av = self.val(*a).data();
                out.push((*a, g.iter().zip(av).map(|(g, x)| g * sign(*x)).collect()));
            }
            Op::Dropout(a, mask) => out.push((*a, g.iter().zip(mask).map(|(g, m)| g * m).collect())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.val(*a).numel()])),
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.shape()[1];
                let m = self.nodes[i].value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let c = self.val(p).shape()[1];
                    if tracked(p) {
                        let mut d = Vec::with_capacity(m * c);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        out.push((p, d));
                    }
                    off += c;
                }
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Spmm(m, x) => {
                let k = self.val(*x).shape()[1];
                out.push((*x, m.transpose_mul_dense(g, k)));
            }
            Op::GatherRows(x, idx) => {
                let (n, k) = self.val(*x).dims2("gather_rows")?;
                let mut d = vec![0.0; n * k];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..k {
                        d[src * k + c] += g[r * k + c];
                    }
                }
                out.push((*x, d));
            }
            Op::ScatterAddRows(x, idx) => {
                let k = self.val(*x).shape()[1];
                let mut d = Vec::with_capacity(idx.len() * k);
                for &t in idx.iter() {
                    d.extend_from_slice(&g[t * k..(t + 1) * k]);
                }
                out.push((*x, d));
            }
            Op::SegmentSoftmax(x, seg, n_seg) => {
                let y = self.nodes[i].value.data();
                let mut dot = vec![0.0; *n_seg];
                for ((yv, gv), &s) in y.iter().zip(g).zip(seg.iter()) {
                    dot[s] += yv * gv;
                }
                out.push((
                    *x,
                    y.iter()
                        .zip(g)
                        .zip(seg.iter())
                        .map(|((yv, gv), &s)| yv * (gv - dot[s]))
                        .collect(),
                ));
            }
            Op::Conv2d(x, w, geom) => {
                if tracked(*x) {
                    out.push((*x, conv::conv_input_grad(g, self.val(*w).data(), geom)));
                }
                if tracked(*w) {
                    out.push((*w, conv::conv_weight_grad(self.val(*x).data(), g, geom)));
                }
            }
            Op::ConvTranspose2d(x, w, geom) => {
                if tracked(*x) {
                    out.push((*x, conv::conv_forward(g, self.val(*w).data(), geom)));
                }
                if tracked(*w) {
                    out.push((*w, conv::conv_weight_grad(g, self.val(*x).data(), geom)));
                }
            }
            Op::AddChannel(x, b) => {
                out.push((*x, g.to_vec()));
                if tracked(*b) {
                    let shape = self.val(*x).shape();
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; c];
                    for (k, gv) in g.iter().enumerate() {
                        db[(k / hw) % c] += gv;
                    }
                    out.push((*b, db));
                }
            }
            Op::MaxPool2(x, arg) => {
                let mut d = vec![0.0; self.val(*x).numel()];
                for (gv, &src) in g.iter().zip(arg) {
                    d[src] += gv;
                }
                out.push((*x, d));
            }
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
