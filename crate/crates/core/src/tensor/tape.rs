//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value by value, so the
//! node list is always in topological order. `backward` walks it once in
//! reverse.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use super::kernels::{
    conv2d_backward, conv2d_raw, matmul_into, matmul_nt_into, matmul_tn_into,
    pixel_shuffle_forward, pixel_unshuffle, ConvGeom,
};
use super::{DType, Tensor};
use crate::error::{Error, Result};
use crate::spectral::SpectralPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// `b` matches the trailing dims of `a` and repeats `reps` times.
    Trailing {
        reps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Relu,
    Gelu,
    Softplus,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Binary(Binary, usize, usize, Bcast),
    Unary(Unary, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    PixelShuffle(usize, usize),
    Upsample2x(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Dct2(usize, Arc<SpectralPlan>),
    Idct2(usize, Arc<SpectralPlan>),
    ChannelBias(usize, usize),
    ChannelMean(usize),
    Cosine(usize, usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Fingerprint of the branch taken by every non-smooth operation (ReLU and
/// absolute value) since the tape was created. Two evaluations with equal
/// signatures lie on the same smooth piece.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KinkSignature(pub u64);

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    dtype: DType,
    grad_enabled: bool,
    track_kinks: bool,
    kinks: Cell<u64>,
}

impl Tape {
    /// A recording tape whose op outputs are stored at `dtype`.
    pub fn new(dtype: DType) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            dtype,
            grad_enabled: true,
            track_kinks: false,
            kinks: Cell::new(0xcbf2_9ce4_8422_2325),
        }
    }

    /// A tape that evaluates but keeps nothing needed for `backward`.
    pub fn inference(dtype: DType) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(dtype)
        }
    }

    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kink_signature(&self) -> KinkSignature {
        KinkSignature(self.kinks.get())
    }

    /// A differentiable input (parameter or data we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, self.grad_enabled)
    }

    /// An input that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn push(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
    ) -> Result<Var<'_>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: name.to_string(),
            });
        }
        self.dtype.round_slice(&mut data);
        let needs_grad = self.grad_enabled && op_inputs(&op).iter().any(|&i| self.needs(i));
        let op = if needs_grad { op } else { Op::Leaf };
        let value = Tensor {
            shape,
            dtype: self.dtype,
            data,
        };
        Ok(self.push_node(value, op, needs_grad))
    }

    fn record_kinks(&self, data: &[f64]) {
        if !self.track_kinks {
            return;
        }
        let mut h = self.kinks.get();
        for &v in data {
            h ^= (v > 0.0) as u64 + 2 * (v < 0.0) as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        self.kinks.set(h);
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.id].value;
        if loss_val.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let needs = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    out[id] = Some(Tensor::from_parts(
                        node.value.shape().to_vec(),
                        g,
                        DType::F64,
                    ));
                }
                Op::Binary(kind, a, b, bc) => {
                    let (av, bv) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga: Vec<f64> = match kind {
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul => g
                                .iter()
                                .enumerate()
                                .map(|(i, gi)| gi * bv.data()[b_index(i, *bc, bv.numel())])
                                .collect(),
                        };
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; bv.numel()];
                        let nb = bv.numel();
                        for (i, gi) in g.iter().enumerate() {
                            let j = b_index(i, *bc, nb);
                            gb[j] += match kind {
                                Binary::Add => *gi,
                                Binary::Sub => -gi,
                                Binary::Mul => gi * av.data()[i],
                            };
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Unary(kind, a) => {
                    let x = val(*a).data();
                    let y = node.value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * unary_derivative(*kind, x[i], y[i]))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect());
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, vec![g[0]; val(*a).numel()]);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if needs(*a) {
                        let mut ga = vec![0.0; m * k];
                        matmul_nt_into(&g, bv.data(), &mut ga, m, n, k);
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let mut gb = vec![0.0; k * n];
                        matmul_tn_into(av.data(), &g, &mut gb, k, m, n);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d {
                    x,
                    kernel,
                    bias,
                    geom,
                } => {
                    if needs(*x) || needs(*kernel) {
                        let (gx, gk) =
                            conv2d_backward(val(*x).data(), val(*kernel).data(), &g, geom);
                        if needs(*x) {
                            accumulate(&mut grads, *x, gx);
                        }
                        if needs(*kernel) {
                            accumulate(&mut grads, *kernel, gk);
                        }
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            accumulate(&mut grads, *b, plane_sums(&g, geom.c_out));
                        }
                    }
                }
                Op::PixelShuffle(a, r) => {
                    let s = node.value.shape();
                    let ga = pixel_unshuffle(&g, s[0], s[1] / r, s[2] / r, *r);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Upsample2x(a) => {
                    let s = val(*a).shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let mut ga = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                ga[(ch * h + y / 2) * w + xx / 2] +=
                                    g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).numel();
                        if needs(p) {
                            accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Permute(a, perm) => {
                    let in_shape = val(*a).shape().to_vec();
                    let inv = invert_perm(perm);
                    let ga = permute_data(&g, node.value.shape(), &inv);
                    debug_assert_eq!(ga.len(), in_shape.iter().product::<usize>());
                    accumulate(&mut grads, *a, ga);
                }
                Op::Dct2(a, plan) => {
                    let s = node.value.shape();
                    accumulate(&mut grads, *a, plan.inverse_raw(&g, s[0]));
                }
                Op::Idct2(a, plan) => {
                    let s = node.value.shape();
                    accumulate(&mut grads, *a, plan.forward_raw(&g, s[0]));
                }
                Op::ChannelBias(x, b) => {
                    if needs(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, plane_sums(&g, val(*b).numel()));
                    }
                }
                Op::ChannelMean(x) => {
                    let xv = val(*x);
                    let c = xv.shape()[0];
                    let plane = xv.numel() / c;
                    let mut gx = vec![0.0; xv.numel()];
                    for ch in 0..c {
                        let v = g[ch] / plane as f64;
                        gx[ch * plane..(ch + 1) * plane]
                            .iter_mut()
                            .for_each(|e| *e = v);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Cosine(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let (na, nb, dot) = norms_dot(av, bv);
                    let denom = (na * nb).max(COSINE_EPS);
                    let cos = dot / denom;
                    if needs(*a) {
                        let ga = av
                            .iter()
                            .zip(bv)
                            .map(|(x, y)| g[0] * (y / denom - cos * x / (na * na).max(COSINE_EPS)))
                            .collect();
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let gb = av
                            .iter()
                            .zip(bv)
                            .map(|(x, y)| g[0] * (x / denom - cos * y / (nb * nb).max(COSINE_EPS)))
                            .collect();
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let (gq, gk, gv) = attention_backward(qv, kv, vv, probs, &g);
                    if needs(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if needs(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if needs(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

const COSINE_EPS: f64 = 1e-12;

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Binary(_, a, b, _) | Op::Matmul(a, b) | Op::ChannelBias(a, b) | Op::Cosine(a, b) => {
            vec![*a, *b]
        }
        Op::Unary(_, a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::PixelShuffle(a, _)
        | Op::Upsample2x(a)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::Dct2(a, _)
        | Op::Idct2(a, _)
        | Op::ChannelMean(a) => vec![*a],
        Op::Conv2d {
            x, kernel, bias, ..
        } => {
            let mut v = vec![*x, *kernel];
            v.extend(bias);
            v
        }
        Op::Concat(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}

fn b_index(i: usize, bc: Bcast, nb: usize) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Trailing { .. } => i % nb,
    }
}

fn plane_sums(g: &[f64], channels: usize) -> Vec<f64> {
    let plane = g.len() / channels;
    (0..channels)
        .map(|c| g[c * plane..(c + 1) * plane].iter().sum())
        .collect()
}

fn norms_dot(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        aa += x * x;
        bb += y * y;
        ab += x * y;
    }
    (aa.sqrt(), bb.sqrt(), ab)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => gelu(x),
        Unary::Softplus => softplus(x),
        Unary::Abs => x.abs(),
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Softplus => sigmoid(x),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Permutes row-major `data` of `shape` so that output axis `i` is input axis `perm[i]`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, keep: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dv = v.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; n * dv];
    let mut probs = if keep { vec![0.0; n * m] } else { Vec::new() };
    let mut row = vec![0.0; m];
    for i in 0..n {
        let qi = &qd[i * d..(i + 1) * d];
        let mut max = f64::NEG_INFINITY;
        for (j, r) in row.iter_mut().enumerate() {
            let kj = &kd[j * d..(j + 1) * d];
            *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(*r);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            z += *r;
        }
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (j, r) in row.iter_mut().enumerate() {
            *r /= z;
            let vj = &vd[j * dv..(j + 1) * dv];
            for (o, x) in oi.iter_mut().zip(vj) {
                *o += *r * x;
            }
        }
        if keep {
            probs[i * m..(i + 1) * m].copy_from_slice(&row);
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let dv = v.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; n * d];
    let mut gk = vec![0.0; m * d];
    let mut gv = vec![0.0; m * dv];
    let mut dp = vec![0.0; m];
    for i in 0..n {
        let p = &probs[i * m..(i + 1) * m];
        let gi = &g[i * dv..(i + 1) * dv];
        let mut weighted = 0.0;
        for j in 0..m {
            let vj = &vd[j * dv..(j + 1) * dv];
            dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
            weighted += dp[j] * p[j];
            let gvj = &mut gv[j * dv..(j + 1) * dv];
            for (o, x) in gvj.iter_mut().zip(gi) {
                *o += p[j] * x;
            }
        }
        let qi = &qd[i * d..(i + 1) * d];
        for j in 0..m {
            let ds = p[j] * (dp[j] - weighted) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = &kd[j * d..(j + 1) * d];
            let gqi = &mut gq[i * d..(i + 1) * d];
            for (o, x) in gqi.iter_mut().zip(kj) {
                *o += ds * x;
            }
            let gkj = &mut gk[j * d..(j + 1) * d];
            for (o, x) in gkj.iter_mut().zip(qi) {
                *o += ds * x;
            }
        }
    }
    (gq, gk, gv)
}

/// Gradients returned by [`Tape::backward`], indexed by tape variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros of the leaf's shape if the loss does not
    /// depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    pub fn contains(&self, var: Var<'_>) -> bool {
        matches!(self.grads.get(var.id), Some(Some(_)))
    }
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes: Ref<'_, Vec<Node>> = self.tape.nodes.borrow();
        f(&nodes[self.id].value)
    }

    fn binary(&self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let bc = broadcast_kind(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
        let nb = b.numel();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b.data()[b_index(i, bc, nb)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        self.tape.push(
            name,
            a.shape().to_vec(),
            data,
            Op::Binary(kind, self.id, other.id, bc),
        )
    }

    /// `self + other`; `other` may be a scalar or match trailing dims.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    fn unary(&self, kind: Unary, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        if matches!(kind, Unary::Relu | Unary::Abs) {
            self.tape.record_kinks(a.data());
        }
        let data = a.data().iter().map(|&x| unary_forward(kind, x)).collect();
        self.tape
            .push(name, a.shape().to_vec(), data, Op::Unary(kind, self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Unary::Exp, "exp")
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Unary::Relu, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t>> {
        self.unary(Unary::Gelu, "gelu")
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus, "softplus")
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(Unary::Abs, "abs")
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        self.tape
            .push("scale", a.shape().to_vec(), data, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + s).collect();
        self.tape.push(
            "add_scalar",
            a.shape().to_vec(),
            data,
            Op::AddScalar(self.id),
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.with_value(|a| a.sum());
        self.tape.push("sum", vec![], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let s = self.with_value(|a| a.mean());
        self.tape.push("mean", vec![], vec![s], Op::Mean(self.id))
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), &mut out, m, k, n);
        self.tape
            .push("matmul", vec![m, n], out, Op::Matmul(self.id, other.id))
    }

    /// Zero-padded cross-correlation. `self` is `[C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(
        &self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let k = kernel.value();
        if x.rank() != 3 || k.rank() != 4 || k.shape()[1] != x.shape()[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", x.shape(), k.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} outputs", b.shape()),
                ));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let mut out = conv2d_raw(x.data(), k.data(), &geom);
        if let Some(b) = bias {
            let bv = b.value();
            let plane = geom.oh * geom.ow;
            for (c, &bc) in bv.data().iter().enumerate() {
                out[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += bc);
            }
        }
        self.tape.push(
            "conv2d",
            vec![c_out, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                x: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
        )
    }

    /// Sub-pixel rearrangement `[C·r², H, W] → [C, H·r, W·r]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 || r == 0 || x.shape()[0] % (r * r) != 0 {
            return Err(Error::shape(
                "pixel_shuffle",
                format!("{:?} not divisible into r={r} cells", x.shape()),
            ));
        }
        let (c, h, w) = (x.shape()[0] / (r * r), x.shape()[1], x.shape()[2]);
        let out = pixel_shuffle_forward(x.data(), c, h, w, r);
        self.tape.push(
            "pixel_shuffle",
            vec![c, h * r, w * r],
            out,
            Op::PixelShuffle(self.id, r),
        )
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::shape("upsample2x", format!("{:?}", x.shape())));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.tape.push(
            "upsample2x",
            vec![c, 2 * h, 2 * w],
            out,
            Op::Upsample2x(self.id),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} → {shape:?}", x.shape()),
            ));
        }
        self.tape.push(
            "reshape",
            shape.to_vec(),
            x.data().to_vec(),
            Op::Reshape(self.id),
        )
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank()
            || perm
                .iter()
                .any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} for shape {:?}", x.shape()),
            ));
        }
        let out = permute_data(x.data(), x.shape(), perm);
        let shape = perm.iter().map(|&p| x.shape()[p]).collect();
        self.tape
            .push("permute", shape, out, Op::Permute(self.id, perm.to_vec()))
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    /// Concatenates along axis 0; trailing dims must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tape = first.tape;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.rank() == 0 || v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs trailing {tail:?}", v.shape()),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        tape.push(
            "concat",
            shape,
            data,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Orthonormal 2-D DCT-II of every channel of `[C, m, n]`.
    pub fn dct2(&self, plan: &Arc<SpectralPlan>) -> Result<Var<'t>> {
        let x = self.value();
        let c = plan.check_shape(x.shape())?;
        let out = plan.forward_raw(x.data(), c);
        self.tape.push(
            "dct2",
            x.shape().to_vec(),
            out,
            Op::Dct2(self.id, Arc::clone(plan)),
        )
    }

    /// Orthonormal 2-D DCT-III (inverse of [`Var::dct2`]).
    pub fn idct2(&self, plan: &Arc<SpectralPlan>) -> Result<Var<'t>> {
        let x = self.value();
        let c = plan.check_shape(x.shape())?;
        let out = plan.inverse_raw(x.data(), c);
        self.tape.push(
            "idct2",
            x.shape().to_vec(),
            out,
            Op::Idct2(self.id, Arc::clone(plan)),
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn channel_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        if x.rank() == 0 || b.shape() != [x.shape()[0]] {
            return Err(Error::shape(
                "channel_bias",
                format!("{:?} with bias {:?}", x.shape(), b.shape()),
            ));
        }
        let plane = x.numel() / x.shape()[0];
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i / plane])
            .collect();
        self.tape.push(
            "channel_bias",
            x.shape().to_vec(),
            data,
            Op::ChannelBias(self.id, bias.id),
        )
    }

    /// Mean over all non-leading axes: `[C, ...] → [C]`.
    pub fn channel_mean(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(Error::shape("channel_mean", "scalar input"));
        }
        let data = x.channel_means();
        self.tape.push(
            "channel_mean",
            vec![x.shape()[0]],
            data,
            Op::ChannelMean(self.id),
        )
    }

    /// Cosine similarity of two same-shape tensors, as a scalar.
    pub fn cosine(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "cosine",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let (na, nb, dot) = norms_dot(a.data(), b.data());
        let cos = dot / (na * nb).max(COSINE_EPS);
        self.tape
            .push("cosine", vec![], vec![cos], Op::Cosine(self.id, other.id))
    }

    /// Softmax attention `softmax(q·kᵀ/√d)·v` with `q: [N, d]`, `k: [M, d]`,
    /// `v: [M, dv]`. Scores are streamed row by row; the probability matrix
    /// is kept only when the tape records gradients.
    pub fn attention(&self, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        if qv.rank() != 2
            || kv.rank() != 2
            || vv.rank() != 2
            || qv.shape()[1] != kv.shape()[1]
            || kv.shape()[0] != vv.shape()[0]
        {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let keep = self.tape.grad_enabled
            && (self.tape.needs(self.id) || self.tape.needs(k.id) || self.tape.needs(v.id));
        let (out, probs) = attention_forward(&qv, &kv, &vv, keep);
        self.tape.push(
            "attention",
            vec![qv.shape()[0], vv.shape()[1]],
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                probs,
            },
        )
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b.iter().product::<usize>() == 1 && b.len() <= a.len() {
        Some(Bcast::Scalar)
    } else if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Some(Bcast::Trailing {
            reps: a[..a.len() - b.len()].iter().product(),
        })
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert_eq!(x.exp().unwrap().value().data(), &[1.0; 4]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new(DType::F64);
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let loss = a.mul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).data(), &[3.0, 4.0]);
        assert_eq!(g.get(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_by_hand() {
        let tape = Tape::new(DType::F64);
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[5.0, 6.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut rng = crate::rng::Xoshiro256pp::seed_from(3);
        let tape = Tape::new(DType::F64);
        let x = Tensor::uniform(&[3, 3], -1.0, 1.0, &mut rng);
        let i3 = tape.constant(Tensor::eye(3));
        let xv = tape.leaf(x.clone());
        assert_eq!(*i3.matmul(xv).unwrap().value(), x);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let tape = Tape::new(DType::F64);
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn broadcast_rules() {
        let tape = Tape::new(DType::F64);
        let a = tape.leaf(Tensor::ones(&[2, 3]));
        let row = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        assert_eq!(
            a.add(row).unwrap().value().data(),
            &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(a.mul(s).unwrap().value().data(), &[2.0; 6]);
        let col = tape.leaf(Tensor::ones(&[2]));
        assert!(a.add(col).is_err());
    }

    #[test]
    fn sum_and_half_square_grads() {
        let mut rng = crate::rng::Xoshiro256pp::seed_from(5);
        let x0 = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(x0.clone());
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x), Tensor::ones(&[2, 3, 4]));

        let tape = Tape::new(DType::F64);
        let x = tape.leaf(x0.clone());
        let loss = x.mul(x).unwrap().sum().unwrap().scale(0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).max_abs_diff(&x0) < 1e-15);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(Tensor::ones(&[3]));
        let y = tape.leaf(Tensor::ones(&[2, 2]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(y), Tensor::zeros(&[2, 2]));
        assert!(!g.contains(y));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(Tensor::full(&[2], 1000.0));
        assert!(matches!(x.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn pixel_shuffle_layout() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(t(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let same = x.pixel_shuffle(1).unwrap();
        assert_eq!(*same.value(), *x.value());
        let bad = tape.leaf(Tensor::zeros(&[3, 2, 2]));
        assert!(bad.pixel_shuffle(2).is_err());
    }

    #[test]
    fn pixel_shuffle_round_trip() {
        let mut rng = crate::rng::Xoshiro256pp::seed_from(11);
        let x = Tensor::uniform(&[18, 3, 5], -1.0, 1.0, &mut rng);
        let y = pixel_shuffle_forward(x.data(), 2, 3, 5, 3);
        assert_eq!(pixel_unshuffle(&y, 2, 3, 5, 3), x.data());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = crate::rng::Xoshiro256pp::seed_from(2);
        let x0 = Tensor::uniform(&[1, 5, 6], -1.0, 1.0, &mut rng);
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(x0.clone());
        let k = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        assert_eq!(*x.conv2d(k, None, 1, 0).unwrap().value(), x0);
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        // Zero padding: interior stays at c, edges see fewer valid taps.
        let c = 0.7;
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(Tensor::full(&[1, 5, 5], c));
        let k = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = x.conv2d(k, None, 1, 1).unwrap().value();
        for r in 0..5 {
            for col in 0..5 {
                let rows = if r == 0 || r == 4 { 2.0 } else { 3.0 };
                let cols = if col == 0 || col == 4 { 2.0 } else { 3.0 };
                let expect = c * rows * cols / 9.0;
                assert!((y.data()[r * 5 + col] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_kernel_too_large() {
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(x.conv2d(k, None, 1, 1).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = crate::rng::Xoshiro256pp::seed_from(4);
        let x0 = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let tape = Tape::new(DType::F64);
        let x = tape.leaf(x0.clone());
        let y = x.permute(&[1, 2, 0]).unwrap();
        assert_eq!(y.shape(), vec![3, 4, 2]);
        assert_eq!(
            y.value().data()[(1 * 4 + 2) * 2 + 1],
            x0.data()[(1 * 3 + 1) * 4 + 2]
        );
        let back = y.permute(&[2, 0, 1]).unwrap();
        assert_eq!(*back.value(), x0);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = crate::rng::Xoshiro256pp::seed_from(8);
            let tape = Tape::new(DType::F64);
            let x = tape.leaf(Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng));
            let k = tape.leaf(Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng));
            let y = x.conv2d(k, None, 1, 1).unwrap().gelu().unwrap();
            let loss = y.mul(y).unwrap().mean().unwrap();
            let g = tape.backward(loss).unwrap();
            (g.get(x), g.get(k))
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let tape = Tape::inference(DType::F64);
        let x = tape.leaf(Tensor::ones(&[2]));
        let loss = x.exp().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(!g.contains(x));
    }

    #[test]
    fn f32_tape_rounds_outputs() {
        let tape = Tape::new(DType::F32);
        let x = tape.leaf(Tensor::full(&[1], 0.1));
        let y = x.scale(3.0).unwrap();
        assert_eq!(y.value().data()[0], (0.1f64 * 3.0) as f32 as f64);
        assert_eq!(y.value().dtype(), DType::F32);
    }
}
