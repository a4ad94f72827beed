//! Reverse-mode tape.
//!
//! Operations append nodes to a [`Graph`] arena and return [`Var`] handles.
//! Creation order is a topological order, so [`Graph::backward`] is a single
//! reverse sweep. Each op validates shapes up front and reports mismatches as
//! errors instead of panicking.

use std::rc::Rc;

use crate::error::{QartError, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule for a custom unary op: `(upstream, saved_input) -> input_grad`.
pub type CustomRule = dyn Fn(&[f64], &Tensor) -> Vec<f64>;

/// Spatial geometry for lowering a convolution to a matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
    /// Rows of the lowered input matrix: one per (channel, ky, kx) tap.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct UpGeom {
    c: usize,
    h: usize,
    w: usize,
    factor: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Sqrt(Var),
    Exp(Var),
    Abs(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Reshape(Var),
    Im2col(Var, ConvGeom),
    Upsample(Var, UpGeom),
    Custom(Var, Rc<CustomRule>),
}

struct Node {
    value: Tensor,
    wants: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// How a broadcast operand's index maps onto the output index.
#[derive(Clone, Copy)]
enum IdxMap {
    Same,
    Scalar,
    /// Column vector `[m,1]` against `[m,n]`: index / n.
    Col(usize),
    /// Row vector `[1,n]` against `[m,n]`: index % n.
    Row(usize),
}

impl IdxMap {
    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            IdxMap::Same => i,
            IdxMap::Scalar => 0,
            IdxMap::Col(n) => i / n,
            IdxMap::Row(n) => i % n,
        }
    }
}

/// Resolve output shape and operand index maps for an elementwise pair.
/// Supported: identical shapes, scalar on either side, `[m,n]` with `[m,1]`,
/// `[m,n]` with `[1,n]`.
fn broadcast(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, IdxMap, IdxMap)> {
    if a == b {
        return Ok((a.to_vec(), IdxMap::Same, IdxMap::Same));
    }
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if numel(b) == 1 {
        return Ok((a.to_vec(), IdxMap::Same, IdxMap::Scalar));
    }
    if numel(a) == 1 {
        return Ok((b.to_vec(), IdxMap::Scalar, IdxMap::Same));
    }
    if let ([m, n], [bm, bn]) = (a, b) {
        if bm == m && *bn == 1 {
            return Ok((a.to_vec(), IdxMap::Same, IdxMap::Col(*n)));
        }
        if bn == n && *bm == 1 {
            return Ok((a.to_vec(), IdxMap::Same, IdxMap::Row(*n)));
        }
        if bm == m && *n == 1 {
            return Ok((b.to_vec(), IdxMap::Col(*bn), IdxMap::Same));
        }
        if bn == n && *m == 1 {
            return Ok((b.to_vec(), IdxMap::Row(*bn), IdxMap::Same));
        }
    }
    Err(QartError::dim(format!(
        "cannot broadcast {:?} with {:?}",
        a, b
    )))
}

/// Accumulate an output-shaped gradient into an operand-shaped buffer,
/// summing over broadcast positions.
fn reduce_into(grad: &mut [f64], upstream: &[f64], map: IdxMap) {
    match map {
        IdxMap::Same => {
            for (g, u) in grad.iter_mut().zip(upstream) {
                *g += u;
            }
        }
        IdxMap::Scalar => grad[0] += upstream.iter().sum::<f64>(),
        IdxMap::Col(n) => {
            for (i, u) in upstream.iter().enumerate() {
                grad[i / n] += u;
            }
        }
        IdxMap::Row(n) => {
            for (i, u) in upstream.iter().enumerate() {
                grad[i % n] += u;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, wants: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            wants,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].wants
    }

    /// Record a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Record an input; it participates in backward iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let wants = t.requires_grad;
        self.push(t, wants, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy the gradient at `v` into `target.grad`.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let node = &self.nodes[v.0];
        if node.value.shape() != target.shape() {
            return Err(QartError::dim(format!(
                "grad write-back shape {:?} vs {:?}",
                node.value.shape(),
                target.shape()
            )));
        }
        target.grad = Some(match &node.grad {
            Some(g) => g.clone(),
            None => vec![0.0; target.numel()],
        });
        Ok(())
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (shape, ma, mb) = broadcast(self.value(a).shape(), self.value(b).shape())?;
        let numel: usize = shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            out.push(f(da[ma.map(i)], db[mb.map(i)]));
        }
        let wants = self.wants(a) || self.wants(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, wants, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&x| x == 0.0) {
            return Err(QartError::numeric("division by zero"));
        }
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ── elementwise unary ops ───────────────────────────────────────────

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let wants = self.wants(a);
        self.push(value, wants, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(QartError::numeric("sqrt of negative value"));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let wants = self.wants(a);
        self.push(Tensor::scalar(s), wants, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(QartError::dim("mean of empty tensor"));
        }
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n as f64;
        let wants = self.wants(a);
        Ok(self.push(Tensor::scalar(s), wants, Op::Mean(a)))
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(QartError::dim(format!(
                "matmul inner dims {} vs {}",
                ka, kb
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
            &mut out,
        );
        let wants = self.wants(a) || self.wants(b);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, wants, Op::Matmul(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let wants = self.wants(a);
        Ok(self.push(value, wants, Op::Reshape(a)))
    }

    /// Lower `[c_in, h*w]` feature maps to `[c_in*k*k, out_h*out_w]` patch
    /// columns (zero padding), so a convolution becomes `weight @ cols`.
    pub fn im2col(&mut self, a: Var, geo: ConvGeom) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != [geo.c_in, geo.h * geo.w] {
            return Err(QartError::dim(format!(
                "im2col input shape {:?}, geometry wants [{}, {}]",
                t.shape(),
                geo.c_in,
                geo.h * geo.w
            )));
        }
        if geo.k == 0
            || geo.stride == 0
            || geo.h + 2 * geo.pad < geo.k
            || geo.w + 2 * geo.pad < geo.k
        {
            return Err(QartError::param(format!(
                "degenerate conv geometry {:?}",
                geo
            )));
        }
        let (oh, ow) = (geo.out_h(), geo.out_w());
        let mut out = vec![0.0; geo.patch_len() * oh * ow];
        let data = t.data();
        let cols = oh * ow;
        for c in 0..geo.c_in {
            for ky in 0..geo.k {
                for kx in 0..geo.k {
                    let row = (c * geo.k + ky) * geo.k + kx;
                    let base = row * cols;
                    for oy in 0..oh {
                        let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                        if iy < 0 || iy >= geo.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                            if ix < 0 || ix >= geo.w as isize {
                                continue;
                            }
                            out[base + oy * ow + ox] =
                                data[c * geo.h * geo.w + iy as usize * geo.w + ix as usize];
                        }
                    }
                }
            }
        }
        let wants = self.wants(a);
        Ok(self.push(
            Tensor::from_vec(vec![geo.patch_len(), cols], out)?,
            wants,
            Op::Im2col(a, geo),
        ))
    }

    /// Nearest-neighbour upsampling of `[c, h*w]` by an integer factor.
    pub fn upsample_nearest(
        &mut self,
        a: Var,
        c: usize,
        h: usize,
        w: usize,
        factor: usize,
    ) -> Result<Var> {
        let t = self.value(a);
        if t.shape() != [c, h * w] {
            return Err(QartError::dim(format!(
                "upsample input shape {:?}, wanted [{}, {}]",
                t.shape(),
                c,
                h * w
            )));
        }
        if factor == 0 {
            return Err(QartError::param("upsample factor 0"));
        }
        let (nh, nw) = (h * factor, w * factor);
        let mut out = vec![0.0; c * nh * nw];
        let data = t.data();
        for ch in 0..c {
            for y in 0..nh {
                let sy = y / factor;
                for x in 0..nw {
                    out[ch * nh * nw + y * nw + x] = data[ch * h * w + sy * w + x / factor];
                }
            }
        }
        let geo = UpGeom { c, h, w, factor };
        let wants = self.wants(a);
        Ok(self.push(
            Tensor::from_vec(vec![c, nh * nw], out)?,
            wants,
            Op::Upsample(a, geo),
        ))
    }

    // ── custom-gradient hook ────────────────────────────────────────────

    /// Register a unary op whose backward rule is the given closure. The
    /// closure receives the upstream gradient and the saved input value and
    /// must return a gradient of the input's shape.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(&Tensor) -> Tensor,
        rule: impl Fn(&[f64], &Tensor) -> Vec<f64> + 'static,
    ) -> Var {
        let value = forward(self.value(a));
        let wants = self.wants(a);
        self.push(value, wants, Op::Custom(a, Rc::new(rule)))
    }

    /// Round to nearest (halves away from zero) with a straight-through
    /// backward rule: the gradient passes unchanged.
    pub fn round_ste(&mut self, a: Var) -> Var {
        self.custom_unary(a, |t| t.map(f64::round), |up, _| up.to_vec())
    }

    /// Clamp into `[lo, hi]`; the gradient is passed through exactly on the
    /// closed interval and zeroed outside it.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.custom_unary(
            a,
            move |t| t.map(|x| x.clamp(lo, hi)),
            move |up, x| {
                up.iter()
                    .zip(x.data())
                    .map(|(&u, &v)| if v >= lo && v <= hi { u } else { 0.0 })
                    .collect()
            },
        )
    }

    // ── composite helpers ───────────────────────────────────────────────

    pub fn add_scalar(&mut self, a: Var, v: f64) -> Result<Var> {
        let s = self.scalar(v);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, v: f64) -> Result<Var> {
        let s = self.scalar(v);
        self.mul(a, s)
    }

    /// Mean squared difference as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(QartError::dim(format!(
                "mse shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Mean absolute difference as a scalar node.
    pub fn mad(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        self.mean(ad)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Gradients accumulate across
    /// shared subexpressions in tape order.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(QartError::dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(out).shape()
            )));
        }
        self.nodes[out.0].grad = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].wants {
                continue;
            }
            let Some(up) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &up)?;
            self.nodes[id].grad = Some(up);
        }
        Ok(())
    }

    /// Add `up ⊙ ∂node/∂input` into each input's gradient buffer.
    fn propagate(&mut self, id: usize, up: &[f64]) -> Result<()> {
        // Ops hold only Vars and copyable geometry except Custom's Rc rule,
        // so a cheap clone decouples the borrow of self.nodes[id].
        let op: Op = match &self.nodes[id].op {
            Op::Leaf => return Ok(()),
            Op::Add(a, b) => Op::Add(*a, *b),
            Op::Sub(a, b) => Op::Sub(*a, *b),
            Op::Mul(a, b) => Op::Mul(*a, *b),
            Op::Div(a, b) => Op::Div(*a, *b),
            Op::Neg(a) => Op::Neg(*a),
            Op::Sqrt(a) => Op::Sqrt(*a),
            Op::Exp(a) => Op::Exp(*a),
            Op::Abs(a) => Op::Abs(*a),
            Op::Silu(a) => Op::Silu(*a),
            Op::Sum(a) => Op::Sum(*a),
            Op::Mean(a) => Op::Mean(*a),
            Op::Matmul(a, b) => Op::Matmul(*a, *b),
            Op::Reshape(a) => Op::Reshape(*a),
            Op::Im2col(a, g) => Op::Im2col(*a, *g),
            Op::Upsample(a, g) => Op::Upsample(*a, *g),
            Op::Custom(a, rule) => Op::Custom(*a, Rc::clone(rule)),
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(a, b, up, |_, _| 1.0, |_, _| 1.0)?;
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(a, b, up, |_, _| 1.0, |_, _| -1.0)?;
            }
            Op::Mul(a, b) => {
                self.accumulate_broadcast(a, b, up, |_, bv| bv, |av, _| av)?;
            }
            Op::Div(a, b) => {
                self.accumulate_broadcast(a, b, up, |_, bv| 1.0 / bv, |av, bv| -av / (bv * bv))?;
            }
            Op::Neg(a) => self.accum_unary(a, up, |u, _| -u),
            Op::Sqrt(a) => self.accum_unary(a, up, |u, x| u * 0.5 / x.sqrt()),
            Op::Exp(a) => self.accum_unary(a, up, |u, x| u * x.exp()),
            Op::Abs(a) => self.accum_unary(a, up, |u, x| {
                u * if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Silu(a) => self.accum_unary(a, up, |u, x| {
                let s = sigmoid(x);
                u * (s + x * s * (1.0 - s))
            }),
            Op::Sum(a) => {
                let u = up[0];
                if self.nodes[a.0].wants {
                    let n = self.nodes[a.0].value.numel();
                    let g = self.grad_buf(a, n);
                    for gi in g.iter_mut() {
                        *gi += u;
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[a.0].wants {
                    let n = self.nodes[a.0].value.numel();
                    let u = up[0] / n as f64;
                    let g = self.grad_buf(a, n);
                    for gi in g.iter_mut() {
                        *gi += u;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let (_, n) = self.nodes[b.0].value.dims2()?;
                if self.nodes[a.0].wants {
                    let bdata = self.nodes[b.0].value.data().to_vec();
                    let g = self.grad_buf(a, m * k);
                    matmul_nt_into(up, &bdata, m, n, k, g);
                }
                if self.nodes[b.0].wants {
                    let adata = self.nodes[a.0].value.data().to_vec();
                    let g = self.grad_buf(b, k * n);
                    matmul_tn_into(&adata, up, m, k, n, g);
                }
            }
            Op::Reshape(a) => {
                if self.nodes[a.0].wants {
                    let n = self.nodes[a.0].value.numel();
                    let g = self.grad_buf(a, n);
                    for (gi, &u) in g.iter_mut().zip(up) {
                        *gi += u;
                    }
                }
            }
            Op::Im2col(a, geo) => {
                if self.nodes[a.0].wants {
                    let g = self.grad_buf(a, geo.c_in * geo.h * geo.w);
                    let (oh, ow) = (geo.out_h(), geo.out_w());
                    let cols = oh * ow;
                    for c in 0..geo.c_in {
                        for ky in 0..geo.k {
                            for kx in 0..geo.k {
                                let row = (c * geo.k + ky) * geo.k + kx;
                                let base = row * cols;
                                for oy in 0..oh {
                                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                    if iy < 0 || iy >= geo.h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                        if ix < 0 || ix >= geo.w as isize {
                                            continue;
                                        }
                                        g[c * geo.h * geo.w + iy as usize * geo.w + ix as usize] +=
                                            up[base + oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample(a, geo) => {
                if self.nodes[a.0].wants {
                    let g = self.grad_buf(a, geo.c * geo.h * geo.w);
                    let (nh, nw) = (geo.h * geo.factor, geo.w * geo.factor);
                    for ch in 0..geo.c {
                        for y in 0..nh {
                            let sy = y / geo.factor;
                            for x in 0..nw {
                                g[ch * geo.h * geo.w + sy * geo.w + x / geo.factor] +=
                                    up[ch * nh * nw + y * nw + x];
                            }
                        }
                    }
                }
            }
            Op::Custom(a, rule) => {
                if self.nodes[a.0].wants {
                    let gin = rule(up, &self.nodes[a.0].value);
                    let n = self.nodes[a.0].value.numel();
                    if gin.len() != n {
                        return Err(QartError::dim(format!(
                            "custom rule returned {} grads for input of {} elements",
                            gin.len(),
                            n
                        )));
                    }
                    let g = self.grad_buf(a, n);
                    for (gi, u) in g.iter_mut().zip(gin) {
                        *gi += u;
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var, numel: usize) -> &mut [f64] {
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn accum_unary(&mut self, a: Var, up: &[f64], d: impl Fn(f64, f64) -> f64) {
        if !self.nodes[a.0].wants {
            return;
        }
        let n = self.nodes[a.0].value.numel();
        // Split borrows: take the grad buffer out while reading the value.
        let mut g = self.nodes[a.0].grad.take().unwrap_or_else(|| vec![0.0; n]);
        let x = self.nodes[a.0].value.data();
        for i in 0..n {
            g[i] += d(up[i], x[i]);
        }
        self.nodes[a.0].grad = Some(g);
    }

    /// Shared backward for broadcast binary ops given the two local partial
    /// derivative functions of (a_val, b_val).
    fn accumulate_broadcast(
        &mut self,
        a: Var,
        b: Var,
        up: &[f64],
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) -> Result<()> {
        let (_, ma, mb) = broadcast(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape())?;
        if self.nodes[a.0].wants {
            let n = self.nodes[a.0].value.numel();
            let bdat = self.nodes[b.0].value.data().to_vec();
            let mut local = vec![0.0; up.len()];
            {
                let adat = self.nodes[a.0].value.data();
                for (i, l) in local.iter_mut().enumerate() {
                    *l = up[i] * da(adat[ma.map(i)], bdat[mb.map(i)]);
                }
            }
            let g = self.grad_buf(a, n);
            reduce_into(g, &local, ma);
        }
        if self.nodes[b.0].wants {
            let n = self.nodes[b.0].value.numel();
            let adat = self.nodes[a.0].value.data().to_vec();
            let mut local = vec![0.0; up.len()];
            {
                let bdat = self.nodes[b.0].value.data();
                for (i, l) in local.iter_mut().enumerate() {
                    *l = up[i] * db(adat[ma.map(i)], bdat[mb.map(i)]);
                }
            }
            let g = self.grad_buf(b, n);
            reduce_into(g, &local, mb);
        }
        Ok(())
    }
}

/// Which family of parameters a forward pass trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindClass {
    /// Original network weights (trained only while building the backbone).
    Backbone,
    /// Quantization and finetuning parameters (trained during calibration).
    Quant,
}

/// Routes parameters onto the tape as either trainable leaves or constants.
///
/// Model code declares every parameter with its class; the binder decides,
/// from the mode it was built with, which class actually receives gradient.
/// This is how original weights stay frozen during calibration: they are
/// recorded as constants, so no gradient can reach them.
pub struct Binder {
    mode: Option<BindClass>,
    bound: Vec<(String, Var)>,
}

impl Binder {
    /// Everything becomes a constant; used for reference forward passes.
    pub fn frozen() -> Binder {
        Binder {
            mode: None,
            bound: Vec::new(),
        }
    }

    pub fn training(class: BindClass) -> Binder {
        Binder {
            mode: Some(class),
            bound: Vec::new(),
        }
    }

    pub fn param(&mut self, g: &mut Graph, name: &str, class: BindClass, t: &Tensor) -> Var {
        if self.mode == Some(class) && t.numel() > 0 {
            let v = g.leaf(t.clone().trainable());
            self.bound.push((name.to_string(), v));
            v
        } else {
            g.constant(t.clone())
        }
    }

    /// Parameters bound as trainable leaves, in declaration order.
    pub fn bound(&self) -> &[(String, Var)] {
        &self.bound
    }

    /// Gradients for every bound parameter after a backward pass; absent
    /// gradients (no flow) come back as None.
    pub fn collect_grads(&self, g: &Graph) -> Vec<(String, Option<Vec<f64>>)> {
        self.bound
            .iter()
            .map(|(name, var)| (name.clone(), g.grad(*var).map(|s| s.to_vec())))
            .collect()
    }
}
