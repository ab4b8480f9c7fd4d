//! Dense `f64` tensors and a recorded-tape reverse-mode autodiff engine.
//!
//! The tape records exactly the primitives the dual encoder and its losses
//! need. Forward values are stored per node; `backward` walks the recording
//! in exact reverse order and accumulates gradients into every reachable
//! node whose inputs require them. Leaves are copied in via [`Tape::input`],
//! so caller-owned [`Tensor`]s are never mutated by a forward pass.

use crate::error::{Error, Result};
use crate::fmath;
use crate::rng::{self, Rng};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Clamp floor for logarithms inside losses.
pub const LOG_CLAMP: f64 = 1e-12;

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Owned dense tensor: row-major `f64` data plus an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with standard deviation `sigma`.
    pub fn randn(shape: Vec<usize>, sigma: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| sigma * rng::normal(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) -> &mut Self {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
        self
    }

    /// Marks the tensor frozen: it will never accumulate gradient again.
    pub fn freeze(&mut self) -> &mut Self {
        self.set_requires_grad(false)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        if !self.requires_grad {
            return;
        }
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst += *src;
        }
    }

    /// Plain SGD step; no-op when no gradient has been accumulated.
    pub fn sgd_step(&mut self, lr: f64) {
        if let Some(g) = self.grad.as_ref() {
            for (v, d) in self.data.iter_mut().zip(g) {
                *v -= lr * d;
            }
        }
    }

    /// FNV-1a fingerprint over shape and raw float bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = rng::fnv1a(&(self.shape.len() as u64).to_le_bytes());
        for &s in &self.shape {
            h = rng::fnv1a_extend(h, &(s as u64).to_le_bytes());
        }
        for &v in &self.data {
            h = rng::fnv1a_extend(h, &v.to_bits().to_le_bytes());
        }
        h
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul {
        a: usize,
        b: usize,
    },
    MatmulNT {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Gelu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Softmax {
        x: usize,
    },
    Mha {
        x: usize,
        weights: [usize; 8],
        heads: usize,
        batch: usize,
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
        o: Vec<f64>,
        attn: Vec<f64>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows {
        xs: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    L2Normalize {
        x: usize,
        norm: f64,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    CrossEntropy {
        probs: usize,
        labels: Vec<usize>,
    },
    KlFromRef {
        probs: usize,
        reference: Vec<f64>,
    },
}

/// Recorded computation: node values during the forward pass, gradients after
/// [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op: "expect-2d",
            lhs: shape.to_vec(),
            rhs: Vec::new(),
        }),
    }
}

// out += a[m×k] · b[k×n]
fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, kk: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * kk..(i + 1) * kk];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[k×n] += aᵀ[k×m] · b[m×n]  with a stored as [m×k]
fn mm_at_b_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, kk: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * kk..(r + 1) * kk];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×p] += a[m×n] · bᵀ[n×p]  with b stored as [p×n]
fn mm_a_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * p + j] += acc;
        }
    }
}

fn col_sums_acc(out: &mut [f64], x: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = fmath::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + fmath::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = fmath::tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a caller-owned tensor onto the tape as a leaf.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Raw no-grad leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = dims2(&self.nodes[a.0].shape)?;
        let (kb, n) = dims2(&self.nodes[b.0].shape)?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        mm_acc(
            &mut out,
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            ka,
            n,
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// `a[m×n] · bᵀ` with `b` stored `[p×n]`; each output entry is the dot
    /// product of an `a` row with a `b` row, accumulated in column order
    /// exactly like `matmul` would.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = dims2(&self.nodes[a.0].shape)?;
        let (p, nb) = dims2(&self.nodes[b.0].shape)?;
        if na != nb {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * p];
        mm_a_bt_acc(&mut out, &self.nodes[a.0].value, &self.nodes[b.0].value, m, na, p);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(vec![m, p], out, rg, Op::MatmulNT { a: a.0, b: b.0 }))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.req(a) || self.req(b);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds a `[c]` bias to every row of a `[r×c]` node.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = dims2(&self.nodes[x.0].shape)?;
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&self.nodes[bias.0].value) {
                *o += b;
            }
        }
        let rg = self.req(x) || self.req(bias);
        Ok(self.push(vec![r, c], out, rg, Op::AddRow { x: x.0, bias: bias.0 }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let rg = self.req(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, rg, Op::Scale { x: x.0, c })
    }

    /// Tanh-approximation GELU, elementwise.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.req(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, rg, Op::Gelu { x: x.0 })
    }

    /// Per-row layer normalization with affine gain/bias of width `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, d) = dims2(&self.nodes[x.0].shape)?;
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let mut xhat = vec![0.0; r * d];
        for i in 0..r {
            let row = &self.nodes[x.0].value[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / fmath::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * self.nodes[gain.0].value[j] + self.nodes[bias.0].value[j];
            }
        }
        let rg = self.req(x) || self.req(gain) || self.req(bias);
        Ok(self.push(
            vec![r, d],
            out,
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                inv_std,
                xhat,
            },
        ))
    }

    /// Row-wise stable softmax of a 2-D node.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(&self.nodes[x.0].shape)?;
        if self.nodes[x.0].value.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(String::from("softmax input contains NaN")));
        }
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_row(row);
        }
        let rg = self.req(x);
        Ok(self.push(vec![r, c], out, rg, Op::Softmax { x: x.0 }))
    }

    /// Bidirectional multi-head self-attention over `x[s×d]`.
    ///
    /// `weights` order: wq, bq, wk, bk, wv, bv, wo, bo with square `[d×d]`
    /// projections and `[d]` biases.
    pub fn multihead_attention(&mut self, x: Var, w: &MhaVars, heads: usize) -> Result<Var> {
        self.multihead_attention_batched(x, w, heads, 1)
    }

    /// Self-attention over `batch` independent sequences stacked row-wise in
    /// `x[(batch*t)×d]`; attention never crosses sequence boundaries, so each
    /// block of `t` rows matches a standalone [`Tape::multihead_attention`]
    /// call bit for bit.
    pub fn multihead_attention_batched(
        &mut self,
        x: Var,
        w: &MhaVars,
        heads: usize,
        batch: usize,
    ) -> Result<Var> {
        let (s, d) = dims2(&self.nodes[x.0].shape)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} attention heads"
            )));
        }
        if batch == 0 || s % batch != 0 {
            return Err(Error::Config(format!(
                "{s} rows do not split into {batch} equal sequences"
            )));
        }
        for &m in &[w.wq, w.wk, w.wv, w.wo] {
            if self.nodes[m.0].shape != [d, d] {
                return Err(Error::Shape {
                    op: "multihead_attention",
                    lhs: vec![d, d],
                    rhs: self.nodes[m.0].shape.clone(),
                });
            }
        }
        for &b in &[w.bq, w.bk, w.bv, w.bo] {
            if self.nodes[b.0].shape != [d] {
                return Err(Error::Shape {
                    op: "multihead_attention",
                    lhs: vec![d],
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / fmath::sqrt(dh as f64);
        let xv = &self.nodes[x.0].value;

        let proj = |wm: usize, bm: usize, nodes: &[Node]| -> Vec<f64> {
            let mut out = vec![0.0; s * d];
            mm_acc(&mut out, xv, &nodes[wm].value, s, d, d);
            for row in out.chunks_mut(d) {
                for (o, &b) in row.iter_mut().zip(&nodes[bm].value) {
                    *o += b;
                }
            }
            out
        };
        let q = proj(w.wq.0, w.bq.0, &self.nodes);
        let k = proj(w.wk.0, w.bk.0, &self.nodes);
        let v = proj(w.wv.0, w.bv.0, &self.nodes);

        let t_rows = s / batch;
        let mut o = vec![0.0; s * d];
        let mut attn = vec![0.0; batch * heads * t_rows * t_rows];
        for bl in 0..batch {
            let base = bl * t_rows;
            for h in 0..heads {
                let off = h * dh;
                let a_h = &mut attn
                    [(bl * heads + h) * t_rows * t_rows..(bl * heads + h + 1) * t_rows * t_rows];
                for i in 0..t_rows {
                    for j in 0..t_rows {
                        let mut dot = 0.0;
                        for t in 0..dh {
                            dot += q[(base + i) * d + off + t] * k[(base + j) * d + off + t];
                        }
                        a_h[i * t_rows + j] = dot * scale;
                    }
                }
                for row in a_h.chunks_mut(t_rows) {
                    softmax_row(row);
                }
                for i in 0..t_rows {
                    for j in 0..t_rows {
                        let a = a_h[i * t_rows + j];
                        for t in 0..dh {
                            o[(base + i) * d + off + t] += a * v[(base + j) * d + off + t];
                        }
                    }
                }
            }
        }
        let mut y = vec![0.0; s * d];
        mm_acc(&mut y, &o, &self.nodes[w.wo.0].value, s, d, d);
        for row in y.chunks_mut(d) {
            for (yv, &b) in row.iter_mut().zip(&self.nodes[w.bo.0].value) {
                *yv += b;
            }
        }

        let rg = self.req(x)
            || [w.wq, w.bq, w.wk, w.bk, w.wv, w.bv, w.wo, w.bo]
                .iter()
                .any(|&p| self.req(p));
        Ok(self.push(
            vec![s, d],
            y,
            rg,
            Op::Mha {
                x: x.0,
                weights: [w.wq.0, w.bq.0, w.wk.0, w.bk.0, w.wv.0, w.bv.0, w.wo.0, w.bo.0],
                heads,
                batch,
                q,
                k,
                v,
                o,
                attn,
            },
        ))
    }

    /// Contiguous row slice `x[start .. start+len]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(&self.nodes[x.0].shape)?;
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let out = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        let rg = self.req(x);
        Ok(self.push(vec![len, c], out, rg, Op::SliceRows { x: x.0, start }))
    }

    /// Stacks 2-D nodes with a common column count; zero-row parts are legal.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract(String::from("concat_rows of zero nodes")));
        }
        let (_, c) = dims2(&self.nodes[xs[0].0].shape)?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut rg = false;
        for &v in xs {
            let (r, cv) = dims2(&self.nodes[v.0].shape)?;
            if cv != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: self.nodes[v.0].shape.clone(),
                });
            }
            rows += r;
            out.extend_from_slice(&self.nodes[v.0].value);
            rg |= self.req(v);
        }
        Ok(self.push(
            vec![rows, c],
            out,
            rg,
            Op::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.req(x);
        Ok(self.push(shape, out, rg, Op::Reshape { x: x.0 }))
    }

    /// Row lookup into a `[rows×d]` table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = dims2(&self.nodes[table.0].shape)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::Data(format!("row index {i} out of range 0..{r}")));
            }
            out.extend_from_slice(&self.nodes[table.0].value[i * d..(i + 1) * d]);
        }
        let rg = self.req(table);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            rg,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Whole-tensor L2 normalization (used on feature row vectors).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let sq: f64 = self.nodes[x.0].value.iter().map(|v| v * v).sum();
        let norm = fmath::sqrt(sq);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!("cannot normalize vector of norm {norm}")));
        }
        let out: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v / norm).collect();
        let rg = self.req(x);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, rg, Op::L2Normalize { x: x.0, norm }))
    }

    /// Scales each row of `x[n×d]` to unit Euclidean norm independently; on a
    /// single row this matches [`Tape::l2_normalize`] bit for bit.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = dims2(&self.nodes[x.0].shape)?;
        let mut norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &self.nodes[x.0].value[i * d..(i + 1) * d];
            let sq: f64 = row.iter().map(|v| v * v).sum();
            let norm = fmath::sqrt(sq);
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!("cannot normalize row {i} of norm {norm}")));
            }
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let rg = self.req(x);
        Ok(self.push(vec![n, d], out, rg, Op::L2NormalizeRows { x: x.0, norms }))
    }

    /// Sum of all entries, as a `[1]` scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let rg = self.req(x);
        self.push(vec![1], vec![s], rg, Op::Sum { x: x.0 })
    }

    /// Mean negative log-likelihood of `probs[N×C]` rows at `labels`, with the
    /// log argument clamped at [`LOG_CLAMP`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims2(&self.nodes[probs.0].shape)?;
        if labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for {} probability rows",
                labels.len(),
                n
            )));
        }
        if n == 0 {
            return Err(Error::Data(String::from("cross_entropy over zero samples")));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Data(format!("label {y} out of range 0..{c}")));
            }
            let p = self.nodes[probs.0].value[i * c + y];
            total -= fmath::ln(fmath::max(p, LOG_CLAMP));
        }
        let rg = self.req(probs);
        Ok(self.push(
            vec![1],
            vec![total / n as f64],
            rg,
            Op::CrossEntropy {
                probs: probs.0,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean KL divergence `KL(reference ‖ probs)` where `reference` is a
    /// detached `[N×C]` distribution (row-major, same layout as `probs`).
    /// Returns the scalar node and the number of clamped local probabilities.
    pub fn kl_from_reference(&mut self, reference: &[f64], probs: Var) -> Result<(Var, usize)> {
        let (n, c) = dims2(&self.nodes[probs.0].shape)?;
        if reference.len() != n * c {
            return Err(Error::Shape {
                op: "kl_from_reference",
                lhs: vec![n, c],
                rhs: vec![reference.len()],
            });
        }
        if n == 0 {
            return Err(Error::Data(String::from("kl over zero samples")));
        }
        let mut total = 0.0;
        let mut clamped = 0usize;
        for i in 0..n * c {
            let pg = reference[i];
            if pg <= 0.0 {
                continue;
            }
            let pl = self.nodes[probs.0].value[i];
            if pl < LOG_CLAMP {
                clamped += 1;
            }
            total += pg * (fmath::ln(fmath::max(pg, LOG_CLAMP)) - fmath::ln(fmath::max(pl, LOG_CLAMP)));
        }
        let rg = self.req(probs);
        let var = self.push(
            vec![1],
            vec![total / n as f64],
            rg,
            Op::KlFromRef {
                probs: probs.0,
                reference: reference.to_vec(),
            },
        );
        Ok((var, clamped))
    }

    /// Reverse pass from a scalar loss. Resets any previous gradients, then
    /// walks the recording once in exact reverse order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // A node's gradient is complete once every later consumer has
            // been processed, so it can be taken by value here.
            let dout = self.grads[i].take().expect("checked above");
            self.propagate(i, &dout);
        }
        Ok(())
    }

    fn add_grad(&mut self, node: usize, delta: &[f64]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let len = self.nodes[node].value.len();
        let buf = self.grads[node].get_or_insert_with(|| vec![0.0; len]);
        for (dst, src) in buf.iter_mut().zip(delta) {
            *dst += *src;
        }
    }

    fn propagate(&mut self, i: usize, dout: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, kk) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * kk];
                    mm_a_bt_acc(&mut da, dout, &self.nodes[b].value, m, n, kk);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; kk * n];
                    mm_at_b_acc(&mut db, &self.nodes[a].value, dout, m, kk, n);
                    self.add_grad(b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                let (a, b) = (*a, *b);
                let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let p = self.nodes[b].shape[0];
                if self.nodes[a].requires_grad {
                    let mut da = vec![0.0; m * n];
                    mm_acc(&mut da, dout, &self.nodes[b].value, m, p, n);
                    self.add_grad(a, &da);
                }
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0; p * n];
                    mm_at_b_acc(&mut db, dout, &self.nodes[a].value, m, p, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, dout);
                self.add_grad(b, dout);
            }
            Op::AddRow { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.add_grad(x, dout);
                if self.nodes[bias].requires_grad {
                    let (r, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let mut db = vec![0.0; c];
                    col_sums_acc(&mut db, dout, r, c);
                    self.add_grad(bias, &db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = dout.iter().map(|v| v * c).collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let dx: Vec<f64> = self.nodes[x]
                        .value
                        .iter()
                        .zip(dout)
                        .map(|(&v, &d)| d * gelu_grad(v))
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                xhat,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (r, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let inv_std = inv_std.clone();
                let xhat = xhat.clone();
                if self.nodes[x].requires_grad {
                    let gval = self.nodes[gain].value.clone();
                    let mut dx = vec![0.0; r * d];
                    for i in 0..r {
                        let dy = &dout[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut h1 = 0.0;
                        let mut h2 = 0.0;
                        for j in 0..d {
                            let dxh = dy[j] * gval[j];
                            h1 += dxh;
                            h2 += dxh * xh[j];
                        }
                        h1 /= d as f64;
                        h2 /= d as f64;
                        for j in 0..d {
                            let dxh = dy[j] * gval[j];
                            dx[i * d + j] = inv_std[i] * (dxh - h1 - xh[j] * h2);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                if self.nodes[gain].requires_grad {
                    let mut dg = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dg[j] += dout[i * d + j] * xhat[i * d + j];
                        }
                    }
                    self.add_grad(gain, &dg);
                }
                if self.nodes[bias].requires_grad {
                    let mut db = vec![0.0; d];
                    col_sums_acc(&mut db, dout, r, d);
                    self.add_grad(bias, &db);
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let y = &self.nodes[i].value;
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        let yrow = &y[row * c..(row + 1) * c];
                        let drow = &dout[row * c..(row + 1) * c];
                        let dot: f64 = yrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[row * c + j] = yrow[j] * (drow[j] - dot);
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Mha {
                x,
                weights,
                heads,
                batch,
                q,
                k,
                v,
                o,
                attn,
            } => {
                let x = *x;
                let w = *weights;
                let heads = *heads;
                let batch = *batch;
                let (s, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let dh = d / heads;
                let t_rows = s / batch;
                let scale = 1.0 / fmath::sqrt(dh as f64);
                let (q, k, v, o, attn) = (q.clone(), k.clone(), v.clone(), o.clone(), attn.clone());
                let [wq, bq, wk, bk, wv, bv, wo, bo] = w;

                // Output projection.
                if self.nodes[wo].requires_grad {
                    let mut dwo = vec![0.0; d * d];
                    mm_at_b_acc(&mut dwo, &o, dout, s, d, d);
                    self.add_grad(wo, &dwo);
                }
                if self.nodes[bo].requires_grad {
                    let mut dbo = vec![0.0; d];
                    col_sums_acc(&mut dbo, dout, s, d);
                    self.add_grad(bo, &dbo);
                }
                let mut dov = vec![0.0; s * d];
                mm_a_bt_acc(&mut dov, dout, &self.nodes[wo].value, s, d, d);

                // Attention backward into dQ, dK, dV, per sequence and head.
                let mut dq = vec![0.0; s * d];
                let mut dk = vec![0.0; s * d];
                let mut dv = vec![0.0; s * d];
                for bl in 0..batch {
                    let base = bl * t_rows;
                    for h in 0..heads {
                        let off = h * dh;
                        let a_h = &attn[(bl * heads + h) * t_rows * t_rows
                            ..(bl * heads + h + 1) * t_rows * t_rows];
                        let mut da = vec![0.0; t_rows * t_rows];
                        for ii in 0..t_rows {
                            for j in 0..t_rows {
                                let mut acc = 0.0;
                                for t in 0..dh {
                                    acc += dov[(base + ii) * d + off + t]
                                        * v[(base + j) * d + off + t];
                                }
                                da[ii * t_rows + j] = acc;
                            }
                        }
                        for j in 0..t_rows {
                            for t in 0..dh {
                                let mut acc = 0.0;
                                for ii in 0..t_rows {
                                    acc += a_h[ii * t_rows + j] * dov[(base + ii) * d + off + t];
                                }
                                dv[(base + j) * d + off + t] += acc;
                            }
                        }
                        // Softmax backward per row, then the scaled dot product.
                        let mut ds = vec![0.0; t_rows * t_rows];
                        for row in 0..t_rows {
                            let arow = &a_h[row * t_rows..(row + 1) * t_rows];
                            let drow = &da[row * t_rows..(row + 1) * t_rows];
                            let dot: f64 = arow.iter().zip(drow).map(|(a, b)| a * b).sum();
                            for j in 0..t_rows {
                                ds[row * t_rows + j] = arow[j] * (drow[j] - dot);
                            }
                        }
                        for ii in 0..t_rows {
                            for t in 0..dh {
                                let mut accq = 0.0;
                                let mut acck = 0.0;
                                for j in 0..t_rows {
                                    accq += ds[ii * t_rows + j] * k[(base + j) * d + off + t];
                                    acck += ds[j * t_rows + ii] * q[(base + j) * d + off + t];
                                }
                                dq[(base + ii) * d + off + t] += accq * scale;
                                dk[(base + ii) * d + off + t] += acck * scale;
                            }
                        }
                    }
                }

                // Input projections.
                let xv = self.nodes[x].value.clone();
                let mut dx = vec![0.0; s * d];
                for (dproj, wm, bm) in [(&dq, wq, bq), (&dk, wk, bk), (&dv, wv, bv)] {
                    if self.nodes[x].requires_grad {
                        mm_a_bt_acc(&mut dx, dproj, &self.nodes[wm].value, s, d, d);
                    }
                    if self.nodes[wm].requires_grad {
                        let mut dw = vec![0.0; d * d];
                        mm_at_b_acc(&mut dw, &xv, dproj, s, d, d);
                        self.add_grad(wm, &dw);
                    }
                    if self.nodes[bm].requires_grad {
                        let mut db = vec![0.0; d];
                        col_sums_acc(&mut db, dproj, s, d);
                        self.add_grad(bm, &db);
                    }
                }
                if self.nodes[x].requires_grad {
                    self.add_grad(x, &dx);
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                if self.nodes[x].requires_grad {
                    let c = self.nodes[x].shape[1];
                    let mut dx = vec![0.0; self.nodes[x].value.len()];
                    dx[start * c..start * c + dout.len()].copy_from_slice(dout);
                    self.add_grad(x, &dx);
                }
            }
            Op::ConcatRows { xs } => {
                let xs = xs.clone();
                let mut offset = 0;
                for xi in xs {
                    let len = self.nodes[xi].value.len();
                    if self.nodes[xi].requires_grad && len > 0 {
                        let piece = dout[offset..offset + len].to_vec();
                        self.add_grad(xi, &piece);
                    }
                    offset += len;
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                self.add_grad(x, dout);
            }
            Op::GatherRows { table, idx } => {
                let (table, idx) = (*table, idx.clone());
                if self.nodes[table].requires_grad {
                    let d = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].value.len()];
                    for (row, &ti) in idx.iter().enumerate() {
                        for j in 0..d {
                            dt[ti * d + j] += dout[row * d + j];
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::L2Normalize { x, norm } => {
                let (x, norm) = (*x, *norm);
                if self.nodes[x].requires_grad {
                    let y = &self.nodes[i].value;
                    let dot: f64 = y.iter().zip(dout).map(|(a, b)| a * b).sum();
                    let dx: Vec<f64> = y
                        .iter()
                        .zip(dout)
                        .map(|(&yv, &dv)| (dv - yv * dot) / norm)
                        .collect();
                    self.add_grad(x, &dx);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (x, norms) = (*x, norms.clone());
                if self.nodes[x].requires_grad {
                    let d = self.nodes[x].shape[1];
                    let mut dx = vec![0.0; norms.len() * d];
                    for (row, &norm) in norms.iter().enumerate() {
                        let y = &self.nodes[i].value[row * d..(row + 1) * d];
                        let dr = &dout[row * d..(row + 1) * d];
                        let dot: f64 = y.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[row * d + j] = (dr[j] - y[j] * dot) / norm;
                        }
                    }
                    self.add_grad(x, &dx);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let dx = vec![dout[0]; self.nodes[x].value.len()];
                    self.add_grad(x, &dx);
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let (probs, labels) = (*probs, labels.clone());
                if self.nodes[probs].requires_grad {
                    let (n, c) = (self.nodes[probs].shape[0], self.nodes[probs].shape[1]);
                    let mut dp = vec![0.0; n * c];
                    for (row, &y) in labels.iter().enumerate() {
                        let p = self.nodes[probs].value[row * c + y];
                        if p > LOG_CLAMP {
                            dp[row * c + y] = -dout[0] / (n as f64 * p);
                        }
                    }
                    self.add_grad(probs, &dp);
                }
            }
            Op::KlFromRef { probs, reference } => {
                let (probs, reference) = (*probs, reference.clone());
                if self.nodes[probs].requires_grad {
                    let (n, c) = (self.nodes[probs].shape[0], self.nodes[probs].shape[1]);
                    let mut dp = vec![0.0; n * c];
                    for idx in 0..n * c {
                        let pg = reference[idx];
                        if pg <= 0.0 {
                            continue;
                        }
                        let pl = self.nodes[probs].value[idx];
                        if pl > LOG_CLAMP {
                            dp[idx] = -dout[0] * pg / (n as f64 * pl);
                        }
                    }
                    self.add_grad(probs, &dp);
                }
            }
        }
    }

    /// Accumulated gradient of a node, if any reached it.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds a leaf's tape gradient into the owning tensor's `grad` buffer.
    pub fn write_grad_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.grad_of(v) {
            target.accumulate_grad(g);
        }
    }
}

/// Var bundle for one attention sublayer's projection weights.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}
