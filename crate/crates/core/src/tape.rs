//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar walks the records in reverse and returns the
//! gradients of every differentiable leaf. The tape can be differentiated once;
//! a second call fails with [`Error::GraphConsumed`].
//!
//! Besides the generic building blocks (broadcasting arithmetic, matmul,
//! softmax, layer norm, GELU, dropout) the tape has a handful of fused kernels
//! for the attention layers and the losses, which keeps the per-sample cost of
//! training low enough to run on one CPU core.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math::{self, gemm, LAYER_NORM_EPS};
use crate::tensor::{broadcast_shapes, broadcast_strides, numel};
use crate::{Error, ParamId, ParamStore, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Broadcast {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    VariableEncode {
        w: Var,
        b: Var,
        cells: Vec<[f64; 2]>,
        vars: usize,
        dim: usize,
    },
    PrependRow {
        h: Var,
        row: Var,
        batch: usize,
        rows: usize,
        width: usize,
    },
    TemporalAttention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        dims: AttnDims,
    },
    CrossWeights {
        q: Var,
        k: Var,
        batch: usize,
        items: usize,
        dim: usize,
        heads: usize,
    },
    MixItems {
        w: Var,
        v: Var,
        batch: usize,
        steps: usize,
        items: usize,
        dim: usize,
        heads: usize,
    },
    WeightedRowSum {
        h: Var,
        weights: Vec<f64>,
        batch: usize,
        steps: usize,
        width: usize,
    },
    GatherRows {
        h: Var,
        rows: Vec<usize>,
        steps: usize,
        width: usize,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        width: usize,
        denom: f64,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        denom: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        classes: Vec<usize>,
        denom: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    steps: usize,
    items: usize,
    dim: usize,
    heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    #[inline]
    fn offset(&self, b: usize, t: usize, n: usize) -> usize {
        ((b * self.steps + t) * self.items + n) * self.dim
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    vars: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn var(&self, var: Var) -> Option<&Tensor> {
        self.vars.iter().find(|(v, _)| *v == var).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, t)| (*p, t))
    }

    /// Add every gradient of `other` into `self`.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, t) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += g;
                    }
                }
                None => self.params.push((id, t)),
            }
        }
        self.vars.extend(other.vars);
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty() && self.vars.is_empty()
    }
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    validate: bool,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that checks every op output for NaN/Inf and fails on the first
    /// non-finite value.
    pub fn validating() -> Self {
        Tape {
            validate: true,
            ..Self::default()
        }
    }

    pub fn set_validation(&mut self, on: bool) {
        self.validate = on;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.validate && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf whose gradient is reported by [`Gradients::var`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Variable,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters enter the
    /// tape as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.tensor.clone(),
            op: Op::Param(id),
            requires_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![0.0; numel(&out_shape)];
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            let st_a = broadcast_strides(&sa, &out_shape);
            let st_b = broadcast_strides(&sb, &out_shape);
            for_each_broadcast(&out_shape, &st_a, &st_b, |i, ia, ib| {
                out[i] = f(da[ia], db[ib]);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Broadcast { kind, a, b },
            rg,
            name,
        )
    }

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(Binary::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Scale { x, factor }, rg, "scale")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape { x },
            rg,
            "reshape",
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Matrix product over the last two axes. Leading axes must either agree
    /// or be absent on one side, in which case that operand is shared across
    /// the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let a_batched = !lead_a.is_empty();
        let b_batched = !lead_b.is_empty();
        if k != k2 || (a_batched && b_batched && lead_a != lead_b) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let lead = if a_batched { lead_a } else { lead_b };
        let batch = numel(lead);
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        if !b_batched {
            // one tall product covers the whole batch
            let rows = if a_batched { batch * m } else { m };
            if a_batched {
                gemm(rows, k, n, 1.0, da, (k, 1), db, (n, 1), 0.0, &mut out, (n, 1));
            } else {
                for i in 0..batch {
                    gemm(m, k, n, 1.0, da, (k, 1), db, (n, 1), 0.0, &mut out[i * m * n..], (n, 1));
                }
            }
        } else {
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &da[ao..],
                    (k, 1),
                    &db[i * k * n..],
                    (n, 1),
                    0.0,
                    &mut out[i * m * n..],
                    (n, 1),
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Matmul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            rg,
            "matmul",
        )
    }

    /// Affine map over the last axis: `x @ w + b` with `w` of shape `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear bias", &sw, self.shape(b)));
            }
        }
        let rows = numel(&sx) / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(
            rows,
            din,
            dout,
            1.0,
            self.data(x),
            (din, 1),
            self.data(w),
            (dout, 1),
            beta,
            &mut out,
            (dout, 1),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            rg,
            "linear",
        )
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(out[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = math::exp(out[base + j * inner] - max);
                    out[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, outer, len, inner },
            rg,
            "softmax",
        )
    }

    /// Normalize the last axis to zero mean and unit variance, then apply
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = numel(&shape) / dim.max(1);
        let xs = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for c in 0..dim {
                let h = (row[c] - mean) * rs;
                xhat[r * dim + c] = h;
                out[r * dim + c] = h * g[c] + bt[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        )
    }

    /// The model-wide nonlinearity (GELU, tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let rg = self.rg(x);
        let xd = self.data(x);
        let (out, tanh): (Vec<f64>, Vec<f64>) = if rg {
            xd.iter()
                .map(|&v| {
                    let t = math::gelu_tanh(v);
                    (0.5 * v * (1.0 + t), t)
                })
                .unzip()
        } else {
            (xd.iter().map(|&v| math::gelu(v)).collect(), Vec::new())
        };
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Gelu { x, tanh }, rg, "gelu")
    }

    /// Inverted dropout. Outside training, or with `rate == 0`, returns `x`
    /// unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(alloc::format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        // P(u < cut) = rate for u uniform on 32 bits
        let cut = (rate * 4_294_967_296.0) as u64;
        let keep: Vec<f64> = (0..n)
            .map(|_| if u64::from(rng.next_u32()) < cut { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.data(x).iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::Dropout { x, keep }, rg, "dropout")
    }

    /// Per-variable projection of `(value, mask)` cells.
    ///
    /// `values` and `mask` have shape `[.., vars]`; `w` is `[vars, 2, dim]` and
    /// `b` is `[vars, dim]`. Output shape is `[.., vars, dim]`. No weights are
    /// shared between variables.
    pub fn variable_encode(&mut self, values: &Tensor, mask: &Tensor, w: Var, b: Var) -> Result<Var> {
        if values.shape() != mask.shape() || values.rank() == 0 {
            return Err(Error::shape("variable_encode", values.shape(), mask.shape()));
        }
        let vars = *values.shape().last().unwrap();
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || sw[0] != vars || sw[1] != 2 || self.shape(b) != [vars, sw[2]] {
            return Err(Error::shape("variable_encode", values.shape(), &sw));
        }
        let dim = sw[2];
        let cells: Vec<[f64; 2]> = values.data().iter().zip(mask.data()).map(|(&x, &m)| [x, m]).collect();
        let (wd, bd) = (self.data(w), self.data(b));
        let mut out = vec![0.0; cells.len() * dim];
        for (c, cell) in cells.iter().enumerate() {
            let n = c % vars;
            let o = &mut out[c * dim..(c + 1) * dim];
            let w0 = &wd[n * 2 * dim..n * 2 * dim + dim];
            let w1 = &wd[n * 2 * dim + dim..(n + 1) * 2 * dim];
            let bb = &bd[n * dim..(n + 1) * dim];
            for j in 0..dim {
                o[j] = cell[0] * w0[j] + cell[1] * w1[j] + bb[j];
            }
        }
        let mut shape = values.shape().to_vec();
        shape.push(dim);
        let rg = self.rg(w) || self.rg(b);
        self.push(
            Tensor::from_parts(shape, out),
            Op::VariableEncode { w, b, cells, vars, dim },
            rg,
            "variable_encode",
        )
    }

    /// Insert `row` (shape `[..rest]`) in front of axis 1 of `h`
    /// (shape `[batch, steps, ..rest]`), giving `[batch, steps + 1, ..rest]`.
    pub fn prepend_row(&mut self, h: Var, row: Var) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        let sr = self.shape(row).to_vec();
        if sh.len() < 2 || sh[2..] != sr[..] {
            return Err(Error::shape("prepend_row", &sh, &sr));
        }
        let (batch, rows) = (sh[0], sh[1]);
        let width = numel(&sr);
        let mut out = Vec::with_capacity(batch * (rows + 1) * width);
        let (hd, rd) = (self.data(h), self.data(row));
        for b in 0..batch {
            out.extend_from_slice(rd);
            out.extend_from_slice(&hd[b * rows * width..(b + 1) * rows * width]);
        }
        let mut shape = sh;
        shape[1] += 1;
        let rg = self.rg(h) || self.rg(row);
        self.push(
            Tensor::from_parts(shape, out),
            Op::PrependRow {
                h,
                row,
                batch,
                rows,
                width,
            },
            rg,
            "prepend_row",
        )
    }

    /// Multi-head self-attention along axis 1 of `[batch, steps, items, dim]`,
    /// independently for every item, with an additive logit bias.
    ///
    /// `bias` has shape `[batch, items, steps, steps]` and is shared by all
    /// heads; `-inf` entries exclude a key entirely. Scores are scaled by
    /// `1/sqrt(dim / heads)`.
    pub fn temporal_attention(&mut self, q: Var, k: Var, v: Var, bias: &Tensor, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 4 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("temporal_attention", &shape, self.shape(k)));
        }
        let dims = AttnDims {
            batch: shape[0],
            steps: shape[1],
            items: shape[2],
            dim: shape[3],
            heads,
        };
        if heads == 0 || dims.dim % heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "{} heads do not divide dim {}",
                heads,
                dims.dim
            )));
        }
        let expect = [dims.batch, dims.items, dims.steps, dims.steps];
        if bias.shape() != expect {
            return Err(Error::shape("temporal_attention bias", bias.shape(), &expect));
        }
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (out, probs) = temporal_attention_forward(qd, kd, vd, bias.data(), dims);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_parts(shape, out),
            Op::TemporalAttention { q, k, v, probs, dims },
            rg,
            "temporal_attention",
        )
    }

    /// Multi-head attention weights between items: `q`, `k` are
    /// `[batch, items, dim]`; output is the row-softmaxed
    /// `[batch, heads, items, items]` map.
    pub fn cross_item_weights(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3 || self.shape(k) != shape.as_slice() {
            return Err(Error::shape("cross_item_weights", &shape, self.shape(k)));
        }
        let (batch, items, dim) = (shape[0], shape[1], shape[2]);
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(alloc::format!("{heads} heads do not divide dim {dim}")));
        }
        let hd = dim / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let (qd, kd) = (self.data(q), self.data(k));
        let mut out = vec![0.0; batch * heads * items * items];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..items {
                    let qi = &qd[(b * items + i) * dim + h * hd..][..hd];
                    let row = &mut out[((b * heads + h) * items + i) * items..][..items];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[(b * items + j) * dim + h * hd..][..hd];
                        *r = scale * dot(qi, kj);
                    }
                    softmax_in_place(row);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(
            Tensor::from_parts(vec![batch, heads, items, items], out),
            Op::CrossWeights {
                q,
                k,
                batch,
                items,
                dim,
                heads,
            },
            rg,
            "cross_item_weights",
        )
    }

    /// Mix items with per-head weights shared across steps:
    /// `out[b, t, i, head] = sum_j w[b, head, i, j] * v[b, t, j, head]`.
    pub fn mix_items(&mut self, w: Var, v: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sv = self.shape(v).to_vec();
        if sw.len() != 4 || sv.len() != 4 || sw[0] != sv[0] || sw[2] != sv[2] || sw[3] != sv[2] || sv[3] % sw[1] != 0 {
            return Err(Error::shape("mix_items", &sw, &sv));
        }
        let (batch, heads, items) = (sw[0], sw[1], sw[2]);
        let (steps, dim) = (sv[1], sv[3]);
        let hd = dim / heads;
        let (wd, vd) = (self.data(w), self.data(v));
        let mut out = vec![0.0; vd.len()];
        for b in 0..batch {
            for t in 0..steps {
                let base = (b * steps + t) * items * dim;
                for h in 0..heads {
                    for i in 0..items {
                        let wrow = &wd[((b * heads + h) * items + i) * items..][..items];
                        let o = base + i * dim + h * hd;
                        for (j, &wij) in wrow.iter().enumerate() {
                            let src = &vd[base + j * dim + h * hd..][..hd];
                            for c in 0..hd {
                                out[o + c] += wij * src[c];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(w) || self.rg(v);
        self.push(
            Tensor::from_parts(sv, out),
            Op::MixItems {
                w,
                v,
                batch,
                steps,
                items,
                dim,
                heads,
            },
            rg,
            "mix_items",
        )
    }

    /// Weighted sum over axis 1: `h` is `[batch, steps, items, dim]`,
    /// `weights` is `[batch, steps, items]`; output `[batch, items, dim]`.
    pub fn weighted_row_sum(&mut self, h: Var, weights: &Tensor) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        if sh.len() != 4 || weights.shape() != &sh[..3] {
            return Err(Error::shape("weighted_row_sum", &sh, weights.shape()));
        }
        let (batch, steps, items, dim) = (sh[0], sh[1], sh[2], sh[3]);
        let width = items * dim;
        let hd = self.data(h);
        let wd = weights.data();
        let mut out = vec![0.0; batch * width];
        for b in 0..batch {
            for t in 0..steps {
                for n in 0..items {
                    let wt = wd[(b * steps + t) * items + n];
                    if wt == 0.0 {
                        continue;
                    }
                    let src = &hd[(b * steps + t) * width + n * dim..][..dim];
                    let dst = &mut out[b * width + n * dim..][..dim];
                    for c in 0..dim {
                        dst[c] += wt * src[c];
                    }
                }
            }
        }
        let rg = self.rg(h);
        self.push(
            Tensor::from_parts(vec![batch, items, dim], out),
            Op::WeightedRowSum {
                h,
                weights: weights.data().to_vec(),
                batch,
                steps,
                width,
            },
            rg,
            "weighted_row_sum",
        )
    }

    /// Select one step per batch element: `h` is `[batch, steps, ..rest]`,
    /// output `[batch, ..rest]`.
    pub fn gather_rows(&mut self, h: Var, rows: &[usize]) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        if sh.len() < 2 || rows.len() != sh[0] || rows.iter().any(|&r| r >= sh[1]) {
            return Err(Error::shape("gather_rows", &sh, &[rows.len()]));
        }
        let steps = sh[1];
        let width = numel(&sh[2..]);
        let hd = self.data(h);
        let mut out = Vec::with_capacity(rows.len() * width);
        for (b, &r) in rows.iter().enumerate() {
            out.extend_from_slice(&hd[(b * steps + r) * width..][..width]);
        }
        let mut shape = vec![sh[0]];
        shape.extend_from_slice(&sh[2..]);
        let rg = self.rg(h);
        self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                h,
                rows: rows.to_vec(),
                steps,
                width,
            },
            rg,
            "gather_rows",
        )
    }

    /// `sum(weights * |pred - target|_1) / denom`, where `weights` holds one
    /// entry per group of `width` trailing elements.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, weights: &Tensor, denom: f64) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if target.shape() != sp.as_slice() || sp.is_empty() || weights.shape() != &sp[..sp.len() - 1] {
            return Err(Error::shape("masked_l1", &sp, weights.shape()));
        }
        if denom <= 0.0 {
            return Err(Error::invalid("masked_l1 denominator must be positive"));
        }
        let width = sp[sp.len() - 1];
        let pd = self.data(pred);
        let mut total = 0.0;
        for (g, &wt) in weights.data().iter().enumerate() {
            if wt == 0.0 {
                continue;
            }
            let p = &pd[g * width..][..width];
            let t = &target.data()[g * width..][..width];
            total += wt * p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>();
        }
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(total / denom),
            Op::MaskedL1 {
                pred,
                target: target.data().to_vec(),
                weights: weights.data().to_vec(),
                width,
                denom,
            },
            rg,
            "masked_l1",
        )
    }

    /// Sum of sigmoid cross-entropies divided by `denom`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, denom: f64) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let loss: f64 = self
            .data(logits)
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| math::softplus(z) - y * z)
            .sum();
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / denom),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                denom,
            },
            rg,
            "bce_with_logits",
        )
    }

    /// Sum over rows of `-log softmax(logits)[class]`, divided by `denom`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize], denom: f64) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != classes.len() || classes.iter().any(|&c| c >= sl[1]) {
            return Err(Error::shape("softmax_cross_entropy", &sl, &[classes.len()]));
        }
        let width = sl[1];
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &c) in probs.chunks_exact_mut(width).zip(classes) {
            softmax_in_place(row);
            loss -= math::ln(row[c].max(f64::MIN_POSITIVE));
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / denom),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                classes: classes.to_vec(),
                denom,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Variable => result
                    .vars
                    .push((Var(i), Tensor::from_parts(node.value.shape().to_vec(), g))),
                Op::Param(id) => result
                    .params
                    .push((*id, Tensor::from_parts(node.value.shape().to_vec(), g))),
                op => self.backward_op(op, node.value.data(), &g, &mut grads),
            }
        }
        Ok(result)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backward_op(&self, op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Constant | Op::Variable | Op::Param(_) => unreachable!(),
            Op::Broadcast { kind, a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let out_shape = broadcast_shapes(&sa, &sb).unwrap();
                let st_a = broadcast_strides(&sa, &out_shape);
                let st_b = broadcast_strides(&sb, &out_shape);
                let (da, db) = (self.data(a), self.data(b));
                for (target, is_a) in [(a, true), (b, false)] {
                    let Some(buf) = self.grad_buf(grads, target) else {
                        continue;
                    };
                    let same = if is_a { sa == out_shape } else { sb == out_shape };
                    let mut apply = |i: usize, ia: usize, ib: usize| {
                        let gi = g[i];
                        let (idx, val) = match (kind, is_a) {
                            (Binary::Add, true) => (ia, gi),
                            (Binary::Add, false) => (ib, gi),
                            (Binary::Sub, true) => (ia, gi),
                            (Binary::Sub, false) => (ib, -gi),
                            (Binary::Mul, true) => (ia, gi * db[ib]),
                            (Binary::Mul, false) => (ib, gi * da[ia]),
                        };
                        buf[idx] += val;
                    };
                    if same && sa == sb {
                        for i in 0..g.len() {
                            apply(i, i, i);
                        }
                    } else {
                        for_each_broadcast(&out_shape, &st_a, &st_b, &mut apply);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(buf) = self.grad_buf(grads, x) {
                    for (b, gi) in buf.iter_mut().zip(g) {
                        *b += gi * factor;
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(buf) = self.grad_buf(grads, x) {
                    add_into(buf, g);
                }
            }
            Op::Sum { x } => {
                if let Some(buf) = self.grad_buf(grads, x) {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::Matmul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                if let Some(buf) = self.grad_buf(grads, a) {
                    // dA = dC @ B^T
                    for i in 0..batch {
                        let bo = if b_batched { i * k * n } else { 0 };
                        let ao = if a_batched { i * m * k } else { 0 };
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..],
                            (n, 1),
                            &db[bo..],
                            (1, n),
                            1.0,
                            &mut buf[ao..],
                            (k, 1),
                        );
                    }
                }
                if let Some(buf) = self.grad_buf(grads, b) {
                    // dB = A^T @ dC
                    if !b_batched && a_batched {
                        gemm(k, batch * m, n, 1.0, da, (1, k), g, (n, 1), 1.0, buf, (n, 1));
                    } else {
                        for i in 0..batch {
                            let bo = if b_batched { i * k * n } else { 0 };
                            let ao = if a_batched { i * m * k } else { 0 };
                            gemm(
                                k,
                                m,
                                n,
                                1.0,
                                &da[ao..],
                                (1, k),
                                &g[i * m * n..],
                                (n, 1),
                                1.0,
                                &mut buf[bo..],
                                (n, 1),
                            );
                        }
                    }
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                if let Some(buf) = self.grad_buf(grads, x) {
                    gemm(
                        rows,
                        dout,
                        din,
                        1.0,
                        g,
                        (dout, 1),
                        self.data(w),
                        (1, dout),
                        1.0,
                        buf,
                        (din, 1),
                    );
                }
                if let Some(buf) = self.grad_buf(grads, w) {
                    gemm(
                        din,
                        rows,
                        dout,
                        1.0,
                        self.data(x),
                        (1, din),
                        g,
                        (dout, 1),
                        1.0,
                        buf,
                        (dout, 1),
                    );
                }
                if let Some(b) = b {
                    if let Some(buf) = self.grad_buf(grads, b) {
                        for row in g.chunks_exact(dout) {
                            add_into(buf, row);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(buf) = self.grad_buf(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[base + j * inner] * out[base + j * inner];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                buf[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let dim = self.value(gamma).numel();
                let gm = self.data(gamma);
                if let Some(buf) = self.grad_buf(grads, x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let xr = &xhat[r * dim..(r + 1) * dim];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..dim {
                            let d = gr[c] * gm[c];
                            mean_d += d;
                            mean_dx += d * xr[c];
                        }
                        mean_d /= dim as f64;
                        mean_dx /= dim as f64;
                        let br = &mut buf[r * dim..(r + 1) * dim];
                        for c in 0..dim {
                            br[c] += rs * (gr[c] * gm[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, gamma) {
                    for (gr, xr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for c in 0..dim {
                            buf[c] += gr[c] * xr[c];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, beta) {
                    for gr in g.chunks_exact(dim) {
                        add_into(buf, gr);
                    }
                }
            }
            Op::Gelu { x, ref tanh } => {
                let xd = self.data(x);
                if let Some(buf) = self.grad_buf(grads, x) {
                    for (((b, &gi), &xi), &t) in buf.iter_mut().zip(g).zip(xd).zip(tanh) {
                        *b += gi * math::gelu_grad_with(xi, t);
                    }
                }
            }
            Op::Dropout { x, ref keep } => {
                if let Some(buf) = self.grad_buf(grads, x) {
                    for ((b, &gi), &k) in buf.iter_mut().zip(g).zip(keep) {
                        *b += gi * k;
                    }
                }
            }
            Op::VariableEncode {
                w,
                b,
                ref cells,
                vars,
                dim,
            } => {
                if let Some(buf) = self.grad_buf(grads, w) {
                    for (c, cell) in cells.iter().enumerate() {
                        let n = c % vars;
                        let gc = &g[c * dim..(c + 1) * dim];
                        let base = n * 2 * dim;
                        for j in 0..dim {
                            buf[base + j] += cell[0] * gc[j];
                            buf[base + dim + j] += cell[1] * gc[j];
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, b) {
                    for (c, gc) in g.chunks_exact(dim).enumerate() {
                        let n = c % vars;
                        add_into(&mut buf[n * dim..(n + 1) * dim], gc);
                    }
                }
            }
            Op::PrependRow {
                h,
                row,
                batch,
                rows,
                width,
            } => {
                let stride = (rows + 1) * width;
                if let Some(buf) = self.grad_buf(grads, row) {
                    for b in 0..batch {
                        add_into(buf, &g[b * stride..b * stride + width]);
                    }
                }
                if let Some(buf) = self.grad_buf(grads, h) {
                    for b in 0..batch {
                        add_into(
                            &mut buf[b * rows * width..(b + 1) * rows * width],
                            &g[b * stride + width..(b + 1) * stride],
                        );
                    }
                }
            }
            Op::TemporalAttention {
                q,
                k,
                v,
                ref probs,
                dims,
            } => {
                let (dq, dk, dv) =
                    temporal_attention_backward(self.data(q), self.data(k), self.data(v), probs, g, dims);
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(buf) = self.grad_buf(grads, var) {
                        add_into(buf, &d);
                    }
                }
            }
            Op::CrossWeights {
                q,
                k,
                batch,
                items,
                dim,
                heads,
            } => {
                let hd = dim / heads;
                let scale = 1.0 / math::sqrt(hd as f64);
                let (qd, kd) = (self.data(q), self.data(k));
                // gradient w.r.t. the pre-softmax scores
                let mut ds = vec![0.0; g.len()];
                for (r, (dsr, (gr, pr))) in ds
                    .chunks_exact_mut(items)
                    .zip(g.chunks_exact(items).zip(out.chunks_exact(items)))
                    .enumerate()
                {
                    let _ = r;
                    let dot: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..items {
                        dsr[j] = pr[j] * (gr[j] - dot) * scale;
                    }
                }
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                for b in 0..batch {
                    for h in 0..heads {
                        for i in 0..items {
                            let row = &ds[((b * heads + h) * items + i) * items..][..items];
                            let qo = (b * items + i) * dim + h * hd;
                            for (j, &s) in row.iter().enumerate() {
                                let ko = (b * items + j) * dim + h * hd;
                                for c in 0..hd {
                                    gq[qo + c] += s * kd[ko + c];
                                    gk[ko + c] += s * qd[qo + c];
                                }
                            }
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, q) {
                    add_into(buf, &gq);
                }
                if let Some(buf) = self.grad_buf(grads, k) {
                    add_into(buf, &gk);
                }
            }
            Op::MixItems {
                w,
                v,
                batch,
                steps,
                items,
                dim,
                heads,
            } => {
                let hd = dim / heads;
                let (wd, vd) = (self.data(w), self.data(v));
                if let Some(buf) = self.grad_buf(grads, w) {
                    for b in 0..batch {
                        for t in 0..steps {
                            let base = (b * steps + t) * items * dim;
                            for h in 0..heads {
                                for i in 0..items {
                                    let go = &g[base + i * dim + h * hd..][..hd];
                                    let wrow = &mut buf[((b * heads + h) * items + i) * items..][..items];
                                    for (j, wg) in wrow.iter_mut().enumerate() {
                                        *wg += dot(go, &vd[base + j * dim + h * hd..][..hd]);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(grads, v) {
                    for b in 0..batch {
                        for t in 0..steps {
                            let base = (b * steps + t) * items * dim;
                            for h in 0..heads {
                                for i in 0..items {
                                    let wrow = &wd[((b * heads + h) * items + i) * items..][..items];
                                    let go = base + i * dim + h * hd;
                                    for (j, &wij) in wrow.iter().enumerate() {
                                        let dst = &mut buf[base + j * dim + h * hd..][..hd];
                                        for c in 0..hd {
                                            dst[c] += wij * g[go + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::WeightedRowSum {
                h,
                ref weights,
                batch,
                steps,
                width,
            } => {
                if let Some(buf) = self.grad_buf(grads, h) {
                    let items = weights.len() / (batch * steps).max(1);
                    let dim = width / items.max(1);
                    for b in 0..batch {
                        for t in 0..steps {
                            for n in 0..items {
                                let wt = weights[(b * steps + t) * items + n];
                                if wt == 0.0 {
                                    continue;
                                }
                                let src = &g[b * width + n * dim..][..dim];
                                let dst = &mut buf[(b * steps + t) * width + n * dim..][..dim];
                                for c in 0..dim {
                                    dst[c] += wt * src[c];
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows {
                h,
                ref rows,
                steps,
                width,
            } => {
                if let Some(buf) = self.grad_buf(grads, h) {
                    for (b, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[(b * steps + r) * width..][..width], &g[b * width..][..width]);
                    }
                }
            }
            Op::MaskedL1 {
                pred,
                ref target,
                ref weights,
                width,
                denom,
            } => {
                let pd = self.data(pred);
                if let Some(buf) = self.grad_buf(grads, pred) {
                    for (grp, &wt) in weights.iter().enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        let s = g[0] * wt / denom;
                        for c in grp * width..(grp + 1) * width {
                            let diff = pd[c] - target[c];
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            buf[c] += s * sign;
                        }
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                ref targets,
                denom,
            } => {
                let zd = self.data(logits);
                if let Some(buf) = self.grad_buf(grads, logits) {
                    for ((b, &z), &y) in buf.iter_mut().zip(zd).zip(targets) {
                        *b += g[0] * (math::sigmoid(z) - y) / denom;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref probs,
                ref classes,
                denom,
            } => {
                if let Some(buf) = self.grad_buf(grads, logits) {
                    let width = probs.len() / classes.len().max(1);
                    for (r, &c) in classes.iter().enumerate() {
                        for j in 0..width {
                            let y = if j == c { 1.0 } else { 0.0 };
                            buf[r * width + j] += g[0] * (probs[r * width + j] - y) / denom;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Visit every output index together with the matching flat offsets into two
/// broadcast operands.
fn for_each_broadcast(shape: &[usize], st_a: &[usize], st_b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += st_a[ax];
            ib += st_b[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            ia -= st_a[ax] * shape[ax];
            ib -= st_b[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn gather_head(src: &[f64], dims: AttnDims, b: usize, n: usize, h: usize, dst: &mut [f64]) {
    let hd = dims.head_dim();
    for t in 0..dims.steps {
        let o = dims.offset(b, t, n) + h * hd;
        dst[t * hd..(t + 1) * hd].copy_from_slice(&src[o..o + hd]);
    }
}

fn scatter_head_add(dst: &mut [f64], dims: AttnDims, b: usize, n: usize, h: usize, src: &[f64]) {
    let hd = dims.head_dim();
    for t in 0..dims.steps {
        let o = dims.offset(b, t, n) + h * hd;
        add_into(&mut dst[o..o + hd], &src[t * hd..(t + 1) * hd]);
    }
}

fn temporal_attention_forward(q: &[f64], k: &[f64], v: &[f64], bias: &[f64], dims: AttnDims) -> (Vec<f64>, Vec<f64>) {
    let (steps, hd) = (dims.steps, dims.head_dim());
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; dims.batch * dims.items * dims.heads * steps * steps];
    let mut qb = vec![0.0; steps * hd];
    let mut kb = vec![0.0; steps * hd];
    let mut vb = vec![0.0; steps * hd];
    let mut ob = vec![0.0; steps * hd];
    for b in 0..dims.batch {
        for n in 0..dims.items {
            let bias_bn = &bias[(b * dims.items + n) * steps * steps..][..steps * steps];
            for h in 0..dims.heads {
                gather_head(q, dims, b, n, h, &mut qb);
                gather_head(k, dims, b, n, h, &mut kb);
                gather_head(v, dims, b, n, h, &mut vb);
                let p = &mut probs[((b * dims.items + n) * dims.heads + h) * steps * steps..][..steps * steps];
                gemm(steps, hd, steps, scale, &qb, (hd, 1), &kb, (1, hd), 0.0, p, (steps, 1));
                for (row, brow) in p.chunks_exact_mut(steps).zip(bias_bn.chunks_exact(steps)) {
                    add_into(row, brow);
                    softmax_in_place(row);
                }
                gemm(
                    steps,
                    steps,
                    hd,
                    1.0,
                    p,
                    (steps, 1),
                    &vb,
                    (hd, 1),
                    0.0,
                    &mut ob,
                    (hd, 1),
                );
                scatter_head_add(&mut out, dims, b, n, h, &ob);
            }
        }
    }
    (out, probs)
}

fn temporal_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
    dims: AttnDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (steps, hd) = (dims.steps, dims.head_dim());
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut qb = vec![0.0; steps * hd];
    let mut kb = vec![0.0; steps * hd];
    let mut vb = vec![0.0; steps * hd];
    let mut gb = vec![0.0; steps * hd];
    let mut tmp = vec![0.0; steps * hd];
    let mut dp = vec![0.0; steps * steps];
    for b in 0..dims.batch {
        for n in 0..dims.items {
            for h in 0..dims.heads {
                gather_head(q, dims, b, n, h, &mut qb);
                gather_head(k, dims, b, n, h, &mut kb);
                gather_head(v, dims, b, n, h, &mut vb);
                gather_head(g, dims, b, n, h, &mut gb);
                let p = &probs[((b * dims.items + n) * dims.heads + h) * steps * steps..][..steps * steps];
                // dV = P^T dO
                gemm(
                    steps,
                    steps,
                    hd,
                    1.0,
                    p,
                    (1, steps),
                    &gb,
                    (hd, 1),
                    0.0,
                    &mut tmp,
                    (hd, 1),
                );
                scatter_head_add(&mut dv, dims, b, n, h, &tmp);
                // dP = dO V^T, then through the softmax
                gemm(
                    steps,
                    hd,
                    steps,
                    1.0,
                    &gb,
                    (hd, 1),
                    &vb,
                    (1, hd),
                    0.0,
                    &mut dp,
                    (steps, 1),
                );
                for (dr, pr) in dp.chunks_exact_mut(steps).zip(p.chunks_exact(steps)) {
                    let d = dot(dr, pr);
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - d) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm(
                    steps,
                    steps,
                    hd,
                    1.0,
                    &dp,
                    (steps, 1),
                    &kb,
                    (hd, 1),
                    0.0,
                    &mut tmp,
                    (hd, 1),
                );
                scatter_head_add(&mut dq, dims, b, n, h, &tmp);
                gemm(
                    steps,
                    steps,
                    hd,
                    1.0,
                    &dp,
                    (1, steps),
                    &qb,
                    (hd, 1),
                    0.0,
                    &mut tmp,
                    (hd, 1),
                );
                scatter_head_add(&mut dk, dims, b, n, h, &tmp);
            }
        }
    }
    (dq, dk, dv)
}
