//! Missing-aware representation blocks.
//!
//! One block is temporal attention with the observation bias, then
//! variable attention queried from the summary row, then a position-wise
//! feed-forward; every sublayer is wrapped as `LayerNorm(x + Dropout(f(x)))`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::rng::SmartRng;
use crate::{Error, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Dropout is active only in training mode.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut SmartRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) fn dropout(tape: &mut Tape, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => tape.dropout(x, rate, true, *rng),
    }
}

/// Pairwise observation bias for one record, `(steps + 1) x (steps + 1) x vars`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalBias {
    pub rows: usize,
    pub vars: usize,
    values: Vec<u8>,
}

impl TemporalBias {
    pub fn get(&self, i: usize, j: usize, n: usize) -> u8 {
        self.values[(i * self.rows + j) * self.vars + n]
    }
}

/// 2 where both visits are observed, 1 where exactly one is, 0 where neither
/// is. `extended_mask` is `rows x vars` with an all-true first row.
pub fn build_bias(extended_mask: &[bool], vars: usize) -> Result<TemporalBias> {
    if vars == 0 || extended_mask.len() % vars != 0 || extended_mask.is_empty() {
        return Err(Error::shape("build_bias", &[extended_mask.len()], &[vars]));
    }
    if !extended_mask[..vars].iter().all(|&m| m) {
        return Err(Error::invalid("build_bias: the summary row must be observed"));
    }
    let rows = extended_mask.len() / vars;
    let mut values = vec![0u8; rows * rows * vars];
    for i in 0..rows {
        for j in 0..rows {
            for n in 0..vars {
                let a = extended_mask[i * vars + n];
                let b = extended_mask[j * vars + n];
                values[(i * rows + j) * vars + n] = match (a, b) {
                    (true, true) => 2,
                    (false, false) => 0,
                    _ => 1,
                };
            }
        }
    }
    Ok(TemporalBias { rows, vars, values })
}

/// Attention bias for a padded batch, `[batch, vars, rows, rows]`.
///
/// `mask` is `[batch, rows, vars]`; keys at or past `valid_rows[b]` get
/// `-inf`. Without `use_mask` the observation part is zero.
pub fn batch_bias(mask: &Tensor, valid_rows: &[usize], use_mask: bool) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != valid_rows.len() {
        return Err(Error::shape("batch_bias", s, &[valid_rows.len()]));
    }
    let (batch, rows, vars) = (s[0], s[1], s[2]);
    let m = mask.data();
    let mut out = vec![0.0; batch * vars * rows * rows];
    for b in 0..batch {
        for n in 0..vars {
            let base = (b * vars + n) * rows * rows;
            for i in 0..rows {
                let mi = m[(b * rows + i) * vars + n];
                for j in 0..rows {
                    out[base + i * rows + j] = if j >= valid_rows[b] {
                        f64::NEG_INFINITY
                    } else if use_mask {
                        mi + m[(b * rows + j) * vars + n]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Tensor::new([batch, vars, rows, rows], out)
}

/// How observed steps are pooled into the variable-attention keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPooling {
    #[default]
    Mean,
    Sum,
}

/// Pooling weights `[batch, rows, vars]` for the variable-attention keys.
///
/// With `use_mask` only observed rows contribute; otherwise every valid row
/// does. A variable with nothing to pool gets all-zero weights.
pub fn key_weights(mask: &Tensor, valid_rows: &[usize], use_mask: bool, pooling: KeyPooling) -> Result<Tensor> {
    let s = mask.shape();
    if s.len() != 3 || s[0] != valid_rows.len() {
        return Err(Error::shape("key_weights", s, &[valid_rows.len()]));
    }
    let (batch, rows, vars) = (s[0], s[1], s[2]);
    let m = mask.data();
    let mut w = vec![0.0; m.len()];
    for b in 0..batch {
        for n in 0..vars {
            let idx = |t: usize| (b * rows + t) * vars + n;
            let take = |t: usize| t < valid_rows[b] && (!use_mask || m[idx(t)] > 0.0);
            let count = (0..rows).filter(|&t| take(t)).count();
            if count == 0 {
                continue;
            }
            let wt = match pooling {
                KeyPooling::Mean => 1.0 / count as f64,
                KeyPooling::Sum => 1.0,
            };
            for t in (0..rows).filter(|&t| take(t)) {
                w[idx(t)] = wt;
            }
        }
    }
    Tensor::new([batch, rows, vars], w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut SmartRng) -> Result<Self> {
        let bound = 1.0 / math::sqrt(din as f64);
        let w = Tensor::from_fn([din, dout], |_| rng.random_range(-bound..bound));
        let b = Tensor::from_fn([dout], |_| rng.random_range(-bound..bound));
        Ok(LinearParams {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(LinearParams {
            weight: store.add(format!("{name}.weight"), Tensor::zeros([din, dout]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dout]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub norm: NormParams,
}

impl AttentionParams {
    fn init(store: &mut ParamStore, name: &str, dim: usize, rng: &mut SmartRng) -> Result<Self> {
        Ok(AttentionParams {
            query: LinearParams::init(store, &format!("{name}.query"), dim, dim, rng)?,
            key: LinearParams::init(store, &format!("{name}.key"), dim, dim, rng)?,
            value: LinearParams::init(store, &format!("{name}.value"), dim, dim, rng)?,
            output: LinearParams::init(store, &format!("{name}.output"), dim, dim, rng)?,
            norm: NormParams::init(store, &format!("{name}.norm"), dim)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedForwardParams {
    pub inner: LinearParams,
    pub outer: LinearParams,
    pub norm: NormParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MartBlockParams {
    pub temporal: AttentionParams,
    pub variable: AttentionParams,
    pub ff: FeedForwardParams,
}

impl MartBlockParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, ff_mult: usize, rng: &mut SmartRng) -> Result<Self> {
        let temporal = AttentionParams::init(store, &format!("{name}.temporal"), dim, rng)?;
        let variable = AttentionParams::init(store, &format!("{name}.variable"), dim, rng)?;
        let ff = FeedForwardParams {
            inner: LinearParams::init(store, &format!("{name}.ff.inner"), dim, ff_mult * dim, rng)?,
            outer: LinearParams::init(store, &format!("{name}.ff.outer"), ff_mult * dim, dim, rng)?,
            norm: NormParams::init(store, &format!("{name}.ff.norm"), dim)?,
        };
        Ok(MartBlockParams { temporal, variable, ff })
    }
}

/// Per-forward inputs shared by every block.
pub struct BlockInputs<'a> {
    /// `[batch, vars, rows, rows]`, see [`batch_bias`].
    pub bias: &'a Tensor,
    /// `[batch, rows, vars]`, see [`key_weights`].
    pub key_weights: &'a Tensor,
    /// Row used as the variable-attention query, per batch element.
    pub query_rows: &'a [usize],
    pub heads: usize,
    pub dropout: f64,
    pub temporal: bool,
    pub variable: bool,
}

fn residual_norm(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &NormParams,
    x: Var,
    sub: Var,
    rate: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let sub = dropout(tape, sub, rate, mode)?;
    let r = tape.add(x, sub)?;
    norm.forward(tape, store, r)
}

/// Biased self-attention over time, per variable, with residual and norm.
pub fn temporal_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    h: Var,
    inputs: &BlockInputs<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let q = p.query.forward(tape, store, h)?;
    let k = p.key.forward(tape, store, h)?;
    let v = p.value.forward(tape, store, h)?;
    let a = tape.temporal_attention(q, k, v, inputs.bias, inputs.heads)?;
    let o = p.output.forward(tape, store, a)?;
    residual_norm(tape, store, &p.norm, h, o, inputs.dropout, mode)
}

/// Attention between variables with one time-invariant map per head: the
/// query comes from the summary row, keys from pooled observed steps.
pub fn variable_attention(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    h: Var,
    inputs: &BlockInputs<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let weights = variable_attention_weights(tape, store, p, h, inputs)?;
    let v = p.value.forward(tape, store, h)?;
    let mixed = tape.mix_items(weights, v)?;
    let o = p.output.forward(tape, store, mixed)?;
    residual_norm(tape, store, &p.norm, h, o, inputs.dropout, mode)
}

/// The softmaxed `[batch, heads, vars, vars]` map of [`variable_attention`].
pub fn variable_attention_weights(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    h: Var,
    inputs: &BlockInputs<'_>,
) -> Result<Var> {
    let hq = tape.gather_rows(h, inputs.query_rows)?;
    let q = p.query.forward(tape, store, hq)?;
    let hk = tape.weighted_row_sum(h, inputs.key_weights)?;
    let k = p.key.forward(tape, store, hk)?;
    tape.cross_item_weights(q, k, inputs.heads)
}

/// Position-wise `dim -> ff_mult*dim -> dim` MLP with residual and norm.
pub fn feed_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &FeedForwardParams,
    h: Var,
    rate: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let a = p.inner.forward(tape, store, h)?;
    let a = tape.gelu(a)?;
    let a = dropout(tape, a, rate, mode)?;
    let o = p.outer.forward(tape, store, a)?;
    residual_norm(tape, store, &p.norm, h, o, rate, mode)
}

pub fn block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    p: &MartBlockParams,
    h: Var,
    inputs: &BlockInputs<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut h = h;
    if inputs.temporal {
        h = temporal_attention(tape, store, &p.temporal, h, inputs, mode)?;
    }
    if inputs.variable {
        h = variable_attention(tape, store, &p.variable, h, inputs, mode)?;
    }
    feed_forward(tape, store, &p.ff, h, inputs.dropout, mode)
}

/// Apply the blocks in order; the bias and key weights are shared by all.
pub fn mart_forward(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[MartBlockParams],
    h: Var,
    inputs: &BlockInputs<'_>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    if blocks.is_empty() {
        return Err(Error::invalid("at least one block is required"));
    }
    let mut h = h;
    for block in blocks {
        h = block_forward(tape, store, block, h, inputs, mode)?;
    }
    Ok(h)
}
