//! Variable-independent input encoder.
//!
//! Each variable owns a linear map from its `(value, observed)` pair to the
//! hidden size. A learnable summary row (one vector per variable) is placed
//! in front of the sequence, and sinusoidal positions are added to every row,
//! the summary row included.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::math;
use crate::rng::SmartRng;
use crate::{Error, ParamId, ParamStore, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `[vars, 2, dim]`: row 0 multiplies the value, row 1 the mask bit.
    pub proj_weight: ParamId,
    /// `[vars, dim]`
    pub proj_bias: ParamId,
    /// Summary vector `[vars, dim]`; absent when the model runs without it.
    pub cls: Option<ParamId>,
    pub vars: usize,
    pub dim: usize,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, vars: usize, dim: usize, with_cls: bool, rng: &mut SmartRng) -> Result<Self> {
        let bound = 1.0 / math::sqrt(2.0);
        let w = Tensor::from_fn([vars, 2, dim], |_| rng.random_range(-bound..bound));
        let b = Tensor::from_fn([vars, dim], |_| rng.random_range(-bound..bound));
        let proj_weight = store.add("encoder.proj.weight", w)?;
        let proj_bias = store.add("encoder.proj.bias", b)?;
        let cls = if with_cls {
            let normal = Normal::new(0.0, 0.02).unwrap();
            let v = Tensor::from_fn([vars, dim], |_| normal.sample(rng));
            Some(store.add("encoder.cls", v)?)
        } else {
            None
        };
        Ok(EncoderParams {
            proj_weight,
            proj_bias,
            cls,
            vars,
            dim,
        })
    }
}

/// Sinusoidal table of shape `[len, dim]`:
/// `pe[p][2i] = sin(p / 10000^(2i/dim))`, `pe[p][2i+1] = cos(same)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::invalid(format!(
            "positional encoding needs an even width, got {dim}"
        )));
    }
    let mut pe = Tensor::zeros([len, dim]);
    let data = pe.data_mut();
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / math::pow(10000.0, (2 * i) as f64 / dim as f64);
            data[pos * dim + 2 * i] = math::sin(angle);
            data[pos * dim + 2 * i + 1] = math::cos(angle);
        }
    }
    Ok(pe)
}

/// Encoder output for a batch.
#[derive(Debug)]
pub struct HiddenState {
    /// `[batch, rows, vars, dim]`, `rows = steps + 1` with the summary row.
    pub h: Var,
    /// `[batch, rows, vars]` observation mask aligned with `h`; the summary
    /// row is all ones.
    pub mask: Tensor,
    /// 1 when the summary row is present, else 0.
    pub row_offset: usize,
}

/// Encode `values`/`mask` of shape `[batch, steps, vars]`.
///
/// With `mask_channel == false` the mask bit fed to the projection is forced
/// to zero (the attention layers still see the real mask).
pub fn encode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    values: &Tensor,
    mask: &Tensor,
    mask_channel: bool,
) -> Result<HiddenState> {
    let shape = values.shape();
    if shape.len() != 3 || mask.shape() != shape || shape[2] != params.vars {
        return Err(Error::shape("encode", shape, &[params.vars]));
    }
    let (batch, steps, vars) = (shape[0], shape[1], shape[2]);
    let w = tape.param(store, params.proj_weight);
    let b = tape.param(store, params.proj_bias);
    let fed_mask = if mask_channel {
        mask.clone()
    } else {
        Tensor::zeros(shape)
    };
    let mut h = tape.variable_encode(values, &fed_mask, w, b)?;

    let row_offset = usize::from(params.cls.is_some());
    let rows = steps + row_offset;
    let mut ext = Vec::with_capacity(batch * rows * vars);
    for bi in 0..batch {
        if row_offset == 1 {
            ext.extend(core::iter::repeat_n(1.0, vars));
        }
        ext.extend_from_slice(&mask.data()[bi * steps * vars..(bi + 1) * steps * vars]);
    }
    if let Some(cls) = params.cls {
        let v = tape.param(store, cls);
        h = tape.prepend_row(h, v)?;
    }

    let pe = positional_encoding(rows, params.dim)?.reshape([rows, 1, params.dim])?;
    let pe = tape.constant(pe);
    let h = tape.add(h, pe)?;
    Ok(HiddenState {
        h,
        mask: Tensor::new([batch, rows, vars], ext)?,
        row_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup(vars: usize, dim: usize, cls: bool) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, vars, dim, cls, &mut rng::stream(1, &[])).unwrap();
        (store, p)
    }

    #[test]
    fn first_row_of_table_alternates() {
        let pe = positional_encoding(3, 6).unwrap();
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(positional_encoding(3, 5).is_err());
    }

    #[test]
    fn summary_only_sequence() {
        let (store, p) = setup(3, 4, true);
        let mut tape = Tape::new();
        let x = Tensor::zeros([1, 0, 3]);
        let out = encode(&mut tape, &store, &p, &x, &x, true).unwrap();
        assert_eq!(tape.shape(out.h), &[1, 1, 3, 4]);
        assert!(out.mask.data().iter().all(|&m| m == 1.0));
        // the summary row is v plus the position-0 encoding
        let v = store.tensor(p.cls.unwrap()).data();
        for n in 0..3 {
            for c in 0..4 {
                let pe0 = if c % 2 == 0 { 0.0 } else { 1.0 };
                assert_eq!(tape.value(out.h).data()[n * 4 + c], v[n * 4 + c] + pe0);
            }
        }
    }

    #[test]
    fn shape_and_extended_mask() {
        let (store, p) = setup(2, 4, true);
        let mut tape = Tape::new();
        let x = Tensor::new([1, 3, 2], alloc::vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let m = Tensor::new([1, 3, 2], alloc::vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = encode(&mut tape, &store, &p, &x, &m, true).unwrap();
        assert_eq!(tape.shape(out.h), &[1, 4, 2, 4]);
        let ext_true = out.mask.data().iter().filter(|v| **v == 1.0).count();
        assert_eq!(ext_true, 2 + 2);
    }

    #[test]
    fn without_summary_row() {
        let (store, p) = setup(2, 4, false);
        let mut tape = Tape::new();
        let x = Tensor::zeros([2, 3, 2]);
        let out = encode(&mut tape, &store, &p, &x, &x, true).unwrap();
        assert_eq!(tape.shape(out.h), &[2, 3, 2, 4]);
        assert_eq!(out.row_offset, 0);
    }

    #[test]
    fn odd_width_rejected() {
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, 1, 3, true, &mut rng::stream(1, &[])).unwrap();
        let x = Tensor::zeros([1, 1, 1]);
        assert!(encode(&mut Tape::new(), &store, &p, &x, &x, true).is_err());
    }
}
