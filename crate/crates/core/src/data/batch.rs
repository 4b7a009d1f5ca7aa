use alloc::vec::Vec;

use super::{EhrRecord, Label};
use crate::{Error, Result, Tensor};

/// Records padded to a common number of steps.
///
/// Padded cells have value 0 and mask 0; `lengths` keeps each record's real
/// step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[batch, steps, vars]`
    pub values: Tensor,
    /// `[batch, steps, vars]`, 1.0 where observed.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EhrRecord>) -> Result<Self> {
        let records: Vec<&EhrRecord> = records.into_iter().collect();
        let first = records.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let vars = first.vars();
        if records.iter().any(|r| r.vars() != vars) {
            return Err(Error::invalid("records in a batch must share the variable count"));
        }
        if records.iter().any(|r| r.steps() == 0) {
            return Err(Error::invalid("records need at least one step"));
        }
        let steps = records.iter().map(|r| r.steps()).max().unwrap();
        let b = records.len();
        let mut values = Tensor::zeros([b, steps, vars]);
        let mut mask = Tensor::zeros([b, steps, vars]);
        for (i, r) in records.iter().enumerate() {
            let off = i * steps * vars;
            values.data_mut()[off..off + r.values().len()].copy_from_slice(r.values());
            for (dst, &m) in mask.data_mut()[off..].iter_mut().zip(r.mask()) {
                *dst = if m { 1.0 } else { 0.0 };
            }
        }
        Ok(Batch {
            values,
            mask,
            lengths: records.iter().map(|r| r.steps()).collect(),
            labels: records.iter().map(|r| r.label.clone()).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn vars(&self) -> usize {
        self.values.shape()[2]
    }
}
