use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EhrRecord;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub mean: f64,
    pub std: f64,
    pub observed: usize,
    /// Zero variance (or no observations): values pass through unchanged.
    pub constant: bool,
}

/// Per-variable z-score statistics over observed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub stats: Vec<VariableStats>,
}

impl Normalizer {
    /// Population mean and standard deviation of the observed values of each
    /// variable.
    pub fn fit(records: &[EhrRecord]) -> Self {
        let vars = records.first().map_or(0, |r| r.vars());
        let mut count = vec![0usize; vars];
        let mut sum = vec![0.0; vars];
        for r in records {
            for (i, (&v, &m)) in r.values().iter().zip(r.mask()).enumerate() {
                if m {
                    count[i % vars] += 1;
                    sum[i % vars] += v;
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; vars];
        for r in records {
            for (i, (&v, &m)) in r.values().iter().zip(r.mask()).enumerate() {
                if m {
                    let d = v - mean[i % vars];
                    sq[i % vars] += d * d;
                }
            }
        }
        let stats = (0..vars)
            .map(|n| {
                let std = if count[n] > 0 {
                    math::sqrt(sq[n] / count[n] as f64)
                } else {
                    0.0
                };
                VariableStats {
                    mean: mean[n],
                    std,
                    observed: count[n],
                    constant: std == 0.0,
                }
            })
            .collect();
        Normalizer { stats }
    }

    /// Normalize observed cells in place. The mask is never touched.
    pub fn apply(&self, record: &mut EhrRecord) {
        record.map_observed(|n, v| {
            let s = &self.stats[n];
            if s.constant {
                v
            } else {
                (v - s.mean) / s.std
            }
        });
    }

    pub fn constant_variables(&self) -> Vec<usize> {
        self.stats
            .iter()
            .enumerate()
            .filter(|(_, s)| s.constant)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Fit statistics on `train` only, then normalize `train` and every other
/// split with them.
pub fn zscore_fit_apply(train: &mut [EhrRecord], others: &mut [&mut [EhrRecord]]) -> Normalizer {
    let norm = Normalizer::fit(train);
    for r in train.iter_mut() {
        norm.apply(r);
    }
    for split in others.iter_mut() {
        for r in split.iter_mut() {
            norm.apply(r);
        }
    }
    norm
}
