use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::EhrRecord;
use crate::{Error, Result};

/// Cells removed from a record for one pre-training epoch.
///
/// Coordinates include the leading summary row, so `removed` has
/// `(steps + 1) * vars` entries and its first row is always false.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub steps: usize,
    pub vars: usize,
    pub removed: Vec<bool>,
    /// Removal probability drawn for this plan.
    pub rate: f64,
}

impl MaskPlan {
    pub fn empty(steps: usize, vars: usize) -> Self {
        MaskPlan {
            steps,
            vars,
            removed: vec![false; steps * vars],
            rate: 0.0,
        }
    }

    pub fn removed_count(&self) -> usize {
        self.removed.iter().filter(|r| **r).count()
    }

    /// Rows below the summary row, i.e. in record coordinates.
    pub fn data_rows(&self) -> &[bool] {
        &self.removed[self.vars.min(self.removed.len())..]
    }
}

fn check_interval((lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0..1.0).contains(&lo) || !(0.0..1.0).contains(&hi) || lo > hi {
        return Err(Error::invalid(alloc::format!(
            "removal interval ({lo}, {hi}) must satisfy 0 <= lo <= hi < 1"
        )));
    }
    Ok(())
}

/// Draw `r ~ U(lo, hi)` once, then remove each observed cell below the
/// summary row independently with probability `r`.
///
/// `extended_mask` is the `(steps + 1) x vars` mask whose first row is the
/// summary row. `lo == hi` fixes the rate.
pub fn sample_mask_plan<R: Rng + ?Sized>(
    extended_mask: &[bool],
    vars: usize,
    interval: (f64, f64),
    rng: &mut R,
) -> Result<MaskPlan> {
    check_interval(interval)?;
    if vars == 0 || extended_mask.len() % vars != 0 || extended_mask.len() < vars {
        return Err(Error::shape("sample_mask_plan", &[extended_mask.len()], &[vars]));
    }
    let steps = extended_mask.len() / vars;
    let (lo, hi) = interval;
    let rate = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut removed = vec![false; extended_mask.len()];
    for (i, &m) in extended_mask.iter().enumerate().skip(vars) {
        if m && rate > 0.0 {
            removed[i] = rng.random::<f64>() < rate;
        }
    }
    Ok(MaskPlan {
        steps,
        vars,
        removed,
        rate,
    })
}

/// `(x*, m*)`: removed cells become unobserved and are zero-filled.
pub fn apply_mask_plan(values: &[f64], mask: &[bool], plan: &MaskPlan) -> Result<(Vec<f64>, Vec<bool>)> {
    let data = plan.data_rows();
    if values.len() != mask.len() || data.len() != mask.len() {
        return Err(Error::shape("apply_mask_plan", &[mask.len()], &[data.len()]));
    }
    if data.iter().zip(mask).any(|(&r, &m)| r && !m) {
        return Err(Error::invalid("mask plan removes an unobserved cell"));
    }
    let new_mask: Vec<bool> = mask.iter().zip(data).map(|(&m, &r)| m && !r).collect();
    let new_values = values
        .iter()
        .zip(&new_mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Ok((new_values, new_mask))
}

/// Keep each observed cell with probability chosen so that on average
/// `keep_fraction` of the observed cells survive; exactly
/// `round(keep_fraction * observed)` cells are kept, chosen uniformly.
pub fn subsample_observed<R: Rng + ?Sized>(record: &EhrRecord, keep_fraction: f64, rng: &mut R) -> Result<EhrRecord> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(alloc::format!(
            "keep fraction {keep_fraction} not in (0, 1]"
        )));
    }
    if keep_fraction == 1.0 {
        return Ok(record.clone());
    }
    let mut observed: Vec<usize> = record
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| i)
        .collect();
    let keep = libm::round(keep_fraction * observed.len() as f64) as usize;
    // partial Fisher-Yates: the first `keep` entries are a uniform sample
    for i in 0..keep.min(observed.len()) {
        let j = rng.random_range(i..observed.len());
        observed.swap(i, j);
    }
    let mut mask = vec![false; record.mask().len()];
    for &i in &observed[..keep] {
        mask[i] = true;
    }
    let values = record
        .values()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    record.with_observations(values, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use crate::rng;

    #[test]
    fn zero_interval_removes_nothing() {
        let m = vec![true; 12];
        let plan = sample_mask_plan(&m, 3, (0.0, 0.0), &mut rng::stream(1, &[])).unwrap();
        assert_eq!(plan.removed_count(), 0);
    }

    #[test]
    fn summary_row_never_removed() {
        let m = vec![true; 30];
        for s in 0..50 {
            let plan = sample_mask_plan(&m, 3, (0.0, 0.75), &mut rng::stream(s, &[])).unwrap();
            assert!(plan.removed[..3].iter().all(|r| !r));
        }
    }

    #[test]
    fn invalid_intervals_rejected() {
        let m = vec![true; 4];
        let mut r = rng::stream(1, &[]);
        assert!(sample_mask_plan(&m, 2, (0.5, 0.2), &mut r).is_err());
        assert!(sample_mask_plan(&m, 2, (0.0, 1.0), &mut r).is_err());
        assert!(sample_mask_plan(&m, 2, (-0.1, 0.5), &mut r).is_err());
    }

    #[test]
    fn removal_fraction_matches_rate() {
        let vars = 10;
        let m = vec![true; vars * 10_001];
        let plan = sample_mask_plan(&m, vars, (0.5, 0.5), &mut rng::stream(9, &[])).unwrap();
        let frac = plan.removed_count() as f64 / (vars * 10_000) as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn apply_removes_and_zero_fills() {
        let values = vec![0.0, 3.0, 0.0, 0.0];
        let mask = vec![false, true, false, false];
        let empty = MaskPlan::empty(3, 2);
        assert_eq!(
            apply_mask_plan(&values, &mask, &empty).unwrap(),
            (values.clone(), mask.clone())
        );

        let mut plan = MaskPlan::empty(3, 2);
        plan.removed[3] = true;
        let (x, m) = apply_mask_plan(&values, &mask, &plan).unwrap();
        assert!(m.iter().all(|v| !v));
        assert_eq!(x[1], 0.0);

        let mut bad = MaskPlan::empty(3, 2);
        bad.removed[2] = true;
        assert!(apply_mask_plan(&values, &mask, &bad).is_err());
        assert!(apply_mask_plan(&values, &mask, &MaskPlan::empty(2, 2)).is_err());
    }

    #[test]
    fn subsample_keeps_requested_share() {
        let rec = EhrRecord::new("a", 10, 2, vec![1.0; 20], vec![true; 20], Label::Binary(true)).unwrap();
        let sub = subsample_observed(&rec, 0.3, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(sub.observed_count(), 6);
        assert_eq!(subsample_observed(&rec, 1.0, &mut rng::stream(1, &[])).unwrap(), rec);
    }
}
