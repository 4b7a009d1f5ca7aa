//! Synthetic sparse EHR cohorts.
//!
//! Each patient follows a smooth latent severity trajectory: a baseline, a
//! linear drift, a sinusoid and slowly varying AR(1) noise. Every variable is
//! a noisy affine read of that severity in its own units. Labels are cut from
//! the severity at the last step so that prevalence is exact. Under MNAR
//! missingness sicker hours are measured more often.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EhrRecord, Label, TaskKind};
use crate::math;
use crate::rng::{self, tags, SmartRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Missingness {
    Mcar,
    MnarBySeverity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_patients: usize,
    pub vars: usize,
    pub t_max: usize,
    /// Shortest stay; lengths are uniform in `min_steps..=t_max`.
    #[serde(default)]
    pub min_steps: Option<usize>,
    pub observed_rate: f64,
    pub missingness: Missingness,
    pub positive_rate: f64,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    pub seed: u64,
}

fn default_task() -> TaskKind {
    TaskKind::Binary
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_patients: 1000,
            vars: 8,
            t_max: 48,
            min_steps: None,
            observed_rate: 0.25,
            missingness: Missingness::Mcar,
            positive_rate: 0.14,
            task: TaskKind::Binary,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid(format!("synthetic spec: {msg}")));
        if self.n_patients < 10 {
            return fail(format!(
                "need at least 10 patients for an 8:1:1 split, got {}",
                self.n_patients
            ));
        }
        if self.vars == 0 || self.t_max == 0 {
            return fail("vars and t_max must be positive".into());
        }
        if let Some(min) = self.min_steps {
            if min == 0 || min > self.t_max {
                return fail(format!("min_steps {min} outside 1..={}", self.t_max));
            }
        }
        if !(self.observed_rate > 0.0 && self.observed_rate <= 1.0) {
            return fail(format!("observed_rate {} not in (0, 1]", self.observed_rate));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return fail(format!("positive_rate {} not in (0, 1)", self.positive_rate));
        }
        let positives = libm::round(self.positive_rate * self.n_patients as f64) as usize;
        if positives == 0 || positives == self.n_patients {
            return fail(format!(
                "positive_rate {} leaves a single class among {} patients",
                self.positive_rate, self.n_patients
            ));
        }
        match self.task {
            TaskKind::MultiLabel { labels: 0 } => fail("multi-label task needs labels".into()),
            TaskKind::MultiClass { classes } if classes < 2 => fail("multi-class task needs two classes".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<EhrRecord>,
    pub val: Vec<EhrRecord>,
    pub test: Vec<EhrRecord>,
}

impl Dataset {
    pub fn vars(&self) -> usize {
        self.train.first().map_or(0, |r| r.vars())
    }

    pub fn splits(&self) -> [(&'static str, &[EhrRecord]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Shuffled 8:1:1 assignment of `n` items, a pure function of `(n, seed)`.
pub fn split_indices(n: usize, seed: u64) -> [Vec<usize>; 3] {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[tags::SPLIT]));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    [idx, val, test]
}

struct Trajectory {
    severity: Vec<f64>,
    mean: f64,
}

fn normal(rng: &mut SmartRng) -> f64 {
    StandardNormal.sample(rng)
}

fn trajectory(steps: usize, t_max: usize, rng: &mut SmartRng) -> Trajectory {
    let base = normal(rng);
    let drift = 1.2 * normal(rng);
    let amp = rng.random_range(0.0..0.6);
    let period = rng.random_range(8.0..24.0);
    let phase = rng.random_range(0.0..core::f64::consts::TAU);
    let mut ar = 0.0;
    let severity: Vec<f64> = (0..steps)
        .map(|t| {
            ar = 0.8 * ar + 0.2 * normal(rng);
            let tf = t as f64;
            base + drift * tf / t_max as f64 + amp * math::sin(core::f64::consts::TAU * tf / period + phase) + ar
        })
        .collect();
    let mean = severity.iter().sum::<f64>() / steps as f64;
    Trajectory { severity, mean }
}

/// Value of `sorted` at quantile `q`, using the lower order statistic.
fn threshold_for_rate(scores: &[f64], positive_rate: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (libm::round(positive_rate * scores.len() as f64) as usize).clamp(1, scores.len() - 1);
    // everything strictly above the midpoint between ranks k-1 and k is positive
    0.5 * (sorted[k - 1] + sorted[k])
}

/// Offset `c` such that the mean of `sigmoid(c + slope * s)` over all
/// severities equals `rate`.
fn calibrate_offset(severities: &[f64], slope: f64, rate: f64) -> f64 {
    let mean_p =
        |c: f64| severities.iter().map(|&s| math::sigmoid(c + slope * s)).sum::<f64>() / severities.len() as f64;
    let (mut lo, mut hi) = (-40.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Generate a cohort and split it 8:1:1 by `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_patients;
    let vars = spec.vars;
    let min_steps = spec.min_steps.unwrap_or(spec.t_max);

    // per-variable read-out: loading, units offset and scale
    let mut var_rng = rng::stream(spec.seed, &[tags::SYNTHETIC, u64::MAX]);
    let readout: Vec<(f64, f64, f64)> = (0..vars)
        .map(|_| {
            let sign = if var_rng.random::<bool>() { 1.0 } else { -1.0 };
            let loading = sign * var_rng.random_range(0.5..1.5);
            let offset = var_rng.random_range(20.0..120.0);
            let scale = var_rng.random_range(1.0..10.0);
            (loading, offset, scale)
        })
        .collect();

    let mut trajectories = Vec::with_capacity(n);
    let mut rngs = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(spec.seed, &[tags::SYNTHETIC, i as u64]);
        let steps = if min_steps < spec.t_max {
            r.random_range(min_steps..=spec.t_max)
        } else {
            spec.t_max
        };
        trajectories.push(trajectory(steps, spec.t_max, &mut r));
        rngs.push(r);
    }

    const MNAR_SLOPE: f64 = 1.0;
    let all_severity: Vec<f64> = trajectories.iter().flat_map(|t| t.severity.iter().copied()).collect();
    let mnar_offset = match spec.missingness {
        Missingness::MnarBySeverity if spec.observed_rate < 1.0 => {
            Some(calibrate_offset(&all_severity, MNAR_SLOPE, spec.observed_rate))
        }
        _ => None,
    };

    let labels = make_labels(
        spec,
        &trajectories,
        &mut rng::stream(spec.seed, &[tags::SYNTHETIC, u64::MAX - 1]),
    );

    let mut records = Vec::with_capacity(n);
    for (i, ((traj, mut r), label)) in trajectories.iter().zip(rngs).zip(labels).enumerate() {
        let steps = traj.severity.len();
        let mut values = vec![0.0; steps * vars];
        let mut mask = vec![false; steps * vars];
        for (t, &s) in traj.severity.iter().enumerate() {
            let p_obs = match mnar_offset {
                Some(c) => math::sigmoid(c + MNAR_SLOPE * s),
                None => spec.observed_rate,
            };
            for (nv, &(loading, offset, scale)) in readout.iter().enumerate() {
                let noise = normal(&mut r);
                let observed = p_obs >= 1.0 || r.random::<f64>() < p_obs;
                if observed {
                    values[t * vars + nv] = offset + scale * (loading * s + 0.5 * noise);
                    mask[t * vars + nv] = true;
                }
            }
        }
        records.push(EhrRecord::new(format!("p{i:06}"), steps, vars, values, mask, label)?);
    }

    let [train, val, test] = split_indices(n, spec.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Dataset {
        train: pick(&train),
        val: pick(&val),
        test: pick(&test),
    })
}

fn make_labels(spec: &SyntheticSpec, trajectories: &[Trajectory], rng: &mut SmartRng) -> Vec<Label> {
    let terminal: Vec<f64> = trajectories.iter().map(|t| *t.severity.last().unwrap()).collect();
    match spec.task {
        TaskKind::Binary => {
            let thr = threshold_for_rate(&terminal, spec.positive_rate);
            terminal.iter().map(|&s| Label::Binary(s > thr)).collect()
        }
        TaskKind::MultiClass { classes } => {
            let mut order: Vec<usize> = (0..terminal.len()).collect();
            order.sort_by(|&a, &b| terminal[a].partial_cmp(&terminal[b]).unwrap());
            let mut labels = vec![Label::Class(0); terminal.len()];
            for (rank, &i) in order.iter().enumerate() {
                labels[i] = Label::Class(rank * classes / terminal.len());
            }
            labels
        }
        TaskKind::MultiLabel { labels: k } => {
            // each label mixes terminal and average severity with its own weight
            let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut out = vec![Vec::with_capacity(k); trajectories.len()];
            for &w in &weights {
                let scores: Vec<f64> = trajectories
                    .iter()
                    .zip(&terminal)
                    .map(|(t, &s)| (1.0 - w) * s + w * t.mean)
                    .collect();
                let thr = threshold_for_rate(&scores, spec.positive_rate);
                for (o, &s) in out.iter_mut().zip(&scores) {
                    o.push(s > thr);
                }
            }
            out.into_iter().map(Label::MultiLabel).collect()
        }
    }
}
