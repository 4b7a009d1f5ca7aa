use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What a record's label looks like and which loss trains it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// One logit, sigmoid cross-entropy.
    Binary,
    /// Independent sigmoids, e.g. 25 phenotypes.
    MultiLabel { labels: usize },
    /// Softmax over classes, e.g. 10 length-of-stay bins.
    MultiClass { classes: usize },
}

impl TaskKind {
    /// Width of the label decoder output.
    pub fn outputs(&self) -> usize {
        match *self {
            TaskKind::Binary => 1,
            TaskKind::MultiLabel { labels } => labels,
            TaskKind::MultiClass { classes } => classes,
        }
    }

    pub fn accepts(&self, label: &Label) -> bool {
        match (self, label) {
            (TaskKind::Binary, Label::Binary(_)) => true,
            (TaskKind::MultiLabel { labels }, Label::MultiLabel(v)) => v.len() == *labels,
            (TaskKind::MultiClass { classes }, Label::Class(c)) => c < classes,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Binary(bool),
    MultiLabel(Vec<bool>),
    Class(usize),
}

impl Label {
    /// Label as a dense target row (one-hot for classes).
    pub fn to_targets(&self, kind: TaskKind) -> Vec<f64> {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        match self {
            Label::Binary(y) => alloc::vec![b(*y)],
            Label::MultiLabel(v) => v.iter().map(|&y| b(y)).collect(),
            Label::Class(c) => (0..kind.outputs()).map(|j| b(j == *c)).collect(),
        }
    }
}

/// One patient: `steps x vars` values with an observation mask.
///
/// Unobserved cells always hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EhrRecord {
    pub patient_id: String,
    steps: usize,
    vars: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    pub label: Label,
}

impl EhrRecord {
    pub fn new(
        patient_id: impl Into<String>,
        steps: usize,
        vars: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        label: Label,
    ) -> Result<Self> {
        if values.len() != steps * vars || mask.len() != steps * vars {
            return Err(Error::shape("record", &[steps, vars], &[values.len(), mask.len()]));
        }
        if values.iter().zip(&mask).any(|(&v, &m)| !m && v != 0.0) {
            return Err(Error::invalid("record has a non-zero value at an unobserved cell"));
        }
        Ok(EhrRecord {
            patient_id: patient_id.into(),
            steps,
            vars,
            values,
            mask,
            label,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn value(&self, t: usize, n: usize) -> f64 {
        self.values[t * self.vars + n]
    }

    pub fn is_observed(&self, t: usize, n: usize) -> bool {
        self.mask[t * self.vars + n]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Map every observed value through `f`; unobserved cells stay 0.
    pub fn map_observed(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        let vars = self.vars;
        for (i, (v, &m)) in self.values.iter_mut().zip(&self.mask).enumerate() {
            if m {
                *v = f(i % vars, *v);
            }
        }
    }

    /// Replace values and mask together, keeping the zero-fill invariant.
    pub fn with_observations(&self, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        EhrRecord::new(
            self.patient_id.clone(),
            self.steps,
            self.vars,
            values,
            mask,
            self.label.clone(),
        )
    }

    /// The mask with an all-true row prepended, shape `(steps + 1) x vars`.
    pub fn extended_mask(&self) -> Vec<bool> {
        let mut m = alloc::vec![true; self.vars];
        m.extend_from_slice(&self.mask);
        m
    }
}

/// Fraction of observed cells over all real (unpadded) cells.
pub fn observed_rate<'a>(records: impl IntoIterator<Item = &'a EhrRecord>) -> f64 {
    let (mut obs, mut total) = (0usize, 0usize);
    for r in records {
        obs += r.observed_count();
        total += r.steps * r.vars;
    }
    if total == 0 {
        0.0
    } else {
        obs as f64 / total as f64
    }
}
