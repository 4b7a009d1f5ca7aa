//! Hour-aligned CSV records.
//!
//! A data file has the header `patient_id,hour,<var>...[,label...]`. Rows of
//! one patient need not be contiguous; patients keep the order of their first
//! row. An empty cell is a missing measurement. A patient spans hours
//! `0..=max hour`, and hours without a row are fully unobserved.
//!
//! Labels are a single `label` column (0/1 or a class index) or, for
//! multi-label tasks, one column per label whose name starts with `label`.
//! They may also come from a separate file with `patient_id` first and the
//! label columns after it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use smart_core::data::{EhrRecord, Label, TaskKind};

use crate::error::{Error, Result};

/// Column layout expected in a data file.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub variables: Vec<String>,
    pub task: TaskKind,
    /// Rows at or past this hour are dropped.
    pub max_steps: Option<usize>,
}

/// `v0`, `v1`, ... used when a dataset has no names of its own.
pub fn default_variable_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

fn is_label_column(name: &str) -> bool {
    name.starts_with("label")
}

/// Variable columns of a data file, i.e. everything between `hour` and the
/// label columns.
pub fn read_variable_names(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let header = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    check_key_columns(path, &header)?;
    Ok(header
        .iter()
        .skip(2)
        .filter(|c| !is_label_column(c))
        .map(str::to_string)
        .collect())
}

fn csv_error(path: &Path, e: &csv::Error) -> Error {
    let line = e.position().map_or(0, csv::Position::line);
    Error::Csv {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn check_key_columns(path: &Path, header: &csv::StringRecord) -> Result<()> {
    if header.get(0) != Some("patient_id") || header.get(1) != Some("hour") {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: "header must start with `patient_id,hour`".into(),
        });
    }
    Ok(())
}

fn parse_label(task: TaskKind, cells: &[&str]) -> std::result::Result<Option<Label>, String> {
    if cells.iter().all(|c| c.is_empty()) {
        return Ok(None);
    }
    let bit = |c: &str| match c {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(format!("label `{other}` is not 0 or 1")),
    };
    match task {
        TaskKind::Binary => {
            if cells.len() != 1 {
                return Err(format!("binary task needs one label column, found {}", cells.len()));
            }
            Ok(Some(Label::Binary(bit(cells[0])?)))
        }
        TaskKind::MultiLabel { labels } => {
            if cells.len() != labels {
                return Err(format!("expected {labels} label columns, found {}", cells.len()));
            }
            Ok(Some(Label::MultiLabel(
                cells.iter().map(|c| bit(c)).collect::<std::result::Result<_, _>>()?,
            )))
        }
        TaskKind::MultiClass { classes } => {
            if cells.len() != 1 {
                return Err(format!(
                    "multi-class task needs one label column, found {}",
                    cells.len()
                ));
            }
            let c: usize = cells[0]
                .parse()
                .map_err(|_| format!("class `{}` is not an index", cells[0]))?;
            if c >= classes {
                return Err(format!("class {c} outside 0..{classes}"));
            }
            Ok(Some(Label::Class(c)))
        }
    }
}

/// Labels by patient from a `patient_id,label...` file.
pub fn read_labels(path: &Path, task: TaskKind) -> Result<HashMap<String, Label>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let header = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    if header.get(0) != Some("patient_id") {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: "label file must start with `patient_id`".into(),
        });
    }
    let mut labels = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, &e))?;
        let line = row.position().map_or(0, csv::Position::line);
        let cells: Vec<&str> = row.iter().skip(1).collect();
        let fail = |message: String| Error::Csv {
            path: path.to_path_buf(),
            line,
            message,
        };
        let label = parse_label(task, &cells)
            .map_err(fail)?
            .ok_or_else(|| fail("empty label".into()))?;
        if labels.insert(row[0].to_string(), label).is_some() {
            warn!(
                "{}:{line}: duplicate label for `{}`, keeping the last",
                path.display(),
                &row[0]
            );
        }
    }
    Ok(labels)
}

struct Patient {
    id: String,
    /// Cells and source line by hour; a later row replaces the whole hour.
    rows: HashMap<usize, (Vec<Option<f64>>, u64)>,
    label: Option<Label>,
}

/// Read a data file into records, taking labels from `labels` when given.
pub fn load_csv(path: &Path, schema: &Schema, labels: Option<&HashMap<String, Label>>) -> Result<Vec<EhrRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let header = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    check_key_columns(path, &header)?;
    let schema_error = |message: String| Error::Csv {
        path: path.to_path_buf(),
        line: 1,
        message,
    };

    // column index of every variable, in schema order
    let mut var_cols = vec![None; schema.variables.len()];
    let mut label_cols = Vec::new();
    for (i, name) in header.iter().enumerate().skip(2) {
        if is_label_column(name) {
            label_cols.push(i);
        } else if let Some(v) = schema.variables.iter().position(|s| s == name) {
            if var_cols[v].replace(i).is_some() {
                return Err(schema_error(format!("duplicate column `{name}`")));
            }
        } else {
            return Err(schema_error(format!("unknown column `{name}`")));
        }
    }
    if let Some(v) = var_cols.iter().position(Option::is_none) {
        return Err(schema_error(format!(
            "missing variable column `{}`",
            schema.variables[v]
        )));
    }
    let var_cols: Vec<usize> = var_cols.into_iter().flatten().collect();

    let mut patients: Vec<Patient> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut dropped = 0usize;
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, &e))?;
        let line = row.position().map_or(0, csv::Position::line);
        let fail = |message: String| Error::Csv {
            path: path.to_path_buf(),
            line,
            message,
        };
        let id = &row[0];
        if id.is_empty() {
            return Err(fail("empty patient_id".into()));
        }
        let hour: usize = row[1]
            .trim()
            .parse()
            .map_err(|_| fail(format!("hour `{}` is not a non-negative integer", &row[1])))?;
        let p = *index.entry(id.to_string()).or_insert_with(|| {
            patients.push(Patient {
                id: id.to_string(),
                rows: HashMap::new(),
                label: None,
            });
            patients.len() - 1
        });
        let label_cells: Vec<&str> = label_cols.iter().map(|&c| &row[c]).collect();
        if !label_cells.is_empty() {
            if let Some(label) = parse_label(schema.task, &label_cells).map_err(fail)? {
                match &patients[p].label {
                    Some(old) if *old != label => return Err(fail(format!("conflicting label for `{id}`"))),
                    _ => patients[p].label = Some(label),
                }
            }
        }
        if schema.max_steps.is_some_and(|m| hour >= m) {
            dropped += 1;
            continue;
        }
        let cells = var_cols
            .iter()
            .map(|&c| {
                let cell = row[c].trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(fail(format!(
                        "value `{cell}` in column `{}` is not a finite number",
                        &header[c]
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some((_, first)) = patients[p].rows.insert(hour, (cells, line)) {
            warn!(
                "{}:{line}: patient `{id}` hour {hour} repeats line {first}; the later row wins",
                path.display()
            );
        }
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} rows past the step cap", path.display());
    }

    let vars = schema.variables.len();
    patients
        .into_iter()
        .filter_map(|p| {
            let steps = p.rows.keys().max().map(|h| h + 1)?;
            Some((p, steps))
        })
        .map(|(p, steps)| {
            let mut values = vec![0.0; steps * vars];
            let mut mask = vec![false; steps * vars];
            for (&hour, (cells, _)) in &p.rows {
                for (n, cell) in cells.iter().enumerate() {
                    if let Some(v) = cell {
                        values[hour * vars + n] = *v;
                        mask[hour * vars + n] = true;
                    }
                }
            }
            let label = labels
                .and_then(|l| l.get(&p.id).cloned())
                .or(p.label)
                .ok_or_else(|| Error::format(path, format!("no label for patient `{}`", p.id)))?;
            Ok(EhrRecord::new(p.id, steps, vars, values, mask, label)?)
        })
        .collect()
}

fn label_header(task: TaskKind) -> Vec<String> {
    match task {
        TaskKind::MultiLabel { labels } => (0..labels).map(|i| format!("label_{i}")).collect(),
        _ => vec!["label".into()],
    }
}

fn label_cells(label: &Label) -> Vec<String> {
    let bit = |b: bool| if b { "1" } else { "0" }.to_string();
    match label {
        Label::Binary(y) => vec![bit(*y)],
        Label::MultiLabel(v) => v.iter().map(|&y| bit(y)).collect(),
        Label::Class(c) => vec![c.to_string()],
    }
}

/// Write records with one row per hour (every hour of the stay, so the step
/// count survives a round trip) and the label on every row. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv(path: &Path, records: &[EhrRecord], variables: &[String], task: TaskKind) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["patient_id".to_string(), "hour".to_string()];
    header.extend(variables.iter().cloned());
    header.extend(label_header(task));
    let io = |e: csv::Error| csv_error(path, &e);
    w.write_record(&header).map_err(io)?;
    for r in records {
        if r.vars() != variables.len() {
            return Err(Error::format(
                path,
                format!("record `{}` has {} variables", r.patient_id, r.vars()),
            ));
        }
        let label = label_cells(&r.label);
        for t in 0..r.steps() {
            let mut row = vec![r.patient_id.clone(), t.to_string()];
            row.extend((0..r.vars()).map(|n| {
                if r.is_observed(t, n) {
                    r.value(t, n).to_string()
                } else {
                    String::new()
                }
            }));
            row.extend(label.iter().cloned());
            w.write_record(&row).map_err(io)?;
        }
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
