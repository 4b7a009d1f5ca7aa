//! Observed-rate sweep: metrics as observed cells are thinned out.

use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use smart_core::data::{observed_rate, subsample_observed, EhrRecord};
use smart_core::model::MartModel;
use smart_core::rng::{stream, tags};
use smart_core::train::evaluate;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{run_full, OutDir, Splits};

/// Rates 0.1, 0.2, ..., 1.0.
pub fn default_rates() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Train once per seed on the full data and thin only the test split.
    TestOnly,
    /// Thin every split and train from scratch per rate.
    Retrain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    pub rates: Vec<f64>,
    pub mode: SweepMode,
    /// Rates are target observed rates rather than fractions of the native
    /// rate.
    pub absolute: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub rate: f64,
    pub seed: u64,
    pub auprc: Option<f64>,
    pub auroc: Option<f64>,
    pub f1: Option<f64>,
}

/// Keep fraction for every requested rate; `None` where the rate cannot be
/// reached by removing cells.
pub fn keep_fractions(rates: &[f64], absolute: bool, native: f64) -> Result<Vec<Option<f64>>> {
    rates
        .iter()
        .map(|&r| {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("rate {r} outside (0, 1]")));
            }
            if !absolute {
                return Ok(Some(r));
            }
            if r > native {
                warn!("rate {r} exceeds the native observed rate {native:.4}; skipped");
                return Ok(None);
            }
            Ok(Some(r / native))
        })
        .collect()
}

/// Thin `records` to `keep` of their observed cells. The stream depends on
/// the seed, the rate and the record index only.
pub fn thin(records: &[EhrRecord], keep: f64, seed: u64, rate: f64, split: u64) -> Result<Vec<EhrRecord>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut rng = stream(seed, &[tags::SUBSAMPLE, rate.to_bits(), split, i as u64]);
            Ok(subsample_observed(r, keep, &mut rng)?)
        })
        .collect()
}

/// Run the sweep over `config.seeds`. In test-only mode a given `model` is
/// used for every seed instead of training one.
pub fn run_sweep(
    config: &ExperimentConfig,
    splits: &Splits,
    options: &SweepOptions,
    model: Option<&MartModel>,
    out: Option<&OutDir>,
) -> Result<Vec<SweepRow>> {
    let native = observed_rate(&splits.test);
    let keeps = keep_fractions(&options.rates, options.absolute, native)?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let run_config = config.with_seed(seed);
        let trained = match (options.mode, model) {
            (SweepMode::TestOnly, Some(_)) => None,
            (SweepMode::TestOnly, None) => {
                info!("seed {seed}: training on the full data");
                Some(run_full(&run_config, splits, None)?.model)
            }
            (SweepMode::Retrain, _) => None,
        };
        for (&rate, keep) in options.rates.iter().zip(&keeps) {
            let Some(keep) = *keep else { continue };
            let report = match options.mode {
                SweepMode::TestOnly => {
                    let m = model.or(trained.as_ref()).expect("model trained above");
                    evaluate(m, &thin(&splits.test, keep, seed, rate, 2)?, &run_config.train)?
                }
                SweepMode::Retrain => {
                    info!("seed {seed}: retraining at rate {rate}");
                    let thinned = Splits {
                        train: thin(&splits.train, keep, seed, rate, 0)?,
                        val: thin(&splits.val, keep, seed, rate, 1)?,
                        test: thin(&splits.test, keep, seed, rate, 2)?,
                        variables: splits.variables.clone(),
                        normalizer: splits.normalizer.clone(),
                    };
                    run_full(&run_config, &thinned, None)?.test
                }
            };
            let row = SweepRow {
                rate,
                seed,
                auprc: report.auprc,
                auroc: report.auroc,
                f1: report.f1,
            };
            info!("rate {rate} seed {seed}: auprc {:?} auroc {:?}", row.auprc, row.auroc);
            rows.push(row);
        }
    }
    if let Some(o) = out {
        o.write_text("sweep.csv", &rows_csv(&rows))?;
        o.write_text("sweep_summary.md", &summary_markdown(&rows))?;
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn rows_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("rate,seed,auprc,auroc,f1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.rate,
            r.seed,
            cell(r.auprc),
            cell(r.auroc),
            cell(r.f1)
        );
    }
    s
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

pub fn format_mean_std(values: &[Option<f64>]) -> String {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    match mean_std(&present) {
        Some((m, s)) if present.len() == values.len() => format!("{m:.4} ± {s:.4}"),
        _ => "n/a".into(),
    }
}

/// One line per rate with mean ± std over seeds.
pub fn summary_markdown(rows: &[SweepRow]) -> String {
    let mut rates: Vec<f64> = rows.iter().map(|r| r.rate).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    let mut s = String::from("| rate | AUPRC | AUROC | F1 |\n|---|---|---|---|\n");
    for rate in rates {
        let at: Vec<&SweepRow> = rows.iter().filter(|r| r.rate == rate).collect();
        let col = |f: fn(&SweepRow) -> Option<f64>| format_mean_std(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
        let _ = writeln!(
            s,
            "| {rate} | {} | {} | {} |",
            col(|r| r.auprc),
            col(|r| r.auroc),
            col(|r| r.f1)
        );
    }
    s
}
