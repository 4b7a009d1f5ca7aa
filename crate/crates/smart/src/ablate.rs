//! Reduced-model comparisons: each variant runs the full pipeline per seed.

use std::fmt::Write as _;

use log::info;
use serde::Serialize;
use smart_core::metrics::MetricsReport;
use smart_core::model::AblationFlags;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiment::{run_full, OutDir, Splits};
use crate::sweep::format_mean_std;

/// The full model followed by every single-flag variant.
pub fn suite() -> Vec<AblationFlags> {
    let one = |set: fn(&mut AblationFlags)| {
        let mut f = AblationFlags::default();
        set(&mut f);
        f
    };
    vec![
        AblationFlags::default(),
        one(|f| f.no_mask = true),
        one(|f| f.no_mask_encoder = true),
        one(|f| f.no_mask_temporal = true),
        one(|f| f.no_mask_variable = true),
        one(|f| f.no_temporal_attention = true),
        one(|f| f.no_variable_attention = true),
        one(|f| f.no_cls = true),
        one(|f| f.no_pretrain = true),
        one(|f| f.impute_input_space = true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub flags: AblationFlags,
    /// One report per seed, in seed order.
    pub reports: Vec<(u64, MetricsReport)>,
}

pub fn run_ablation(
    config: &ExperimentConfig,
    splits: &Splits,
    variants: &[AblationFlags],
    out: Option<&OutDir>,
) -> Result<Vec<VariantResult>> {
    for v in variants {
        v.validate().map_err(|e| crate::Error::config(e.to_string()))?;
    }
    let mut results = Vec::new();
    for (i, &flags) in variants.iter().enumerate() {
        let name = flags.variant_name().to_string();
        let mut reports = Vec::new();
        for &seed in &config.seeds {
            info!("variant `{name}` seed {seed}");
            let mut c = config.with_seed(seed);
            c.ablation = flags;
            let dir = match out {
                Some(o) => Some(OutDir::create(&o.file(&format!("variant{i}_seed{seed}")), &c)?),
                None => None,
            };
            reports.push((seed, run_full(&c, splits, dir.as_ref())?.test));
        }
        results.push(VariantResult { name, flags, reports });
    }
    if let Some(o) = out {
        o.write_text("ablation.csv", &results_csv(&results))?;
        o.write_text("ablation.md", &results_markdown(&results))?;
    }
    Ok(results)
}

type Column = (&'static str, fn(&MetricsReport) -> Option<f64>);

const COLUMNS: [Column; 6] = [
    ("AUPRC", |r| r.auprc),
    ("AUROC", |r| r.auroc),
    ("F1", |r| r.f1),
    ("min(Se,P+)", |r| r.min_se_pplus),
    ("ma-ROC", |r| r.ma_roc),
    ("mi-ROC", |r| r.mi_roc),
];

/// Columns with a value for some variant.
fn used_columns(results: &[VariantResult]) -> Vec<Column> {
    COLUMNS
        .into_iter()
        .filter(|(_, f)| results.iter().flat_map(|v| &v.reports).any(|(_, r)| f(r).is_some()))
        .collect()
}

/// Long format: one row per variant, seed and metric.
pub fn results_csv(results: &[VariantResult]) -> String {
    let mut s = String::from("variant,seed,metric,value\n");
    for v in results {
        for (seed, r) in &v.reports {
            for (name, f) in COLUMNS {
                if let Some(x) = f(r) {
                    let _ = writeln!(s, "\"{}\",{seed},{name},{x}", v.name);
                }
            }
        }
    }
    s
}

/// Variants as rows, metrics as `mean ± std` columns.
pub fn results_markdown(results: &[VariantResult]) -> String {
    let cols = used_columns(results);
    let mut s = String::from("| Model |");
    for (name, _) in &cols {
        let _ = write!(s, " {name} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(cols.len()));
    s.push('\n');
    for v in results {
        let _ = write!(s, "| {} |", v.name);
        for (_, f) in &cols {
            let values: Vec<Option<f64>> = v.reports.iter().map(|(_, r)| f(r)).collect();
            let _ = write!(s, " {} |", format_mean_std(&values));
        }
        s.push('\n');
    }
    s
}
