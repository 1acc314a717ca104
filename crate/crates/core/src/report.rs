//! Result tables comparing the base and fine-tuned models across a perturbation sweep.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::{evaluate_cell, CellMetrics};
use crate::model::{CbmParams, ConceptSpace, Sample};
use crate::perturb::{PerturbationSpec, PgdContext};

pub const BASE_MODEL: &str = "DCG";
pub const DRIVE_MODEL: &str = "DRIVE";
pub const CLEAN_LABEL: &str = "No";

/// Fixed column order of the CSV form.
pub const TABLE_COLUMNS: [&str; 6] = ["model", "perturbation", "a-MAE", "d-MAE", "(a,d)-MAE", "top-k"];

/// Joins header names, quoting any that contain a comma.
pub fn csv_header(cols: &[&str]) -> String {
    cols.iter()
        .map(|c| if c.contains(',') { format!("\"{c}\"") } else { (*c).to_string() })
        .collect::<Vec<_>>()
        .join(",")
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// `a-MAE,d-MAE,(a,d)-MAE,top-k` with blanks for absent values.
pub fn cell_csv(c: &CellMetrics) -> String {
    format!(
        "{},{},{},{}",
        num(c.a_mae),
        c.d_mae.map(num).unwrap_or_default(),
        num(c.ad_mae),
        c.top_k.map(num).unwrap_or_default()
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub perturbation: String,
    /// Absent when the cell failed; `error` then says why.
    pub metrics: Option<CellMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub k: usize,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = csv_header(&TABLE_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let cells = match &r.metrics {
                Some(c) => cell_csv(c),
                None => ",,,".into(),
            };
            out.push_str(&format!("{},{},{cells}\n", r.model, r.perturbation));
        }
        out
    }

    pub fn cell(&self, model: &str, perturbation: &str) -> Option<&CellMetrics> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.perturbation == perturbation)
            .and_then(|r| r.metrics.as_ref())
    }
}

/// Evaluates both models clean and under every sweep entry.
///
/// Cells run on separate threads; rows come back in sweep order with the base
/// model before the fine-tuned one. A failing cell is recorded, not fatal.
pub fn evaluate_sweep(
    base: &CbmParams,
    drive: &CbmParams,
    space: &ConceptSpace,
    samples: &[&Sample],
    sweep: &[PerturbationSpec],
    k: usize,
    pgd: &PgdContext,
) -> Result<ResultTable> {
    let mut jobs: Vec<(&str, &CbmParams, Option<&PerturbationSpec>)> =
        vec![(BASE_MODEL, base, None), (DRIVE_MODEL, drive, None)];
    for spec in sweep {
        jobs.push((BASE_MODEL, base, Some(spec)));
        jobs.push((DRIVE_MODEL, drive, Some(spec)));
    }
    let results: Vec<Result<CellMetrics>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(_, params, spec)| s.spawn(move || evaluate_cell(params, space, samples, spec, k, Some((base, pgd)))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let rows = jobs
        .iter()
        .zip(results)
        .map(|(&(model, _, spec), res)| {
            let perturbation = spec.map(PerturbationSpec::label).unwrap_or_else(|| CLEAN_LABEL.into());
            let (metrics, error) = match res {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ResultRow {
                model: model.into(),
                perturbation,
                metrics,
                error,
            }
        })
        .collect();
    Ok(ResultTable { k, rows })
}
