use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub avg_accuracy: f64,
    pub bwt: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn read_metrics(run_dir: &Path) -> Result<MetricsRow> {
    let path = run_dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!("{} has no metrics.csv", run_dir.display())));
    }
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize()
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))?
        .map_err(Error::from)
}

/// Run id without its `-seed<N>` suffix.
pub fn variant_of(run_id: &str) -> &str {
    match run_id.rsplit_once("-seed") {
        Some((v, n)) if !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) => v,
        _ => run_id,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub avg_accuracy_mean: f64,
    pub avg_accuracy_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates runs per variant, in variant order.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Vec<VariantSummary>> {
    if dirs.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one run directory".into()));
    }
    let mut missing = Vec::new();
    let mut groups: BTreeMap<String, Vec<MetricsRow>> = BTreeMap::new();
    for d in dirs {
        if !d.join("metrics.csv").is_file() {
            missing.push(d.display().to_string());
            continue;
        }
        let row = read_metrics(d)?;
        groups.entry(variant_of(&row.run_id).to_string()).or_default().push(row);
    }
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!("no metrics.csv in: {}", missing.join(", "))));
    }
    Ok(groups
        .into_iter()
        .map(|(variant, rows)| {
            let acc: Vec<f64> = rows.iter().map(|r| r.avg_accuracy).collect();
            let bwt: Vec<f64> = rows.iter().filter_map(|r| r.bwt).collect();
            let (avg_accuracy_mean, avg_accuracy_std) = mean_std(&acc);
            let (bwt_mean, bwt_std) = if bwt.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&bwt);
                (Some(m), Some(s))
            };
            VariantSummary {
                variant,
                runs: rows.len(),
                avg_accuracy_mean,
                avg_accuracy_std,
                bwt_mean,
                bwt_std,
            }
        })
        .collect())
}

pub fn write_comparison_csv<W: Write>(out: W, rows: &[VariantSummary]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "runs", "avg_accuracy_mean", "avg_accuracy_std", "bwt_mean", "bwt_std"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.runs.to_string(),
            r.avg_accuracy_mean.to_string(),
            r.avg_accuracy_std.to_string(),
            opt(r.bwt_mean),
            opt(r.bwt_std),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
