//! Accuracy bookkeeping, activation statistics and representation overlap.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{second_moment_spectrum, DenseMatrix, EIGEN_FLOOR};
use crate::net::{MlpModel, Mode};
use crate::tasks::LabeledDataset;

const EVAL_CHUNK: usize = 1024;

fn for_each_chunk(dataset: &LabeledDataset, mut f: impl FnMut(&[usize], &DenseMatrix) -> Result<()>) -> Result<()> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = if chunk.len() == dataset.len() {
            dataset.inputs.clone()
        } else {
            dataset.inputs.select_columns(chunk)
        };
        f(chunk, &x)?;
    }
    Ok(())
}

/// Fraction of samples whose argmax logit matches the label.
pub fn evaluate(model: &MlpModel, dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluate"));
    }
    let mut correct = 0usize;
    for_each_chunk(dataset, |idx, x| {
        let pred = model.predict(x)?;
        correct += idx.iter().zip(pred).filter(|(&i, p)| dataset.labels[i] == *p).count();
        Ok(())
    })?;
    Ok(correct as f64 / dataset.len() as f64)
}

/// Lower-triangular matrix; `rows[t2][t1]` is the accuracy on task `t1`
/// right after training task `t2` (0-based, `t1 <= t2`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the evaluations taken after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "row after task {} needs {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of tasks evaluated so far.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t1: usize, t2: usize) -> Option<f64> {
        self.rows.get(t2).and_then(|r| r.get(t1)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Header `after_task,task_1,..,task_T`; entries above the diagonal blank.
    pub fn write_csv<W: Write>(&self, total_tasks: usize, out: W) -> Result<()> {
        let total = total_tasks.max(self.rows.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["after_task".to_string()];
        header.extend((1..=total).map(|t| format!("task_{t}")));
        w.write_record(&header)?;
        for (t2, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(t2 + 1).to_string()];
            rec.extend((0..total).map(|t1| row.get(t1).map(f64::to_string).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub avg_accuracy: f64,
    /// `None` with fewer than two tasks.
    pub backward_transfer: Option<f64>,
}

pub fn summarize(m: &AccuracyMatrix) -> Result<Summary> {
    let t = m.tasks();
    let last = m.rows.last().ok_or_else(|| Error::InvalidArgument("empty accuracy matrix".into()))?;
    let avg_accuracy = last.iter().sum::<f64>() / t as f64;
    let backward_transfer = (t >= 2).then(|| {
        (0..t - 1).map(|i| last[i] - m.rows[i][i]).sum::<f64>() / (t - 1) as f64
    });
    Ok(Summary {
        avg_accuracy,
        backward_transfer,
    })
}

/// Winner counts `nu` and their normalized pmf `q`, per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub nu: Vec<Vec<u64>>,
    pub q: Vec<Vec<f64>>,
    /// Layers that never fired; their `q` is uniform.
    pub degenerate: Vec<bool>,
}

impl ActivationStats {
    pub fn from_counts(nu: Vec<Vec<u64>>) -> Self {
        let mut q = Vec::with_capacity(nu.len());
        let mut degenerate = Vec::with_capacity(nu.len());
        for counts in &nu {
            let total: u64 = counts.iter().sum();
            if total == 0 {
                q.push(vec![1.0 / counts.len() as f64; counts.len()]);
                degenerate.push(true);
            } else {
                q.push(counts.iter().map(|&c| c as f64 / total as f64).collect());
                degenerate.push(false);
            }
        }
        Self { nu, q, degenerate }
    }
}

/// Counts, in eval mode, how often each hidden unit is a winner on `dataset`.
pub fn activation_stats(model: &MlpModel, dataset: &LabeledDataset) -> Result<ActivationStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("activation_stats"));
    }
    let mut nu: Vec<Vec<u64>> = model.hidden_widths().iter().map(|&w| vec![0; w]).collect();
    for_each_chunk(dataset, |_, x| {
        let pass = model.forward_batch(x, Mode::Eval, None)?;
        for (l, counts) in nu.iter_mut().enumerate() {
            let h = &pass.inputs[l + 1];
            for (j, c) in counts.iter_mut().enumerate() {
                *c += h.row(j).iter().filter(|&&v| v > 0.0).count() as u64;
            }
        }
        Ok(())
    })?;
    Ok(ActivationStats::from_counts(nu))
}

fn check_pmf(q: &[f64], name: &str) -> Result<()> {
    if let Some(v) = q.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{name} has invalid entry {v}")));
    }
    let s: f64 = q.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats, with `0·log(0/x) = 0`.
pub fn jsd(q1: &[f64], q2: &[f64]) -> Result<f64> {
    if q1.len() != q2.len() {
        return Err(Error::InvalidArgument(format!(
            "distributions of length {} and {}",
            q1.len(),
            q2.len()
        )));
    }
    check_pmf(q1, "q1")?;
    check_pmf(q2, "q2")?;
    let half = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > 0.0)
            .map(|(&x, &y)| x * (2.0 * x / (x + y)).ln())
            .sum::<f64>()
            * 0.5
    };
    let d = half(q1, q2) + half(q2, q1);
    Ok(d.clamp(0.0, std::f64::consts::LN_2))
}

/// Entry `r - 1` is the energy fraction captured by the top `r`
/// eigenvectors of `X·Xᵀ/N`; at most `max_components` entries.
pub fn captured_variance_curve(x: &DenseMatrix, max_components: usize) -> Result<Vec<f64>> {
    let spectrum = second_moment_spectrum(x, EIGEN_FLOOR)?;
    let total: f64 = spectrum.values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("activation matrix is identically zero"));
    }
    let mut acc = 0.0;
    let mut curve = Vec::with_capacity(max_components.min(spectrum.values.len()));
    for &v in spectrum.values.iter().take(max_components) {
        acc += v;
        curve.push((acc / total).min(1.0));
    }
    Ok(curve)
}

/// Subtracts each row's mean over the columns, turning second moments into
/// covariances. A constant row such as the bias coordinate becomes zero.
pub fn center_rows(x: &DenseMatrix) -> DenseMatrix {
    let n = x.cols().max(1) as f64;
    let means: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum::<f64>() / n).collect();
    DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) - means[r])
}

/// One `run_id,avg_accuracy,bwt,seed,config_hash` row; `bwt` blank when undefined.
pub fn write_metrics_csv<W: Write>(out: W, run_id: &str, summary: &Summary, seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "avg_accuracy", "bwt", "seed", "config_hash"])?;
    w.write_record([
        run_id.to_string(),
        summary.avg_accuracy.to_string(),
        summary.backward_transfer.map(|b| b.to_string()).unwrap_or_default(),
        seed.to_string(),
        config_hash.to_string(),
    ])?;
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JsdRow {
    pub alpha: f64,
    pub layer: usize,
    pub seed: u64,
    pub jsd_nats: f64,
}

pub fn write_jsd_csv<W: Write>(out: W, rows: &[JsdRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["alpha", "layer", "seed", "jsd_nats"])?;
    for r in rows {
        w.write_record([r.alpha.to_string(), r.layer.to_string(), r.seed.to_string(), r.jsd_nats.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Rows of `(model, layer, curve)`; components are 1-based.
pub fn write_variance_curve_csv<W: Write>(out: W, curves: &[(String, usize, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "layer", "component_index", "cumulative_fraction"])?;
    for (model, layer, curve) in curves {
        for (i, v) in curve.iter().enumerate() {
            w.write_record([model.clone(), layer.to_string(), (i + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
