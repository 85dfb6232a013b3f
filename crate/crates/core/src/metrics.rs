//! Continual-learning evaluation: per-batch accuracy matrices, averages over
//! encountered batches, first-task retention, and multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{ResourceTrace, ScenarioManifest};

/// Lower-triangular accuracy matrix: `row(i)[j]` is the accuracy on the test
/// split of batch `j` after training through batch `i` (0-based positions).
/// Entries for test splits that hold no examples are NaN and are skipped by
/// the averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Append the evaluation row after training batch `rows.len()`; the row
    /// must hold one entry per batch seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::invalid(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|&a| !a.is_nan() && !(0.0..=1.0).contains(&a)) {
            return Err(Error::invalid("accuracies must lie in [0, 1]"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_batches(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        self.rows.get(i).map(Vec::as_slice)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean accuracy over the batches encountered up to and including `i`,
/// skipping empty (NaN) test splits.
pub fn average_accuracy(matrix: &AccuracyMatrix, i: usize) -> Result<f64> {
    let row = matrix
        .row(i)
        .ok_or_else(|| Error::invalid(format!("row {i} not present")))?;
    let finite: Vec<f64> = row.iter().copied().filter(|a| !a.is_nan()).collect();
    if finite.is_empty() {
        return Err(Error::invalid("row has no evaluated test splits"));
    }
    Ok(finite.iter().sum::<f64>() / finite.len() as f64)
}

/// Accuracy on the first batch's test split after each training batch.
pub fn first_task_retention(matrix: &AccuracyMatrix) -> Result<Vec<f64>> {
    if matrix.n_batches() == 0 {
        return Err(Error::invalid("empty accuracy matrix"));
    }
    Ok((0..matrix.n_batches())
        .map(|i| matrix.get(i, 0).expect("lower-triangular"))
        .collect())
}

/// Everything one (strategy, seed) run produced. Wall times live in their own
/// field so the metric payload stays byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: String,
    pub seed: u64,
    pub scenario: ScenarioManifest,
    pub matrix: AccuracyMatrix,
    pub trace: ResourceTrace,
    /// Per-batch training reports (losses, penalties, memory sizes, ...).
    #[serde(default)]
    pub batch_stats: Vec<crate::strategy::BatchStats>,
    pub wall_time_per_batch: Vec<f64>,
}

/// Elementwise mean and population standard deviation of accuracy matrices
/// across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_runs: usize,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

pub fn aggregate_runs(records: &[&RunRecord]) -> Result<Aggregate> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("aggregate_runs needs at least one record"))?;
    let n = first.matrix.n_batches();
    for r in records {
        if r.matrix.n_batches() != n {
            return Err(Error::invalid(format!(
                "matrix shape mismatch: {} batches vs {n}",
                r.matrix.n_batches()
            )));
        }
    }
    let count = records.len() as f64;
    let mut mean = Vec::with_capacity(n);
    let mut std = Vec::with_capacity(n);
    for i in 0..n {
        let mut mrow = Vec::with_capacity(i + 1);
        let mut srow = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let values: Vec<f64> = records
                .iter()
                .map(|r| r.matrix.get(i, j).expect("validated shape"))
                .collect();
            let m = values.iter().sum::<f64>() / count;
            let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            mrow.push(m);
            srow.push(var.sqrt());
        }
        mean.push(mrow);
        std.push(srow);
    }
    Ok(Aggregate {
        n_runs: records.len(),
        mean,
        std,
    })
}
