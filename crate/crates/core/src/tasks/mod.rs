//! Task streams: Continual Swiss Roll, MNIST ingestion and Permuted-MNIST.

mod idx;
mod mnist;
mod swissroll;

pub use idx::{load_idx_file, parse_idx, IdxData, IdxKind};
pub use mnist::{
    apply_permutation, invert_permutation, permuted_mnist_stream, MnistData, MnistFiles,
    PermutedMnistConfig,
};
pub use swissroll::{gen_swiss_roll, write_swiss_roll_csv, SwissRollConfig};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Samples stored one per column.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.cols() != labels.len() {
            return Err(Error::Shape {
                op: "LabeledDataset",
                left: inputs.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Self {
            inputs,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn sample(&self, i: usize) -> Vec<f64> {
        self.inputs.column(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Pixel permutation for Permuted-MNIST tasks: position `i` of a task
    /// image holds original pixel `permutation[i]`.
    pub permutation: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_count: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, class_count: usize) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::InvalidArgument("a task stream needs at least one task".into()))?;
        let dim = first.train.input_dim();
        for (t, task) in tasks.iter().enumerate() {
            for ds in [&task.train, &task.val, &task.test] {
                if ds.input_dim() != dim {
                    return Err(Error::InvalidArgument(format!(
                        "task {} has input dimension {} instead of {dim}",
                        t + 1,
                        ds.input_dim()
                    )));
                }
                if let Some(&y) = ds.labels.iter().find(|&&y| y >= class_count) {
                    return Err(Error::InvalidArgument(format!(
                        "task {} label {y} outside {class_count} classes",
                        t + 1
                    )));
                }
            }
        }
        Ok(Self { tasks, class_count })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.input_dim()
    }
}
