use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Samples with labels given as indices into the owning task's class list.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[n, feature_dim]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Split { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Split {
        Split {
            inputs: self.inputs.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Split {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// One task of the sequence: its classes and a train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task_id: u32,
    /// Global class ids; local label `k` means `class_ids[k]`.
    pub class_ids: Vec<u32>,
    pub train: Split,
    pub val: Split,
}

impl TaskData {
    pub fn input_dim(&self) -> usize {
        self.train.inputs.cols()
    }
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}
