//! Class prototypes and the prototype-based cross-task correlation chain:
//! class-to-class distances, class-to-task and task-to-task correlation, and
//! the diversity controller weight derived from them.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::gatednet::{BinaryGates, GatedNetwork};

/// Below this task-to-task distance the controller weight is 0.
pub const PHI_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    pub vector: Vec<f64>,
}

/// `entries[i][j] = MSE(p_i^source, p_j^target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub source_classes: Vec<u32>,
    pub target_classes: Vec<u32>,
    pub entries: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn rows(&self) -> usize {
        self.entries.len()
    }

    pub fn cols(&self) -> usize {
        self.target_classes.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.entries.iter().map(|r| r[j]).collect()
    }

    pub fn transpose(&self) -> CorrelationMatrix {
        let entries = (0..self.cols()).map(|j| self.column(j)).collect();
        CorrelationMatrix {
            source_classes: self.target_classes.clone(),
            target_classes: self.source_classes.clone(),
            entries,
        }
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sum / a.len() as f64
}

/// Mean final-layer feature per class under the task's binary gates.
pub fn compute_prototypes(
    net: &GatedNetwork,
    split: &Split,
    class_ids: &[u32],
    gates: &BinaryGates,
) -> Result<Vec<Prototype>> {
    let (features, _) = net.forward_binary(&split.inputs, gates, None)?;
    let last = features
        .last()
        .ok_or_else(|| Error::InvalidArgument("network has no layers".into()))?;
    prototypes_from_features(last.data(), last.cols(), &split.labels, class_ids)
}

/// Per-class means of row-major `features` (`dim` columns).
pub fn prototypes_from_features(
    features: &[f64],
    dim: usize,
    labels: &[usize],
    class_ids: &[u32],
) -> Result<Vec<Prototype>> {
    let mut sums = vec![vec![0.0; dim]; class_ids.len()];
    let mut counts = vec![0usize; class_ids.len()];
    for (i, &y) in labels.iter().enumerate() {
        if y >= class_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                class_ids.len()
            )));
        }
        counts[y] += 1;
        for (s, f) in sums[y].iter_mut().zip(&features[i * dim..(i + 1) * dim]) {
            *s += f;
        }
    }
    class_ids
        .iter()
        .zip(sums.into_iter().zip(counts))
        .map(|(&class_id, (sum, n))| {
            if n == 0 {
                return Err(Error::EmptyClass(class_id));
            }
            Ok(Prototype {
                class_id,
                vector: sum.into_iter().map(|s| s / n as f64).collect(),
            })
        })
        .collect()
}

/// Distance matrix between the prototypes of a source and a target task.
pub fn class_to_class(source: &[Prototype], target: &[Prototype]) -> Result<CorrelationMatrix> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("prototype sets must be non-empty".into()));
    }
    let dim = source[0].vector.len();
    if let Some(p) = source.iter().chain(target).find(|p| p.vector.len() != dim) {
        return Err(Error::InvalidArgument(format!(
            "prototype of class {} has dimension {}, expected {dim}",
            p.class_id,
            p.vector.len()
        )));
    }
    let entries = source
        .iter()
        .map(|ps| target.iter().map(|pt| mse(&ps.vector, &pt.vector)).collect())
        .collect();
    Ok(CorrelationMatrix {
        source_classes: source.iter().map(|p| p.class_id).collect(),
        target_classes: target.iter().map(|p| p.class_id).collect(),
        entries,
    })
}

/// Correlation of target class `j` with the source task: the column minimum,
/// skipping the diagonal when source and target are the same task.
pub fn class_to_task(j: usize, m: &CorrelationMatrix, same_task: bool) -> Result<f64> {
    if j >= m.cols() {
        return Err(Error::InvalidArgument(format!("class index {j} out of range")));
    }
    if same_task && m.rows() < 2 {
        return Err(Error::InvalidArgument(
            "intra-task correlation needs at least two classes".into(),
        ));
    }
    Ok(m.entries
        .iter()
        .enumerate()
        .filter(|&(i, _)| !(same_task && i == j))
        .map(|(_, row)| row[j])
        .fold(f64::INFINITY, f64::min))
}

/// `R(p^n, p^m)`: mean over the classes of task `n` of their correlation with
/// task `m`. Pass `same_task` when `n` and `m` are the same task.
pub fn task_to_task(protos_n: &[Prototype], protos_m: &[Prototype], same_task: bool) -> Result<f64> {
    let m = class_to_class(protos_m, protos_n)?;
    let mut total = 0.0;
    for j in 0..m.cols() {
        total += class_to_task(j, &m, same_task)?;
    }
    Ok(total / m.cols() as f64)
}

/// `R(p^t, p^t)` with a zero fallback for single-class tasks.
pub fn intra_task_baseline(protos: &[Prototype]) -> Result<f64> {
    if protos.len() < 2 {
        return Ok(0.0);
    }
    task_to_task(protos, protos, true)
}

/// Controller weight `max((R_nm - R_mm) / R_nm, 0)`, in `[0, 1]`.
pub fn gdc_weight(r_nm: f64, r_mm: f64) -> Result<f64> {
    if r_nm.is_nan() || r_mm.is_nan() || r_nm < 0.0 || r_mm < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "correlations must be non-negative (R_nm={r_nm}, R_mm={r_mm})"
        )));
    }
    if r_nm < PHI_EPS {
        return Ok(0.0);
    }
    Ok(((r_nm - r_mm) / r_nm).max(0.0))
}

/// Everything a correlation dump prints for a pair of tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub task_a: u32,
    pub task_b: u32,
    pub matrix: CorrelationMatrix,
    /// `R(p^b, p^a)`
    pub r_ba: f64,
    /// `R(p^a, p^a)`
    pub r_aa: f64,
    pub phi: f64,
}

pub fn correlation_report(
    task_a: u32,
    protos_a: &[Prototype],
    task_b: u32,
    protos_b: &[Prototype],
) -> Result<CorrelationReport> {
    let matrix = class_to_class(protos_a, protos_b)?;
    let same = task_a == task_b;
    let r_aa = intra_task_baseline(protos_a)?;
    let r_ba = if same {
        r_aa
    } else {
        task_to_task(protos_b, protos_a, false)?
    };
    let phi = gdc_weight(r_ba, r_aa)?;
    Ok(CorrelationReport {
        task_a,
        task_b,
        matrix,
        r_ba,
        r_aa,
        phi,
    })
}
