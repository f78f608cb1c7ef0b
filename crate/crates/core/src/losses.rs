//! Training objectives for the gated student.
//!
//! Each loss exists as a graph builder (used during training) and as a
//! value-level wrapper that evaluates the same builder on a throwaway graph,
//! so there is exactly one implementation of every formula.

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Clamp used by every logarithm in the entropy term.
pub const LOG_EPS: f64 = 1e-12;
/// Below this reserved-gate mass the activation ratio is defined as 0.
pub const RATIO_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_sparsity: f64,
    pub lambda_kd: f64,
    pub lambda_diversity: f64,
    /// Activation threshold inside the diversity ratio.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sparsity: 0.5,
            lambda_kd: 1.0,
            lambda_diversity: 1.0,
            eta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_sparsity, self.lambda_kd, self.lambda_diversity];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {lambdas:?}"
            )));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eta must lie strictly inside (0, 1), got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Soft gates of one batch, per layer, plus the channels each layer still
/// holds in reserve for the current task.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGateBatch {
    /// `[n, c_{l+1}]` per layer.
    pub gates: Vec<Tensor>,
    /// `true` for channels no previous task has activated.
    pub reserved: Vec<Vec<bool>>,
}

impl LayerGateBatch {
    /// Reserved mask is the complement of the union of earlier tasks' gates,
    /// i.e. of the network's freeze mask.
    pub fn from_freeze_mask(gates: Vec<Tensor>, freeze_mask: &[Vec<bool>]) -> Self {
        let reserved = freeze_mask
            .iter()
            .map(|m| m.iter().map(|&f| !f).collect())
            .collect();
        LayerGateBatch { gates, reserved }
    }

    fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.gates.iter().map(|t| g.input(t.clone())).collect()
    }
}

pub fn reserved_columns(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(c, &r)| r.then_some(c))
        .collect()
}

fn sum_nodes(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = g.input(Tensor::scalar(0.0));
    for &n in nodes {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Batch mean of the per-layer normalised L1 norm of the gates, averaged
/// over layers. Gates are non-negative, so the L1 norm is their sum.
pub fn sparsity_loss_node(g: &mut Graph, gates: &[NodeId]) -> Result<NodeId> {
    if gates.is_empty() {
        return Err(Error::InvalidArgument("sparsity loss needs at least one layer".into()));
    }
    let mut per_layer = Vec::with_capacity(gates.len());
    for &gl in gates {
        if g.value(gl).rows() == 0 {
            return Err(Error::InvalidArgument("sparsity loss over an empty batch".into()));
        }
        per_layer.push(g.mean_all(gl)?);
    }
    let total = sum_nodes(g, &per_layer)?;
    Ok(g.scale(total, 1.0 / gates.len() as f64))
}

pub fn sparsity_loss(batch: &LayerGateBatch) -> Result<f64> {
    let mut g = Graph::new();
    let gates = batch.bind(&mut g);
    let l = sparsity_loss_node(&mut g, &gates)?;
    Ok(g.value(l).item())
}

/// Mean over layers of the MSE between student and teacher features. The
/// teacher nodes should be graph inputs so that nothing flows into them.
pub fn kd_loss_node(g: &mut Graph, student: &[NodeId], teacher: &[NodeId]) -> Result<NodeId> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "distillation needs matching non-empty feature lists ({} vs {})",
            student.len(),
            teacher.len()
        )));
    }
    let terms = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| g.mse(s, t))
        .collect::<Result<Vec<_>>>()?;
    let total = sum_nodes(g, &terms)?;
    Ok(g.scale(total, 1.0 / student.len() as f64))
}

pub fn kd_loss(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let s: Vec<_> = student.iter().map(|t| g.input(t.clone())).collect();
    let t: Vec<_> = teacher.iter().map(|t| g.input(t.clone())).collect();
    let l = kd_loss_node(&mut g, &s, &t)?;
    Ok(g.value(l).item())
}

/// Per-sample ratio of reserved-gate mass above `eta` to total reserved-gate
/// mass, shape `[n]`. The indicator is evaluated once from the current values
/// and enters the graph as a constant. Returns `None` when the layer has no
/// reserved channels.
pub fn activation_ratio_node(
    g: &mut Graph,
    gates: NodeId,
    reserved_cols: &[usize],
    eta: f64,
) -> Result<Option<NodeId>> {
    if reserved_cols.is_empty() {
        return Ok(None);
    }
    let r = g.select_cols(gates, reserved_cols)?;
    let rv = g.value(r);
    let indicator = Tensor::new(
        rv.shape().to_vec(),
        rv.data()
            .iter()
            .map(|&v| if v >= eta { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let mask = g.input(indicator);
    let active = g.mul(r, mask)?;
    let num = g.sum_axis(active, 1)?;
    let den = g.sum_axis(r, 1)?;
    Ok(Some(g.div_guarded(num, den, RATIO_EPS)?))
}

/// Ratio for a single sample's reserved-channel gate values.
pub fn activation_ratio(reserved_gates: &[f64], eta: f64) -> Result<f64> {
    if reserved_gates.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(1, reserved_gates.len(), reserved_gates.to_vec())?);
    let cols: Vec<usize> = (0..reserved_gates.len()).collect();
    let q = activation_ratio_node(&mut g, x, &cols, eta)?.expect("non-empty reserve");
    Ok(g.value(q).item())
}

/// Negative binary entropy `q ln q + (1-q) ln(1-q)`, elementwise, with
/// clamped logarithms.
pub fn layer_diversity_node(g: &mut Graph, q: NodeId) -> Result<NodeId> {
    let log_q = g.log_clamped(q, LOG_EPS);
    let a = g.mul(q, log_q)?;
    let one_minus = g.affine(q, -1.0, 1.0);
    let log_om = g.log_clamped(one_minus, LOG_EPS);
    let b = g.mul(one_minus, log_om)?;
    g.add(a, b)
}

pub fn layer_diversity_loss(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("ratio {q} outside [0, 1]")));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(q));
    let l = layer_diversity_node(&mut g, x)?;
    Ok(g.value(l).item())
}

/// Diversity loss for task `t > 1`:
/// `1/L * 1/(t-1) * sum_l sum_i phi_i * D_l`, where `D_l` is the batch mean
/// of the per-sample entropy term on layer `l`'s reserved channels.
/// Layers without reserved channels contribute 0.
pub fn weighted_diversity_node(
    g: &mut Graph,
    gates: &[NodeId],
    reserved: &[Vec<bool>],
    phis: &[f64],
    eta: f64,
) -> Result<NodeId> {
    if phis.is_empty() {
        return Err(Error::InvalidArgument(
            "diversity loss is only defined from the second task on".into(),
        ));
    }
    if gates.is_empty() || gates.len() != reserved.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gate layers but {} reserve masks",
            gates.len(),
            reserved.len()
        )));
    }
    let mut layer_terms = Vec::with_capacity(gates.len());
    for (&gl, mask) in gates.iter().zip(reserved) {
        let cols = reserved_columns(mask);
        if let Some(q) = activation_ratio_node(g, gl, &cols, eta)? {
            let h = layer_diversity_node(g, q)?;
            layer_terms.push(g.mean_all(h)?);
        }
    }
    let mut weighted = Vec::with_capacity(layer_terms.len() * phis.len());
    for &term in &layer_terms {
        for &phi in phis {
            weighted.push(g.scale(term, phi));
        }
    }
    let total = sum_nodes(g, &weighted)?;
    Ok(g.scale(total, 1.0 / (gates.len() as f64 * phis.len() as f64)))
}

pub fn weighted_diversity_loss(batch: &LayerGateBatch, phis: &[f64], eta: f64) -> Result<f64> {
    let mut g = Graph::new();
    let gates = batch.bind(&mut g);
    let l = weighted_diversity_node(&mut g, &gates, &batch.reserved, phis, eta)?;
    Ok(g.value(l).item())
}

/// `task + ls * sparsity + lkd * kd + ld * diversity`.
pub fn total_objective_node(
    g: &mut Graph,
    task: NodeId,
    sparsity: NodeId,
    kd: NodeId,
    diversity: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let s = g.scale(sparsity, w.lambda_sparsity);
    let k = g.scale(kd, w.lambda_kd);
    let mut total = g.add(task, s)?;
    total = g.add(total, k)?;
    if let Some(d) = diversity {
        let d = g.scale(d, w.lambda_diversity);
        total = g.add(total, d)?;
    }
    Ok(total)
}

pub fn total_objective(task: f64, sparsity: f64, kd: f64, diversity: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("task", task),
        ("sparsity", sparsity),
        ("kd", kd),
        ("diversity", diversity),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    let mut g = Graph::new();
    let nodes = [task, sparsity, kd, diversity].map(|v| g.input(Tensor::scalar(v)));
    let l = total_objective_node(&mut g, nodes[0], nodes[1], nodes[2], Some(nodes[3]), w)?;
    Ok(g.value(l).item())
}
