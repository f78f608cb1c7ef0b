//! Eager reverse-mode differentiation over small dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are
//! computed immediately on node creation, so building the graph *is* the
//! forward pass; [`Graph::backward`] then walks the record in reverse.
//!
//! Only the operations the gated network and its losses need are provided.
//! Matrices are row-major with shape `[rows, cols]`; scalars have shape `[]`.
//! Every reduction runs in a fixed order so two identical evaluations are
//! bit-identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidTensor(format!(
                    "ragged rows: {} vs {}",
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a scalar (or 1-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => 1,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed rows into a new matrix.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Input,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Div { num: NodeId, den: NodeId, eps: f64 },
    Affine { x: NodeId, scale: f64 },
    Sigmoid(NodeId),
    Relu(NodeId),
    Log { x: NodeId, eps: f64 },
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    MaxAxis { x: NodeId, argmax: Vec<usize> },
    MeanAll(NodeId),
    SelectCols { x: NodeId, cols: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    BroadcastRows(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxXent { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct ParamLeaf {
    node: NodeId,
    frozen: Option<Vec<bool>>,
}

/// Operation record for one forward/backward evaluation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, ParamLeaf>,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Looks up a registered parameter by name.
    pub fn param_node(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .map(|p| p.node)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        self.register_param(name, value, None)
    }

    /// Registers a trainable leaf whose entries flagged in `frozen` always
    /// receive an exact-zero gradient.
    pub fn param_frozen(&mut self, name: &str, value: &Tensor, frozen: Vec<bool>) -> Result<NodeId> {
        if frozen.len() != value.len() {
            return Err(Error::InvalidArgument(format!(
                "frozen mask for `{}` has {} entries, parameter has {}",
                name,
                frozen.len(),
                value.len()
            )));
        }
        let frozen = if frozen.iter().any(|&f| f) {
            Some(frozen)
        } else {
            None
        };
        self.register_param(name, value, frozen)
    }

    fn register_param(
        &mut self,
        name: &str,
        value: &Tensor,
        frozen: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = self.push(Op::Param, value.clone(), true);
        self.params.insert(name.to_string(), ParamLeaf { node: id, frozen });
        Ok(id)
    }

    /// Registers a constant. Gradients never flow into inputs.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(op, value, rg)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            left: self.value(a).shape.clone(),
            right: self.value(b).shape.clone(),
        }
    }

    fn require_matrix(&self, op: &'static str, x: NodeId) -> Result<()> {
        if self.value(x).is_matrix() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                node: self.nodes.len(),
                op,
                left: self.value(x).shape.clone(),
                right: vec![],
            })
        }
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.shape[1] != bv.shape[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let s = av.data[i * k + p];
                let brow = &bv.data[p * m..(p + 1) * m];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o += s * bval;
                }
            }
        }
        let value = Tensor {
            shape: vec![n, m],
            data: out,
        };
        Ok(self.push_derived(Op::MatMul(a, b), value, &[a, b]))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(self.mismatch("add", a, b));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push_derived(Op::Add(a, b), value, &[a, b]))
    }

    /// `[n, m] + [m]`, adding the vector to every row.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        if !xv.is_matrix() || rv.shape != [xv.shape[1]] {
            return Err(self.mismatch("add_row", x, row));
        }
        let m = xv.shape[1];
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + rv.data[i % m])
            .collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push_derived(Op::AddRow(x, row), value, &[x, row]))
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(self.mismatch("mul", a, b));
        }
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        Ok(self.push_derived(Op::Mul(a, b), value, &[a, b]))
    }

    /// Channel-wise multiply: `[n, m] * [m]`, scaling column `c` by `row[c]`.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (xv, rv) = (self.value(x), self.value(row));
        if !xv.is_matrix() || rv.shape != [xv.shape[1]] {
            return Err(self.mismatch("mul_row", x, row));
        }
        let m = xv.shape[1];
        let data = xv
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * rv.data[i % m])
            .collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push_derived(Op::MulRow(x, row), value, &[x, row]))
    }

    /// Elementwise `num / den`; entries with `|den| < eps` produce 0 and pass
    /// no gradient.
    pub fn div_guarded(&mut self, num: NodeId, den: NodeId, eps: f64) -> Result<NodeId> {
        let (nv, dv) = (self.value(num), self.value(den));
        if nv.shape != dv.shape {
            return Err(self.mismatch("div_guarded", num, den));
        }
        let data = nv
            .data
            .iter()
            .zip(&dv.data)
            .map(|(a, b)| if b.abs() < eps { 0.0 } else { a / b })
            .collect();
        let value = Tensor {
            shape: nv.shape.clone(),
            data,
        };
        Ok(self.push_derived(Op::Div { num, den, eps }, value, &[num, den]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| scale * v + shift).collect(),
        };
        self.push_derived(Op::Affine { x, scale }, value, &[x])
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push_derived(Op::Sigmoid(x), value, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        };
        self.push_derived(Op::Relu(x), value, &[x])
    }

    /// `ln(max(x, eps))`; the clamp passes no gradient.
    pub fn log_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v.max(eps).ln()).collect(),
        };
        self.push_derived(Op::Log { x, eps }, value, &[x])
    }

    fn reduce_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<(usize, usize)> {
        self.require_matrix(op, x)?;
        if axis > 1 {
            return Err(Error::InvalidArgument(format!("{op}: axis {axis} out of range")));
        }
        let s = &self.value(x).shape;
        Ok((s[0], s[1]))
    }

    fn axis_sums(&self, x: NodeId, axis: usize) -> Result<Vec<f64>> {
        let (n, m) = self.reduce_axis("sum_axis", x, axis)?;
        let d = &self.value(x).data;
        Ok(if axis == 0 {
            let mut out = vec![0.0; m];
            for i in 0..n {
                for (o, v) in out.iter_mut().zip(&d[i * m..(i + 1) * m]) {
                    *o += v;
                }
            }
            out
        } else {
            (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect()
        })
    }

    /// Sum of a matrix over `axis` (0 collapses rows, 1 collapses columns).
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let data = self.axis_sums(x, axis)?;
        Ok(self.push_derived(Op::SumAxis { x, axis }, Tensor::vector(data), &[x]))
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let count = self.value(x).shape.get(axis).copied().unwrap_or(1);
        let data: Vec<f64> = self
            .axis_sums(x, axis)?
            .into_iter()
            .map(|s| s / count as f64)
            .collect();
        Ok(self.push_derived(Op::MeanAxis { x, axis }, Tensor::vector(data), &[x]))
    }

    /// Elementwise maximum over `axis`. Ties route the gradient to the first
    /// maximal entry.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (n, m) = self.reduce_axis("max_axis", x, axis)?;
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("max_axis over an empty matrix".into()));
        }
        let d = &self.value(x).data;
        let (outer, inner) = if axis == 0 { (m, n) } else { (n, m) };
        let mut data = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let idx = |k: usize| if axis == 0 { k * m + o } else { o * m + k };
            let mut best = idx(0);
            for k in 1..inner {
                if d[idx(k)] > d[best] {
                    best = idx(k);
                }
            }
            data.push(d[best]);
            argmax.push(best);
        }
        Ok(self.push_derived(Op::MaxAxis { x, argmax }, Tensor::vector(data), &[x]))
    }

    /// Mean of every entry, as a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::InvalidArgument("mean of an empty tensor".into()));
        }
        let mean = xv.data.iter().sum::<f64>() / xv.len() as f64;
        Ok(self.push_derived(Op::MeanAll(x), Tensor::scalar(mean), &[x]))
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        self.require_matrix("select_cols", x)?;
        let xv = self.value(x);
        let (n, m) = (xv.shape[0], xv.shape[1]);
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(Error::InvalidArgument(format!(
                "select_cols: column {bad} out of range for width {m}"
            )));
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            data.extend(cols.iter().map(|&c| xv.data[i * m + c]));
        }
        let value = Tensor {
            shape: vec![n, cols.len()],
            data,
        };
        Ok(self.push_derived(
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            value,
            &[x],
        ))
    }

    /// `[n, p] ++ [n, q] -> [n, p + q]`
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.shape[0] != bv.shape[0] {
            return Err(self.mismatch("concat_cols", a, b));
        }
        let (n, p, q) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&av.data[i * p..(i + 1) * p]);
            data.extend_from_slice(&bv.data[i * q..(i + 1) * q]);
        }
        let value = Tensor {
            shape: vec![n, p + q],
            data,
        };
        Ok(self.push_derived(Op::ConcatCols(a, b), value, &[a, b]))
    }

    /// Repeats a vector `[m]` as `rows` identical rows.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                node: self.nodes.len(),
                op: "broadcast_rows",
                left: xv.shape.clone(),
                right: vec![rows],
            });
        }
        let m = xv.shape[0];
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(&xv.data);
        }
        let value = Tensor {
            shape: vec![rows, m],
            data,
        };
        Ok(self.push_derived(Op::BroadcastRows(x), value, &[x]))
    }

    /// Mean squared error between two tensors of identical shape.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(self.mismatch("mse", a, b));
        }
        if av.is_empty() {
            return Err(Error::InvalidArgument("mse of empty tensors".into()));
        }
        let sum: f64 = av
            .data
            .iter()
            .zip(&bv.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(sum / av.len() as f64);
        Ok(self.push_derived(Op::Mse(a, b), value, &[a, b]))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.require_matrix("softmax_cross_entropy", logits)?;
        let lv = self.value(logits);
        let (n, k) = (lv.shape[0], lv.shape[1]);
        if labels.len() != n || n == 0 {
            return Err(Error::ShapeMismatch {
                node: self.nodes.len(),
                op: "softmax_cross_entropy",
                left: lv.shape.clone(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv.data[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            total += -(row[labels[i]] - max - z.ln());
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push_derived(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            &[logits],
        ))
    }

    /// Reverse pass from a scalar loss. Every registered parameter appears in
    /// the result; unreachable ones get zeros, frozen entries get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        for (name, leaf) in &self.params {
            let shape = self.nodes[leaf.node.0].value.shape.clone();
            let mut data = grads[leaf.node.0]
                .take()
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            if let Some(mask) = &leaf.frozen {
                for (g, &f) in data.iter_mut().zip(mask) {
                    if f {
                        *g = 0.0;
                    }
                }
            }
            out.insert(name.clone(), Tensor { shape, data });
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;

        match &node.op {
            Op::Param | Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                if wants(*a) {
                    let ga = acc(grads, *a, n * k);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data[p * m..(p + 1) * m];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * m);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let s = av.data[i * k + p];
                            for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += s * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        add_into(acc(grads, id, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                let m = val(*row).len();
                if wants(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if wants(*row) {
                    let gr = acc(grads, *row, m);
                    for chunk in g.chunks(m) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(&bv.data) {
                        *o += gv * bv;
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(&av.data) {
                        *o += gv * av;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (val(*x), val(*row));
                let m = rv.len();
                if wants(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (i, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gv * rv.data[i % m];
                    }
                }
                if wants(*row) {
                    let gr = acc(grads, *row, m);
                    for (i, (gv, xv)) in g.iter().zip(&xv.data).enumerate() {
                        gr[i % m] += gv * xv;
                    }
                }
            }
            Op::Div { num, den, eps } => {
                let (nv, dv) = (val(*num), val(*den));
                if wants(*num) {
                    let gn = acc(grads, *num, g.len());
                    for ((o, gv), d) in gn.iter_mut().zip(g).zip(&dv.data) {
                        if d.abs() >= *eps {
                            *o += gv / d;
                        }
                    }
                }
                if wants(*den) {
                    let gd = acc(grads, *den, g.len());
                    for (((o, gv), n), d) in gd.iter_mut().zip(g).zip(&nv.data).zip(&dv.data) {
                        if d.abs() >= *eps {
                            *o -= gv * n / (d * d);
                        }
                    }
                }
            }
            Op::Affine { x, scale } => {
                let gx = acc(grads, *x, g.len());
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += scale * gv;
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, g.len());
                for ((o, gv), s) in gx.iter_mut().zip(g).zip(&node.value.data) {
                    *o += gv * s * (1.0 - s);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((o, gv), v) in gx.iter_mut().zip(g).zip(&xv.data) {
                    if *v > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Log { x, eps } => {
                let xv = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((o, gv), v) in gx.iter_mut().zip(g).zip(&xv.data) {
                    if *v >= *eps {
                        *o += gv / v;
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let xv = val(*x);
                let (n, m) = (xv.shape[0], xv.shape[1]);
                let count = if *axis == 0 { n } else { m };
                let factor = match node.op {
                    Op::MeanAxis { .. } => 1.0 / count as f64,
                    _ => 1.0,
                };
                let gx = acc(grads, *x, n * m);
                for i in 0..n {
                    for j in 0..m {
                        let gv = if *axis == 0 { g[j] } else { g[i] };
                        gx[i * m + j] += factor * gv;
                    }
                }
            }
            Op::MaxAxis { x, argmax, .. } => {
                let len = val(*x).len();
                let gx = acc(grads, *x, len);
                for (gv, &pos) in g.iter().zip(argmax) {
                    gx[pos] += gv;
                }
            }
            Op::MeanAll(x) => {
                let len = val(*x).len();
                let share = g[0] / len as f64;
                for o in acc(grads, *x, len).iter_mut() {
                    *o += share;
                }
            }
            Op::SelectCols { x, cols } => {
                let xv = val(*x);
                let (n, m) = (xv.shape[0], xv.shape[1]);
                let w = cols.len();
                let gx = acc(grads, *x, n * m);
                for i in 0..n {
                    for (k, &c) in cols.iter().enumerate() {
                        gx[i * m + c] += g[i * w + k];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).cols(), val(*b).cols());
                let n = val(*a).rows();
                if wants(*a) {
                    let ga = acc(grads, *a, n * p);
                    for i in 0..n {
                        add_into(&mut ga[i * p..(i + 1) * p], &g[i * (p + q)..i * (p + q) + p]);
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, n * q);
                    for i in 0..n {
                        add_into(
                            &mut gb[i * q..(i + 1) * q],
                            &g[i * (p + q) + p..(i + 1) * (p + q)],
                        );
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let m = val(*x).len();
                let gx = acc(grads, *x, m);
                for chunk in g.chunks(m) {
                    add_into(gx, chunk);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let scale = 2.0 * g[0] / av.len() as f64;
                if wants(*a) {
                    let ga = acc(grads, *a, av.len());
                    for ((o, x), y) in ga.iter_mut().zip(&av.data).zip(&bv.data) {
                        *o += scale * (x - y);
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, av.len());
                    for ((o, x), y) in gb.iter_mut().zip(&av.data).zip(&bv.data) {
                        *o -= scale * (x - y);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let share = g[0] / n as f64;
                let gl = acc(grads, *logits, n * k);
                for i in 0..n {
                    for j in 0..k {
                        let target = if labels[i] == j { 1.0 } else { 0.0 };
                        gl[i * k + j] += share * (probs[i * k + j] - target);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Named tensors that a graph builder registers as parameters.
pub type ParamSet = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// `build` must construct a fresh graph from the given parameters and return
/// it with its scalar loss node. Anything that should be held constant under
/// perturbation (indicator masks, teacher features) must be captured by the
/// closure rather than recomputed from the parameters.
pub fn grad_check<F>(params: &ParamSet, build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<(Graph, NodeId)>,
{
    if h.is_nan() || h <= 0.0 || tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check needs h > 0 and tol >= 0 (h={h}, tol={tol})"
        )));
    }
    let (graph, loss) = build(params)?;
    let analytic = graph.backward(loss)?;

    let mut perturbed = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let mut worst = 0.0f64;
        for i in 0..tensor.len() {
            let base = tensor.data[i];
            perturbed.get_mut(name).unwrap().data[i] = base + h;
            let (g_plus, l_plus) = build(&perturbed)?;
            let f_plus = g_plus.value(l_plus).item();
            perturbed.get_mut(name).unwrap().data[i] = base - h;
            let (g_minus, l_minus) = build(&perturbed)?;
            let f_minus = g_minus.value(l_minus).item();
            perturbed.get_mut(name).unwrap().data[i] = base;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let rel = (grad.data[i] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(rel);
        }
        report.push(ParamCheck {
            name: name.clone(),
            max_rel_error: worst,
            passed: worst < tol,
        });
    }
    Ok(GradCheckReport {
        h,
        tol,
        params: report,
    })
}
