//! Task-aware gated network: class embeddings, task embeddings, gate modules,
//! gated layers, per-task heads, and the non-gated teacher twin.
//!
//! Layers are dense; a layer's "channels" are its output units. Layer `l`
//! stores its weights as `[c_l, c_{l+1}]`, so the filter of output channel
//! `c` is weight column `c` together with bias entry `c`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_TASK_DIM: usize = 16;
pub const DEFAULT_GATE_HIDDEN: usize = 32;

/// Deterministic generator for one purpose (`stream`) under one seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Shapes shared by the student, its gate modules and the teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of every gated layer.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub task_dim: usize,
    pub gate_hidden: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Self {
        Architecture {
            input_dim,
            widths,
            embed_dim: DEFAULT_EMBED_DIM,
            task_dim: DEFAULT_TASK_DIM,
            gate_hidden: DEFAULT_GATE_HIDDEN,
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    /// Input width of layer `l`.
    pub fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.widths[l - 1]
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input_dim)
    }

    pub fn total_channels(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self}")));
        }
        if self.embed_dim == 0 || self.task_dim == 0 || self.gate_hidden == 0 {
            return Err(Error::InvalidArgument(format!("degenerate gate module in {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(
            f,
            "in={} widths={} embed={} task={} hidden={}",
            self.input_dim,
            widths.join(","),
            self.embed_dim,
            self.task_dim,
            self.gate_hidden
        )
    }
}

/// Dense affine map `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn random(rng: &mut impl Rng, fan_in: usize, fan_out: usize, std: f64, bias: f64) -> Self {
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, normal_vec(rng, fan_in * fan_out, std))
                .expect("shape matches data"),
            bias: Tensor::filled(vec![fan_out], bias),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<BoundLinear> {
        Ok(BoundLinear {
            weight: g.param(&format!("{name}.weight"), &self.weight)?,
            bias: g.param(&format!("{name}.bias"), &self.bias)?,
        })
    }

    /// Binds with whole output filters frozen where `frozen_cols[c]` is set.
    pub fn bind_frozen(&self, g: &mut Graph, name: &str, frozen_cols: &[bool]) -> Result<BoundLinear> {
        let out = self.fan_out();
        let wmask = (0..self.weight.len()).map(|i| frozen_cols[i % out]).collect();
        Ok(BoundLinear {
            weight: g.param_frozen(&format!("{name}.weight"), &self.weight, wmask)?,
            bias: g.param_frozen(&format!("{name}.bias"), &self.bias, frozen_cols.to_vec())?,
        })
    }

    pub fn bind_const(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.input(self.weight.clone()),
            bias: g.input(self.bias.clone()),
        }
    }

    /// Plain gradient step; filters flagged in `frozen_cols` are not touched.
    pub fn sgd_step(&mut self, name: &str, grads: &Gradients, lr: f64, frozen_cols: Option<&[bool]>) {
        let out = self.fan_out();
        if let Some(gw) = grads.get(&format!("{name}.weight")) {
            for (i, (w, d)) in self.weight.data_mut().iter_mut().zip(gw.data()).enumerate() {
                if frozen_cols.is_some_and(|m| m[i % out]) {
                    continue;
                }
                *w -= lr * d;
            }
        }
        if let Some(gb) = grads.get(&format!("{name}.bias")) {
            for (c, (b, d)) in self.bias.data_mut().iter_mut().zip(gb.data()).enumerate() {
                if frozen_cols.is_some_and(|m| m[c]) {
                    continue;
                }
                *b -= lr * d;
            }
        }
    }
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

/// Fixed pseudo-random embedding per global class id. The same id always
/// maps to the same vector, independent of which task asks for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassEmbeddingTable {
    pub seed: u64,
    pub dim: usize,
}

pub const CLASS_EMBEDDING_SEED: u64 = 0x5eed_c1a5;

impl Default for ClassEmbeddingTable {
    fn default() -> Self {
        ClassEmbeddingTable {
            seed: CLASS_EMBEDDING_SEED,
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

impl ClassEmbeddingTable {
    pub fn embedding(&self, class_id: u32) -> Vec<f64> {
        let mut rng = seeded_rng(self.seed, class_id as u64);
        normal_vec(&mut rng, self.dim, 1.0)
    }

    pub fn for_task(&self, task_id: u32, class_ids: &[u32]) -> Result<ClassEmbeddingSet> {
        let rows: Vec<Vec<f64>> = class_ids.iter().map(|&c| self.embedding(c)).collect();
        ClassEmbeddingSet::new(task_id, class_ids.to_vec(), rows)
    }
}

/// Embeddings of the classes a task must recognise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingSet {
    pub task_id: u32,
    pub class_ids: Vec<u32>,
    /// `[|C^t|, embed_dim]`
    pub embeddings: Tensor,
}

impl ClassEmbeddingSet {
    pub fn new(task_id: u32, class_ids: Vec<u32>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::InvalidArgument(format!("task {task_id} has no classes")));
        }
        let unique: BTreeSet<_> = class_ids.iter().collect();
        if unique.len() != class_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "task {task_id} lists a class id twice"
            )));
        }
        if rows.len() != class_ids.len() {
            return Err(Error::InvalidArgument("one embedding row per class required".into()));
        }
        Ok(ClassEmbeddingSet {
            task_id,
            class_ids,
            embeddings: Tensor::from_rows(&rows)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding(pub Vec<f64>);

/// Two-layer perceptron producing one layer's gate pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMlp {
    pub hidden: Linear,
    pub out: Linear,
}

/// Task embedding projection plus one gate MLP per gated layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateModule {
    pub class_fc: Linear,
    pub mlps: Vec<GateMlp>,
}

#[derive(Debug, Clone)]
pub struct BoundGate {
    pub class_fc: BoundLinear,
    pub mlps: Vec<(BoundLinear, BoundLinear)>,
}

/// Initial bias of the gate output layer; positive so that channels start
/// open and the sparsity term has something to close.
pub const GATE_BIAS_INIT: f64 = 1.0;

impl GateModule {
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        let class_fc = Linear::random(
            rng,
            arch.embed_dim,
            arch.task_dim,
            (1.0 / arch.embed_dim as f64).sqrt(),
            0.0,
        );
        let mlps = (0..arch.depth())
            .map(|l| {
                let fan_in = arch.fan_in(l) + arch.task_dim;
                GateMlp {
                    hidden: Linear::random(rng, fan_in, arch.gate_hidden, (2.0 / fan_in as f64).sqrt(), 0.0),
                    out: Linear::random(
                        rng,
                        arch.gate_hidden,
                        arch.widths[l],
                        (1.0 / arch.gate_hidden as f64).sqrt(),
                        GATE_BIAS_INIT,
                    ),
                }
            })
            .collect();
        GateModule { class_fc, mlps }
    }

    /// Every weight and bias zero: all gates evaluate to exactly 0.5.
    pub fn zeros(arch: &Architecture) -> Self {
        GateModule {
            class_fc: Linear::zeros(arch.embed_dim, arch.task_dim),
            mlps: (0..arch.depth())
                .map(|l| GateMlp {
                    hidden: Linear::zeros(arch.fan_in(l) + arch.task_dim, arch.gate_hidden),
                    out: Linear::zeros(arch.gate_hidden, arch.widths[l]),
                })
                .collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundGate> {
        let class_fc = self.class_fc.bind(g, "gate.class_fc")?;
        let mlps = self
            .mlps
            .iter()
            .enumerate()
            .map(|(l, m)| {
                Ok((
                    m.hidden.bind(g, &format!("gate.mlp{l}.hidden"))?,
                    m.out.bind(g, &format!("gate.mlp{l}.out"))?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(BoundGate { class_fc, mlps })
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        self.class_fc.sgd_step("gate.class_fc", grads, lr, None);
        for (l, m) in self.mlps.iter_mut().enumerate() {
            m.hidden.sgd_step(&format!("gate.mlp{l}.hidden"), grads, lr, None);
            m.out.sgd_step(&format!("gate.mlp{l}.out"), grads, lr, None);
        }
    }

    /// `e^t`: elementwise max over classes of the projected class embeddings.
    pub fn task_embedding(&self, classes: &ClassEmbeddingSet) -> Result<TaskEmbedding> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let e = bound.task_embedding(&mut g, classes)?;
        Ok(TaskEmbedding(g.value(e).data().to_vec()))
    }

    /// Soft gates of layer `layer` for a batch of layer inputs `f_l`.
    pub fn soft_gates(&self, f_l: &Tensor, e: &TaskEmbedding, layer: usize) -> Result<Tensor> {
        if layer >= self.mlps.len() {
            return Err(Error::InvalidArgument(format!(
                "gate layer {layer} out of range ({} layers)",
                self.mlps.len()
            )));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let x = g.input(f_l.clone());
        let e = g.input(Tensor::vector(e.0.clone()));
        let gates = bound.soft_gates(&mut g, layer, x, e)?;
        Ok(g.value(gates).clone())
    }
}

impl BoundGate {
    pub fn task_embedding(&self, g: &mut Graph, classes: &ClassEmbeddingSet) -> Result<NodeId> {
        let emb = g.input(classes.embeddings.clone());
        let projected = self.class_fc.apply(g, emb)?;
        g.max_axis(projected, 0)
    }

    /// `sigmoid(MLP(f_l ++ e^t))`, one row of gates per sample.
    ///
    /// With 1x1 spatial extent the per-channel pooled feature is `f_l` itself.
    pub fn soft_gates(&self, g: &mut Graph, layer: usize, f_l: NodeId, e: NodeId) -> Result<NodeId> {
        let (hidden, out) = self.mlps.get(layer).copied().ok_or_else(|| {
            Error::InvalidArgument(format!("gate layer {layer} out of range"))
        })?;
        let rows = g.value(f_l).rows();
        let e_rows = g.broadcast_rows(e, rows)?;
        let x = g.concat_cols(f_l, e_rows)?;
        let h = hidden.apply(g, x)?;
        let h = g.relu(h);
        let z = out.apply(g, h)?;
        Ok(g.sigmoid(z))
    }
}

/// Static per-layer channel gates of one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGates {
    pub layers: Vec<Vec<bool>>,
}

impl BinaryGates {
    pub fn all(arch: &Architecture, value: bool) -> Self {
        BinaryGates {
            layers: arch.widths.iter().map(|&w| vec![value; w]).collect(),
        }
    }

    pub fn active_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn active_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(Vec::len).sum();
        let active: usize = self.active_counts().iter().sum();
        if total == 0 {
            0.0
        } else {
            active as f64 / total as f64
        }
    }

    pub fn layer_tensor(&self, l: usize) -> Tensor {
        Tensor::vector(
            self.layers[l]
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        self.layers.len() == arch.depth()
            && self.layers.iter().zip(&arch.widths).all(|(l, &w)| l.len() == w)
    }
}

/// Gate values applied by [`gated_forward`].
#[derive(Debug, Clone)]
pub enum GateValues {
    /// `[n, c]`, one gate row per sample.
    Soft(Tensor),
    /// One gate per channel, shared by all samples.
    Channel(Vec<f64>),
}

/// How a network forward pass obtains its gates.
pub enum Gating<'a> {
    Soft { module: &'a BoundGate, task_embedding: NodeId },
    Binary(&'a BinaryGates),
    /// Every gate is one.
    Open,
}

pub struct ForwardOutput {
    /// Output of every gated layer, `f_1 .. f_L`.
    pub features: Vec<NodeId>,
    /// Soft gate node per layer; empty unless gating was soft.
    pub soft_gates: Vec<NodeId>,
    pub logits: Option<NodeId>,
}

/// `gates * relu(x W + b)` on an already-bound layer.
pub fn gated_layer(g: &mut Graph, layer: &BoundLinear, f_l: NodeId, gates: Option<NodeId>) -> Result<NodeId> {
    let pre = layer.apply(g, f_l)?;
    let act = g.relu(pre);
    match gates {
        None => Ok(act),
        Some(gt) => {
            if g.value(gt).shape().len() == 1 {
                g.mul_row(act, gt)
            } else {
                g.mul(act, gt)
            }
        }
    }
}

/// Value-level gated layer.
pub fn gated_forward(f_l: &Tensor, gates: &GateValues, layer: &Linear) -> Result<Tensor> {
    let width = layer.fan_out();
    let gate_len = match gates {
        GateValues::Soft(t) => t.cols(),
        GateValues::Channel(v) => v.len(),
    };
    if gate_len != width {
        return Err(Error::InvalidArgument(format!(
            "{gate_len} gates for a layer with {width} channels"
        )));
    }
    let mut g = Graph::new();
    let bound = layer.bind_const(&mut g);
    let x = g.input(f_l.clone());
    let gt = match gates {
        GateValues::Soft(t) => g.input(t.clone()),
        GateValues::Channel(v) => g.input(Tensor::vector(v.clone())),
    };
    let out = gated_layer(&mut g, &bound, x, Some(gt))?;
    Ok(g.value(out).clone())
}

/// The student: gated layers with per-channel freeze masks and per-task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedNetwork {
    pub arch: Architecture,
    pub layers: Vec<Linear>,
    pub freeze_mask: Vec<Vec<bool>>,
    pub heads: BTreeMap<u32, Linear>,
}

#[derive(Debug, Clone)]
pub struct BoundNetwork {
    pub layers: Vec<BoundLinear>,
    pub head: Option<(u32, BoundLinear)>,
}

pub fn init_trunk(arch: &Architecture, rng: &mut impl Rng) -> Vec<Linear> {
    (0..arch.depth())
        .map(|l| {
            let fan_in = arch.fan_in(l);
            Linear::random(rng, fan_in, arch.widths[l], (2.0 / fan_in as f64).sqrt(), 0.0)
        })
        .collect()
}

pub fn init_head(arch: &Architecture, classes: usize, rng: &mut impl Rng) -> Linear {
    let d = arch.feature_dim();
    Linear::random(rng, d, classes, (1.0 / d as f64).sqrt(), 0.0)
}

impl GatedNetwork {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layers = init_trunk(&arch, rng);
        let freeze_mask = arch.widths.iter().map(|&w| vec![false; w]).collect();
        Ok(GatedNetwork {
            arch,
            layers,
            freeze_mask,
            heads: BTreeMap::new(),
        })
    }

    pub fn frozen_count(&self) -> usize {
        self.freeze_mask
            .iter()
            .map(|m| m.iter().filter(|&&f| f).count())
            .sum()
    }

    /// Registers the trunk (with freeze masks) and, optionally, one head.
    pub fn bind(&self, g: &mut Graph, head: Option<u32>) -> Result<BoundNetwork> {
        let layers = self
            .layers
            .iter()
            .zip(&self.freeze_mask)
            .enumerate()
            .map(|(l, (layer, mask))| layer.bind_frozen(g, &format!("layer{l}"), mask))
            .collect::<Result<_>>()?;
        let head = match head {
            None => None,
            Some(t) => {
                let h = self.heads.get(&t).ok_or(Error::MissingHead(t))?;
                Some((t, h.bind(g, &format!("head{t}"))?))
            }
        };
        Ok(BoundNetwork { layers, head })
    }

    /// Gradient step that leaves every frozen filter untouched. Heads present
    /// in `grads` are always updated.
    pub fn masked_update(&mut self, grads: &Gradients, lr: f64) {
        for (l, (layer, mask)) in self.layers.iter_mut().zip(&self.freeze_mask).enumerate() {
            layer.sgd_step(&format!("layer{l}"), grads, lr, Some(mask));
        }
        for (t, head) in self.heads.iter_mut() {
            head.sgd_step(&format!("head{t}"), grads, lr, None);
        }
    }

    /// Convenience value-level forward through a freshly built graph.
    pub fn forward_binary(&self, input: &Tensor, gates: &BinaryGates, head: Option<u32>) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, head)?;
        let x = g.input(input.clone());
        let out = network_forward(&mut g, &bound, x, Gating::Binary(gates))?;
        let feats = out.features.iter().map(|&f| g.value(f).clone()).collect();
        Ok((feats, out.logits.map(|l| g.value(l).clone())))
    }
}

/// Forward through a bound network; returns every layer output and, when a
/// head is bound, its logits.
pub fn network_forward(g: &mut Graph, net: &BoundNetwork, input: NodeId, gating: Gating<'_>) -> Result<ForwardOutput> {
    let mut features = Vec::with_capacity(net.layers.len());
    let mut soft_gates = Vec::new();
    let mut f = input;
    if let Gating::Binary(b) = &gating {
        if b.layers.len() != net.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gate vectors for {} layers",
                b.layers.len(),
                net.layers.len()
            )));
        }
    }
    for (l, layer) in net.layers.iter().enumerate() {
        let gate = match &gating {
            Gating::Open => None,
            Gating::Binary(b) => {
                let width = g.value(layer.bias).len();
                if b.layers[l].len() != width {
                    return Err(Error::InvalidArgument(format!(
                        "layer {l}: {} gates for {width} channels",
                        b.layers[l].len()
                    )));
                }
                Some(g.input(b.layer_tensor(l)))
            }
            Gating::Soft {
                module,
                task_embedding,
            } => {
                let s = module.soft_gates(g, l, f, *task_embedding)?;
                soft_gates.push(s);
                Some(s)
            }
        };
        f = gated_layer(g, layer, f, gate)?;
        features.push(f);
    }
    let logits = match &net.head {
        Some((_, h)) => Some(h.apply(g, f)?),
        None => None,
    };
    Ok(ForwardOutput {
        features,
        soft_gates,
        logits,
    })
}

/// Non-gated network. Used as the per-task teacher and as the plain
/// fine-tuning baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainNetwork {
    pub arch: Architecture,
    pub layers: Vec<Linear>,
    pub heads: BTreeMap<u32, Linear>,
}

pub type TeacherNetwork = PlainNetwork;

impl PlainNetwork {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let layers = init_trunk(&arch, rng);
        Ok(PlainNetwork {
            arch,
            layers,
            heads: BTreeMap::new(),
        })
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, head: Option<u32>) -> Result<BoundNetwork> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| layer.bind(g, &format!("{prefix}layer{l}")))
            .collect::<Result<_>>()?;
        let head = match head {
            None => None,
            Some(t) => {
                let h = self.heads.get(&t).ok_or(Error::MissingHead(t))?;
                Some((t, h.bind(g, &format!("{prefix}head{t}"))?))
            }
        };
        Ok(BoundNetwork { layers, head })
    }

    pub fn sgd_step(&mut self, prefix: &str, grads: &Gradients, lr: f64) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.sgd_step(&format!("{prefix}layer{l}"), grads, lr, None);
        }
        for (t, head) in self.heads.iter_mut() {
            head.sgd_step(&format!("{prefix}head{t}"), grads, lr, None);
        }
    }

    pub fn forward(&self, input: &Tensor, head: Option<u32>) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, "", head)?;
        let x = g.input(input.clone());
        let out = network_forward(&mut g, &bound, x, Gating::Open)?;
        let feats = out.features.iter().map(|&f| g.value(f).clone()).collect();
        Ok((feats, out.logits.map(|l| g.value(l).clone())))
    }
}
