//! Per-task training pipeline and binary-gated inference.
//!
//! [`Engine::train_task`] runs teacher training, gated student training,
//! threshold estimation, discretization, fine-tuning, freezing, prototype
//! extraction and the bank commit. All work happens on clones of the network
//! and gate module; they replace the live state only after the record is
//! stored, so a failure at any step leaves the engine untouched.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::correlation::{compute_prototypes, gdc_weight, intra_task_baseline, task_to_task, Prototype};
use crate::data::{Split, TaskData};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::gatednet::{
    init_head, network_forward, seeded_rng, Architecture, BinaryGates, ClassEmbeddingSet,
    ClassEmbeddingTable, GateModule, GatedNetwork, Gating, PlainNetwork, TaskEmbedding,
};
use crate::losses::{
    kd_loss_node, sparsity_loss_node, total_objective_node, weighted_diversity_node, LossWeights,
};
use crate::membank::{ConfigFingerprint, MemoryBank, TaskRecord};

/// Number of validation inputs whose logits are snapshotted per task.
pub const PROBE_SIZE: usize = 32;

const STREAM_TRUNK: u64 = 0;
const STREAM_GATE: u64 = 1;
const PURPOSE_TEACHER_INIT: u64 = 1;
const PURPOSE_TEACHER_ORDER: u64 = 2;
const PURPOSE_HEAD_INIT: u64 = 3;
const PURPOSE_STUDENT_ORDER: u64 = 4;
const PURPOSE_FINETUNE_ORDER: u64 = 5;

fn task_stream(task_id: u32, purpose: u64) -> u64 {
    ((task_id as u64 + 1) << 8) | purpose
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub epochs_finetune: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_teacher: 10,
            epochs_student: 10,
            epochs_finetune: 2,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_finetune == 0 {
            return Err(Error::InvalidArgument("epochs_finetune must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.weights.validate()
    }

    pub fn fingerprint(&self) -> ConfigFingerprint {
        ConfigFingerprint {
            seed: self.seed,
            lambda_sparsity: self.weights.lambda_sparsity,
            lambda_kd: self.weights.lambda_kd,
            lambda_diversity: self.weights.lambda_diversity,
            eta: self.weights.eta,
        }
    }
}

/// Per-layer, per-channel thresholds `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    pub layers: Vec<Vec<f64>>,
}

/// Soft gates of every validation sample, `[n, c]` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftGateSamples {
    pub layers: Vec<Tensor>,
}

impl SoftGateSamples {
    pub fn samples(&self) -> usize {
        self.layers.first().map_or(0, Tensor::rows)
    }
}

/// Soft gates produced for `inputs` under task embedding `e`.
pub fn soft_gate_samples(
    net: &GatedNetwork,
    gate: &GateModule,
    e: &TaskEmbedding,
    inputs: &Tensor,
) -> Result<SoftGateSamples> {
    let mut g = Graph::new();
    let bound_net = net.bind(&mut g, None)?;
    let bound_gate = gate.bind(&mut g)?;
    let e = g.input(Tensor::vector(e.0.clone()));
    let x = g.input(inputs.clone());
    let out = network_forward(
        &mut g,
        &bound_net,
        x,
        Gating::Soft {
            module: &bound_gate,
            task_embedding: e,
        },
    )?;
    Ok(SoftGateSamples {
        layers: out.soft_gates.iter().map(|&s| g.value(s).clone()).collect(),
    })
}

/// Column means of the per-sample gates.
///
/// The mean is clamped into the observed `[min, max]` of its column so that a
/// constant column yields exactly that constant despite summation rounding.
pub fn thresholds_from_samples(samples: &SoftGateSamples) -> Result<ThresholdVector> {
    let n = samples.samples();
    if n == 0 {
        return Err(Error::InvalidArgument("threshold estimation needs validation samples".into()));
    }
    let layers = samples
        .layers
        .iter()
        .map(|t| {
            (0..t.cols())
                .map(|c| {
                    let mut sum = 0.0;
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for r in 0..n {
                        let v = t.at(r, c);
                        sum += v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    (sum / n as f64).clamp(lo, hi)
                })
                .collect()
        })
        .collect();
    Ok(ThresholdVector { layers })
}

pub fn estimate_thresholds(
    net: &GatedNetwork,
    gate: &GateModule,
    e: &TaskEmbedding,
    val: &Split,
) -> Result<ThresholdVector> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    thresholds_from_samples(&soft_gate_samples(net, gate, e, &val.inputs)?)
}

/// A channel is on when its gate reaches its threshold on a strict majority
/// of samples. A gate equal to the threshold counts as reaching it.
pub fn discretize(samples: &SoftGateSamples, thresholds: &ThresholdVector) -> Result<BinaryGates> {
    if samples.layers.len() != thresholds.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gate layers but {} threshold layers",
            samples.layers.len(),
            thresholds.layers.len()
        )));
    }
    let n = samples.samples();
    let layers = samples
        .layers
        .iter()
        .zip(&thresholds.layers)
        .map(|(t, gammas)| {
            if t.cols() != gammas.len() {
                return Err(Error::InvalidArgument("threshold width differs from gate width".into()));
            }
            Ok(gammas
                .iter()
                .enumerate()
                .map(|(c, &gamma)| {
                    let votes = (0..n).filter(|&r| t.at(r, c) >= gamma).count();
                    2 * votes > n
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(BinaryGates { layers })
}

/// Mean task loss of `split` under binary gates and the given head.
pub fn binary_task_loss(net: &GatedNetwork, gates: &BinaryGates, head: u32, split: &Split) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, Some(head))?;
    let x = g.input(split.inputs.clone());
    let out = network_forward(&mut g, &bound, x, Gating::Binary(gates))?;
    let logits = out.logits.ok_or(Error::MissingHead(head))?;
    let loss = g.softmax_cross_entropy(logits, &split.labels)?;
    Ok(g.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneLosses {
    pub before: f64,
    pub after: f64,
}

/// Task-loss SGD with binary gates in the forward pass. Frozen filters are
/// masked; channels whose gate is off receive zero gradient through the gate.
pub fn finetune(
    net: &mut GatedNetwork,
    gates: &BinaryGates,
    head: u32,
    train: &Split,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FinetuneLosses> {
    cfg.validate()?;
    let before = binary_task_loss(net, gates, head, train)?;
    for _ in 0..cfg.epochs_finetune {
        for batch in batches(train, cfg.batch_size, rng) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, Some(head))?;
            let x = g.input(batch.inputs.clone());
            let out = network_forward(&mut g, &bound, x, Gating::Binary(gates))?;
            let logits = out.logits.ok_or(Error::MissingHead(head))?;
            let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("finetune task loss"));
            }
            let grads = g.backward(loss)?;
            net.masked_update(&grads, cfg.learning_rate);
        }
    }
    let after = binary_task_loss(net, gates, head, train)?;
    Ok(FinetuneLosses { before, after })
}

/// Adds this task's gates to the freeze mask. Returns how many channels were
/// newly frozen.
pub fn freeze(net: &mut GatedNetwork, gates: &BinaryGates) -> Result<usize> {
    if !gates.matches(&net.arch) {
        return Err(Error::InvalidArgument("gate widths do not match the network".into()));
    }
    let mut newly = 0;
    for (mask, layer) in net.freeze_mask.iter_mut().zip(&gates.layers) {
        for (m, &on) in mask.iter_mut().zip(layer) {
            if on && !*m {
                *m = true;
                newly += 1;
            }
        }
    }
    Ok(newly)
}

/// Logits of a committed task: stored gates and stored head on the current
/// trunk.
pub fn infer(net: &GatedNetwork, bank: &MemoryBank, task_id: u32, input: &Tensor) -> Result<Tensor> {
    let record = bank.get(task_id)?;
    infer_record(net, record, input)
}

fn infer_record(net: &GatedNetwork, record: &TaskRecord, input: &Tensor) -> Result<Tensor> {
    if input.shape().len() != 2 || input.cols() != net.arch.input_dim {
        return Err(Error::InvalidArgument(format!(
            "input of shape {:?} for a network with input width {}",
            input.shape(),
            net.arch.input_dim
        )));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, None)?;
    let head = record.head.bind_const(&mut g);
    let x = g.input(input.clone());
    let out = network_forward(&mut g, &bound, x, Gating::Binary(&record.gates))?;
    let last = *out.features.last().expect("validated architecture has layers");
    let logits = head.apply(&mut g, last)?;
    Ok(g.value(logits).clone())
}

fn batches(split: &Split, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|idx| split.subset(idx)).collect()
}

/// Cross-entropy training of a plain network's trunk and one head.
pub fn train_plain(
    net: &mut PlainNetwork,
    head: u32,
    train: &Split,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for _ in 0..epochs {
        for batch in batches(train, cfg.batch_size, rng) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, "", Some(head))?;
            let x = g.input(batch.inputs.clone());
            let out = network_forward(&mut g, &bound, x, Gating::Open)?;
            let logits = out.logits.ok_or(Error::MissingHead(head))?;
            let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite("teacher task loss"));
            }
            let grads = g.backward(loss)?;
            net.sgd_step("", &grads, cfg.learning_rate);
        }
    }
    Ok(())
}

/// Diagnostics gathered while training one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub record: TaskRecord,
    pub thresholds: ThresholdVector,
    pub finetune: FinetuneLosses,
    pub newly_frozen: usize,
    pub final_student_loss: f64,
}

/// Student network, gate module and memory bank for one task sequence.
#[derive(Debug, Clone)]
pub struct Engine {
    pub net: GatedNetwork,
    pub gate: GateModule,
    pub bank: MemoryBank,
    pub embeddings: ClassEmbeddingTable,
}

impl Engine {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let net = GatedNetwork::init(arch.clone(), &mut seeded_rng(seed, STREAM_TRUNK))?;
        let gate = GateModule::init(&arch, &mut seeded_rng(seed, STREAM_GATE));
        let embeddings = ClassEmbeddingTable {
            dim: arch.embed_dim,
            ..ClassEmbeddingTable::default()
        };
        Ok(Engine {
            net,
            gate,
            bank: MemoryBank::new(arch),
            embeddings,
        })
    }

    /// Reassembles an engine from a stored trunk and bank; only inference is
    /// meaningful on the result.
    pub fn from_parts(net: GatedNetwork, bank: MemoryBank) -> Result<Self> {
        if net.arch != bank.arch {
            return Err(Error::ArchitectureMismatch {
                expected: bank.arch.to_string(),
                found: net.arch.to_string(),
            });
        }
        let gate = GateModule::zeros(&net.arch);
        let embeddings = ClassEmbeddingTable {
            dim: net.arch.embed_dim,
            ..ClassEmbeddingTable::default()
        };
        Ok(Engine {
            net,
            gate,
            bank,
            embeddings,
        })
    }

    pub fn infer(&self, task_id: u32, input: &Tensor) -> Result<Tensor> {
        infer(&self.net, &self.bank, task_id, input)
    }

    pub fn train_task(&mut self, task: &TaskData, cfg: &TrainConfig) -> Result<TaskOutcome> {
        cfg.validate()?;
        let arch = self.net.arch.clone();
        let t = task.task_id;
        if self.bank.contains(t) {
            return Err(Error::DuplicateTask(t));
        }
        if task.input_dim() != arch.input_dim || task.val.inputs.cols() != arch.input_dim {
            return Err(Error::InvalidArgument(format!(
                "task {t} has input width {}, network expects {}",
                task.input_dim(),
                arch.input_dim
            )));
        }
        if task.train.is_empty() {
            return Err(Error::InvalidArgument(format!("task {t} has no training samples")));
        }
        let classes = self.embeddings.for_task(t, &task.class_ids)?;
        let mut net = self.net.clone();
        let mut gate = self.gate.clone();

        let mut teacher = PlainNetwork::init(arch.clone(), &mut seeded_rng(cfg.seed, task_stream(t, PURPOSE_TEACHER_INIT)))?;
        let mut head_rng = seeded_rng(cfg.seed, task_stream(t, PURPOSE_HEAD_INIT));
        teacher.heads.insert(t, init_head(&arch, task.class_ids.len(), &mut head_rng));
        train_plain(
            &mut teacher,
            t,
            &task.train,
            cfg.epochs_teacher,
            cfg,
            &mut seeded_rng(cfg.seed, task_stream(t, PURPOSE_TEACHER_ORDER)),
        )?;

        let (phis, cross_prototypes): (Vec<f64>, Vec<Vec<Prototype>>) =
            self.diversity_weights(&net, task)?.into_iter().unzip();
        net.heads.insert(t, init_head(&arch, task.class_ids.len(), &mut head_rng));
        let final_student_loss = train_student(
            &mut net,
            &mut gate,
            &teacher,
            &classes,
            task,
            &phis,
            cfg,
            &mut seeded_rng(cfg.seed, task_stream(t, PURPOSE_STUDENT_ORDER)),
        )?;

        let e = gate.task_embedding(&classes)?;
        if task.val.is_empty() {
            return Err(Error::InvalidArgument(format!("task {t} has an empty validation split")));
        }
        let samples = soft_gate_samples(&net, &gate, &e, &task.val.inputs)?;
        let thresholds = thresholds_from_samples(&samples)?;
        let gates = discretize(&samples, &thresholds)?;

        let finetune_losses = finetune(
            &mut net,
            &gates,
            t,
            &task.train,
            cfg,
            &mut seeded_rng(cfg.seed, task_stream(t, PURPOSE_FINETUNE_ORDER)),
        )?;
        let newly_frozen = freeze(&mut net, &gates)?;

        let prototypes = compute_prototypes(&net, &task.train, &task.class_ids, &gates)?;
        let baseline = intra_task_baseline(&prototypes)?;
        let head = net.heads.get(&t).cloned().ok_or(Error::MissingHead(t))?;
        let probe_inputs = task.val.head(PROBE_SIZE).inputs;
        let mut record = TaskRecord {
            task_id: t,
            class_ids: task.class_ids.clone(),
            task_embedding: e.0,
            gates,
            head,
            prototypes,
            baseline,
            phis,
            cross_prototypes,
            probe_inputs: probe_inputs.clone(),
            probe_logits: Tensor::zeros(vec![0, task.class_ids.len()]),
            fingerprint: cfg.fingerprint(),
        };
        record.probe_logits = infer_record(&net, &record, &probe_inputs)?;

        self.bank.store(record.clone())?;
        self.net = net;
        self.gate = gate;
        Ok(TaskOutcome {
            record,
            thresholds,
            finetune: finetune_losses,
            newly_frozen,
            final_student_loss,
        })
    }

    /// `phi_i` against every stored task `i`, using provisional prototypes of
    /// the new task's data routed through task `i`'s gates. Those gates only
    /// reach frozen channels, so the prototypes live in task `i`'s feature
    /// space; they are returned alongside the weight.
    fn diversity_weights(&self, net: &GatedNetwork, task: &TaskData) -> Result<Vec<(f64, Vec<Prototype>)>> {
        self.bank
            .records()
            .iter()
            .map(|r| {
                let provisional = compute_prototypes(net, &task.train, &task.class_ids, &r.gates)?;
                let r_ti = task_to_task(&provisional, &r.prototypes, false)?;
                Ok((gdc_weight(r_ti, r.baseline)?, provisional))
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn train_student(
    net: &mut GatedNetwork,
    gate: &mut GateModule,
    teacher: &PlainNetwork,
    classes: &ClassEmbeddingSet,
    task: &TaskData,
    phis: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let t = task.task_id;
    let reserved: Vec<Vec<bool>> = net
        .freeze_mask
        .iter()
        .map(|m| m.iter().map(|&f| !f).collect())
        .collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs_student {
        for batch in batches(&task.train, cfg.batch_size, rng) {
            let (teacher_feats, _) = teacher.forward(&batch.inputs, None)?;
            let mut g = Graph::new();
            let bound_net = net.bind(&mut g, Some(t))?;
            let bound_gate = gate.bind(&mut g)?;
            let e = bound_gate.task_embedding(&mut g, classes)?;
            let x = g.input(batch.inputs.clone());
            let out = network_forward(
                &mut g,
                &bound_net,
                x,
                Gating::Soft {
                    module: &bound_gate,
                    task_embedding: e,
                },
            )?;
            let logits = out.logits.ok_or(Error::MissingHead(t))?;
            let task_loss = g.softmax_cross_entropy(logits, &batch.labels)?;
            let sparsity = sparsity_loss_node(&mut g, &out.soft_gates)?;
            let teacher_nodes: Vec<_> = teacher_feats.into_iter().map(|f| g.input(f)).collect();
            let kd = kd_loss_node(&mut g, &out.features, &teacher_nodes)?;
            let diversity = if phis.is_empty() {
                None
            } else {
                Some(weighted_diversity_node(
                    &mut g,
                    &out.soft_gates,
                    &reserved,
                    phis,
                    cfg.weights.eta,
                )?)
            };
            for (name, node) in [("task", Some(task_loss)), ("sparsity", Some(sparsity)), ("kd", Some(kd)), ("diversity", diversity)] {
                if let Some(n) = node {
                    if !g.value(n).item().is_finite() {
                        return Err(Error::NonFinite(name));
                    }
                }
            }
            let total = total_objective_node(&mut g, task_loss, sparsity, kd, diversity, &cfg.weights)?;
            last = g.value(total).item();
            let grads = g.backward(total)?;
            net.masked_update(&grads, cfg.learning_rate);
            gate.sgd_step(&grads, cfg.learning_rate);
        }
    }
    Ok(last)
}
