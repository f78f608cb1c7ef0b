//! Synthetic task sequences, the experiment driver and its reports.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::correlation::{correlation_report, CorrelationReport, Prototype};
use crate::data::{accuracy, Split, TaskData};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gatednet::{init_head, seeded_rng, Architecture, GatedNetwork, PlainNetwork};
use crate::lifecycle::{train_plain, Engine, TaskOutcome, TrainConfig};
use crate::losses::LossWeights;
use crate::membank::{write_atomic, MemoryBank, NetworkCheckpoint, TaskRecord};

/// Fraction of each class's samples that go to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Standard deviation of the per-dimension spread of class base means.
pub const CLASS_SPREAD: f64 = 0.7;
/// Within-class noise.
pub const NOISE_STD: f64 = 1.0;

pub const BANK_FILE: &str = "bank.rsb";
pub const NETWORK_FILE: &str = "network.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FORGETTING_FILE: &str = "forgetting.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

const STREAM_DIRECTION: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_BASELINE: u64 = 0xba5e;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub class_overlap: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::InvalidArgument(
                "samples_per_class must be at least 2 to fill both splits".into(),
            ));
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return Err(Error::InvalidArgument(format!("shift must be >= 0, got {}", self.shift)));
        }
        if self.class_overlap > self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class_overlap {} exceeds num_classes {}",
                self.class_overlap, self.num_classes
            )));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Base mean of a global class id; shared by every task that uses the id.
pub fn class_base_mean(layout_seed: u64, class_id: u32, dim: usize) -> Vec<f64> {
    gaussian(&mut seeded_rng(layout_seed, class_id as u64), dim, CLASS_SPREAD)
}

/// Unit vector along which a task's class means are displaced.
pub fn shift_direction(task_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = seeded_rng(task_seed, STREAM_DIRECTION);
    loop {
        let v = gaussian(&mut rng, dim, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Global class ids per task. The first `class_overlap` ids of a task are
/// taken from the previous task's list; the rest are fresh.
pub fn assign_class_ids(specs: &[TaskSpec]) -> Result<Vec<Vec<u32>>> {
    let mut next = 0u32;
    let mut out: Vec<Vec<u32>> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let mut ids = Vec::with_capacity(spec.num_classes);
        if let Some(prev) = out.last() {
            if spec.class_overlap > prev.len() {
                return Err(Error::InvalidArgument(format!(
                    "task {} shares {} classes but the previous task has {}",
                    i + 1,
                    spec.class_overlap,
                    prev.len()
                )));
            }
            ids.extend_from_slice(&prev[..spec.class_overlap]);
        }
        while ids.len() < spec.num_classes {
            ids.push(next);
            next += 1;
        }
        out.push(ids);
    }
    Ok(out)
}

/// Gaussian class clusters for every spec. Task ids are 1-based positions.
pub fn generate_tasks(specs: &[TaskSpec], layout_seed: u64) -> Result<Vec<TaskData>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no tasks specified".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let ids = assign_class_ids(specs)?;
    specs
        .iter()
        .zip(ids)
        .enumerate()
        .map(|(i, (spec, class_ids))| generate_task(i as u32 + 1, spec, class_ids, layout_seed))
        .collect()
}

fn generate_task(task_id: u32, spec: &TaskSpec, class_ids: Vec<u32>, layout_seed: u64) -> Result<TaskData> {
    let d = spec.feature_dim;
    let dir = shift_direction(spec.seed, d);
    let means: Vec<Vec<f64>> = class_ids
        .iter()
        .map(|&c| {
            class_base_mean(layout_seed, c, d)
                .into_iter()
                .zip(&dir)
                .map(|(m, u)| m + spec.shift * u)
                .collect()
        })
        .collect();
    let mut rng = seeded_rng(spec.seed, STREAM_SAMPLES);
    let per_class: Vec<Vec<Vec<f64>>> = means
        .iter()
        .map(|m| {
            (0..spec.samples_per_class)
                .map(|_| {
                    gaussian(&mut rng, d, NOISE_STD)
                        .into_iter()
                        .zip(m)
                        .map(|(z, mu)| mu + z)
                        .collect()
                })
                .collect()
        })
        .collect();
    let n_train = ((spec.samples_per_class as f64 * TRAIN_FRACTION).round() as usize)
        .clamp(1, spec.samples_per_class - 1);
    // Round-robin over classes so any prefix of a split covers every class.
    let interleave = |range: std::ops::Range<usize>| -> Result<Split> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for s in range {
            for (k, samples) in per_class.iter().enumerate() {
                rows.push(samples[s].clone());
                labels.push(k);
            }
        }
        Split::new(Tensor::from_rows(&rows)?, labels)
    };
    Ok(TaskData {
        task_id,
        class_ids,
        train: interleave(0..n_train)?,
        val: interleave(n_train..spec.samples_per_class)?,
    })
}

/// Channel occupancy of two tasks' binary gates.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyFractions {
    pub only_a: f64,
    pub overlap: f64,
    pub only_b: f64,
    pub unused: f64,
}

impl OccupancyFractions {
    fn from_counts(counts: [usize; 4]) -> Self {
        let total: usize = counts.iter().sum();
        let f = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
        OccupancyFractions {
            only_a: f(counts[0]),
            overlap: f(counts[1]),
            only_b: f(counts[2]),
            unused: f(counts[3]),
        }
    }

    pub fn sum(&self) -> f64 {
        self.only_a + self.overlap + self.only_b + self.unused
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateStats {
    pub task_a: u32,
    pub task_b: u32,
    pub per_layer: Vec<OccupancyFractions>,
    pub aggregate: OccupancyFractions,
}

pub fn gate_stats(bank: &MemoryBank, task_a: u32, task_b: u32) -> Result<GateStats> {
    let a = &bank.get(task_a)?.gates;
    let b = &bank.get(task_b)?.gates;
    let mut total = [0usize; 4];
    let mut per_layer = Vec::with_capacity(a.layers.len());
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        let mut counts = [0usize; 4];
        for (&ga, &gb) in la.iter().zip(lb) {
            let slot = match (ga, gb) {
                (true, false) => 0,
                (true, true) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            counts[slot] += 1;
            total[slot] += 1;
        }
        per_layer.push(OccupancyFractions::from_counts(counts));
    }
    Ok(GateStats {
        task_a,
        task_b,
        per_layer,
        aggregate: OccupancyFractions::from_counts(total),
    })
}

pub fn format_gate_stats(s: &GateStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "gate occupancy: task {} vs task {}", s.task_a, s.task_b);
    let _ = writeln!(
        out,
        "{:<8}{:>12}{:>12}{:>12}{:>12}",
        "layer",
        format!("only {}", s.task_a),
        "overlap",
        format!("only {}", s.task_b),
        "not used"
    );
    let row = |out: &mut String, label: String, f: &OccupancyFractions| {
        let _ = writeln!(
            out,
            "{:<8}{:>11.1}%{:>11.1}%{:>11.1}%{:>11.1}%",
            label,
            100.0 * f.only_a,
            100.0 * f.overlap,
            100.0 * f.only_b,
            100.0 * f.unused
        );
    };
    for (l, f) in s.per_layer.iter().enumerate() {
        row(&mut out, l.to_string(), f);
    }
    row(&mut out, "all".into(), &s.aggregate);
    out
}

/// Distance table between two stored tasks. The later task contributes its
/// prototypes under the earlier task's gates so both sides share a feature
/// space; for `a` committed before `b` the printed `phi` is the weight `b`
/// trained with.
pub fn correlation_dump(bank: &MemoryBank, task_a: u32, task_b: u32) -> Result<CorrelationReport> {
    let a = bank.get(task_a)?;
    let b = bank.get(task_b)?;
    let pos = |t: u32| bank.records().iter().position(|r| r.task_id == t).unwrap_or(0);
    let (pa, pb) = (pos(task_a), pos(task_b));
    let (protos_a, protos_b) = match pa.cmp(&pb) {
        Ordering::Equal => (&a.prototypes, &b.prototypes),
        Ordering::Less => (&a.prototypes, cross_prototypes(b, task_a, pa)?),
        Ordering::Greater => (cross_prototypes(a, task_b, pb)?, &b.prototypes),
    };
    correlation_report(task_a, protos_a, task_b, protos_b)
}

fn cross_prototypes(late: &TaskRecord, early_id: u32, early: usize) -> Result<&Vec<Prototype>> {
    late.cross_prototypes.get(early).ok_or_else(|| {
        Error::Malformed(format!(
            "task {} stores no prototypes under the gates of task {early_id}",
            late.task_id
        ))
    })
}

pub fn format_correlation(r: &CorrelationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "prototype distances: rows = classes of task {}, columns = classes of task {}",
        r.task_a, r.task_b
    );
    let _ = write!(out, "{:>8}", "");
    for c in &r.matrix.target_classes {
        let _ = write!(out, "{:>14}", format!("c{c}"));
    }
    out.push('\n');
    for (c, row) in r.matrix.source_classes.iter().zip(&r.matrix.entries) {
        let _ = write!(out, "{:>8}", format!("c{c}"));
        for v in row {
            let _ = write!(out, "{v:>14.6e}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "R({},{}) = {:.12e}", r.task_b, r.task_a, r.r_ba);
    let _ = writeln!(out, "R({},{}) = {:.12e}", r.task_a, r.task_a, r.r_aa);
    let _ = writeln!(out, "phi = {:.12}", r.phi);
    out
}

/// `rows[t][i]`: accuracy on task `i` after training task `t` (`i <= t`).
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub task_ids: Vec<u32>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix {
            task_ids: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn get(&self, after: usize, eval: usize) -> f64 {
        self.rows[after][eval]
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    /// `(task id, A[T][i] - A[i][i])` for every task but the last.
    pub entries: Vec<(u32, f64)>,
    pub mean: Option<f64>,
}

pub fn forgetting_report(m: &AccuracyMatrix) -> Result<ForgettingReport> {
    let t = m.rows.len();
    for (i, row) in m.rows.iter().enumerate() {
        if row.len() != i + 1 {
            return Err(Error::InvalidArgument(format!(
                "accuracy row {i} has {} entries, expected {}",
                row.len(),
                i + 1
            )));
        }
    }
    if t == 0 {
        return Ok(ForgettingReport {
            entries: Vec::new(),
            mean: None,
        });
    }
    let last = &m.rows[t - 1];
    let entries: Vec<(u32, f64)> = (0..t - 1)
        .map(|i| (m.task_ids[i], last[i] - m.rows[i][i]))
        .collect();
    let mean = if entries.is_empty() {
        None
    } else {
        Some(entries.iter().map(|e| e.1).sum::<f64>() / entries.len() as f64)
    };
    Ok(ForgettingReport { entries, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub layer_widths: Vec<usize>,
    pub train: TrainConfig,
    pub baseline: bool,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Deserialize)]
struct RawConfig {
    seed: u64,
    #[serde(default = "default_widths")]
    layer_widths: Vec<usize>,
    #[serde(default)]
    epochs_teacher: Option<usize>,
    #[serde(default)]
    epochs_student: Option<usize>,
    #[serde(default)]
    epochs_finetune: Option<usize>,
    #[serde(default)]
    learning_rate: Option<f64>,
    #[serde(default)]
    batch_size: Option<usize>,
    #[serde(default)]
    lambda_sparsity: Option<f64>,
    #[serde(default)]
    lambda_kd: Option<f64>,
    #[serde(default)]
    lambda_diversity: Option<f64>,
    #[serde(default)]
    eta: Option<f64>,
    #[serde(default)]
    baseline: bool,
    tasks: Vec<TaskSpec>,
}

fn default_widths() -> Vec<usize> {
    vec![64, 64, 64]
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "layer_widths",
    "epochs_teacher",
    "epochs_student",
    "epochs_finetune",
    "learning_rate",
    "batch_size",
    "lambda_sparsity",
    "lambda_kd",
    "lambda_diversity",
    "eta",
    "baseline",
    "tasks",
];
const TASK_KEYS: &[&str] = &[
    "num_classes",
    "samples_per_class",
    "feature_dim",
    "shift",
    "class_overlap",
    "seed",
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut unknown: Vec<String> = table
            .keys()
            .filter(|k| !TOP_KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        if let Some(toml::Value::Array(tasks)) = table.get("tasks") {
            for (i, t) in tasks.iter().enumerate() {
                if let toml::Value::Table(t) = t {
                    unknown.extend(
                        t.keys()
                            .filter(|k| !TASK_KEYS.contains(&k.as_str()))
                            .map(|k| format!("tasks[{i}].{k}")),
                    );
                }
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownConfigKeys(unknown));
        }
        let raw: RawConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let d = TrainConfig::default();
        let w = LossWeights::default();
        let cfg = ExperimentConfig {
            seed: raw.seed,
            layer_widths: raw.layer_widths,
            train: TrainConfig {
                epochs_teacher: raw.epochs_teacher.unwrap_or(d.epochs_teacher),
                epochs_student: raw.epochs_student.unwrap_or(d.epochs_student),
                epochs_finetune: raw.epochs_finetune.unwrap_or(d.epochs_finetune),
                learning_rate: raw.learning_rate.unwrap_or(d.learning_rate),
                batch_size: raw.batch_size.unwrap_or(d.batch_size),
                seed: raw.seed,
                weights: LossWeights {
                    lambda_sparsity: raw.lambda_sparsity.unwrap_or(w.lambda_sparsity),
                    lambda_kd: raw.lambda_kd.unwrap_or(w.lambda_kd),
                    lambda_diversity: raw.lambda_diversity.unwrap_or(w.lambda_diversity),
                    eta: raw.eta.unwrap_or(w.eta),
                },
            },
            baseline: raw.baseline,
            tasks: raw.tasks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one [[tasks]] entry is required".into()));
        }
        for t in &self.tasks {
            t.validate().map_err(cfg_err)?;
        }
        let dim = self.tasks[0].feature_dim;
        if self.tasks.iter().any(|t| t.feature_dim != dim) {
            return Err(Error::Config("all tasks must share one feature_dim".into()));
        }
        self.architecture().validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.tasks[0].feature_dim, self.layer_widths.clone())
    }
}

/// Shared-trunk network trained on each task in turn with no protection.
#[derive(Debug, Clone)]
pub struct FinetuneBaseline {
    pub net: PlainNetwork,
}

impl FinetuneBaseline {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        Ok(FinetuneBaseline {
            net: PlainNetwork::init(arch, &mut seeded_rng(seed, STREAM_BASELINE))?,
        })
    }

    /// Trains for as many epochs as the gated student sees in total.
    pub fn train_task(&mut self, task: &TaskData, cfg: &TrainConfig) -> Result<()> {
        let t = task.task_id;
        let stream = STREAM_BASELINE + ((t as u64 + 1) << 16);
        let head = init_head(&self.net.arch, task.class_ids.len(), &mut seeded_rng(cfg.seed, stream));
        self.net.heads.insert(t, head);
        let epochs = cfg.epochs_student + cfg.epochs_finetune;
        train_plain(&mut self.net, t, &task.train, epochs, cfg, &mut seeded_rng(cfg.seed, stream + 1))
    }

    pub fn accuracy(&self, task: &TaskData) -> Result<f64> {
        let (_, logits) = self.net.forward(&task.val.inputs, Some(task.task_id))?;
        Ok(accuracy(&logits.ok_or(Error::MissingHead(task.task_id))?, &task.val.labels))
    }
}

pub fn engine_accuracy(engine: &Engine, task: &TaskData) -> Result<f64> {
    let logits = engine.infer(task.task_id, &task.val.inputs)?;
    Ok(accuracy(&logits, &task.val.labels))
}

/// Everything a run produces, before anything is written to disk.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskData>,
    pub engine: Engine,
    pub outcomes: Vec<TaskOutcome>,
    pub accuracy: AccuracyMatrix,
    pub baseline: Option<AccuracyMatrix>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let tasks = generate_tasks(&config.tasks, config.seed)?;
    let arch = config.architecture();
    let mut engine = Engine::new(arch.clone(), config.seed)?;
    let mut outcomes = Vec::with_capacity(tasks.len());
    let mut acc = AccuracyMatrix::new();
    for (t, task) in tasks.iter().enumerate() {
        outcomes.push(engine.train_task(task, &config.train)?);
        acc.task_ids.push(task.task_id);
        acc.rows.push(
            tasks[..=t]
                .iter()
                .map(|prev| engine_accuracy(&engine, prev))
                .collect::<Result<_>>()?,
        );
    }
    let baseline = if config.baseline {
        let mut b = FinetuneBaseline::new(arch, config.seed)?;
        let mut m = AccuracyMatrix::new();
        for (t, task) in tasks.iter().enumerate() {
            b.train_task(task, &config.train)?;
            m.task_ids.push(task.task_id);
            m.rows.push(tasks[..=t].iter().map(|prev| b.accuracy(prev)).collect::<Result<_>>()?);
        }
        Some(m)
    } else {
        None
    };
    Ok(RunResult {
        config: config.clone(),
        tasks,
        engine,
        outcomes,
        accuracy: acc,
        baseline,
    })
}

pub const METHOD_GATED: &str = "rosetta";
pub const METHOD_BASELINE: &str = "finetune";

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
struct MetricRow {
    method: String,
    after_task: u32,
    eval_task: u32,
    accuracy: f64,
}

pub fn metrics_csv(methods: &[(&str, &AccuracyMatrix)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (method, m) in methods {
        for (t, row) in m.rows.iter().enumerate() {
            for (i, &a) in row.iter().enumerate() {
                w.serialize(MetricRow {
                    method: method.to_string(),
                    after_task: m.task_ids[t],
                    eval_task: m.task_ids[i],
                    accuracy: a,
                })?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
}

/// Accuracy matrices per method, in first-appearance order.
pub fn read_metrics(path: &Path) -> Result<Vec<(String, AccuracyMatrix)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<(String, AccuracyMatrix)> = Vec::new();
    for row in rdr.deserialize::<MetricRow>() {
        let row = row?;
        let idx = match out.iter().position(|(m, _)| *m == row.method) {
            Some(i) => i,
            None => {
                out.push((row.method.clone(), AccuracyMatrix::new()));
                out.len() - 1
            }
        };
        let m = &mut out[idx].1;
        let after = match m.task_ids.iter().position(|&t| t == row.after_task) {
            Some(p) => p,
            None => {
                m.task_ids.push(row.after_task);
                m.rows.push(Vec::new());
                m.task_ids.len() - 1
            }
        };
        let expected = m.rows[after].len();
        if m.task_ids.get(expected) != Some(&row.eval_task) {
            return Err(Error::Malformed(format!(
                "metrics row ({}, after {}, eval {}) is out of order",
                row.method, row.after_task, row.eval_task
            )));
        }
        m.rows[after].push(row.accuracy);
    }
    Ok(out)
}

pub fn forgetting_csv(reports: &[(&str, &ForgettingReport)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "task", "forgetting"])?;
    for (method, r) in reports {
        for (task, f) in &r.entries {
            w.write_record([method.to_string(), task.to_string(), f.to_string()])?;
        }
        if let Some(mean) = r.mean {
            w.write_record([method.to_string(), "mean".into(), mean.to_string()])?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
}

/// `label,x0,...` with global class ids as labels.
pub fn split_csv(split: &Split, class_ids: &[u32]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = split.inputs.cols();
    let mut header = vec!["label".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, &y) in split.labels.iter().enumerate() {
        let mut rec = vec![class_ids[y].to_string()];
        rec.extend(split.inputs.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))
}

/// Reads a labelled sample file, mapping global labels onto `class_ids`.
pub fn read_split_csv(path: &Path, class_ids: &[u32]) -> Result<Split> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Malformed(format!("{}: line {}: bad {what}", path.display(), n + 2));
        let label: u32 = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| parse_err("label"))?;
        let local = class_ids.iter().position(|&c| c == label).ok_or_else(|| {
            Error::InvalidArgument(format!("label {label} is not a class of this task"))
        })?;
        let x = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(x);
        labels.push(local);
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no samples", path.display())));
    }
    Split::new(Tensor::from_rows(&rows)?, labels)
}

pub fn val_file_name(task_id: u32) -> String {
    format!("task{task_id}_val.csv")
}

fn summary_text(run: &RunResult) -> String {
    let mut out = String::new();
    let arch = &run.engine.net.arch;
    let _ = writeln!(out, "architecture: {arch}");
    let _ = writeln!(out, "seed: {}", run.config.seed);
    let total = arch.total_channels();
    for (o, task) in run.outcomes.iter().zip(&run.tasks) {
        let r = &o.record;
        let phis: Vec<String> = r.phis.iter().map(|p| format!("{p:.6}")).collect();
        let _ = writeln!(
            out,
            "task {}: classes {:?} active {:?} ({:.1}%) newly frozen {} phi [{}] val acc {:.4}",
            r.task_id,
            r.class_ids,
            r.gates.active_counts(),
            100.0 * r.gates.active_fraction(),
            o.newly_frozen,
            phis.join(", "),
            engine_accuracy(&run.engine, task).unwrap_or(f64::NAN),
        );
    }
    let _ = writeln!(out, "frozen channels: {} of {total}", run.engine.net.frozen_count());
    out
}

/// Runs the configured sequence and writes the bank, trunk checkpoint,
/// metrics, forgetting report, validation data and a summary into `out`.
pub fn run_sequence(config: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    let run = run_experiment(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let file = |name: &str| -> PathBuf { out.join(name) };

    run.engine.bank.save(&file(BANK_FILE))?;
    network_checkpoint(&run.engine.net).save(&file(NETWORK_FILE))?;

    let mut methods: Vec<(&str, &AccuracyMatrix)> = vec![(METHOD_GATED, &run.accuracy)];
    if let Some(b) = &run.baseline {
        methods.push((METHOD_BASELINE, b));
    }
    write_atomic(&file(METRICS_FILE), &metrics_csv(&methods)?)?;
    let reports: Vec<(&str, ForgettingReport)> = methods
        .iter()
        .map(|(m, a)| Ok((*m, forgetting_report(a)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(&str, &ForgettingReport)> = reports.iter().map(|(m, r)| (*m, r)).collect();
    write_atomic(&file(FORGETTING_FILE), &forgetting_csv(&refs)?)?;

    for task in &run.tasks {
        write_atomic(&file(&val_file_name(task.task_id)), &split_csv(&task.val, &task.class_ids)?)?;
    }
    write_atomic(&file(SUMMARY_FILE), summary_text(&run).as_bytes())?;
    Ok(run)
}

pub fn network_checkpoint(net: &GatedNetwork) -> NetworkCheckpoint {
    NetworkCheckpoint {
        arch: net.arch.clone(),
        layers: net.layers.clone(),
        freeze_mask: net.freeze_mask.clone(),
    }
}

/// Trunk plus bank, ready for inference.
pub fn load_engine(bank_path: &Path, net_path: &Path) -> Result<Engine> {
    let bank = MemoryBank::load(bank_path)?;
    let ck = NetworkCheckpoint::load(net_path)?;
    let net = GatedNetwork {
        arch: ck.arch,
        layers: ck.layers,
        freeze_mask: ck.freeze_mask,
        heads: Default::default(),
    };
    Engine::from_parts(net, bank)
}

/// Classes shared by two tasks.
pub fn shared_classes(a: &[u32], b: &[u32]) -> Vec<u32> {
    let sb: BTreeSet<_> = b.iter().collect();
    a.iter().copied().filter(|c| sb.contains(c)).collect()
}
