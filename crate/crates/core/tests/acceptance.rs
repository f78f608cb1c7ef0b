//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use rosetta_core::correlation::{
    class_to_class, class_to_task, gdc_weight, task_to_task, Prototype,
};
use rosetta_core::diffcore::{grad_check, Graph, NodeId, ParamSet, Tensor};
use rosetta_core::gatednet::{
    network_forward, seeded_rng, Architecture, ClassEmbeddingTable, GateModule, GatedNetwork,
    Gating, Linear,
};
use rosetta_core::harness::{
    forgetting_report, gate_stats, load_engine, run_experiment, run_sequence, ExperimentConfig,
    TaskSpec, BANK_FILE, NETWORK_FILE,
};
use rosetta_core::lifecycle::TrainConfig;
use rosetta_core::losses::{
    kd_loss, layer_diversity_loss, sparsity_loss, activation_ratio, kd_loss_node,
    sparsity_loss_node, total_objective_node, weighted_diversity_loss, weighted_diversity_node,
    LayerGateBatch, LossWeights,
};
use rosetta_core::membank::MemoryBank;
use rosetta_core::Error;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn budget(name: &str, elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(
        elapsed < limit,
        format!("{name} took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn task(num_classes: usize, shift: f64, overlap: usize, seed: u64) -> TaskSpec {
    TaskSpec {
        num_classes,
        samples_per_class: 200,
        feature_dim: 16,
        shift,
        class_overlap: overlap,
        seed,
    }
}

fn experiment(seed: u64, train: TrainConfig, baseline: bool, tasks: Vec<TaskSpec>) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        layer_widths: vec![64, 64, 64],
        train: TrainConfig { seed, ..train },
        baseline,
        tasks,
    }
}

// ---------------------------------------------------------------------------
// zero forgetting

fn zero_forgetting() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = experiment(
        11,
        TrainConfig::default(),
        false,
        vec![task(5, 0.1, 0, 1), task(5, 2.0, 2, 2), task(5, 5.0, 2, 3)],
    );
    let run = run_sequence(&cfg, dir.path()).map_err(|e| e.to_string())?;
    let engine = load_engine(&dir.path().join(BANK_FILE), &dir.path().join(NETWORK_FILE))
        .map_err(|e| e.to_string())?;
    let mut probes = 0;
    for r in engine.bank.records() {
        let replay = engine.infer(r.task_id, &r.probe_inputs).map_err(|e| e.to_string())?;
        let same = replay.shape() == r.probe_logits.shape()
            && replay
                .data()
                .iter()
                .zip(r.probe_logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        check(same, format!("task {} probe logits differ on replay", r.task_id))?;
        probes += r.probe_inputs.rows();
    }
    let report = forgetting_report(&run.accuracy).map_err(|e| e.to_string())?;
    check(report.entries.len() == 2, "expected two forgetting entries".into())?;
    for (t, f) in &report.entries {
        check(*f == 0.0, format!("task {t} forgetting {f}"))?;
    }
    budget("zero forgetting", start.elapsed(), Duration::from_secs(180))?;
    Ok(format!(
        "{probes} probe logits replay bit-exactly from disk; forgetting {:?}; {:.1}s",
        report.entries,
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// baseline contrast

fn contrast_config(seed: u64) -> ExperimentConfig {
    let train = TrainConfig {
        epochs_teacher: 40,
        epochs_student: 40,
        epochs_finetune: 2,
        learning_rate: 0.3,
        batch_size: 16,
        ..TrainConfig::default()
    };
    experiment(seed, train, true, vec![task(5, 0.0, 0, 100 + seed), task(5, 5.0, 0, 200 + seed)])
}

fn baseline_contrast() -> Outcome {
    let start = Instant::now();
    let mut drops = Vec::new();
    for seed in 0..5 {
        let run = run_experiment(&contrast_config(seed)).map_err(|e| e.to_string())?;
        let gated = run.accuracy.get(0, 0) - run.accuracy.get(1, 0);
        check(gated == 0.0, format!("seed {seed}: gated run lost {gated} on task 1"))?;
        let b = run.baseline.as_ref().ok_or("baseline missing")?;
        drops.push(b.get(0, 0) - b.get(1, 0));
    }
    let worst = drops.iter().copied().fold(f64::INFINITY, f64::min);
    check(worst >= 0.20, format!("baseline drop {worst:.3} < 0.20 on some seed ({drops:?})"))?;
    budget("baseline contrast", start.elapsed(), Duration::from_secs(300))?;
    let pts: Vec<String> = drops.iter().map(|d| format!("{:.1}", 100.0 * d)).collect();
    Ok(format!(
        "gated drop 0 on all seeds; baseline drop at least {:.1} points on every seed ({}); {:.1}s",
        100.0 * worst,
        pts.join(", "),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------
// closed-form oracles

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s / a.len() as f64
}

fn ratio_oracle(g: &[f64], eta: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &v in g {
        den += v;
        if v >= eta {
            num += v;
        }
    }
    if den < 1e-12 {
        0.0
    } else {
        num / den
    }
}

fn entropy_oracle(q: f64) -> f64 {
    q * q.max(1e-12).ln() + (1.0 - q) * (1.0 - q).max(1e-12).ln()
}

struct RandomGates {
    batch: LayerGateBatch,
    // gates[l][n][c]
    rows: Vec<Vec<Vec<f64>>>,
}

fn random_gates(rng: &mut ChaCha8Rng) -> RandomGates {
    let layers = rng.random_range(1..4);
    let n = rng.random_range(1..6);
    let mut rows = Vec::new();
    let mut tensors = Vec::new();
    let mut reserved = Vec::new();
    for _ in 0..layers {
        let c = rng.random_range(1..7);
        let r: Vec<Vec<f64>> = (0..n).map(|_| uniform(rng, c, 0.0, 1.0)).collect();
        tensors.push(Tensor::from_rows(&r).unwrap());
        rows.push(r);
        reserved.push((0..c).map(|_| rng.random_bool(0.6)).collect());
    }
    RandomGates {
        batch: LayerGateBatch {
            gates: tensors,
            reserved,
        },
        rows,
    }
}

fn random_protos(rng: &mut ChaCha8Rng, k: usize, d: usize, first_id: u32) -> Vec<Prototype> {
    (0..k)
        .map(|i| Prototype {
            class_id: first_id + i as u32,
            vector: uniform(rng, d, -3.0, 3.0),
        })
        .collect()
}

fn c2c_oracle(a: &[Prototype], b: &[Prototype]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|pa| b.iter().map(|pb| mse_oracle(&pa.vector, &pb.vector)).collect())
        .collect()
}

fn class_to_task_oracle(m: &[Vec<f64>], j: usize, same: bool) -> f64 {
    let mut best = f64::INFINITY;
    for (i, row) in m.iter().enumerate() {
        if same && i == j {
            continue;
        }
        if row[j] < best {
            best = row[j];
        }
    }
    best
}

fn task_to_task_oracle(pn: &[Prototype], pm: &[Prototype], same: bool) -> f64 {
    let m = c2c_oracle(pm, pn);
    let mut s = 0.0;
    for j in 0..pn.len() {
        s += class_to_task_oracle(&m, j, same);
    }
    s / pn.len() as f64
}

fn gdc_oracle(r_nm: f64, r_mm: f64) -> f64 {
    if r_nm < 1e-12 {
        return 0.0;
    }
    let v = (r_nm - r_mm) / r_nm;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn formula_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(2024, 0);
    let trials = 200;
    let mut worst = [0.0f64; 9];
    let names = [
        "sparsity",
        "distillation",
        "entropy",
        "activation ratio",
        "class-to-class",
        "class-to-task",
        "task-to-task",
        "controller weight",
        "weighted diversity",
    ];
    let mut note = |k: usize, a: f64, b: f64| worst[k] = worst[k].max((a - b).abs());

    for _ in 0..trials {
        let rg = random_gates(&mut rng);
        let l = rg.rows.len() as f64;

        // sparsity: E_n [ 1/L sum_l |g_l|_1 / c_l ]
        let n = rg.rows[0].len();
        let mut s = 0.0;
        for i in 0..n {
            let mut per = 0.0;
            for layer in &rg.rows {
                per += layer[i].iter().sum::<f64>() / layer[i].len() as f64;
            }
            s += per / l;
        }
        note(0, sparsity_loss(&rg.batch).unwrap(), s / n as f64);

        // distillation
        let student: Vec<Tensor> = rg.batch.gates.to_vec();
        let teacher: Vec<Tensor> = student
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), uniform(&mut rng, t.len(), -2.0, 2.0)).unwrap())
            .collect();
        let mut kd = 0.0;
        for (a, b) in student.iter().zip(&teacher) {
            kd += mse_oracle(a.data(), b.data());
        }
        note(1, kd_loss(&student, &teacher).unwrap(), kd / l);

        // entropy of a ratio
        let q: f64 = rng.random_range(0.0..1.0);
        note(2, layer_diversity_loss(q).unwrap(), entropy_oracle(q));

        // activation ratio
        let eta: f64 = rng.random_range(0.05..0.95);
        let len = rng.random_range(1..10);
        let g = uniform(&mut rng, len, 0.0, 1.0);
        note(3, activation_ratio(&g, eta).unwrap(), ratio_oracle(&g, eta));

        // correlation chain
        let d = rng.random_range(1..8);
        let (km, kn) = (rng.random_range(2..6), rng.random_range(1..6));
        let pm = random_protos(&mut rng, km, d, 0);
        let pn = random_protos(&mut rng, kn, d, 100);
        let m = class_to_class(&pm, &pn).unwrap();
        let mo = c2c_oracle(&pm, &pn);
        for (r, ro) in m.entries.iter().zip(&mo) {
            for (a, b) in r.iter().zip(ro) {
                note(4, *a, *b);
            }
        }
        let j = rng.random_range(0..pn.len());
        note(5, class_to_task(j, &m, false).unwrap(), class_to_task_oracle(&mo, j, false));
        let mm = class_to_class(&pm, &pm).unwrap();
        let jm = rng.random_range(0..pm.len());
        note(5, class_to_task(jm, &mm, true).unwrap(), class_to_task_oracle(&c2c_oracle(&pm, &pm), jm, true));
        let r_nm = task_to_task(&pn, &pm, false).unwrap();
        let r_mm = task_to_task(&pm, &pm, true).unwrap();
        note(6, r_nm, task_to_task_oracle(&pn, &pm, false));
        note(6, r_mm, task_to_task_oracle(&pm, &pm, true));
        note(7, gdc_weight(r_nm, r_mm).unwrap(), gdc_oracle(r_nm, r_mm));

        // weighted diversity: 1/L 1/(t-1) sum_l sum_i phi_i E_n[H(q_l,n)]
        let tasks_before = rng.random_range(1..4);
        let phis = uniform(&mut rng, tasks_before, 0.0, 1.0);
        let eta = 0.5;
        let mut total = 0.0;
        for (layer, mask) in rg.rows.iter().zip(&rg.batch.reserved) {
            if !mask.iter().any(|&r| r) {
                continue;
            }
            let mut h = 0.0;
            for sample in layer {
                let reserved: Vec<f64> = sample
                    .iter()
                    .zip(mask)
                    .filter(|(_, &r)| r)
                    .map(|(&v, _)| v)
                    .collect();
                h += entropy_oracle(ratio_oracle(&reserved, eta));
            }
            h /= layer.len() as f64;
            for phi in &phis {
                total += phi * h;
            }
        }
        let oracle = total / (l * phis.len() as f64);
        note(8, weighted_diversity_loss(&rg.batch, &phis, eta).unwrap(), oracle);
    }
    let failing: Vec<String> = names
        .iter()
        .zip(&worst)
        .filter(|(_, &w)| w > 1e-12 || w.is_nan())
        .map(|(n, w)| format!("{n} err {w:e}"))
        .collect();
    check(failing.is_empty(), failing.join("; "))?;
    budget("oracles", start.elapsed(), Duration::from_secs(30))?;
    let max = worst.iter().cloned().fold(0.0, f64::max);
    Ok(format!("9 formulas x {trials} random inputs, max abs error {max:e}"))
}

// ---------------------------------------------------------------------------
// gradient suite

fn toy_arch() -> Architecture {
    Architecture {
        input_dim: 3,
        widths: vec![4, 3],
        embed_dim: 3,
        task_dim: 3,
        gate_hidden: 4,
    }
}

fn linear_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.weight"), format!("{prefix}.bias")]
}

fn put(ps: &mut ParamSet, prefix: &str, l: &Linear) {
    let [w, b] = linear_names(prefix);
    ps.insert(w, l.weight.clone());
    ps.insert(b, l.bias.clone());
}

fn take(ps: &ParamSet, prefix: &str) -> Linear {
    let [w, b] = linear_names(prefix);
    Linear {
        weight: ps[&w].clone(),
        bias: ps[&b].clone(),
    }
}

fn to_params(net: &GatedNetwork, gate: &GateModule, head: u32) -> ParamSet {
    let mut ps = ParamSet::new();
    for (l, layer) in net.layers.iter().enumerate() {
        put(&mut ps, &format!("layer{l}"), layer);
    }
    put(&mut ps, &format!("head{head}"), &net.heads[&head]);
    put(&mut ps, "gate.class_fc", &gate.class_fc);
    for (l, m) in gate.mlps.iter().enumerate() {
        put(&mut ps, &format!("gate.mlp{l}.hidden"), &m.hidden);
        put(&mut ps, &format!("gate.mlp{l}.out"), &m.out);
    }
    ps
}

fn from_params(ps: &ParamSet, net: &mut GatedNetwork, gate: &mut GateModule, head: u32) {
    for l in 0..net.layers.len() {
        net.layers[l] = take(ps, &format!("layer{l}"));
    }
    net.heads.insert(head, take(ps, &format!("head{head}")));
    gate.class_fc = take(ps, "gate.class_fc");
    for l in 0..gate.mlps.len() {
        gate.mlps[l].hidden = take(ps, &format!("gate.mlp{l}.hidden"));
        gate.mlps[l].out = take(ps, &format!("gate.mlp{l}.out"));
    }
}

struct ToyProblem {
    net: GatedNetwork,
    gate: GateModule,
    inputs: Tensor,
    labels: Vec<usize>,
    teacher: Vec<Tensor>,
    reserved: Vec<Vec<bool>>,
    phis: Vec<f64>,
    weights: LossWeights,
}

const HEAD: u32 = 2;

impl ToyProblem {
    fn new(seed: u64) -> Self {
        let arch = toy_arch();
        let mut rng = seeded_rng(seed, 7);
        let mut net = GatedNetwork::init(arch.clone(), &mut rng).unwrap();
        net.heads.insert(HEAD, Linear::random(&mut rng, 3, 2, 0.5, 0.1));
        // Positive biases keep most units away from the relu kink.
        for layer in &mut net.layers {
            for b in layer.bias.data_mut() {
                *b = 0.3;
            }
        }
        let gate = GateModule::init(&arch, &mut rng);
        let n = 6;
        let inputs = Tensor::matrix(n, 3, uniform(&mut rng, n * 3, -1.0, 1.0)).unwrap();
        let labels = (0..n).map(|i| i % 2).collect();
        let teacher = arch
            .widths
            .iter()
            .map(|&w| Tensor::matrix(n, w, uniform(&mut rng, n * w, 0.0, 1.0)).unwrap())
            .collect();
        ToyProblem {
            net,
            gate,
            inputs,
            labels,
            teacher,
            reserved: vec![vec![true, false, true, true], vec![true, true, false]],
            phis: vec![0.7, 0.4],
            weights: LossWeights {
                lambda_sparsity: 0.5,
                lambda_kd: 1.0,
                lambda_diversity: 1.0,
                eta: 0.5,
            },
        }
    }

    fn build(&self, ps: &ParamSet) -> rosetta_core::Result<(Graph, NodeId, Vec<NodeId>)> {
        let mut net = self.net.clone();
        let mut gate = self.gate.clone();
        from_params(ps, &mut net, &mut gate, HEAD);
        let classes = ClassEmbeddingTable {
            dim: 3,
            ..ClassEmbeddingTable::default()
        }
        .for_task(HEAD, &[4, 9])?;
        let mut g = Graph::new();
        let bn = net.bind(&mut g, Some(HEAD))?;
        let bg = gate.bind(&mut g)?;
        let e = bg.task_embedding(&mut g, &classes)?;
        let x = g.input(self.inputs.clone());
        let out = network_forward(
            &mut g,
            &bn,
            x,
            Gating::Soft {
                module: &bg,
                task_embedding: e,
            },
        )?;
        let ce = g.softmax_cross_entropy(out.logits.unwrap(), &self.labels)?;
        let sp = sparsity_loss_node(&mut g, &out.soft_gates)?;
        let t: Vec<_> = self.teacher.iter().map(|t| g.input(t.clone())).collect();
        let kd = kd_loss_node(&mut g, &out.features, &t)?;
        let div = weighted_diversity_node(&mut g, &out.soft_gates, &self.reserved, &self.phis, self.weights.eta)?;
        let total = total_objective_node(&mut g, ce, sp, kd, Some(div), &self.weights)?;
        Ok((g, total, out.soft_gates))
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let toy = ToyProblem::new(seed);
        let params = to_params(&toy.net, &toy.gate, HEAD);
        // The activation indicator must not flip under a perturbation of h.
        let (g, _, gates) = toy.build(&params).map_err(|e| e.to_string())?;
        let margin = gates
            .iter()
            .flat_map(|&n| g.value(n).data().to_vec())
            .map(|v| (v - toy.weights.eta).abs())
            .fold(f64::INFINITY, f64::min);
        check(margin > 1e-4, format!("seed {seed}: gate within {margin:e} of eta"))?;
        let report = grad_check(&params, |ps| toy.build(ps).map(|(g, l, _)| (g, l)), 1e-6, 1e-4)
            .map_err(|e| e.to_string())?;
        for p in &report.params {
            check(p.passed, format!("seed {seed}: {} rel error {:e}", p.name, p.max_rel_error))?;
        }
        worst = worst.max(report.worst());
        checked += report.params.len();
    }
    budget("gradient suite", start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{checked} parameter tensors over 3 seeds, worst relative error {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// controller directionality and sparsity direction

fn two_task(seed: u64, shift: f64, lambda_sparsity: f64) -> ExperimentConfig {
    let mut train = TrainConfig::default();
    train.weights.lambda_sparsity = lambda_sparsity;
    experiment(seed, train, false, vec![task(5, 0.0, 0, 100 + seed), task(5, shift, 5, 200 + seed)])
}

fn gdc_directionality() -> Outcome {
    let start = Instant::now();
    let mut phi = [0.0; 2];
    let mut only_b = [0.0; 2];
    for (k, shift) in [0.1, 5.0].into_iter().enumerate() {
        for seed in 0..5 {
            let run = run_experiment(&two_task(seed, shift, 0.5)).map_err(|e| e.to_string())?;
            phi[k] += run.outcomes[1].record.phis[0] / 5.0;
            let s = gate_stats(&run.engine.bank, 1, 2).map_err(|e| e.to_string())?;
            only_b[k] += s.aggregate.only_b / 5.0;
        }
    }
    let msg = format!(
        "mean phi {:.4} -> {:.4}, mean only-task-2 fraction {:.4} -> {:.4} (shift 0.1 -> 5.0)",
        phi[0], phi[1], only_b[0], only_b[1]
    );
    check(phi[1] > phi[0] && only_b[1] > only_b[0], msg.clone())?;
    budget("controller directionality", start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("{msg}; {:.1}s", start.elapsed().as_secs_f64()))
}

fn sparsity_direction() -> Outcome {
    let start = Instant::now();
    let mut frac = [0.0; 2];
    for (k, ls) in [0.0, 0.5].into_iter().enumerate() {
        for seed in 0..5 {
            let run = run_experiment(&two_task(seed, 5.0, ls)).map_err(|e| e.to_string())?;
            let per_task: f64 = run
                .outcomes
                .iter()
                .map(|o| o.record.gates.active_fraction())
                .sum::<f64>()
                / run.outcomes.len() as f64;
            frac[k] += per_task / 5.0;
        }
    }
    let msg = format!(
        "mean activated fraction {:.4} without sparsity, {:.4} with",
        frac[0], frac[1]
    );
    check(frac[1] < frac[0], msg.clone())?;
    Ok(format!("{msg}; {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// controller range

fn controller_range() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let value = prop_oneof![
        1 => Just(0.0),
        1 => 0.0..1e-10f64,
        6 => 0.0..100.0f64,
        2 => 0.0..1e6f64,
    ];
    let strategy = prop_oneof![
        4 => (value.clone(), value.clone()),
        1 => value.prop_map(|v| (v, v)),
    ];
    runner
        .run(&strategy, |(r_nm, r_mm)| {
            let phi = gdc_weight(r_nm, r_mm).unwrap();
            prop_assert!((0.0..=1.0).contains(&phi), "phi {} out of range", phi);
            if r_nm <= r_mm {
                prop_assert_eq!(phi, 0.0);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("10000 random pairs: phi in [0, 1], zero whenever R_nm <= R_mm".into())
}

// ---------------------------------------------------------------------------
// persistence

fn small_bank() -> Result<MemoryBank, String> {
    let mut cfg = two_task(3, 2.0, 0.5);
    cfg.layer_widths = vec![16, 16];
    for t in &mut cfg.tasks {
        t.samples_per_class = 40;
    }
    cfg.train.epochs_teacher = 2;
    cfg.train.epochs_student = 2;
    cfg.train.epochs_finetune = 1;
    Ok(run_experiment(&cfg).map_err(|e| e.to_string())?.engine.bank)
}

fn persistence() -> Outcome {
    let bank = small_bank()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("bank.rsb");
    bank.save(&path).map_err(|e| e.to_string())?;
    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = MemoryBank::load(&path).map_err(|e| e.to_string())?;
    check(loaded == bank, "loaded bank differs".into())?;
    let bits_equal = loaded.records().iter().zip(bank.records()).all(|(a, b)| {
        let pairs = [
            (&a.probe_logits, &b.probe_logits),
            (&a.head.weight, &b.head.weight),
            (&a.head.bias, &b.head.bias),
        ];
        pairs.iter().all(|(x, y)| {
            x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        }) && a.baseline.to_bits() == b.baseline.to_bits()
    });
    check(bits_equal, "float bits changed in roundtrip".into())?;
    check(loaded.encode() == bytes, "re-serialization is not byte-identical".into())?;

    let mut truncations = 0;
    for len in 8..bytes.len() {
        match MemoryBank::decode(&bytes[..len]) {
            Err(Error::Checksum(_)) => truncations += 1,
            other => return Err(format!("truncation to {len} bytes gave {other:?}")),
        }
    }
    // Flip one bit inside every record payload; the header region is skipped.
    let hdr_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12 + hdr_len + 4;
    let mut corruptions = 0;
    while pos < bytes.len() {
        let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        for offset in [0, len / 3, len / 2, len - 1] {
            let mut bad = bytes.clone();
            bad[pos + 8 + offset] ^= 0x10;
            match MemoryBank::decode(&bad) {
                Err(Error::Checksum(_)) => corruptions += 1,
                other => return Err(format!("payload corruption gave {other:?}")),
            }
        }
        pos += 8 + len + 4;
    }
    // An interrupted rewrite never reaches the rename; the committed file survives.
    fs::write(dir.path().join("bank.rsb.tmp"), &bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
    check(
        MemoryBank::load(&path).map_err(|e| e.to_string())? == bank,
        "committed bank damaged by partial write".into(),
    )?;
    Ok(format!(
        "roundtrip bit-exact, re-encode byte-identical, {truncations} truncations and {corruptions} corruptions detected"
    ))
}

// ---------------------------------------------------------------------------
// determinism

const DETERMINISM_CONFIG: &str = r#"
seed = 5
layer_widths = [32, 32]
epochs_teacher = 3
epochs_student = 3
epochs_finetune = 1
baseline = true

[[tasks]]
num_classes = 4
samples_per_class = 60
feature_dim = 8
shift = 0.0
seed = 1

[[tasks]]
num_classes = 4
samples_per_class = 60
feature_dim = 8
shift = 3.0
class_overlap = 2
seed = 2
"#;

fn dir_contents(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.map_err(|e| e.to_string())?;
            let bytes = fs::read(e.path()).map_err(|e| e.to_string())?;
            Ok((e.file_name().to_string_lossy().into_owned(), bytes))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    ExperimentConfig::parse(DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_rosetta"))
            .args(["train-sequence", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        check(
            status.status.success(),
            format!("train-sequence failed: {}", String::from_utf8_lossy(&status.stderr)),
        )?;
        outputs.push(dir_contents(&out)?);
    }
    check(outputs[0] == outputs[1], "reruns produced different files".into())?;
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    check(names.contains(&"bank.rsb") && names.contains(&"metrics.csv"), format!("missing outputs: {names:?}"))?;
    Ok(format!("{} output files byte-identical across reruns", names.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("zero forgetting", zero_forgetting),
        ("baseline contrast", baseline_contrast),
        ("formula oracles", formula_oracles),
        ("gradient suite", gradient_suite),
        ("controller directionality", gdc_directionality),
        ("sparsity direction", sparsity_direction),
        ("controller range", controller_range),
        ("persistence", persistence),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("[{}/9] PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{}/9] FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
