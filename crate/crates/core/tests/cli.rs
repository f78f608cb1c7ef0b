use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rosetta_core::harness::{read_metrics, val_file_name, BANK_FILE, METRICS_FILE};

const CONFIG: &str = r#"
seed = 5
layer_widths = [16, 16]
epochs_teacher = 3
epochs_student = 3
baseline = true

[[tasks]]
num_classes = 3
samples_per_class = 30
feature_dim = 4
seed = 1

[[tasks]]
num_classes = 3
samples_per_class = 30
feature_dim = 4
shift = 4.0
class_overlap = 1
seed = 2
"#;

fn rosetta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rosetta")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8(bytes.to_vec()).unwrap()
}

fn train(dir: &Path) -> std::path::PathBuf {
    let config = dir.join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    let out = dir.join("out");
    let o = rosetta(&["train-sequence", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out
}

/// Asserts a failed run printed exactly one `error: kind=<kind> msg="..."` line.
fn assert_error(o: &Output, kind: &str) {
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    let err = text(&o.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let prefix = format!("error: kind={kind} msg=\"");
    assert!(lines[0].starts_with(&prefix) && lines[0].ends_with('"'), "{err}");
}

#[test]
fn subcommands_work_on_a_trained_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path());
    let bank = out.join(BANK_FILE);
    let bank = bank.to_str().unwrap();

    let metrics = read_metrics(&out.join(METRICS_FILE)).unwrap();
    let (method, gated) = &metrics[0];
    assert_eq!(method, "rosetta");
    for task in [1u32, 2] {
        let data = out.join(val_file_name(task));
        let o = rosetta(&["eval", "--bank", bank, "--task", &task.to_string(), "--data", data.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        let line = text(&o.stdout);
        let acc: f64 = line.trim().rsplit('=').next().unwrap().parse().unwrap();
        assert_eq!(acc, gated.get(1, task as usize - 1), "{line}");
    }

    let o = rosetta(&["gate-stats", "--bank", bank, "--a", "1", "--b", "2"]);
    assert!(o.status.success());
    let table = text(&o.stdout);
    assert!(table.contains("only 1") && table.contains("not used"), "{table}");

    let o = rosetta(&["correlation-dump", "--bank", bank, "--a", "1", "--b", "2"]);
    assert!(o.status.success());
    let dump = text(&o.stdout);
    let phi: f64 = dump.lines().last().unwrap().trim_start_matches("phi = ").parse().unwrap();
    assert!((0.0..=1.0).contains(&phi), "{dump}");

    let o = rosetta(&["forgetting", "--metrics", out.join(METRICS_FILE).to_str().unwrap()]);
    assert!(o.status.success());
    let csv = text(&o.stdout);
    assert_eq!(csv.lines().next(), Some("method,task,forgetting"));
    for line in csv.lines().filter(|l| l.starts_with("rosetta,")) {
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0, "{csv}");
    }
}

#[test]
fn failures_print_one_parseable_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.rsb");
    assert_error(
        &rosetta(&["gate-stats", "--bank", missing.to_str().unwrap(), "--a", "1", "--b", "2"]),
        "io",
    );

    let config = dir.path().join("bad.toml");
    let bad = "seed = 1\nwidth = 3\n[[tasks]]\nnum_classes = 2\nsamples_per_class = 4\nfeature_dim = 2\nseed = 1\n";
    fs::write(&config, bad).unwrap();
    assert_error(
        &rosetta(&["train-sequence", "--config", config.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]),
        "unknown_config_keys",
    );

    let garbage = dir.path().join("garbage.rsb");
    fs::write(&garbage, b"NOTABANKFILE").unwrap();
    assert_error(
        &rosetta(&["correlation-dump", "--bank", garbage.to_str().unwrap(), "--a", "1", "--b", "1"]),
        "bad_magic",
    );
}

#[test]
fn unknown_task_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path());
    let bank = out.join(BANK_FILE);
    assert_error(&rosetta(&["gate-stats", "--bank", bank.to_str().unwrap(), "--a", "1", "--b", "9"]), "unknown_task");
}
