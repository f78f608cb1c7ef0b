use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rosetta_core::data::accuracy;
use rosetta_core::harness::{
    correlation_dump, format_correlation, format_gate_stats, forgetting_csv, forgetting_report,
    gate_stats, load_engine, read_metrics, read_split_csv, run_sequence, ExperimentConfig,
    ForgettingReport, NETWORK_FILE,
};
use rosetta_core::membank::MemoryBank;
use rosetta_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rosetta", version, about = "Task-incremental learning with frozen channel gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of a config in order and write the experiment directory.
    TrainSequence {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of one stored task on a labelled CSV file.
    Eval {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        data: PathBuf,
        /// Trunk checkpoint; defaults to network.bin next to the bank.
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Channel occupancy of two tasks.
    GateStats {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        a: u32,
        #[arg(long)]
        b: u32,
    },
    /// Prototype distance table between two tasks.
    CorrelationDump {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        a: u32,
        #[arg(long)]
        b: u32,
    },
    /// Forgetting per task from a metrics CSV.
    Forgetting {
        #[arg(long)]
        metrics: PathBuf,
    },
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::TrainSequence { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = run_sequence(&cfg, &out)?;
            let last = run.accuracy.rows.last().map(|r| r.len()).unwrap_or(0);
            Ok(format!(
                "trained {} tasks into {} ({} evaluations in the final row)\n",
                run.tasks.len(),
                out.display(),
                last
            ))
        }
        Command::Eval { bank, task, data, net } => {
            let net = net.unwrap_or_else(|| sibling(&bank, NETWORK_FILE));
            let engine = load_engine(&bank, &net)?;
            let record = engine.bank.get(task)?;
            let split = read_split_csv(&data, &record.class_ids)?;
            let logits = engine.infer(task, &split.inputs)?;
            Ok(format!(
                "task={task} samples={} accuracy={}\n",
                split.len(),
                accuracy(&logits, &split.labels)
            ))
        }
        Command::GateStats { bank, a, b } => {
            let bank = MemoryBank::load(&bank)?;
            Ok(format_gate_stats(&gate_stats(&bank, a, b)?))
        }
        Command::CorrelationDump { bank, a, b } => {
            let bank = MemoryBank::load(&bank)?;
            Ok(format_correlation(&correlation_dump(&bank, a, b)?))
        }
        Command::Forgetting { metrics } => {
            let methods = read_metrics(&metrics)?;
            let reports: Vec<(String, ForgettingReport)> = methods
                .iter()
                .map(|(m, a)| Ok((m.clone(), forgetting_report(a)?)))
                .collect::<Result<_>>()?;
            let refs: Vec<_> = reports.iter().map(|(m, r)| (m.as_str(), r)).collect();
            String::from_utf8(forgetting_csv(&refs)?)
                .map_err(|e| Error::Malformed(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error: kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
