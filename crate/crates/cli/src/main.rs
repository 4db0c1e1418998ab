use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use groupgrad_core::harness::{self, verify, ExperimentConfig, ScenarioKind};
use groupgrad_core::Error;

#[derive(Parser)]
#[command(name = "groupgrad", version, about = "Group-relative policy-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write `<name>.csv` and `<name>.summary.json`.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's `out`, then `.`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config once per value of one field.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        field: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs under a shared budget and write a comparison report.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the available scenarios.
    ListScenarios,
}

fn load(path: &Path, seed: Option<u64>) -> groupgrad_core::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_path(path)?;
    match seed {
        Some(s) => cfg.with_override("seed", &s.to_string()),
        None => Ok(cfg),
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn execute(cli: Cli) -> groupgrad_core::Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let record = harness::run_experiment(&cfg)?;
            let (csv, json) = harness::write_outputs(&record, &out_dir(out, &cfg))?;
            println!("{} rows -> {}", record.rows.len(), csv.display());
            println!("summary -> {}", json.display());
        }
        Command::Sweep {
            config,
            field,
            values,
            seed,
            out,
        } => {
            let base = load(&config, seed)?;
            let dir = out_dir(out, &base);
            let mut summaries = Vec::new();
            for value in &values {
                let mut cfg = base.with_override(&field, value)?;
                cfg.name = format!("{}_{}_{}", base.name, sanitize(&field), sanitize(value));
                let record = harness::run_experiment(&cfg)?;
                let (csv, _) = harness::write_outputs(&record, &dir)?;
                println!("{field} = {value}: {} rows -> {}", record.rows.len(), csv.display());
                summaries.push(harness::summary_json(&record));
            }
            let path = dir.join(format!("{}_sweep_{}.json", base.name, sanitize(&field)));
            let report = serde_json::json!({ "field": field, "values": values, "runs": summaries });
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("sweep -> {}", path.display());
        }
        Command::Compare { configs, out } => {
            let cfgs = configs
                .iter()
                .map(|p| load(p, None))
                .collect::<groupgrad_core::Result<Vec<_>>>()?;
            let report = harness::run_compute_matched(&cfgs)?;
            let dir = out_dir(out, &cfgs[0]);
            std::fs::create_dir_all(&dir)?;
            for record in &report.records {
                harness::write_outputs(record, &dir)?;
            }
            for e in &report.entries {
                println!(
                    "{:<24} {:<32} tokens {:>6}  jitter2 {:>10}  entropy {:>8}",
                    e.name,
                    e.estimator,
                    e.sampled_tokens,
                    e.jitter2_ref_reward.map_or("-".into(), |x| format!("{x:.3e}")),
                    e.final_entropy.map_or("-".into(), |x| format!("{x:.4}")),
                );
            }
            let path = dir.join("comparison.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
            println!("comparison -> {}", path.display());
        }
        Command::Verify { seed } => {
            let results = verify::run_checks(seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                println!("{failed} of {} checks failed", results.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::ListScenarios => {
            for s in ScenarioKind::ALL {
                println!("{:<16} {}", s.name(), s.description());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
