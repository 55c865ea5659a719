use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mebn_core::ground::{build_ssbn, export_dot, prune_ssbn, GroundingLimits};
use mebn_core::infer::{brute_force_posterior, eliminate};

use mebn::app::{load_evidence, load_theory, parse_targets, validated, AppError};
use mebn::json;
use mebn::scenario::{discover, run_all, Status};

#[derive(Parser)]
#[command(name = "mebn", version, about = "Multi-entity Bayesian network engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a theory file; exit 2 if it is not a simple MTheory.
    Validate {
        theory: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print target posteriors as JSON.
    Query {
        #[command(flatten)]
        q: QueryArgs,
        /// Use brute-force enumeration instead of variable elimination.
        #[arg(long)]
        oracle: bool,
        /// Also write the pruned SSBN in Graphviz format.
        #[arg(long, value_name = "PATH")]
        dot: Option<PathBuf>,
    },
    /// Print the pruned SSBN as JSON.
    Ground {
        #[command(flatten)]
        q: QueryArgs,
        /// Write Graphviz to PATH instead of printing JSON.
        #[arg(long, value_name = "PATH")]
        dot: Option<PathBuf>,
    },
    /// Run every scenario in a corpus directory against its golden file.
    Corpus {
        #[arg(default_value = "crates/mebn/corpus/scenarios")]
        dir: PathBuf,
        /// Rewrite golden files from the enumeration oracle.
        #[arg(long)]
        regen: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct QueryArgs {
    theory: PathBuf,
    #[arg(long)]
    evidence: Option<PathBuf>,
    /// Target expression; repeat for several targets.
    #[arg(long = "target", required = true)]
    targets: Vec<String>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
}

impl QueryArgs {
    fn limits(&self) -> GroundingLimits {
        let mut l = GroundingLimits::default();
        if let Some(d) = self.max_depth {
            l.max_depth = d;
        }
        if let Some(n) = self.max_nodes {
            l.max_nodes = n;
        }
        l
    }

    fn ssbn(&self) -> Result<mebn_core::Ssbn, AppError> {
        let theory = load_theory(&self.theory)?;
        let v = validated(&theory)?;
        let evidence = load_evidence(self.evidence.as_deref(), &theory)?;
        let targets = parse_targets(&self.targets)?;
        Ok(prune_ssbn(&build_ssbn(&v, &evidence, &targets, self.limits())?))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), AppError> {
    std::fs::write(path, text).map_err(|source| AppError::Io { path: path.to_path_buf(), source })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode, AppError> {
    match cli.command {
        Command::Validate { theory, json } => {
            let t = load_theory(&theory)?;
            match validated(&t) {
                Ok(v) => {
                    if json {
                        print_json(&serde_json::json!({ "ok": true, "violations": [], "max_depth": v.max_depth() }));
                    } else {
                        println!("ok: {} ({} MFrags, max causal depth {})", t.name, t.mfrags.len(), v.max_depth());
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(AppError::Validation(r)) if json => {
                    print_json(&json::validation_report(&r));
                    Ok(ExitCode::from(2))
                }
                Err(e) => Err(e),
            }
        }
        Command::Query { q, oracle, dot } => {
            let start = Instant::now();
            let ssbn = q.ssbn()?;
            let posterior = if oracle { brute_force_posterior(&ssbn)? } else { eliminate(&ssbn)? };
            let elapsed = start.elapsed().as_secs_f64() * 1000.0;
            if let Some(path) = dot {
                write_file(&path, &export_dot(&ssbn))?;
            }
            print_json(&json::query_output(&posterior, ssbn.len(), elapsed));
            Ok(ExitCode::SUCCESS)
        }
        Command::Ground { q, dot } => {
            let ssbn = q.ssbn()?;
            match dot {
                Some(path) => write_file(&path, &export_dot(&ssbn))?,
                None => print_json(&json::ssbn(&ssbn)),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Corpus { dir, regen, json } => {
            let scenarios = discover(&dir)?;
            let reports = run_all(&scenarios, regen);
            let failed = reports.iter().filter(|r| matches!(r.status, Status::Fail(_))).count();
            if json {
                let rows: Vec<_> = reports
                    .iter()
                    .map(|r| {
                        let (status, detail) = match &r.status {
                            Status::Pass => ("pass", None),
                            Status::Regenerated => ("regenerated", None),
                            Status::Fail(m) => ("fail", Some(m.clone())),
                        };
                        serde_json::json!({
                            "scenario": r.name,
                            "status": status,
                            "detail": detail,
                            "oracle_gap": r.oracle_gap,
                            "golden_gap": r.golden_gap,
                            "ssbn_nodes": r.ssbn_nodes,
                        })
                    })
                    .collect();
                print_json(&serde_json::Value::Array(rows));
            } else {
                let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
                println!("{:<width$}  {:<11}  {:>5}  {:>10}  detail", "scenario", "status", "nodes", "oracle gap");
                for r in &reports {
                    let (status, detail) = match &r.status {
                        Status::Pass => ("pass", String::new()),
                        Status::Regenerated => ("regenerated", String::new()),
                        Status::Fail(m) => ("FAIL", m.clone()),
                    };
                    let gap = r.oracle_gap.map_or_else(|| String::from("-"), |g| format!("{g:.1e}"));
                    println!("{:<width$}  {status:<11}  {:>5}  {gap:>10}  {detail}", r.name, r.ssbn_nodes);
                }
                println!("{} scenario(s), {failed} failed", reports.len());
            }
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
