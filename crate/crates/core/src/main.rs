use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use forksim::clock::CostModel;
use forksim::engines::EngineKind;
use forksim::error::SimError;
use forksim::metrics::QueryClass;
use forksim::scenario::{fork_profile, run, sweep, sweep_csv, RunOutput, ScenarioConfig, SweepAxis};
use forksim::scripted;
use forksim::vm::parse_bytes;

#[derive(Parser)]
#[command(name = "forksim", version, about = "Fork-based snapshot simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write its report files.
    Run {
        config: PathBuf,
        /// Output directory (default: the config's output_dir, else ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write trace.jsonl.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        engine: Option<EngineKind>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a scenario once per value of one parameter.
    Sweep {
        config: PathBuf,
        /// instance_bytes, workers, rate or clients.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        engine: Option<EngineKind>,
    },
    /// Replay a scripted step-by-step scenario.
    Replay { which: Script },
    /// Fork cost of fully mapped regions, e.g. `shape 8GiB 64GiB`.
    Shape {
        #[arg(required = true)]
        sizes: Vec<String>,
        #[arg(long)]
        engine: Option<EngineKind>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Script {
    /// Page migration racing an on-demand fork.
    Table1,
    /// Page migration racing an async fork.
    Table4,
    /// A SET during the async child copy.
    Fig5,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                SimError::Config(_) => 3,
                _ => 1,
            })
        }
    }
}

fn load(path: &Path) -> Result<ScenarioConfig, SimError> {
    Ok(ScenarioConfig::load(path)?)
}

fn out_dir(flag: Option<PathBuf>, cfg: &ScenarioConfig) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn dispatch(cmd: Cmd) -> Result<u8, SimError> {
    match cmd {
        Cmd::Run { config, out, trace, engine, seed } => {
            let mut cfg = load(&config)?;
            if let Some(e) = engine {
                cfg.engine = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let res = run(&cfg)?;
            let dir = out_dir(out, &cfg);
            res.write_to(&dir, trace || cfg.trace)?;
            print_summary(&res);
            println!("reports: {}", dir.display());
            Ok(res.exit_code() as u8)
        }
        Cmd::Sweep { config, axis, values, out, engine } => {
            let mut cfg = load(&config)?;
            if let Some(e) = engine {
                cfg.engine = e;
            }
            let results = sweep(&cfg, axis, &values)?;
            let dir = out_dir(out, &cfg);
            std::fs::create_dir_all(&dir).map_err(|source| SimError::Output { path: dir.clone(), source })?;
            let rows: Vec<_> = results.iter().map(|(r, _)| r.clone()).collect();
            let path = dir.join("sweep.csv");
            let body = sweep_csv(&rows);
            std::fs::write(&path, &body).map_err(|source| SimError::Output { path: path.clone(), source })?;
            print!("{body}");
            Ok(results.iter().map(|(_, o)| o.exit_code() as u8).max().unwrap_or(0))
        }
        Cmd::Replay { which } => {
            match which {
                Script::Table1 => print!("{}", scripted::table1()?.render()),
                Script::Table4 => print!("{}", scripted::table4()?.render()),
                Script::Fig5 => {
                    let r = scripted::fig5()?;
                    println!("proactive syncs: {}", r.syncs);
                    println!("oracle keys: {}, dump keys: {}", r.oracle.len(), r.dump.len());
                    println!("dump equals oracle: {}", r.dump == r.oracle);
                }
            }
            Ok(0)
        }
        Cmd::Shape { sizes, engine } => {
            let engines = engine.map_or(EngineKind::ALL.to_vec(), |e| vec![e]);
            println!(
                "{:>12} {:>8} {:>6} {:>6} {:>8} {:>10} {:>14} {:>8}",
                "bytes", "engine", "pgd", "pud", "pmd", "pte", "kernel_ns", "pt_share"
            );
            for s in &sizes {
                let bytes =
                    parse_bytes(s).ok_or_else(|| forksim::error::ConfigError::Invalid(format!("bad size {s:?}")))?;
                for &e in &engines {
                    let p = fork_profile(bytes, e, CostModel::default())?;
                    println!(
                        "{:>12} {:>8} {:>6} {:>6} {:>8} {:>10} {:>14} {:>8.4}",
                        s,
                        e.as_str(),
                        p.shape.pgd_entries,
                        p.shape.pud_entries,
                        p.shape.pmd_entries,
                        p.shape.pte_entries,
                        p.kernel_ns,
                        p.page_table_share
                    );
                }
            }
            Ok(0)
        }
    }
}

fn print_summary(r: &RunOutput) {
    let ms = |v: Option<u64>| v.map_or("-".to_string(), |n| format!("{:.3} ms", n as f64 / 1e6));
    println!("engine {} seed {} end {:.3} s", r.config.engine.as_str(), r.config.seed, r.end_ns as f64 / 1e9);
    for c in QueryClass::ALL {
        let s = r.class_summary(c);
        println!(
            "{:<9} n={:<8} p50 {:<12} p99 {:<12} max {}",
            c.as_str(),
            s.count,
            ms(s.p50_ns),
            ms(s.p99_ns),
            ms(s.max_ns)
        );
    }
    for s in &r.sessions {
        println!(
            "snapshot {}: fork {} copy span {} syncs {} phase {:?}",
            s.id,
            ms(Some(s.fork_kernel_ns)),
            ms(s.copy_span_ns),
            s.syncs,
            s.phase
        );
    }
    println!(
        "interruptions {} (table copies {}), out of service {}",
        r.metrics.interruption_count(None),
        r.table_interruptions(),
        ms(Some(r.metrics.out_of_service_total(None)))
    );
    println!("coherence violations {}", r.coherence_violations.len());
    println!("consistency {}", r.verdict().as_str());
}
