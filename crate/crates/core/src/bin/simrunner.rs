//! A stand-in test runner speaking the adapter protocol over the simulated
//! target in `covergen::sim`, for exercising the engine without a Python
//! toolchain.
//!
//! ```text
//! covergen-simrunner --root DIR --emit-json OUT [--repeat N] [--seed S] TARGETS...
//! covergen-simrunner --root DIR --check-module NAME
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use covergen::adapter::TestStatus;
use covergen::sim::{Session, Universe};
use rand::rngs::StdRng;
use rand::SeedableRng;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    emit_json: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    repeat: u32,
    #[arg(long)]
    check_module: Option<String>,
    /// Seed for flaky tests.
    #[arg(long)]
    seed: Option<u64>,
    targets: Vec<PathBuf>,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("simrunner: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let args = Args::parse();
    let universe = Universe::load(&args.root)?;
    if let Some(m) = &args.check_module {
        return Ok(if universe.has_module(m) { ExitCode::SUCCESS } else { ExitCode::FAILURE });
    }
    let out = args.emit_json.context("--emit-json is required")?;
    let mut rng = match args.seed {
        Some(s) => StdRng::seed_from_u64(s),
        None => StdRng::from_os_rng(),
    };
    let mut session = Session::new(&mut rng);
    let mut statuses: BTreeMap<String, TestStatus> = BTreeMap::new();
    for target in &args.targets {
        let source = std::fs::read_to_string(target).ok();
        let status = session.run(source.as_deref(), args.repeat);
        if status == TestStatus::Timeout {
            // A hanging test hangs the runner; the engine kills it.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        statuses.insert(target.to_string_lossy().into_owned(), status);
    }
    let passed = statuses.values().filter(|s| s.passed()).count();
    print!("{}", session.output);
    println!("{passed} passed, {} failed", statuses.len() - passed);

    let coverage = universe.report(&session.lines, &session.branches)?;
    let body = serde_json::json!({"tests": statuses, "coverage": coverage});
    std::fs::write(&out, serde_json::to_string_pretty(&body)?).with_context(|| format!("writing {}", out.display()))?;
    Ok(if passed == statuses.len() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
