//! Whole-suite check after generation.
//!
//! Tests that pass alone can still fail together when one of them leaves
//! shared state behind. Failing tests are disabled by renaming, either all
//! of them or, in isolate mode, only the polluters found by bisecting the
//! tests that run before a victim.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, SuiteRunResult, TargetAdapter, DISABLED_SUFFIX};
use crate::coverage::CoverageReport;

pub const MAX_ISOLATION_ROUNDS: usize = 10;

#[derive(Debug, Error)]
pub enum IntegrationError {
    #[error("integration aborted: {0}")]
    IntegrationAborted(#[from] AdapterError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrationMode {
    DisableAll,
    Isolate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forfeited {
    pub lines: u64,
    pub branches: u64,
}

impl Forfeited {
    pub fn total(&self) -> u64 {
        self.lines + self.branches
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationReport {
    /// Every test disabled, in the order it was disabled.
    pub disabled: Vec<String>,
    pub polluters: Vec<String>,
    pub self_failing: Vec<String>,
    pub flaky: Vec<String>,
    pub suite_runs: usize,
    pub forfeited: Forfeited,
    /// True when isolation hit its round cap and disabled the remaining
    /// failures wholesale.
    pub fell_back: bool,
}

/// Renames `name` in `suite_dir` so the runner no longer collects it.
/// Disabling an already disabled test is a no-op.
pub fn disable_test(suite_dir: &Path, name: &str) -> Result<PathBuf, IntegrationError> {
    let from = suite_dir.join(name);
    let to = suite_dir.join(format!("{name}{DISABLED_SUFFIX}"));
    if !from.exists() && to.exists() {
        return Ok(to);
    }
    std::fs::rename(&from, &to).map_err(|source| IntegrationError::Io { path: from, source })?;
    Ok(to)
}

pub fn reactivate_test(suite_dir: &Path, name: &str) -> Result<PathBuf, IntegrationError> {
    let from = suite_dir.join(format!("{name}{DISABLED_SUFFIX}"));
    let to = suite_dir.join(name);
    if !from.exists() && to.exists() {
        return Ok(to);
    }
    std::fs::rename(&from, &to).map_err(|source| IntegrationError::Io { path: from, source })?;
    Ok(to)
}

/// Executed lines and branches of `baseline` plus the coverage of every
/// test in `tests`.
fn executed(baseline: &CoverageReport, tests: &[String], coverage: &BTreeMap<String, CoverageReport>) -> (u64, u64) {
    let mut union = baseline.clone();
    for t in tests {
        if let Some(c) = coverage.get(t) {
            union = union.merge(c);
        }
    }
    let c = union.counts_where(|_| true);
    (c.covered_lines, c.covered_branches)
}

struct Session<'a> {
    adapter: &'a dyn TargetAdapter,
    suite_dir: &'a Path,
    repeat: u32,
    report: IsolationReport,
}

impl Session<'_> {
    fn run(&mut self, tests: &[String]) -> Result<SuiteRunResult, IntegrationError> {
        self.report.suite_runs += 1;
        Ok(self.adapter.run_suite(tests, self.repeat)?)
    }

    fn disable(&mut self, active: &mut Vec<String>, name: &str) -> Result<(), IntegrationError> {
        disable_test(self.suite_dir, name)?;
        active.retain(|t| t != name);
        self.report.disabled.push(name.to_string());
        log::info!("disabled {name}");
        Ok(())
    }

    /// Earliest test in `prefix` whose presence makes `victim` fail, found
    /// by bisecting on prefix length. `None` when the full prefix does not
    /// reproduce the failure.
    fn find_polluter(&mut self, prefix: &[String], victim: &String) -> Result<Option<String>, IntegrationError> {
        let fails_with = |s: &mut Self, k: usize| -> Result<bool, IntegrationError> {
            let mut run: Vec<String> = prefix[..k].to_vec();
            run.push(victim.clone());
            let r = s.run(&run)?;
            Ok(!r.statuses.get(victim).is_some_and(|st| st.passed()))
        };
        // Invariant: a prefix of length lo passes, one of length hi fails.
        let (mut lo, mut hi) = (0, prefix.len());
        let mut hi_confirmed = false;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fails_with(self, mid)? {
                hi = mid;
                hi_confirmed = true;
            } else {
                lo = mid;
            }
        }
        if hi == 0 || (!hi_confirmed && !fails_with(self, hi)?) {
            return Ok(None);
        }
        Ok(Some(prefix[hi - 1].clone()))
    }
}

/// Runs `tests` together and disables failing ones per `mode`.
/// `coverage` maps each test to its individual coverage, for pricing what
/// disabling costs.
pub fn integration_check(
    tests: &[String],
    suite_dir: &Path,
    adapter: &dyn TargetAdapter,
    mode: IntegrationMode,
    repeat: u32,
    coverage: &BTreeMap<String, CoverageReport>,
    baseline: &CoverageReport,
) -> Result<IsolationReport, IntegrationError> {
    let mut session = Session { adapter, suite_dir, repeat: repeat.max(1), report: IsolationReport::default() };
    let mut active = tests.to_vec();

    let first = session.run(&active)?;
    if first.all_passed() {
        return Ok(session.report);
    }
    match mode {
        IntegrationMode::DisableAll => {
            for t in first.failing_in(tests) {
                session.disable(&mut active, t)?;
            }
        }
        IntegrationMode::Isolate => isolate(&mut session, &mut active, first)?,
    }

    let before = executed(baseline, tests, coverage);
    let after = executed(baseline, &active, coverage);
    session.report.forfeited = Forfeited { lines: before.0 - after.0, branches: before.1 - after.1 };
    Ok(session.report)
}

fn isolate(session: &mut Session, active: &mut Vec<String>, mut last: SuiteRunResult) -> Result<(), IntegrationError> {
    for _ in 0..MAX_ISOLATION_ROUNDS {
        let failing = last.failing_in(active);
        let Some(victim) = failing.first().map(|v| (*v).clone()) else {
            return Ok(());
        };
        let alone = session.run(std::slice::from_ref(&victim))?;
        if !alone.all_passed() {
            session.report.self_failing.push(victim.clone());
            session.disable(active, &victim)?;
        } else {
            let pos = active.iter().position(|t| *t == victim).expect("victim is active");
            let prefix = active[..pos].to_vec();
            match session.find_polluter(&prefix, &victim)? {
                Some(p) => {
                    session.report.polluters.push(p.clone());
                    session.disable(active, &p)?;
                }
                None => {
                    session.report.flaky.push(victim.clone());
                    session.disable(active, &victim)?;
                }
            }
        }
        last = session.run(active)?;
        if last.all_passed() {
            return Ok(());
        }
    }
    log::warn!("isolation did not converge in {MAX_ISOLATION_ROUNDS} rounds; disabling remaining failures");
    session.report.fell_back = true;
    let remaining: Vec<String> = last.failing_in(active).into_iter().cloned().collect();
    for t in &remaining {
        session.disable(active, t)?;
    }
    Ok(())
}
