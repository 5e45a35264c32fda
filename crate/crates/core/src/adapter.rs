//! Boundary to the system under test.
//!
//! The engine never runs tests itself. It spawns a runner with the
//! invocation contract
//!
//! ```text
//! <runner> --emit-json <out.json> [--repeat N] [extra flags] <targets>
//! <runner> --check-module <name>
//! ```
//!
//! where `out.json` holds `{"tests": {path: status}, "coverage": <coverage>}`
//! and the exit code is 0 when every test passed. `--check-module` exits 0
//! when the module can be imported in the target environment.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::distr::{Alphanumeric, SampleString};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::CoverageReport;
use crate::outline::OutlineNode;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DISABLED_SUFFIX: &str = ".disabled";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("runner unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("runner produced no usable result: {0}")]
    Protocol(String),
    #[error("suite run failed to launch: {0}")]
    SuiteLaunch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
    Timeout,
}

impl TestStatus {
    pub fn passed(self) -> bool {
        self == TestStatus::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestExecution {
    pub status: TestStatus,
    pub output: String,
    pub coverage: CoverageReport,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteRunResult {
    /// Status per test file name, as passed to `run_suite`.
    pub statuses: BTreeMap<String, TestStatus>,
    pub output: String,
}

impl SuiteRunResult {
    pub fn all_passed(&self) -> bool {
        self.statuses.values().all(|s| s.passed())
    }

    /// Failing tests in the order they were run.
    pub fn failing_in<'a>(&self, order: &'a [String]) -> Vec<&'a String> {
        order.iter().filter(|t| self.statuses.get(*t).is_some_and(|s| !s.passed())).collect()
    }
}

/// Everything the engine needs from the target ecosystem.
pub trait TargetAdapter: Send + Sync {
    /// Coverage of the existing suite; an empty suite reports everything
    /// missing.
    fn measure_baseline(&self) -> Result<CoverageReport, AdapterError>;

    /// Runs one candidate test alone, with coverage.
    fn run_candidate(&self, test_source: &str) -> Result<TestExecution, AdapterError>;

    /// Runs the named suite tests together in one session, in order.
    fn run_suite(&self, tests: &[String], repeat: u32) -> Result<SuiteRunResult, AdapterError>;

    fn module_available(&self, name: &str) -> bool;

    /// Outline supplied by the adapter, if it has one for `path`.
    fn outline(&self, _path: &str) -> Option<OutlineNode> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub source_dir: PathBuf,
    pub suite_dir: PathBuf,
    /// Runner command; `{source_dir}` and `{suite_dir}` are substituted.
    pub runner: Vec<String>,
    pub timeout: Duration,
    pub extra_flags: Vec<String>,
    pub env_passthrough: Vec<String>,
    /// Where candidates are written; the system temp dir when unset.
    pub scratch_root: Option<PathBuf>,
}

pub const DEFAULT_ENV_PASSTHROUGH: [&str; 6] = ["PATH", "HOME", "PYTHONPATH", "VIRTUAL_ENV", "LANG", "TMPDIR"];

impl AdapterConfig {
    pub fn new(source_dir: PathBuf, suite_dir: PathBuf, runner: Vec<String>) -> Self {
        Self {
            source_dir,
            suite_dir,
            runner,
            timeout: DEFAULT_TIMEOUT,
            extra_flags: Vec::new(),
            env_passthrough: DEFAULT_ENV_PASSTHROUGH.iter().map(|s| s.to_string()).collect(),
            scratch_root: None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RunnerOutput {
    #[serde(default)]
    tests: BTreeMap<String, TestStatus>,
    #[serde(default)]
    coverage: Option<CoverageReport>,
    #[serde(default)]
    error: Option<String>,
}

struct Invocation {
    exit_ok: bool,
    timed_out: bool,
    output: String,
    result: Option<RunnerOutput>,
}

/// Test files the runner would collect: `test_*.py` directly in the suite
/// directory, sorted. Disabled tests carry a suffix and are skipped.
pub fn collect_tests(suite_dir: &Path) -> std::io::Result<Vec<String>> {
    if !suite_dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(suite_dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if name.starts_with("test_") && name.ends_with(".py") {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

pub struct SubprocessAdapter {
    config: AdapterConfig,
    module_cache: Mutex<HashMap<String, bool>>,
}

impl SubprocessAdapter {
    pub fn new(config: AdapterConfig) -> Result<Self, AdapterError> {
        if config.runner.is_empty() {
            return Err(AdapterError::AdapterUnavailable("no runner configured".into()));
        }
        if config.timeout.is_zero() {
            return Err(AdapterError::AdapterUnavailable("timeout must be positive".into()));
        }
        Ok(Self { config, module_cache: Mutex::default() })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    fn command(&self) -> Command {
        let subst = |s: &String| {
            s.replace("{source_dir}", &self.config.source_dir.to_string_lossy())
                .replace("{suite_dir}", &self.config.suite_dir.to_string_lossy())
        };
        let mut cmd = Command::new(subst(&self.config.runner[0]));
        cmd.args(self.config.runner[1..].iter().map(subst));
        cmd.env_clear();
        for var in &self.config.env_passthrough {
            if let Some(v) = std::env::var_os(var) {
                cmd.env(var, v);
            }
        }
        cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
        cmd
    }

    fn invoke(
        &self,
        targets: &[PathBuf],
        repeat: u32,
        timeout: Duration,
        workdir: &Path,
    ) -> Result<Invocation, AdapterError> {
        let out_json = workdir.join(format!("covergen-out-{}.json", Alphanumeric.sample_string(&mut rand::rng(), 8)));
        let mut cmd = self.command();
        cmd.arg("--emit-json").arg(&out_json);
        if repeat > 1 {
            cmd.arg("--repeat").arg(repeat.to_string());
        }
        cmd.args(&self.config.extra_flags);
        cmd.args(targets);
        let (exit_ok, timed_out, output) = run_with_timeout(cmd, timeout)?;
        let result = std::fs::read_to_string(&out_json).ok().and_then(|t| serde_json::from_str(&t).ok());
        let _ = std::fs::remove_file(&out_json);
        Ok(Invocation { exit_ok, timed_out, output, result })
    }

    fn scratch_dir(&self) -> Result<tempfile::TempDir, AdapterError> {
        let builder = {
            let mut b = tempfile::Builder::new();
            b.prefix("covergen-");
            b
        };
        let dir = match &self.config.scratch_root {
            Some(root) => {
                std::fs::create_dir_all(root).map_err(|e| AdapterError::AdapterUnavailable(e.to_string()))?;
                builder.tempdir_in(root)
            }
            None => builder.tempdir(),
        };
        dir.map_err(|e| AdapterError::AdapterUnavailable(format!("scratch directory: {e}")))
    }

    fn suite_timeout(&self, tests: usize, repeat: u32) -> Duration {
        self.config.timeout * (tests.max(1) as u32) * repeat.max(1)
    }
}

/// Runs `cmd`, killing it after `timeout`. Returns (exit ok, timed out,
/// combined stdout and stderr).
fn run_with_timeout(mut cmd: Command, timeout: Duration) -> Result<(bool, bool, String), AdapterError> {
    let mut child =
        cmd.spawn().map_err(|e| AdapterError::AdapterUnavailable(format!("{:?}: {e}", cmd.get_program())))?;
    let mut stdout = child.stdout.take().unwrap();
    let mut stderr = child.stderr.take().unwrap();
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });
    let start = Instant::now();
    let (status, timed_out) = loop {
        match child.try_wait() {
            Ok(Some(status)) => break (Some(status), false),
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                break (None, true);
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(AdapterError::AdapterUnavailable(e.to_string())),
        }
    };
    // A killed runner may leave grandchildren holding the pipes open; don't
    // wait on the readers in that case.
    let mut output = String::new();
    if !timed_out {
        output.push_str(&String::from_utf8_lossy(&out_reader.join().unwrap_or_default()));
        output.push_str(&String::from_utf8_lossy(&err_reader.join().unwrap_or_default()));
    }
    Ok((status.is_some_and(|s| s.success()), timed_out, output))
}

impl TargetAdapter for SubprocessAdapter {
    fn measure_baseline(&self) -> Result<CoverageReport, AdapterError> {
        let tests =
            collect_tests(&self.config.suite_dir).map_err(|e| AdapterError::AdapterUnavailable(e.to_string()))?;
        let targets: Vec<PathBuf> = tests.iter().map(|t| self.config.suite_dir.join(t)).collect();
        let scratch = self.scratch_dir()?;
        let inv = self.invoke(&targets, 1, self.suite_timeout(targets.len(), 1), scratch.path())?;
        if inv.timed_out {
            return Err(AdapterError::Protocol("baseline measurement timed out".into()));
        }
        match inv.result {
            Some(RunnerOutput { coverage: Some(c), .. }) => Ok(c),
            Some(RunnerOutput { error: Some(e), .. }) => Err(AdapterError::Protocol(e)),
            _ => Err(AdapterError::Protocol(format!("no coverage in runner output\n{}", inv.output))),
        }
    }

    fn run_candidate(&self, test_source: &str) -> Result<TestExecution, AdapterError> {
        let scratch = self.scratch_dir()?;
        let name = format!("tmp_test_{}.py", Alphanumeric.sample_string(&mut rand::rng(), 8).to_lowercase());
        let path = scratch.path().join(name);
        std::fs::write(&path, test_source).map_err(|e| AdapterError::AdapterUnavailable(e.to_string()))?;
        let inv = self.invoke(std::slice::from_ref(&path), 1, self.config.timeout, scratch.path())?;
        let coverage = inv.result.as_ref().and_then(|r| r.coverage.clone()).unwrap_or_default();
        let status = if inv.timed_out {
            TestStatus::Timeout
        } else {
            match &inv.result {
                Some(r) if inv.exit_ok && r.error.is_none() && r.tests.values().all(|s| s.passed()) => TestStatus::Pass,
                Some(r) if r.error.is_some() || r.tests.values().any(|s| *s == TestStatus::Error) => TestStatus::Error,
                Some(r) if r.tests.is_empty() => TestStatus::Error,
                Some(_) => TestStatus::Fail,
                None => TestStatus::Error,
            }
        };
        let mut output = inv.output;
        if inv.timed_out {
            output = format!("test timed out after {:?}\n{output}", self.config.timeout);
        } else if let Some(e) = inv.result.as_ref().and_then(|r| r.error.as_ref()) {
            output.push_str(e);
        }
        drop(scratch);
        Ok(TestExecution { status, output, coverage })
    }

    fn run_suite(&self, tests: &[String], repeat: u32) -> Result<SuiteRunResult, AdapterError> {
        let targets: Vec<PathBuf> = tests.iter().map(|t| self.config.suite_dir.join(t)).collect();
        let scratch = self.scratch_dir().map_err(|e| AdapterError::SuiteLaunch(e.to_string()))?;
        let inv = self
            .invoke(&targets, repeat, self.suite_timeout(tests.len(), repeat), scratch.path())
            .map_err(|e| AdapterError::SuiteLaunch(e.to_string()))?;
        let result =
            inv.result.ok_or_else(|| AdapterError::SuiteLaunch(format!("no runner output\n{}", inv.output)))?;
        let mut statuses = BTreeMap::new();
        for (test, target) in tests.iter().zip(&targets) {
            let status = result
                .tests
                .get(&target.to_string_lossy().into_owned())
                .or_else(|| result.tests.get(test))
                .copied()
                .unwrap_or(if inv.timed_out { TestStatus::Timeout } else { TestStatus::Error });
            statuses.insert(test.clone(), status);
        }
        Ok(SuiteRunResult { statuses, output: inv.output })
    }

    fn module_available(&self, name: &str) -> bool {
        if let Some(&known) = self.module_cache.lock().unwrap().get(name) {
            return known;
        }
        let mut cmd = self.command();
        cmd.arg("--check-module").arg(name);
        let available = match run_with_timeout(cmd, self.config.timeout) {
            Ok((ok, _, _)) => ok,
            Err(e) => {
                log::error!("module check for {name} failed: {e}");
                false
            }
        };
        self.module_cache.lock().unwrap().insert(name.to_string(), available);
        available
    }
}
