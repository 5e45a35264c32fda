//! A simulated target: test files declare their behavior in comments
//! instead of being executed.
//!
//! ```text
//! # sim: lines toy/mathx.py 3, 5
//! # sim: branches toy/mathx.py 2->3, 4->exit
//! # sim: fail AssertionError: assert 13 == 11
//! # sim: error NameError: name 'x' is not defined
//! # sim: pollutes settings
//! # sim: needs settings
//! # sim: flaky 3
//! # sim: hang
//! ```
//!
//! `needs K` fails when a test earlier in the same session declared
//! `pollutes K`. `flaky N` fails one run in N. The measurable lines and
//! branches come from a [`Universe`], stored as `sim-universe.json`:
//! `{"files": {path: {"lines": "1-6, 9", "branches": ["2->3"]}}, "modules": [...]}`.
//!
//! Used by the `covergen-simrunner` binary and, in process, by tests.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::adapter::{collect_tests, AdapterError, SuiteRunResult, TargetAdapter, TestExecution, TestStatus};
use crate::coverage::{parse_line_ranges, Branch, CoverageReport, FileCoverage, LineNo};

pub const UNIVERSE_FILE: &str = "sim-universe.json";

/// Modules every simulated environment can import.
pub const KNOWN_MODULES: [&str; 13] = [
    "collections",
    "dataclasses",
    "functools",
    "itertools",
    "json",
    "math",
    "os",
    "pathlib",
    "pytest",
    "re",
    "sys",
    "typing",
    "unittest",
];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct UniverseFile {
    pub lines: String,
    #[serde(default)]
    pub branches: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Universe {
    pub files: BTreeMap<String, UniverseFile>,
    #[serde(default)]
    pub modules: Vec<String>,
}

impl Universe {
    pub fn load(root: &Path) -> anyhow::Result<Self> {
        let path = root.join(UNIVERSE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn has_module(&self, name: &str) -> bool {
        KNOWN_MODULES.contains(&name) || self.modules.iter().any(|m| m == name)
    }

    /// Splits the universe into executed and missing parts.
    pub fn report(
        &self,
        lines: &BTreeMap<String, BTreeSet<LineNo>>,
        branches: &BTreeMap<String, BTreeSet<Branch>>,
    ) -> anyhow::Result<CoverageReport> {
        let mut report = CoverageReport::default();
        for (path, f) in &self.files {
            let all_lines = parse_line_ranges(&f.lines)?;
            let all_branches = f
                .branches
                .iter()
                .map(|b| b.parse::<Branch>().map_err(|_| anyhow::anyhow!("bad branch {b:?} in universe")))
                .collect::<anyhow::Result<BTreeSet<_>>>()?;
            let el = lines.get(path).cloned().unwrap_or_default();
            let eb = branches.get(path).cloned().unwrap_or_default();
            report.files.insert(
                path.clone(),
                FileCoverage {
                    executed_lines: all_lines.intersection(&el).copied().collect(),
                    missing_lines: all_lines.difference(&el).copied().collect(),
                    executed_branches: all_branches.intersection(&eb).copied().collect(),
                    missing_branches: all_branches.difference(&eb).copied().collect(),
                },
            );
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Directives {
    pub lines: BTreeMap<String, BTreeSet<LineNo>>,
    pub branches: BTreeMap<String, BTreeSet<Branch>>,
    pub fail: Option<String>,
    pub error: Option<String>,
    pub pollutes: Vec<String>,
    pub needs: Vec<String>,
    pub flaky: Option<u32>,
    pub hang: bool,
}

impl Directives {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut d = Directives::default();
        for line in text.lines() {
            let Some(rest) = line.trim().strip_prefix("# sim:") else { continue };
            let rest = rest.trim();
            let (word, arg) = rest.split_once(' ').unwrap_or((rest, ""));
            let arg = arg.trim();
            match word {
                "lines" => {
                    let (path, ranges) = arg.split_once(' ').ok_or("lines needs a path and ranges")?;
                    let set = parse_line_ranges(ranges.trim()).map_err(|e| e.to_string())?;
                    d.lines.entry(path.into()).or_default().extend(set);
                }
                "branches" => {
                    let (path, list) = arg.split_once(' ').ok_or("branches needs a path and branches")?;
                    let set = d.branches.entry(path.into()).or_default();
                    for b in list.split(',') {
                        set.insert(b.trim().parse().map_err(|_| format!("bad branch {b:?}"))?);
                    }
                }
                "fail" => d.fail = Some(arg.into()),
                "error" => d.error = Some(arg.into()),
                "pollutes" => d.pollutes.push(arg.into()),
                "needs" => d.needs.push(arg.into()),
                "flaky" => d.flaky = Some(arg.parse().map_err(|_| "flaky needs a number")?),
                "hang" => d.hang = true,
                other => return Err(format!("unknown directive {other:?}")),
            }
        }
        Ok(d)
    }
}

/// One runner session: tests run in order and share pollution state.
pub struct Session<'r, R: Rng> {
    pub rng: &'r mut R,
    polluted: BTreeSet<String>,
    pub lines: BTreeMap<String, BTreeSet<LineNo>>,
    pub branches: BTreeMap<String, BTreeSet<Branch>>,
    pub output: String,
}

impl<'r, R: Rng> Session<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            rng,
            polluted: BTreeSet::new(),
            lines: BTreeMap::new(),
            branches: BTreeMap::new(),
            output: String::new(),
        }
    }

    /// Runs one test `repeat` times; any failing repetition fails it.
    /// Hanging tests are reported as timeouts.
    pub fn run(&mut self, source: Option<&str>, repeat: u32) -> TestStatus {
        let d = match source.map(Directives::parse) {
            Some(Ok(d)) => d,
            Some(Err(e)) => {
                self.output.push_str(&format!("ERROR collecting test: {e}\n"));
                return TestStatus::Error;
            }
            None => {
                self.output.push_str("ERROR collecting test: file not found\n");
                return TestStatus::Error;
            }
        };
        if d.hang {
            return TestStatus::Timeout;
        }
        let mut status = TestStatus::Pass;
        for _ in 0..repeat.max(1) {
            for (p, ls) in &d.lines {
                self.lines.entry(p.clone()).or_default().extend(ls);
            }
            for (p, bs) in &d.branches {
                self.branches.entry(p.clone()).or_default().extend(bs);
            }
            let outcome = if let Some(m) = &d.error {
                Some((TestStatus::Error, m.clone()))
            } else if let Some(m) = &d.fail {
                Some((TestStatus::Fail, m.clone()))
            } else if let Some(k) = d.needs.iter().find(|k| self.polluted.contains(*k)) {
                Some((TestStatus::Fail, format!("AssertionError: {k} was modified by an earlier test")))
            } else if d.flaky.is_some_and(|n| n > 0 && self.rng.random_range(0..n) == 0) {
                Some((TestStatus::Fail, "AssertionError: intermittent failure".to_string()))
            } else {
                None
            };
            self.polluted.extend(d.pollutes.iter().cloned());
            if let Some((s, msg)) = outcome {
                if status == TestStatus::Pass {
                    self.output.push_str(&format!("E   {msg}\n"));
                }
                status = s;
            }
        }
        status
    }
}

/// In-process simulated adapter over a suite directory.
pub struct SimAdapter {
    pub universe: Universe,
    pub suite_dir: PathBuf,
    rng: Mutex<StdRng>,
    suite_runs: Mutex<Vec<Vec<String>>>,
    candidates: Mutex<Vec<String>>,
}

impl SimAdapter {
    pub fn new(universe: Universe, suite_dir: PathBuf, seed: u64) -> Self {
        Self {
            universe,
            suite_dir,
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
            suite_runs: Mutex::default(),
            candidates: Mutex::default(),
        }
    }

    /// Orders passed to `run_suite`, in call order.
    pub fn suite_runs(&self) -> Vec<Vec<String>> {
        self.suite_runs.lock().unwrap().clone()
    }

    /// Candidate sources executed, in call order.
    pub fn candidates(&self) -> Vec<String> {
        self.candidates.lock().unwrap().clone()
    }

    /// Statuses of `tests` run in order, without recording the run.
    pub fn statuses(&self, tests: &[String], repeat: u32) -> BTreeMap<String, TestStatus> {
        let mut rng = self.rng.lock().unwrap();
        let mut session = Session::new(&mut *rng);
        tests
            .iter()
            .map(|t| {
                let src = std::fs::read_to_string(self.suite_dir.join(t)).ok();
                (t.clone(), session.run(src.as_deref(), repeat))
            })
            .collect()
    }

    fn coverage(
        &self,
        lines: &BTreeMap<String, BTreeSet<LineNo>>,
        branches: &BTreeMap<String, BTreeSet<Branch>>,
    ) -> Result<CoverageReport, AdapterError> {
        self.universe.report(lines, branches).map_err(|e| AdapterError::Protocol(e.to_string()))
    }
}

impl TargetAdapter for SimAdapter {
    fn measure_baseline(&self) -> Result<CoverageReport, AdapterError> {
        let tests = collect_tests(&self.suite_dir).map_err(|e| AdapterError::AdapterUnavailable(e.to_string()))?;
        let mut rng = self.rng.lock().unwrap();
        let mut session = Session::new(&mut *rng);
        for t in &tests {
            let src = std::fs::read_to_string(self.suite_dir.join(t)).ok();
            session.run(src.as_deref(), 1);
        }
        let (lines, branches) = (session.lines, session.branches);
        drop(rng);
        self.coverage(&lines, &branches)
    }

    fn run_candidate(&self, test_source: &str) -> Result<TestExecution, AdapterError> {
        self.candidates.lock().unwrap().push(test_source.to_string());
        let mut rng = self.rng.lock().unwrap();
        let mut session = Session::new(&mut *rng);
        let status = session.run(Some(test_source), 1);
        let (lines, branches, output) = (session.lines, session.branches, session.output);
        drop(rng);
        Ok(TestExecution { status, output, coverage: self.coverage(&lines, &branches)? })
    }

    fn run_suite(&self, tests: &[String], repeat: u32) -> Result<SuiteRunResult, AdapterError> {
        self.suite_runs.lock().unwrap().push(tests.to_vec());
        Ok(SuiteRunResult { statuses: self.statuses(tests, repeat), output: String::new() })
    }

    fn module_available(&self, name: &str) -> bool {
        self.universe.has_module(name)
    }
}
