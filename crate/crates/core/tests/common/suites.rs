//! Simulated suites for the integrator.

use std::collections::{BTreeMap, BTreeSet};

use covergen::adapter::{collect_tests, TargetAdapter};
use covergen::coverage::{line, CoverageReport, FileCoverage};
use covergen::integrator::{integration_check, IntegrationMode, IsolationReport};
use covergen::sim::{SimAdapter, Universe, UniverseFile};
use rand::rngs::StdRng;
use rand::Rng;

use super::report_of;

/// A suite of `test_NN.py` files, each covering its own line of `pkg/u.py`
/// and carrying the given extra directives.
pub struct Suite {
    pub dir: tempfile::TempDir,
    pub tests: Vec<String>,
    pub coverage: BTreeMap<String, CoverageReport>,
    pub baseline: CoverageReport,
}

impl Suite {
    pub fn new(specs: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut tests = Vec::new();
        let mut coverage = BTreeMap::new();
        let n = specs.len() as u32;
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("test_{i:02}.py");
            let l = i as u32 + 1;
            let mut body = format!("def test_{i}():\n    pass\n\n# sim: lines pkg/u.py {l}\n");
            for d in spec.split(';').map(str::trim).filter(|d| !d.is_empty()) {
                body.push_str(&format!("# sim: {d}\n"));
            }
            std::fs::write(dir.path().join(&name), body).unwrap();
            let fc = FileCoverage {
                executed_lines: [line(l)].into(),
                missing_lines: (1..=n).filter(|&x| x != l).map(line).collect(),
                ..Default::default()
            };
            coverage.insert(name.clone(), report_of("pkg/u.py", fc));
            tests.push(name);
        }
        let baseline = report_of("pkg/u.py", FileCoverage::all_missing((1..=n).map(line), []));
        Self { dir, tests, coverage, baseline }
    }

    pub fn adapter(&self) -> SimAdapter {
        let universe = Universe {
            files: BTreeMap::from([(
                "pkg/u.py".to_string(),
                UniverseFile { lines: format!("1-{}", self.tests.len().max(1)), branches: vec![] },
            )]),
            modules: vec![],
        };
        SimAdapter::new(universe, self.dir.path().to_path_buf(), 0)
    }

    pub fn check(&self, adapter: &dyn TargetAdapter, mode: IntegrationMode) -> IsolationReport {
        integration_check(&self.tests, self.dir.path(), adapter, mode, 1, &self.coverage, &self.baseline).unwrap()
    }

    pub fn active(&self) -> Vec<String> {
        collect_tests(self.dir.path()).unwrap()
    }
}

pub fn ceil_log2(n: usize) -> usize {
    (usize::BITS - (n.max(1) - 1).leading_zeros()) as usize
}

/// Polluters confirmed pairwise: `t` pollutes when some later test passes
/// alone but fails right after `t`.
pub fn brute_force_polluters(suite: &Suite, adapter: &SimAdapter) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (i, t) in suite.tests.iter().enumerate() {
        for v in &suite.tests[i + 1..] {
            let alone = adapter.statuses(std::slice::from_ref(v), 1)[v].passed();
            let after = adapter.statuses(&[t.clone(), v.clone()], 1)[v].passed();
            if alone && !after {
                out.insert(t.clone());
            }
        }
    }
    out
}

/// `n` tests with `k` polluters, each with a key of its own and at least
/// one victim after it.
pub fn planted(rng: &mut StdRng, n: usize, k: usize) -> Vec<String> {
    let mut specs = vec![String::new(); n];
    let mut free: Vec<usize> = (0..n).collect();
    for key in 0..k {
        // A polluter needs room for a victim after it.
        let candidates: Vec<usize> = free.iter().copied().filter(|&p| free.iter().any(|&v| v > p)).collect();
        let p = candidates[rng.random_range(0..candidates.len())];
        free.retain(|&x| x != p);
        specs[p] = format!("pollutes k{key}");
        let after: Vec<usize> = free.iter().copied().filter(|&v| v > p).collect();
        let first = after[rng.random_range(0..after.len())];
        free.retain(|&x| x != first);
        specs[first] = format!("needs k{key}");
        // Extra victims, leaving two free tests for each key still to plant.
        let reserve = 2 * (k - key - 1);
        for v in free.clone() {
            if free.len() > reserve && rng.random_bool(0.25) {
                free.retain(|&x| x != v);
                specs[v] = format!("needs k{key}");
            }
        }
    }
    specs
}
