//! Coverage and success-by-round reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::coverage::{metrics, per_module_median, per_module_metrics, CoverageMetrics, CoverageReport, Metric};
use crate::gateway::UsageCounters;
use crate::integrator::IsolationReport;
use crate::outline::module_name_for_path;
use crate::state::RunState;

/// Share of accepted tests per prompt round, in percent.
pub fn success_percentages(tallies: &[u64]) -> Vec<f64> {
    let total: u64 = tallies.iter().sum();
    tallies.iter().map(|&t| if total == 0 { 0.0 } else { 100.0 * t as f64 / total as f64 }).collect()
}

/// Tallies of accepted tests by round, read from an event log. Lines that
/// are not JSON objects are skipped and counted.
pub fn tallies_from_log(reader: impl BufRead, rounds: usize) -> std::io::Result<(Vec<u64>, usize)> {
    let mut tallies = vec![0u64; rounds];
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Ok(serde_json::Value::Object(event)) = serde_json::from_str::<serde_json::Value>(&line) else {
            skipped += 1;
            continue;
        };
        if event.get("event").and_then(|e| e.as_str()) != Some("tally") {
            continue;
        }
        match event.get("round").and_then(|r| r.as_u64()) {
            Some(r) if r >= 1 => {
                let idx = r as usize - 1;
                if tallies.len() <= idx {
                    tallies.resize(idx + 1, 0);
                }
                tallies[idx] += 1;
            }
            _ => skipped += 1,
        }
    }
    Ok((tallies, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    pub line: f64,
    pub branch: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub overall: CoverageMetrics,
    pub per_module: BTreeMap<String, CoverageMetrics>,
    pub module_medians: Option<Medians>,
    pub success_by_round: Vec<u64>,
    pub success_pct: Vec<f64>,
    pub outcomes: BTreeMap<String, usize>,
    pub usage: UsageCounters,
    pub requirements: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integration: Option<IsolationReport>,
    #[serde(default)]
    pub skipped_log_lines: usize,
}

impl RunReport {
    pub fn new(coverage: &CoverageReport, state: &RunState) -> Self {
        let per_module: BTreeMap<String, CoverageMetrics> =
            per_module_metrics(coverage).into_iter().map(|(p, m)| (module_name_for_path(&p), m)).collect();
        let module_medians = (!per_module.is_empty()).then(|| Medians {
            line: per_module_median(&per_module, Metric::Line).unwrap(),
            branch: per_module_median(&per_module, Metric::Branch).unwrap(),
            combined: per_module_median(&per_module, Metric::Combined).unwrap(),
        });
        let mut outcomes = BTreeMap::new();
        for o in &state.outcomes {
            *outcomes.entry(o.verdict.as_str().to_string()).or_insert(0) += 1;
        }
        Self {
            overall: metrics(coverage),
            per_module,
            module_medians,
            success_pct: success_percentages(&state.success_by_round),
            success_by_round: state.success_by_round.clone(),
            outcomes,
            usage: state.usage,
            requirements: state.requirements.iter().cloned().collect(),
            integration: None,
            skipped_log_lines: 0,
        }
    }

    pub fn with_tallies(mut self, tallies: Vec<u64>, skipped: usize) -> Self {
        self.success_pct = success_percentages(&tallies);
        self.success_by_round = tallies;
        self.skipped_log_lines = skipped;
        self
    }

    pub fn render_text(&self) -> String {
        let pct = |r: f64| format!("{:5.1}%", 100.0 * r);
        let mut s = String::new();
        let c = self.overall.counts;
        writeln!(s, "coverage").unwrap();
        writeln!(s, "  line      {}  ({}/{})", pct(self.overall.line_pct), c.covered_lines, c.total_lines).unwrap();
        writeln!(s, "  branch    {}  ({}/{})", pct(self.overall.branch_pct), c.covered_branches, c.total_branches)
            .unwrap();
        writeln!(
            s,
            "  combined  {}  ({}/{})",
            pct(self.overall.combined_pct),
            c.covered_lines + c.covered_branches,
            c.total_lines + c.total_branches
        )
        .unwrap();
        if let Some(m) = &self.module_medians {
            writeln!(s, "\nper-module median ({} modules)", self.per_module.len()).unwrap();
            writeln!(s, "  line      {}", pct(m.line)).unwrap();
            writeln!(s, "  branch    {}", pct(m.branch)).unwrap();
            writeln!(s, "  combined  {}", pct(m.combined)).unwrap();
        }
        let width = self.per_module.keys().map(|k| k.len()).max().unwrap_or(0);
        if !self.per_module.is_empty() {
            writeln!(s, "\n  {:width$}  {:>6}  {:>6}  {:>8}", "module", "line", "branch", "combined").unwrap();
            for (name, m) in &self.per_module {
                writeln!(s, "  {name:width$}  {}  {}  {:>8}", pct(m.line_pct), pct(m.branch_pct), pct(m.combined_pct))
                    .unwrap();
            }
        }
        let accepted: u64 = self.success_by_round.iter().sum();
        writeln!(s, "\nsuccess by prompt ({accepted} accepted)").unwrap();
        for (i, (n, p)) in self.success_by_round.iter().zip(&self.success_pct).enumerate() {
            let label = if i == 0 { "initial".to_string() } else { format!("follow-up {i}") };
            writeln!(s, "  {label:<12}  {n:>4}  {p:5.1}%").unwrap();
        }
        if !self.outcomes.is_empty() {
            writeln!(s, "\nsegment outcomes").unwrap();
            for (v, n) in &self.outcomes {
                writeln!(s, "  {v:<22}  {n:>4}").unwrap();
            }
        }
        writeln!(
            s,
            "\nllm usage: {} calls, {} prompt tokens, {} completion tokens",
            self.usage.calls, self.usage.prompt_tokens, self.usage.completion_tokens
        )
        .unwrap();
        if let Some(i) = &self.integration {
            writeln!(s, "\nintegration: {} suite runs, {} tests disabled", i.suite_runs, i.disabled.len()).unwrap();
            for t in &i.disabled {
                writeln!(s, "  disabled {t}").unwrap();
            }
            if i.forfeited.total() > 0 {
                writeln!(s, "  forfeited {} lines, {} branches", i.forfeited.lines, i.forfeited.branches).unwrap();
            }
        }
        if !self.requirements.is_empty() {
            writeln!(s, "\nmissing modules: {}", self.requirements.join(", ")).unwrap();
        }
        if self.skipped_log_lines > 0 {
            writeln!(s, "\nwarning: skipped {} corrupt log lines", self.skipped_log_lines).unwrap();
        }
        s
    }
}
