//! Coverage measurements: per-file executed/missing lines and branches,
//! the line / branch / combined metrics, deltas between measurements and the
//! compact "lines 19-20 and branch 3->exit" summaries used in prompts.
//!
//! The model stores whatever the adapter reports. Branch coverage does not
//! subsume line coverage here: a file may have missing lines and no missing
//! branches, and is then reported below 100% line coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::segment::CodeSegment;

#[derive(Debug, Error)]
pub enum CoverageError {
    #[error("no modules to aggregate")]
    EmptyScope,
    #[error("file {0} is absent from the new coverage report")]
    FileVanished(String),
    #[error("invalid coverage data: {0}")]
    Schema(String),
    #[error("cannot parse missing-coverage summary: {0}")]
    Summary(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A 1-based source line number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LineNo(u32);

impl LineNo {
    pub fn new(value: u32) -> Option<Self> {
        (value >= 1).then_some(Self(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for LineNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl Serialize for LineNo {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u32(self.0)
    }
}

impl<'de> Deserialize<'de> for LineNo {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u32::deserialize(d)?;
        LineNo::new(v).ok_or_else(|| serde::de::Error::custom("line numbers start at 1"))
    }
}

/// Shorthand used heavily by tests and fixtures. Panics on 0.
pub fn line(value: u32) -> LineNo {
    LineNo::new(value).expect("line numbers start at 1")
}

/// Destination of a branch. `Exit` leaves the enclosing function or module and
/// is encoded as `0` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BranchTarget {
    Exit,
    Line(LineNo),
}

impl BranchTarget {
    pub fn from_wire(v: u32) -> Self {
        LineNo::new(v).map_or(BranchTarget::Exit, BranchTarget::Line)
    }

    pub fn to_wire(self) -> u32 {
        match self {
            BranchTarget::Exit => 0,
            BranchTarget::Line(l) => l.get(),
        }
    }

    pub fn line(self) -> Option<LineNo> {
        match self {
            BranchTarget::Exit => None,
            BranchTarget::Line(l) => Some(l),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Branch {
    pub source: LineNo,
    pub target: BranchTarget,
}

impl Branch {
    pub fn new(source: LineNo, target: BranchTarget) -> Self {
        Self { source, target }
    }

    /// Builds a branch from wire integers; target 0 means exit.
    pub fn from_wire(source: u32, target: u32) -> Option<Self> {
        Some(Self::new(LineNo::new(source)?, BranchTarget::from_wire(target)))
    }

    /// Source and (non-exit) target lines.
    pub fn lines(&self) -> impl Iterator<Item = LineNo> {
        std::iter::once(self.source).chain(self.target.line())
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.target {
            BranchTarget::Exit => write!(f, "{}->exit", self.source),
            BranchTarget::Line(t) => write!(f, "{}->{}", self.source, t),
        }
    }
}

impl FromStr for Branch {
    type Err = CoverageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CoverageError::Summary(format!("bad branch {s:?}"));
        let (src, dst) = s.trim().split_once("->").ok_or_else(bad)?;
        let source = src.parse::<u32>().ok().and_then(LineNo::new).ok_or_else(bad)?;
        let target = if dst == "exit" {
            BranchTarget::Exit
        } else {
            BranchTarget::Line(dst.parse::<u32>().ok().and_then(LineNo::new).ok_or_else(bad)?)
        };
        Ok(Branch::new(source, target))
    }
}

impl Serialize for Branch {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        [self.source.get(), self.target.to_wire()].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Branch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [s, t] = <[u32; 2]>::deserialize(d)?;
        Branch::from_wire(s, t).ok_or_else(|| serde::de::Error::custom("branch source must be >= 1"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFileCoverage")]
pub struct FileCoverage {
    pub executed_lines: BTreeSet<LineNo>,
    pub missing_lines: BTreeSet<LineNo>,
    pub executed_branches: BTreeSet<Branch>,
    pub missing_branches: BTreeSet<Branch>,
}

#[derive(Deserialize)]
struct RawFileCoverage {
    executed_lines: Vec<LineNo>,
    missing_lines: Vec<LineNo>,
    #[serde(default)]
    executed_branches: Vec<Branch>,
    #[serde(default)]
    missing_branches: Vec<Branch>,
}

fn unique<T: Ord + fmt::Debug>(items: Vec<T>, what: &str) -> Result<BTreeSet<T>, String> {
    let mut set = BTreeSet::new();
    for item in items {
        if let Some(dup) = set.replace(item) {
            return Err(format!("duplicate entry {dup:?} in {what}"));
        }
    }
    Ok(set)
}

impl TryFrom<RawFileCoverage> for FileCoverage {
    type Error = String;

    fn try_from(raw: RawFileCoverage) -> Result<Self, String> {
        let fc = FileCoverage {
            executed_lines: unique(raw.executed_lines, "executed_lines")?,
            missing_lines: unique(raw.missing_lines, "missing_lines")?,
            executed_branches: unique(raw.executed_branches, "executed_branches")?,
            missing_branches: unique(raw.missing_branches, "missing_branches")?,
        };
        fc.check()?;
        Ok(fc)
    }
}

impl FileCoverage {
    fn check(&self) -> Result<(), String> {
        if let Some(l) = self.executed_lines.intersection(&self.missing_lines).next() {
            return Err(format!("line {l} is both executed and missing"));
        }
        if let Some(b) = self.executed_branches.intersection(&self.missing_branches).next() {
            return Err(format!("branch {b} is both executed and missing"));
        }
        Ok(())
    }

    /// A file none of whose measured lines or branches ran.
    pub fn all_missing(lines: impl IntoIterator<Item = LineNo>, branches: impl IntoIterator<Item = Branch>) -> Self {
        FileCoverage {
            missing_lines: lines.into_iter().collect(),
            missing_branches: branches.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn counts(&self) -> CoverageCounts {
        CoverageCounts {
            covered_lines: self.executed_lines.len() as u64,
            total_lines: (self.executed_lines.len() + self.missing_lines.len()) as u64,
            covered_branches: self.executed_branches.len() as u64,
            total_branches: (self.executed_branches.len() + self.missing_branches.len()) as u64,
        }
    }

    /// Union of two measurements of the same file: anything executed in
    /// either is executed.
    pub fn merge(&self, other: &FileCoverage) -> FileCoverage {
        let executed_lines: BTreeSet<_> = self.executed_lines.union(&other.executed_lines).copied().collect();
        let executed_branches: BTreeSet<_> = self.executed_branches.union(&other.executed_branches).copied().collect();
        let missing_lines =
            self.missing_lines.union(&other.missing_lines).filter(|l| !executed_lines.contains(l)).copied().collect();
        let missing_branches = self
            .missing_branches
            .union(&other.missing_branches)
            .filter(|b| !executed_branches.contains(b))
            .copied()
            .collect();
        FileCoverage { executed_lines, missing_lines, executed_branches, missing_branches }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub files: BTreeMap<String, FileCoverage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
}

impl CoverageReport {
    pub fn from_json(text: &str) -> Result<Self, CoverageError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn file(&self, path: &str) -> Option<&FileCoverage> {
        self.files.get(path)
    }

    pub fn merge(&self, other: &CoverageReport) -> CoverageReport {
        let mut files = self.files.clone();
        for (path, fc) in &other.files {
            files.entry(path.clone()).and_modify(|mine| *mine = mine.merge(fc)).or_insert_with(|| fc.clone());
        }
        CoverageReport { files, source_id: self.source_id.clone() }
    }

    pub fn counts_where(&self, mut scope: impl FnMut(&str) -> bool) -> CoverageCounts {
        self.files
            .iter()
            .filter(|(p, _)| scope(p))
            .map(|(_, fc)| fc.counts())
            .fold(CoverageCounts::default(), |acc, c| acc + c)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCounts {
    pub covered_lines: u64,
    pub total_lines: u64,
    pub covered_branches: u64,
    pub total_branches: u64,
}

impl std::ops::Add for CoverageCounts {
    type Output = CoverageCounts;

    fn add(self, o: CoverageCounts) -> CoverageCounts {
        CoverageCounts {
            covered_lines: self.covered_lines + o.covered_lines,
            total_lines: self.total_lines + o.total_lines,
            covered_branches: self.covered_branches + o.covered_branches,
            total_branches: self.total_branches + o.total_branches,
        }
    }
}

fn ratio(covered: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        covered as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    pub line_pct: f64,
    pub branch_pct: f64,
    pub combined_pct: f64,
    pub counts: CoverageCounts,
}

impl From<CoverageCounts> for CoverageMetrics {
    fn from(c: CoverageCounts) -> Self {
        CoverageMetrics {
            line_pct: ratio(c.covered_lines, c.total_lines),
            branch_pct: ratio(c.covered_branches, c.total_branches),
            combined_pct: ratio(c.covered_lines + c.covered_branches, c.total_lines + c.total_branches),
            counts: c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Line,
    Branch,
    Combined,
}

impl CoverageMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Line => self.line_pct,
            Metric::Branch => self.branch_pct,
            Metric::Combined => self.combined_pct,
        }
    }
}

/// Line, branch and combined coverage over every file in the report.
pub fn metrics(report: &CoverageReport) -> CoverageMetrics {
    metrics_where(report, |_| true)
}

/// Like [`metrics`], restricted to paths accepted by `scope`. An empty scope
/// counts as fully covered.
pub fn metrics_where(report: &CoverageReport, scope: impl FnMut(&str) -> bool) -> CoverageMetrics {
    report.counts_where(scope).into()
}

/// Per-file metrics, one entry per module.
pub fn per_module_metrics(report: &CoverageReport) -> BTreeMap<String, CoverageMetrics> {
    report.files.iter().map(|(p, fc)| (p.clone(), fc.counts().into())).collect()
}

/// Median of one metric across modules; the mean of the two central values
/// for an even count.
pub fn per_module_median(modules: &BTreeMap<String, CoverageMetrics>, metric: Metric) -> Result<f64, CoverageError> {
    let mut values: Vec<f64> = modules.values().map(|m| m.get(metric)).collect();
    if values.is_empty() {
        return Err(CoverageError::EmptyScope);
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Ok(if values.len() % 2 == 1 { values[mid] } else { (values[mid - 1] + values[mid]) / 2.0 })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageDelta {
    pub newly_executed_lines: BTreeSet<LineNo>,
    pub newly_executed_branches: BTreeSet<Branch>,
    pub improves: bool,
}

/// What `after` executes that `before` did not, restricted to the segment's
/// interesting lines and branches.
pub fn coverage_delta(
    before: &CoverageReport,
    after: &CoverageReport,
    segment: &CodeSegment,
) -> Result<CoverageDelta, CoverageError> {
    let after_fc = after.file(&segment.path).ok_or_else(|| CoverageError::FileVanished(segment.path.clone()))?;
    let empty = FileCoverage::default();
    let before_fc = before.file(&segment.path).unwrap_or(&empty);

    let newly_executed_lines: BTreeSet<_> = segment
        .interesting_lines
        .iter()
        .filter(|l| after_fc.executed_lines.contains(l) && !before_fc.executed_lines.contains(l))
        .copied()
        .collect();
    let newly_executed_branches: BTreeSet<_> = segment
        .interesting_branches
        .iter()
        .filter(|b| after_fc.executed_branches.contains(b) && !before_fc.executed_branches.contains(b))
        .copied()
        .collect();
    let improves = !newly_executed_lines.is_empty() || !newly_executed_branches.is_empty();
    Ok(CoverageDelta { newly_executed_lines, newly_executed_branches, improves })
}

/// "19-20, 22, 30-31": ascending, maximal runs collapsed.
pub fn format_line_ranges<'a>(lines: impl IntoIterator<Item = &'a LineNo>) -> String {
    let sorted: BTreeSet<u32> = lines.into_iter().map(|l| l.get()).collect();
    let mut parts = Vec::new();
    let mut iter = sorted.into_iter().peekable();
    while let Some(start) = iter.next() {
        let mut end = start;
        while iter.peek() == Some(&(end + 1)) {
            end = iter.next().unwrap();
        }
        parts.push(if start == end { start.to_string() } else { format!("{start}-{end}") });
    }
    parts.join(", ")
}

/// Parses the output of [`format_line_ranges`].
pub fn parse_line_ranges(text: &str) -> Result<BTreeSet<LineNo>, CoverageError> {
    let mut out = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || CoverageError::Summary(format!("bad line range {part:?}"));
        let num = |s: &str| s.trim().parse::<u32>().ok().and_then(LineNo::new).ok_or_else(bad);
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(bad());
                }
                out.extend((a.get()..=b.get()).map(line));
            }
            None => {
                out.insert(num(part)?);
            }
        }
    }
    Ok(out)
}

/// Renders missing coverage as "line 615 and branches 603->exit, 610->608".
/// Both sets empty yields an empty string.
pub fn format_missing(lines: &BTreeSet<LineNo>, branches: &BTreeSet<Branch>) -> String {
    let mut out = String::new();
    if !lines.is_empty() {
        out.push_str(if lines.len() == 1 { "line " } else { "lines " });
        out.push_str(&format_line_ranges(lines));
    }
    if !branches.is_empty() {
        if !out.is_empty() {
            out.push_str(" and ");
        }
        out.push_str(if branches.len() == 1 { "branch " } else { "branches " });
        let rendered: Vec<String> = branches.iter().map(Branch::to_string).collect();
        out.push_str(&rendered.join(", "));
    }
    out
}

/// Verb agreeing with a [`format_missing`] summary: "does" for exactly one
/// line or branch, "do" otherwise.
pub fn missing_verb(lines: &BTreeSet<LineNo>, branches: &BTreeSet<Branch>) -> &'static str {
    if lines.len() + branches.len() == 1 {
        "does"
    } else {
        "do"
    }
}

/// Inverse of [`format_missing`].
pub fn parse_missing(text: &str) -> Result<(BTreeSet<LineNo>, BTreeSet<Branch>), CoverageError> {
    let text = text.trim();
    let mut lines = BTreeSet::new();
    let mut branches = BTreeSet::new();
    if text.is_empty() {
        return Ok((lines, branches));
    }
    let (line_part, branch_part) =
        if let Some(rest) = text.strip_prefix("branches ").or_else(|| text.strip_prefix("branch ")) {
            (None, Some(rest))
        } else {
            let rest = text
                .strip_prefix("lines ")
                .or_else(|| text.strip_prefix("line "))
                .ok_or_else(|| CoverageError::Summary(text.to_string()))?;
            match rest.split_once(" and ") {
                Some((l, b)) => {
                    let b = b
                        .strip_prefix("branches ")
                        .or_else(|| b.strip_prefix("branch "))
                        .ok_or_else(|| CoverageError::Summary(text.to_string()))?;
                    (Some(l), Some(b))
                }
                None => (Some(rest), None),
            }
        };
    if let Some(l) = line_part {
        lines = parse_line_ranges(l)?;
    }
    if let Some(b) = branch_part {
        for item in b.split(',') {
            branches.insert(item.parse::<Branch>()?);
        }
    }
    Ok((lines, branches))
}
