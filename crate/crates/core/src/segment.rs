//! Splits files lacking coverage into code segments suitable for prompting,
//! and renders segment excerpts with the relevant lines numbered.
//!
//! For each interesting line the segmenter picks the outermost named scope
//! containing it, then descends only through classes longer than `max_len`,
//! keeping each such class's header as context. Long functions are kept
//! whole. Lines outside any named scope get a module-level window of up to
//! `max_len` lines around them, clipped so it never overlaps a definition or
//! another window.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::{Branch, CoverageReport, FileCoverage, LineNo};
use crate::outline::{LineRange, OutlineNode};

pub const DEFAULT_MAX_LEN: u32 = 50;

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("no outline for {0}")]
    NoOutline(String),
    #[error("max_len must be at least 1")]
    BadMaxLen,
    #[error("outline for {path} is stale: line {line} is past the end of the file ({len} lines)")]
    StaleOutline { path: String, line: u32, len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSegment {
    pub path: String,
    pub module_name: String,
    /// Names of the enclosing scopes, outermost first, ending with the node
    /// itself. Empty for module-level windows.
    pub scope_path: Vec<String>,
    pub node_span: LineRange,
    /// Headers of the enclosing over-long classes, outermost first.
    pub context_headers: Vec<LineRange>,
    pub interesting_lines: BTreeSet<LineNo>,
    pub interesting_branches: BTreeSet<Branch>,
}

impl CodeSegment {
    /// Stable identifier, used to key outcomes and checkpoints.
    pub fn key(&self) -> String {
        format!("{}:{}-{}", self.path, self.node_span.start, self.node_span.end)
    }

    pub fn name(&self) -> String {
        if self.scope_path.is_empty() {
            format!("{} (module level)", self.module_name)
        } else {
            format!("{}.{}", self.module_name, self.scope_path.join("."))
        }
    }

    /// Interesting lines plus the endpoints of interesting branches.
    pub fn lines_of_interest(&self) -> BTreeSet<LineNo> {
        let mut out = self.interesting_lines.clone();
        out.extend(self.interesting_branches.iter().flat_map(Branch::lines));
        out
    }

    /// True when no line of the segment ran in `fc`.
    pub fn without_prior_coverage(&self, fc: &FileCoverage) -> bool {
        !fc.executed_lines.iter().any(|l| self.node_span.contains(*l))
    }
}

/// Lines lacking coverage, plus the source and (non-exit) destination of
/// every branch lacking coverage.
pub fn interesting_lines(fc: &FileCoverage) -> BTreeSet<LineNo> {
    let mut out = fc.missing_lines.clone();
    out.extend(fc.missing_branches.iter().flat_map(Branch::lines));
    out
}

/// Identifies the segments of every file in `report` that lacks coverage.
/// Files with nothing interesting need no outline.
pub fn identify_segments(
    report: &CoverageReport,
    outlines: &BTreeMap<String, OutlineNode>,
    max_len: u32,
) -> Result<Vec<CodeSegment>, SegmentError> {
    if max_len == 0 {
        return Err(SegmentError::BadMaxLen);
    }
    let mut out = Vec::new();
    for (path, fc) in &report.files {
        let interesting = interesting_lines(fc);
        if interesting.is_empty() {
            continue;
        }
        let outline = outlines.get(path).ok_or_else(|| SegmentError::NoOutline(path.clone()))?;
        out.extend(segments_for_file(path, fc, outline, &interesting, max_len));
    }
    Ok(out)
}

/// Segments for one file, restricted to `interesting` lines.
pub fn segments_for_file(
    path: &str,
    fc: &FileCoverage,
    outline: &OutlineNode,
    interesting: &BTreeSet<LineNo>,
    max_len: u32,
) -> Vec<CodeSegment> {
    let mut by_span: BTreeMap<LineRange, CodeSegment> = BTreeMap::new();
    let mut windows: Vec<LineRange> = Vec::new();
    let new_segment = |span, scope_path, context_headers| CodeSegment {
        path: path.to_string(),
        module_name: outline.name.clone(),
        scope_path,
        node_span: span,
        context_headers,
        interesting_lines: BTreeSet::new(),
        interesting_branches: BTreeSet::new(),
    };

    for &line in interesting {
        let Some(mut node) = outline.child_containing(line) else {
            let window = match windows.iter().find(|w| w.contains(line)) {
                Some(w) => *w,
                None => {
                    let w = module_window(outline, line, max_len, windows.last());
                    windows.push(w);
                    w
                }
            };
            by_span
                .entry(window)
                .or_insert_with(|| new_segment(window, Vec::new(), Vec::new()))
                .interesting_lines
                .insert(line);
            continue;
        };
        let mut context = Vec::new();
        let mut scope = vec![node.name.clone()];
        while node.is_class() && node.span.len() > max_len {
            let Some(inner) = node.child_containing(line) else { break };
            context.push(node.header);
            node = inner;
            scope.push(node.name.clone());
        }
        by_span
            .entry(node.span)
            .or_insert_with(|| new_segment(node.span, scope, context))
            .interesting_lines
            .insert(line);
    }

    // A missing branch belongs to every segment holding one of its endpoints.
    for b in &fc.missing_branches {
        for seg in by_span.values_mut() {
            if b.lines().any(|l| seg.interesting_lines.contains(&l)) {
                seg.interesting_branches.insert(*b);
            }
        }
    }
    // Branch endpoints made the lines interesting; keep only genuinely
    // missing lines in the line set.
    for seg in by_span.values_mut() {
        let branch_only: Vec<LineNo> =
            seg.interesting_lines.iter().filter(|l| !fc.missing_lines.contains(l)).copied().collect();
        for l in branch_only {
            seg.interesting_lines.remove(&l);
        }
    }
    by_span.into_values().collect()
}

/// Window of at most `max_len` lines centred on a top-level `line`, clipped
/// to the run of top-level lines around it and to after the previous window.
fn module_window(outline: &OutlineNode, line: LineNo, max_len: u32, prev: Option<&LineRange>) -> LineRange {
    let l = line.get();
    let gap_start = outline
        .children
        .iter()
        .filter(|c| c.span.end < l)
        .map(|c| c.span.end + 1)
        .max()
        .unwrap_or(1)
        .max(prev.map_or(1, |p| p.end + 1));
    let gap_end = outline
        .children
        .iter()
        .filter(|c| c.span.start > l)
        .map(|c| c.span.start - 1)
        .min()
        .unwrap_or(outline.span.end.max(l));
    let before = (max_len - 1) / 2;
    let mut start = l.saturating_sub(before).max(gap_start);
    let end = (start + max_len - 1).min(gap_end);
    if end - start + 1 < max_len {
        start = end.saturating_sub(max_len - 1).max(gap_start);
    }
    LineRange::new(start, end)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentExcerpt {
    pub text: String,
    pub highlighted_lines: BTreeSet<LineNo>,
}

/// Renders the segment: context headers, a blank separator, then the node's
/// lines. Lines of interest carry a right-aligned `N: ` prefix sized to the
/// file's widest line number; other lines are padded to the same column.
pub fn render_excerpt(segment: &CodeSegment, source_lines: &[&str]) -> Result<SegmentExcerpt, SegmentError> {
    let len = source_lines.len();
    let check = |r: &LineRange| {
        if r.end as usize > len {
            Err(SegmentError::StaleOutline { path: segment.path.clone(), line: r.end, len })
        } else {
            Ok(())
        }
    };
    segment.context_headers.iter().try_for_each(check)?;
    check(&segment.node_span)?;

    let width = len.max(1).to_string().len();
    let of_interest = segment.lines_of_interest();
    let mut highlighted = BTreeSet::new();
    let mut out: Vec<String> = Vec::new();
    let mut emit = |n: u32, out: &mut Vec<String>| {
        let text = source_lines[n as usize - 1];
        let ln = LineNo::new(n).unwrap();
        let rendered = if of_interest.contains(&ln) {
            highlighted.insert(ln);
            format!("{n:>width$}: {text}")
        } else {
            format!("{:width$}  {text}", "")
        };
        out.push(rendered.trim_end().to_string());
    };
    for header in &segment.context_headers {
        for n in header.lines() {
            emit(n, &mut out);
        }
    }
    if !segment.context_headers.is_empty() {
        out.push(String::new());
    }
    for n in segment.node_span.lines() {
        emit(n, &mut out);
    }
    Ok(SegmentExcerpt { text: out.join("\n") + "\n", highlighted_lines: highlighted })
}

/// Recovers the numbered lines from a rendered excerpt.
pub fn parse_highlights(text: &str) -> BTreeSet<LineNo> {
    text.lines()
        .filter_map(|l| {
            let (num, _) = l.trim_start().split_once(": ").or_else(|| l.trim_start().split_once(':'))?;
            num.parse::<u32>().ok().and_then(LineNo::new)
        })
        .collect()
}
