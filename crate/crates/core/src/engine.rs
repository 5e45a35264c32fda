//! Per-segment generation loop and the bounded-parallel driver around it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapter::{TargetAdapter, TestStatus};
use crate::coverage::{coverage_delta, format_missing, Branch, CoverageError, CoverageReport, FileCoverage, LineNo};
use crate::gateway::{ChatGateway, ChatRequest, UsageCounters};
use crate::outline::{imported_modules, looks_like_code, outline_source, OutlineError, OutlineNode};
use crate::prompt::{estimate_tokens, PromptMessage, PromptTemplateSet, DEFAULT_ERROR_TAIL};
use crate::segment::{render_excerpt, segments_for_file, CodeSegment, DEFAULT_MAX_LEN};
use crate::state::{AcceptedTest, CandidateTest, RunState, SegmentOutcome, StateError, Verdict};

pub const DEFAULT_MAX_ROUNDS: u32 = 3;
pub const TEST_FILE_PREFIX: &str = "test_covergen_";

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("response contains no code")]
    NoCode,
    #[error(transparent)]
    Checkpoint(#[from] StateError),
    #[error("cannot write accepted test {path}: {source}")]
    SuiteWrite { path: PathBuf, source: std::io::Error },
    #[error("cannot read source {path}: {source}")]
    Source { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Outline(#[from] OutlineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub max_rounds: u32,
    pub max_len: u32,
    pub parallel: usize,
    pub error_tail: usize,
    /// Largest prompt, in estimated tokens, ever sent.
    pub context_budget: Option<usize>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            temperature: 0.0,
            max_output_tokens: None,
            max_rounds: DEFAULT_MAX_ROUNDS,
            max_len: DEFAULT_MAX_LEN,
            parallel: 1,
            error_tail: DEFAULT_ERROR_TAIL,
            context_budget: None,
        }
    }
}

/// Body of the first fenced block, or the whole reply when it has no fence
/// but reads as code.
pub fn extract_test(content: &str) -> Result<String, LoopError> {
    if let Some(open) = content.find("```") {
        let after = &content[open + 3..];
        // The rest of the opening line is the language tag.
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let end = if body.starts_with("```") { Some(0) } else { body.find("\n```").map(|i| i + 1) };
        let text = match end {
            Some(e) => &body[..e],
            None => body,
        };
        return Ok(text.to_string());
    }
    if looks_like_code(content) {
        Ok(content.to_string())
    } else {
        Err(LoopError::NoCode)
    }
}

/// Top-level modules imported by `source` that the target cannot import.
pub fn precheck_modules(source: &str, adapter: &dyn TargetAdapter) -> Result<BTreeSet<String>, OutlineError> {
    Ok(imported_modules(source)?.into_iter().filter(|m| !adapter.module_available(m)).collect())
}

/// Missing-coverage text for a prompt. A branch into a line that is itself
/// missing adds nothing, so it is left out.
pub fn prompt_summary(lines: &BTreeSet<LineNo>, branches: &BTreeSet<Branch>) -> String {
    let relevant: BTreeSet<Branch> =
        branches.iter().filter(|b| b.target.line().is_none_or(|t| !lines.contains(&t))).copied().collect();
    format_missing(lines, &relevant)
}

/// Interesting lines and branches of `segment` not executed in `fc`.
pub fn still_missing(segment: &CodeSegment, fc: Option<&FileCoverage>) -> (BTreeSet<LineNo>, BTreeSet<Branch>) {
    let empty = FileCoverage::default();
    let fc = fc.unwrap_or(&empty);
    (
        segment.interesting_lines.iter().filter(|l| !fc.executed_lines.contains(l)).copied().collect(),
        segment.interesting_branches.iter().filter(|b| !fc.executed_branches.contains(b)).copied().collect(),
    )
}

/// Line-delimited JSON event sink.
pub struct EventLog {
    out: Mutex<Box<dyn Write + Send>>,
}

impl EventLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        Self { out: Mutex::new(out) }
    }

    pub fn to_file(path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(Box::new(f)))
    }

    pub fn emit(&self, event: &str, mut fields: serde_json::Value) {
        fields["event"] = json!(event);
        let mut out = self.out.lock().unwrap();
        if let Err(e) = writeln!(out, "{fields}").and_then(|_| out.flush()) {
            log::warn!("event log write failed: {e}");
        }
    }
}

/// Source text and outlines for every file that has something to cover.
#[derive(Debug, Clone, Default)]
pub struct SourceTree {
    pub texts: BTreeMap<String, String>,
    pub outlines: BTreeMap<String, OutlineNode>,
}

impl SourceTree {
    /// Reads and outlines each file of `report` that lacks coverage. Outlines
    /// from the adapter take precedence over the built-in parser.
    pub fn load(source_dir: &Path, report: &CoverageReport, adapter: &dyn TargetAdapter) -> Result<Self, LoopError> {
        let mut tree = SourceTree::default();
        for (path, fc) in &report.files {
            if fc.missing_lines.is_empty() && fc.missing_branches.is_empty() {
                continue;
            }
            let full = source_dir.join(path);
            let text = std::fs::read_to_string(&full).map_err(|source| LoopError::Source { path: full, source })?;
            let outline = match adapter.outline(path) {
                Some(o) => o,
                None => outline_source(path, &text)?,
            };
            tree.outlines.insert(path.clone(), outline);
            tree.texts.insert(path.clone(), text);
        }
        Ok(tree)
    }
}

/// What one segment's chat produced, before it is committed to the state.
#[derive(Debug, Clone)]
pub struct SegmentResult {
    pub outcome: SegmentOutcome,
    pub accepted: Option<(String, CoverageReport)>,
    pub usage: UsageCounters,
    pub requirements: BTreeSet<String>,
}

pub struct Engine<'a> {
    pub config: &'a LoopConfig,
    pub templates: &'a PromptTemplateSet,
    pub gateway: &'a dyn ChatGateway,
    pub adapter: &'a dyn TargetAdapter,
    pub sources: &'a SourceTree,
    pub suite_dir: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub events: Option<&'a EventLog>,
    /// Stop committing after this many outcomes in one call to `run_all`.
    pub stop_after: Option<usize>,
}

impl Engine<'_> {
    fn emit(&self, event: &str, fields: serde_json::Value) {
        if let Some(log) = self.events {
            log.emit(event, fields);
        }
    }

    fn initial_messages(&self, segment: &CodeSegment, baseline: &CoverageReport) -> Result<Vec<PromptMessage>, String> {
        let text = self.sources.texts.get(&segment.path).ok_or_else(|| format!("no source for {}", segment.path))?;
        let lines: Vec<&str> = text.lines().collect();
        let excerpt = render_excerpt(segment, &lines).map_err(|e| e.to_string())?;
        let prior = baseline.file(&segment.path).is_some_and(|fc| !segment.without_prior_coverage(fc));
        let summary = prompt_summary(&segment.interesting_lines, &segment.interesting_branches);
        self.templates.initial_prompt(segment, &excerpt, &summary, prior).map_err(|e| e.to_string())
    }

    fn over_budget(&self, messages: &[PromptMessage]) -> bool {
        self.config.context_budget.is_some_and(|b| estimate_tokens(messages) > b)
    }

    /// Replaces segments whose initial prompt is over the context budget by
    /// segments found with successively smaller `max_len`.
    pub fn fit_to_budget(&self, segments: Vec<CodeSegment>, baseline: &CoverageReport) -> Vec<CodeSegment> {
        if self.config.context_budget.is_none() {
            return segments;
        }
        let mut out = Vec::new();
        let mut queue: Vec<(CodeSegment, u32)> = segments.into_iter().rev().map(|s| (s, self.config.max_len)).collect();
        while let Some((seg, max_len)) = queue.pop() {
            let fits = self.initial_messages(&seg, baseline).map(|m| !self.over_budget(&m)).unwrap_or(true);
            let (Some(outline), Some(fc), false) =
                (self.sources.outlines.get(&seg.path), baseline.file(&seg.path), fits)
            else {
                out.push(seg);
                continue;
            };
            let smaller = (max_len / 2).max(1);
            let split = segments_for_file(&seg.path, fc, outline, &seg.lines_of_interest(), smaller);
            if max_len == 1 || split.len() == 1 && split[0].node_span == seg.node_span {
                out.push(seg);
                continue;
            }
            log::info!("{} is over the context budget; re-segmenting with max_len {smaller}", seg.key());
            queue.extend(split.into_iter().rev().map(|s| (s, smaller)));
        }
        out.sort_by(|a, b| (&a.path, a.node_span).cmp(&(&b.path, b.node_span)));
        out.dedup_by(|a, b| a.key() == b.key());
        out
    }

    /// Runs the chat for one segment. Acceptance is judged against the
    /// cumulative coverage in `state` at the time the candidate finishes.
    pub fn process_segment(&self, segment: &CodeSegment, state: &Mutex<RunState>) -> SegmentResult {
        let key = segment.key();
        let baseline = state.lock().unwrap().baseline.clone();
        let mut result = SegmentResult {
            outcome: SegmentOutcome {
                segment_key: key.clone(),
                segment_name: segment.name(),
                rounds_used: 0,
                verdict: Verdict::Discarded,
                test_file: None,
                reason: None,
                candidates: Vec::new(),
                transcript: Vec::new(),
            },
            accepted: None,
            usage: UsageCounters::default(),
            requirements: BTreeSet::new(),
        };
        let finish = |mut r: SegmentResult, verdict: Verdict, reason: Option<String>| {
            r.outcome.verdict = verdict;
            r.outcome.reason = reason;
            self.emit(
                "outcome",
                json!({"segment": r.outcome.segment_key, "verdict": verdict.as_str(), "rounds_used": r.outcome.rounds_used}),
            );
            r
        };

        let mut transcript = match self.initial_messages(segment, &baseline) {
            Ok(m) => m,
            Err(e) => return finish(result, Verdict::Discarded, Some(e)),
        };
        for round in 1..=self.config.max_rounds {
            if self.over_budget(&transcript) {
                result.outcome.transcript = transcript;
                return finish(result, Verdict::Discarded, Some("prompt exceeds the context budget".into()));
            }
            let request = ChatRequest {
                model: self.config.model.clone(),
                messages: transcript.clone(),
                temperature: self.config.temperature,
                max_output_tokens: self.config.max_output_tokens,
            };
            result.outcome.rounds_used = round;
            self.emit("prompt", json!({"segment": key, "round": round, "tokens": estimate_tokens(&transcript)}));
            let response = match self.gateway.complete(&request) {
                Ok(r) => r,
                Err(e) => {
                    result.outcome.transcript = transcript;
                    return finish(result, Verdict::Discarded, Some(format!("gateway: {e}")));
                }
            };
            result.usage.record(&response);
            transcript.push(PromptMessage::assistant(response.content.clone()));

            let mut candidate = CandidateTest {
                source_text: String::new(),
                segment_key: key.clone(),
                round,
                verdict: Verdict::FailedError,
                delta: None,
                failure_excerpt: None,
            };
            let followup = match self.evaluate(segment, &response.content, &mut candidate, state, &mut result) {
                Step::Terminal(verdict, reason) => {
                    self.emit("verdict", json!({"segment": key, "round": round, "verdict": verdict.as_str()}));
                    result.outcome.candidates.push(candidate);
                    result.outcome.transcript = transcript;
                    return finish(result, verdict, reason);
                }
                Step::Continue(msg) => msg,
            };
            self.emit("verdict", json!({"segment": key, "round": round, "verdict": candidate.verdict.as_str()}));
            result.outcome.candidates.push(candidate);
            if round < self.config.max_rounds {
                transcript.push(followup);
            }
        }
        let last = result.outcome.candidates.last().map(|c| c.verdict).unwrap_or(Verdict::Discarded);
        result.outcome.transcript = transcript;
        let reason = format!("no acceptable test after {} prompts", self.config.max_rounds);
        finish(result, last, Some(reason))
    }

    fn evaluate(
        &self,
        segment: &CodeSegment,
        content: &str,
        candidate: &mut CandidateTest,
        state: &Mutex<RunState>,
        result: &mut SegmentResult,
    ) -> Step {
        let source = match extract_test(content) {
            Ok(s) => s,
            Err(_) => {
                let msg = "The response did not contain a Python code block.";
                candidate.failure_excerpt = Some(msg.into());
                return Step::Continue(self.templates.error_followup(msg, self.config.error_tail));
            }
        };
        candidate.source_text = source.clone();
        match precheck_modules(&source, self.adapter) {
            Ok(missing) if !missing.is_empty() => {
                candidate.verdict = Verdict::MissingModules;
                let names = missing.iter().cloned().collect::<Vec<_>>().join(", ");
                result.requirements.extend(missing);
                return Step::Terminal(Verdict::MissingModules, Some(format!("missing modules: {names}")));
            }
            Ok(_) => {}
            Err(e) => {
                let msg = e.to_string();
                candidate.failure_excerpt = Some(msg.clone());
                return Step::Continue(self.templates.error_followup(&msg, self.config.error_tail));
            }
        }
        let exec = match self.adapter.run_candidate(&source) {
            Ok(x) => x,
            Err(e) => {
                candidate.verdict = Verdict::Discarded;
                return Step::Terminal(Verdict::Discarded, Some(format!("adapter: {e}")));
            }
        };
        if exec.status != TestStatus::Pass {
            let excerpt =
                if exec.output.trim().is_empty() { format!("test status: {:?}", exec.status) } else { exec.output };
            candidate.failure_excerpt = Some(excerpt.clone());
            return Step::Continue(self.templates.error_followup(&excerpt, self.config.error_tail));
        }

        let cumulative = state.lock().unwrap().cumulative.clone();
        let delta = match coverage_delta(&cumulative, &exec.coverage, segment) {
            Ok(d) => d,
            Err(CoverageError::FileVanished(_)) => Default::default(),
            Err(e) => {
                candidate.verdict = Verdict::Discarded;
                return Step::Terminal(Verdict::Discarded, Some(e.to_string()));
            }
        };
        let improves = delta.improves;
        candidate.delta = Some(delta);
        if improves {
            candidate.verdict = Verdict::Accepted;
            result.accepted = Some((source, exec.coverage));
            return Step::Terminal(Verdict::Accepted, None);
        }
        candidate.verdict = Verdict::FailedNoImprovement;
        let merged = cumulative.merge(&exec.coverage);
        let (lines, branches) = still_missing(segment, merged.file(&segment.path));
        let summary = prompt_summary(&lines, &branches);
        if summary.is_empty() {
            return Step::Terminal(Verdict::FailedNoImprovement, Some("segment is already covered".into()));
        }
        Step::Continue(self.templates.coverage_followup(&summary))
    }

    /// Applies a finished segment to the state: writes the accepted test,
    /// folds its coverage into the cumulative report and tallies it.
    pub fn commit(&self, state: &mut RunState, mut result: SegmentResult) -> Result<(), LoopError> {
        if let Some((source, coverage)) = result.accepted.take() {
            let name = format!("{TEST_FILE_PREFIX}{}.py", state.next_test_index);
            let path = self.suite_dir.join(&name);
            std::fs::create_dir_all(self.suite_dir)
                .and_then(|_| std::fs::write(&path, &source))
                .map_err(|source| LoopError::SuiteWrite { path: path.clone(), source })?;
            state.next_test_index += 1;
            state.cumulative = state.cumulative.merge(&coverage);
            let round = result.outcome.rounds_used;
            state.accepted.insert(
                name.clone(),
                AcceptedTest { segment_key: result.outcome.segment_key.clone(), round, coverage },
            );
            state.tally(round);
            self.emit("tally", json!({"segment": result.outcome.segment_key, "round": round, "test_file": name}));
            result.outcome.test_file = Some(name);
        }
        state.usage.calls += result.usage.calls;
        state.usage.prompt_tokens += result.usage.prompt_tokens;
        state.usage.completion_tokens += result.usage.completion_tokens;
        state.requirements.extend(result.requirements);
        state.record_outcome(result.outcome);
        if let Some(path) = self.checkpoint {
            state.save(path)?;
        }
        Ok(())
    }

    /// Processes every segment without a recorded outcome, `parallel` at a
    /// time. Returns the state and whether every segment was processed.
    pub fn run_all(&self, segments: &[CodeSegment], state: RunState) -> Result<(RunState, bool), LoopError> {
        let pending: Vec<&CodeSegment> = segments.iter().filter(|s| state.outcome(&s.key()).is_none()).collect();
        let skipped = segments.len() - pending.len();
        if skipped > 0 {
            log::info!("resuming: {skipped} segments already have outcomes");
        }
        let state = Mutex::new(state);
        let next = AtomicUsize::new(0);
        let committed = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let failure: Mutex<Option<LoopError>> = Mutex::new(None);
        let workers = self.config.parallel.max(1).min(pending.len().max(1));

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(segment) = pending.get(i) else { break };
                    log::info!("segment {} ({})", segment.key(), segment.name());
                    let result = self.process_segment(segment, &state);
                    let mut guard = state.lock().unwrap();
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Err(e) = self.commit(&mut guard, result) {
                        stop.store(true, Ordering::SeqCst);
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                    let n = committed.fetch_add(1, Ordering::SeqCst) + 1;
                    if self.stop_after.is_some_and(|limit| n >= limit) {
                        stop.store(true, Ordering::SeqCst);
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        let complete = committed.into_inner() == pending.len();
        Ok((state.into_inner().unwrap(), complete))
    }
}

enum Step {
    Terminal(Verdict, Option<String>),
    Continue(PromptMessage),
}
