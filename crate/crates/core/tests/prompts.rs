mod common;

use std::collections::BTreeMap;

use common::*;
use covergen::coverage::{line, Branch, FileCoverage};
use covergen::engine::prompt_summary;
use covergen::outline::{outline_source, LineRange};
use covergen::prompt::{PromptMessage, PromptTemplateSet, Role};
use covergen::segment::{identify_segments, render_excerpt, CodeSegment};

const PATH: &str = "flutils/codecs.py";

fn source() -> String {
    std::fs::read_to_string(fixture_dir("flutils").join(PATH)).unwrap()
}

/// The codec's hex helper with its printable-ASCII branch never taken.
fn coverage() -> FileCoverage {
    let statements = [1, 2, 3, 4, 11, 12, 15, 17, 18, 19, 20, 21, 22, 23, 24];
    FileCoverage {
        executed_lines: statements.iter().filter(|&&l| l != 19 && l != 20).map(|&l| line(l)).collect(),
        missing_lines: [line(19), line(20)].into(),
        executed_branches: [Branch::from_wire(18, 21).unwrap(), Branch::from_wire(17, 0).unwrap()].into(),
        missing_branches: [Branch::from_wire(18, 19).unwrap()].into(),
    }
}

fn segment() -> CodeSegment {
    let src = source();
    let outline = outline_source(PATH, &src).unwrap();
    let report = report_of(PATH, coverage());
    let segs = identify_segments(&report, &BTreeMap::from([(PATH.to_string(), outline)]), 50).unwrap();
    assert_eq!(segs.len(), 1);
    segs.into_iter().next().unwrap()
}

fn initial(prior: bool) -> Vec<PromptMessage> {
    let seg = segment();
    let src = source();
    let lines: Vec<&str> = src.lines().collect();
    let ex = render_excerpt(&seg, &lines).unwrap();
    let summary = prompt_summary(&seg.interesting_lines, &seg.interesting_branches);
    PromptTemplateSet::default().initial_prompt(&seg, &ex, &summary, prior).unwrap()
}

/// Byte offset of `needle` in `text`, which must hold it exactly once.
fn once(text: &str, needle: &str) -> usize {
    assert_eq!(text.matches(needle).count(), 1, "{needle:?} in:\n{text}");
    text.find(needle).unwrap()
}

#[test]
fn hex_helper_segment() {
    let seg = segment();
    assert_eq!(seg.node_span, LineRange::new(15, 24));
    assert_eq!(seg.scope_path, ["_each_utf8_hex"]);
    assert_eq!(seg.lines_of_interest(), [18, 19, 20].map(line).into());
    assert_eq!(prompt_summary(&seg.interesting_lines, &seg.interesting_branches), "lines 19-20");
}

#[test]
fn initial_prompt_has_six_parts_in_order() {
    let messages = initial(true);
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0].role, Role::System);
    assert_eq!(messages[0].content, "You are an expert Python test-driven developer.");
    assert_eq!(messages[1].role, Role::User);
    let text = &messages[1].content;
    let parts = [
        once(text, "extracted from flutils/codecs.py, module flutils.codecs, does not achieve full coverage"),
        once(text, "lines 19-20 do not execute"),
        once(text, "executes these missing lines/branches"),
        once(text, "pytest.main"),
        once(text, "Respond ONLY with the Python code enclosed in backticks"),
        once(text, "```python\n"),
    ];
    assert!(parts.windows(2).all(|w| w[0] < w[1]), "{parts:?}");
    assert!(once(text, "assertions") > parts[2] && once(text, "clean up") < parts[4]);
}

#[test]
fn excerpt_highlights_the_branch_and_its_lines() {
    let messages = initial(true);
    let text = &messages[1].content;
    let code = &text[text.find("```python\n").unwrap() + 10..text.rfind("```").unwrap()];
    let lines: Vec<&str> = code.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].ends_with("def _each_utf8_hex(text: _Str) -> \\"));
    assert!(lines[3].starts_with(" 18: "));
    assert_eq!(lines[4], " 19:             yield char");
    assert_eq!(lines[5], " 20:             continue");
    // Other lines keep their alignment without a number.
    assert_eq!(lines[2], "         for char in text:");
    assert_eq!(lines[6], "             utf8_bytes = char.encode('utf8')");
}

#[test]
fn never_executed_segment_uses_the_short_statement() {
    let messages = initial(false);
    let text = &messages[1].content;
    assert!(text.contains("when tested, it does not execute."));
    assert!(!text.contains("lines 19-20"));
    once(text, "executes these missing lines/branches");
}

#[test]
fn follow_ups() {
    let t = PromptTemplateSet::default();
    let cov = t.coverage_followup("line 20");
    assert_eq!(cov.role, Role::User);
    assert!(cov.content.contains("This test still lacks coverage: line 20 does not execute."));
    let err = t.error_followup("E   NameError: name 'pytest' is not defined\n", 4096);
    assert!(err.content.contains("```\nE   NameError: name 'pytest' is not defined\n```"));
}
