//! Syntax outlines: the nesting of classes and functions in a source file
//! together with their line spans.
//!
//! Outlines come either from the built-in Python scanner ([`outline_source`])
//! or from an adapter, as JSON in the interchange format
//! `{"kind","name","header":[a,b],"span":[a,b],"children":[...]}`.
//!
//! The scanner is not a full parser. It splits the text into logical lines
//! (handling strings, comments, brackets and backslash continuations), tracks
//! indentation, and recognises `def`, `async def`, `class` and decorators.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::LineNo;

#[derive(Debug, Error, PartialEq)]
pub enum OutlineError {
    #[error("{line}:{column}: {message}")]
    ParseFailure { line: u32, column: u32, message: String },
    #[error("invalid outline: {0}")]
    Invalid(String),
    #[error("invalid outline JSON: {0}")]
    Json(String),
}

fn parse_failure(line: u32, column: u32, message: impl Into<String>) -> OutlineError {
    OutlineError::ParseFailure { line, column, message: message.into() }
}

/// Inclusive range of 1-based lines. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct LineRange {
    pub start: u32,
    pub end: u32,
}

impl From<[u32; 2]> for LineRange {
    fn from([start, end]: [u32; 2]) -> Self {
        LineRange { start, end }
    }
}

impl From<LineRange> for [u32; 2] {
    fn from(r: LineRange) -> Self {
        [r.start, r.end]
    }
}

impl LineRange {
    pub fn new(start: u32, end: u32) -> Self {
        debug_assert!(start >= 1 && start <= end, "bad range {start}..{end}");
        LineRange { start, end }
    }

    pub fn len(&self) -> u32 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, line: LineNo) -> bool {
        self.start <= line.get() && line.get() <= self.end
    }

    pub fn contains_range(&self, other: &LineRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn overlaps(&self, other: &LineRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    pub fn lines(&self) -> impl Iterator<Item = u32> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Module,
    Class,
    Function,
    Method,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineNode {
    pub kind: NodeKind,
    pub name: String,
    /// Definition line(s) including decorators.
    pub header: LineRange,
    pub span: LineRange,
    #[serde(default)]
    pub children: Vec<OutlineNode>,
}

impl OutlineNode {
    /// Parses and validates an outline in the interchange format.
    pub fn from_json(text: &str) -> Result<Self, OutlineError> {
        let node: OutlineNode = serde_json::from_str(text).map_err(|e| OutlineError::Json(e.to_string()))?;
        node.validate()?;
        Ok(node)
    }

    pub fn validate(&self) -> Result<(), OutlineError> {
        if self.span.start < 1 || self.span.start > self.span.end {
            return Err(OutlineError::Invalid(format!("{}: bad span {:?}", self.name, self.span)));
        }
        if self.header.start > self.header.end || !self.span.contains_range(&self.header) {
            return Err(OutlineError::Invalid(format!("{}: header outside span", self.name)));
        }
        let mut prev_end = 0;
        for child in &self.children {
            if !self.span.contains_range(&child.span) {
                return Err(OutlineError::Invalid(format!("{} escapes {}", child.name, self.name)));
            }
            if child.span.start <= prev_end {
                return Err(OutlineError::Invalid(format!("{} overlaps a sibling", child.name)));
            }
            prev_end = child.span.end;
            child.validate()?;
        }
        Ok(())
    }

    /// The direct child whose span contains `line`.
    pub fn child_containing(&self, line: LineNo) -> Option<&OutlineNode> {
        self.children.iter().find(|c| c.span.contains(line))
    }

    pub fn is_class(&self) -> bool {
        self.kind == NodeKind::Class
    }

    /// Number of nodes in the tree, including this one.
    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(OutlineNode::node_count).sum::<usize>()
    }
}

/// Dotted import name for a path relative to the source root:
/// `flutils/codecs/raw_utf8_escape.py` becomes `flutils.codecs.raw_utf8_escape`.
pub fn module_name_for_path(path: &str) -> String {
    let trimmed = path.strip_suffix(".py").unwrap_or(path);
    let trimmed = trimmed.strip_suffix("/__init__").unwrap_or(trimmed);
    trimmed.trim_start_matches("./").replace('/', ".")
}

/// One logical source line, possibly spanning several physical lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicalLine {
    pub start: u32,
    pub end: u32,
    /// Indentation column of the first physical line (tabs expand to 8).
    pub indent: usize,
    /// Code text of the logical line, comments removed, physical lines joined.
    pub text: String,
}

fn indent_width(line: &str) -> usize {
    let mut col = 0;
    for c in line.chars() {
        match c {
            ' ' => col += 1,
            '\t' => col = (col / 8 + 1) * 8,
            '\x0c' => col = 0,
            _ => break,
        }
    }
    col
}

struct OpenString {
    quote: char,
    triple: bool,
    line: u32,
    column: u32,
}

/// Splits Python source into logical lines, skipping blank and comment-only
/// lines, and checks indentation consistency.
pub fn logical_lines(source: &str) -> Result<Vec<LogicalLine>, OutlineError> {
    let mut out = Vec::new();
    let mut string: Option<OpenString> = None;
    let mut brackets: Vec<(char, u32, u32)> = Vec::new();
    let mut current: Option<LogicalLine> = None;
    let mut indents: Vec<usize> = vec![0];
    let mut prev_opens_block = false;

    for (idx, raw) in source.lines().enumerate() {
        let lineno = idx as u32 + 1;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;

        if current.is_none() {
            let stripped = raw.trim_start();
            if stripped.is_empty() || stripped.starts_with('#') {
                continue;
            }
            let indent = indent_width(raw);
            let top = *indents.last().unwrap();
            if indent > top {
                if !prev_opens_block {
                    return Err(parse_failure(lineno, 1, "unexpected indent"));
                }
                indents.push(indent);
            } else if indent < top {
                while *indents.last().unwrap() > indent {
                    indents.pop();
                }
                if *indents.last().unwrap() != indent {
                    return Err(parse_failure(lineno, 1, "unindent does not match any outer indentation level"));
                }
            }
            current = Some(LogicalLine { start: lineno, end: lineno, indent, text: String::new() });
            i = chars.len() - stripped.chars().count();
        }
        let ll = current.as_mut().unwrap();
        ll.end = lineno;
        let mut continued = false;

        while i < chars.len() {
            let c = chars[i];
            if let Some(open) = &string {
                if c == '\\' {
                    ll.text.push(c);
                    if i + 1 < chars.len() {
                        ll.text.push(chars[i + 1]);
                    } else {
                        continued = true;
                    }
                    i += 2;
                    continue;
                }
                if c == open.quote {
                    if !open.triple {
                        string = None;
                        ll.text.push(c);
                        i += 1;
                        continue;
                    }
                    if chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c) {
                        string = None;
                        ll.text.extend([c, c, c]);
                        i += 3;
                        continue;
                    }
                }
                ll.text.push(c);
                i += 1;
                continue;
            }
            match c {
                '#' => break,
                '\'' | '"' => {
                    let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
                    string = Some(OpenString { quote: c, triple, line: lineno, column: i as u32 + 1 });
                    let n = if triple { 3 } else { 1 };
                    ll.text.extend(std::iter::repeat_n(c, n));
                    i += n;
                    continue;
                }
                '(' | '[' | '{' => brackets.push((c, lineno, i as u32 + 1)),
                ')' | ']' | '}' => {
                    let expected = match c {
                        ')' => '(',
                        ']' => '[',
                        _ => '{',
                    };
                    match brackets.pop() {
                        Some((open, _, _)) if open == expected => {}
                        _ => return Err(parse_failure(lineno, i as u32 + 1, format!("unmatched '{c}'"))),
                    }
                }
                '\\' if i + 1 == chars.len() => {
                    continued = true;
                    i += 1;
                    continue;
                }
                _ => {}
            }
            ll.text.push(c);
            i += 1;
        }

        if let Some(open) = &string {
            if !open.triple && !continued {
                return Err(parse_failure(open.line, open.column, "unterminated string literal"));
            }
            ll.text.push('\n');
            continue;
        }
        if continued || !brackets.is_empty() {
            ll.text.push(' ');
            continue;
        }
        let done = current.take().unwrap();
        prev_opens_block = done.text.trim_end().ends_with(':');
        out.push(done);
    }

    if let Some(open) = string {
        return Err(parse_failure(open.line, open.column, "unterminated string literal"));
    }
    if let Some((c, line, column)) = brackets.pop() {
        return Err(parse_failure(line, column, format!("'{c}' was never closed")));
    }
    if let Some(ll) = current {
        return Err(parse_failure(ll.end, 1, "unexpected end of file after line continuation"));
    }
    Ok(out)
}

fn identifier_prefix(s: &str) -> Option<&str> {
    let end = s.char_indices().find(|(_, c)| !(c.is_alphanumeric() || *c == '_')).map_or(s.len(), |(i, _)| i);
    let ident = &s[..end];
    (!ident.is_empty() && !ident.starts_with(|c: char| c.is_ascii_digit())).then_some(ident)
}

/// Recognises `def name`, `async def name` and `class name`.
fn definition(text: &str) -> Option<(bool, &str)> {
    let text = text.trim_start();
    let text = text.strip_prefix("async").map(str::trim_start).filter(|t| t.starts_with("def")).unwrap_or(text);
    if let Some(rest) = text.strip_prefix("def") {
        if rest.starts_with(char::is_whitespace) {
            return identifier_prefix(rest.trim_start()).map(|n| (false, n));
        }
    }
    if let Some(rest) = text.strip_prefix("class") {
        if rest.starts_with(char::is_whitespace) {
            return identifier_prefix(rest.trim_start()).map(|n| (true, n));
        }
    }
    None
}

struct Open {
    node: OutlineNode,
    indent: usize,
}

/// Builds the outline of a Python source file. The root is a module node
/// spanning the whole file.
pub fn outline_source(path: &str, source: &str) -> Result<OutlineNode, OutlineError> {
    let lines = logical_lines(source)?;
    let total = source.lines().count().max(1) as u32;
    let root = OutlineNode {
        kind: NodeKind::Module,
        name: module_name_for_path(path),
        header: LineRange::new(1, 1),
        span: LineRange::new(1, total),
        children: Vec::new(),
    };
    let mut stack = vec![Open { node: root, indent: 0 }];
    let mut prev_end = 0;
    let mut decorator_start: Option<u32> = None;

    fn close(stack: &mut Vec<Open>, end: u32) {
        let mut open = stack.pop().unwrap();
        open.node.span.end = end;
        stack.last_mut().unwrap().node.children.push(open.node);
    }

    for ll in &lines {
        while stack.len() > 1 && ll.indent <= stack.last().unwrap().indent {
            close(&mut stack, prev_end);
        }
        prev_end = ll.end;

        if ll.text.starts_with('@') {
            decorator_start.get_or_insert(ll.start);
            continue;
        }
        let header_start = decorator_start.take().unwrap_or(ll.start);
        if let Some((is_class, name)) = definition(&ll.text) {
            let parent_kind = stack.last().unwrap().node.kind;
            let kind = if is_class {
                NodeKind::Class
            } else if parent_kind == NodeKind::Class {
                NodeKind::Method
            } else {
                NodeKind::Function
            };
            stack.push(Open {
                node: OutlineNode {
                    kind,
                    name: name.to_string(),
                    header: LineRange::new(header_start, ll.end),
                    span: LineRange::new(header_start, ll.end),
                    children: Vec::new(),
                },
                indent: ll.indent,
            });
        }
    }
    while stack.len() > 1 {
        close(&mut stack, prev_end);
    }
    Ok(stack.pop().unwrap().node)
}

/// Top-level module names imported by the source (`import a.b` gives `a`).
/// Relative imports are skipped.
pub fn imported_modules(source: &str) -> Result<Vec<String>, OutlineError> {
    let mut names = Vec::new();
    for ll in logical_lines(source)? {
        let text = ll.text.trim();
        if let Some(rest) = text.strip_prefix("import ") {
            for item in rest.split(',') {
                let module = item.split_whitespace().next().unwrap_or("");
                if let Some(top) = module.split('.').next().filter(|s| !s.is_empty()) {
                    names.push(top.to_string());
                }
            }
        } else if let Some(rest) = text.strip_prefix("from ") {
            let module = rest.split_whitespace().next().unwrap_or("");
            if module.starts_with('.') {
                continue;
            }
            if let Some(top) = module.split('.').next().filter(|s| !s.is_empty()) {
                names.push(top.to_string());
            }
        }
    }
    names.sort();
    names.dedup();
    Ok(names)
}

/// Whether the text scans cleanly and contains at least one statement that
/// only code would start with.
pub fn looks_like_code(source: &str) -> bool {
    const STARTERS: [&str; 8] = ["def ", "async def ", "class ", "import ", "from ", "assert ", "@", "with "];
    match logical_lines(source) {
        Ok(lines) => lines.iter().any(|ll| STARTERS.iter().any(|s| ll.text.starts_with(s))),
        Err(_) => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(node: &OutlineNode) -> Vec<(String, u32, u32)> {
        let mut out = vec![(node.name.clone(), node.span.start, node.span.end)];
        for c in &node.children {
            out.extend(spans(c));
        }
        out
    }

    #[test]
    fn minimal_nesting() {
        let o = outline_source("a.py", "class A:\n  def m(self): ...\n").unwrap();
        assert_eq!(o.kind, NodeKind::Module);
        assert_eq!(o.span, LineRange::new(1, 2));
        let a = &o.children[0];
        assert_eq!((a.kind, a.name.as_str(), a.span), (NodeKind::Class, "A", LineRange::new(1, 2)));
        let m = &a.children[0];
        assert_eq!((m.kind, m.name.as_str(), m.span), (NodeKind::Method, "m", LineRange::new(2, 2)));
        o.validate().unwrap();
    }

    #[test]
    fn decorators_belong_to_header() {
        let src = "import functools\n\n@functools.lru_cache(\n    maxsize=3)\n@staticmethod\ndef f(x):\n    return x\n";
        let o = outline_source("a.py", src).unwrap();
        let f = &o.children[0];
        assert_eq!(f.header, LineRange::new(3, 6));
        assert_eq!(f.span, LineRange::new(3, 7));
    }

    #[test]
    fn methods_do_not_swallow_siblings() {
        let src = "\
class C:
    x = 1

    def a(self):
        # comment
        return 1

    def b(self):
        s = '''
def not_a_def():
'''
        return s
y = 2
";
        let o = outline_source("c.py", src).unwrap();
        assert_eq!(spans(&o), vec![("c".into(), 1, 13), ("C".into(), 1, 12), ("a".into(), 4, 6), ("b".into(), 8, 12)]);
        assert_eq!(o.children[0].children[1].kind, NodeKind::Method);
    }

    #[test]
    fn nested_functions_and_async() {
        let src = "async def outer():\n    def inner():\n        pass\n    return inner\n";
        let o = outline_source("n.py", src).unwrap();
        let outer = &o.children[0];
        assert_eq!(outer.name, "outer");
        assert_eq!(outer.children[0].kind, NodeKind::Function);
        assert_eq!(outer.children[0].span, LineRange::new(2, 3));
    }

    #[test]
    fn multi_line_signature() {
        let src = "def _each_utf8_hex(text: _Str) -> \\\n        Generator[str, None, None]:\n    for char in text:\n        yield char\n";
        let o = outline_source("f.py", src).unwrap();
        assert_eq!(o.children[0].header, LineRange::new(1, 2));
        assert_eq!(o.children[0].span, LineRange::new(1, 4));
    }

    #[test]
    fn parse_failures_carry_position() {
        assert_eq!(
            outline_source("x.py", "def f():\n    return 'abc\n"),
            Err(OutlineError::ParseFailure { line: 2, column: 12, message: "unterminated string literal".into() })
        );
        assert!(matches!(
            outline_source("x.py", "x = (1,\n"),
            Err(OutlineError::ParseFailure { line: 1, column: 5, .. })
        ));
        assert!(matches!(
            outline_source("x.py", "if x:\n        a = 1\n    b = 2\n"),
            Err(OutlineError::ParseFailure { line: 3, .. })
        ));
        assert!(matches!(outline_source("x.py", "  a = 1\n"), Err(OutlineError::ParseFailure { line: 1, .. })));
        assert!(matches!(
            outline_source("x.py", "x = 1)\n"),
            Err(OutlineError::ParseFailure { line: 1, column: 6, .. })
        ));
    }

    #[test]
    fn deterministic() {
        let src = "class A:\n    def f(self):\n        pass\n";
        assert_eq!(outline_source("a.py", src), outline_source("a.py", src));
    }

    #[test]
    fn interchange_json() {
        let json = r#"{"kind":"module","name":"m","header":[1,1],"span":[1,10],
            "children":[{"kind":"function","name":"f","header":[2,2],"span":[2,5],"children":[]}]}"#;
        let o = OutlineNode::from_json(json).unwrap();
        assert_eq!(o.children[0].span, LineRange::new(2, 5));
        let back = serde_json::to_string(&o).unwrap();
        assert_eq!(OutlineNode::from_json(&back).unwrap(), o);

        let bad = r#"{"kind":"module","name":"m","header":[1,1],"span":[1,3],
            "children":[{"kind":"function","name":"f","header":[2,2],"span":[2,5]}]}"#;
        assert!(matches!(OutlineNode::from_json(bad), Err(OutlineError::Invalid(_))));
    }

    #[test]
    fn module_names() {
        assert_eq!(module_name_for_path("flutils/codecs/raw_utf8_escape.py"), "flutils.codecs.raw_utf8_escape");
        assert_eq!(module_name_for_path("pkg/__init__.py"), "pkg");
    }

    #[test]
    fn imports() {
        let src = "import os, sys as system\nimport a.b.c\nfrom pytest_ansible.x import y\nfrom . import sibling\n";
        assert_eq!(imported_modules(src).unwrap(), vec!["a", "os", "pytest_ansible", "sys"]);
    }

    #[test]
    fn code_detection() {
        assert!(looks_like_code("import pytest\n\ndef test_x():\n    assert 1\n"));
        assert!(!looks_like_code("I don't know how to write this test."));
        assert!(!looks_like_code("Sure, here is a test"));
    }
}
