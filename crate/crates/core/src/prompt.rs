//! Prompt assembly: the initial test request for a segment and the two
//! follow-ups (still missing coverage, execution error).
//!
//! Wording lives in a template file ([`DEFAULT_TEMPLATES`] ships built in);
//! this module only decides which parts go where.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::parse_missing;
use crate::segment::{CodeSegment, SegmentExcerpt};

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/prompts.toml");

/// Default number of trailing characters of a failure kept in an error
/// follow-up.
pub const DEFAULT_ERROR_TAIL: usize = 4096;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("segment {0} has prior coverage but nothing is missing")]
    InconsistentSegment(String),
    #[error("template {template}: {message}")]
    Template { template: &'static str, message: String },
    #[error("cannot read templates: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse templates: {0}")]
    Toml(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMessage {
    pub role: Role,
    pub content: String,
}

impl PromptMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplateSet {
    pub persona: String,
    pub provenance: String,
    pub provenance_no_coverage: String,
    pub request: String,
    pub constraints: String,
    pub respond_only: String,
    pub excerpt: String,
    pub coverage_followup: String,
    pub error_followup: String,
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("built-in templates are valid")
    }
}

const SEGMENT_VARS: &[&str] = &["file", "module", "missing", "do"];

impl PromptTemplateSet {
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let set: PromptTemplateSet = toml::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn entries(&self) -> [(&'static str, &str, &'static [&'static str]); 9] {
        [
            ("persona", &self.persona, &[]),
            ("provenance", &self.provenance, SEGMENT_VARS),
            ("provenance_no_coverage", &self.provenance_no_coverage, SEGMENT_VARS),
            ("request", &self.request, SEGMENT_VARS),
            ("constraints", &self.constraints, SEGMENT_VARS),
            ("respond_only", &self.respond_only, &[]),
            ("excerpt", &self.excerpt, &["excerpt", "file", "module"]),
            ("coverage_followup", &self.coverage_followup, &["missing", "do"]),
            ("error_followup", &self.error_followup, &["failure"]),
        ]
    }

    fn validate(&self) -> Result<(), PromptError> {
        for (name, text, allowed) in self.entries() {
            if text.trim().is_empty() {
                return Err(PromptError::Template { template: name, message: "empty".into() });
            }
            for var in placeholders(text).map_err(|message| PromptError::Template { template: name, message })? {
                if !allowed.contains(&var.as_str()) {
                    return Err(PromptError::Template {
                        template: name,
                        message: format!("unknown placeholder {{{var}}}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Persona as the system message, then one user message holding the
    /// provenance/missing-coverage statement, the request, the constraints,
    /// the respond-only instruction and the excerpt.
    pub fn initial_prompt(
        &self,
        segment: &CodeSegment,
        excerpt: &SegmentExcerpt,
        missing_summary: &str,
        prior_coverage: bool,
    ) -> Result<Vec<PromptMessage>, PromptError> {
        let provenance = if !prior_coverage {
            &self.provenance_no_coverage
        } else if missing_summary.trim().is_empty() {
            return Err(PromptError::InconsistentSegment(segment.key()));
        } else {
            &self.provenance
        };
        let verb = verb_for(missing_summary);
        let vars = [
            ("file", segment.path.as_str()),
            ("module", segment.module_name.as_str()),
            ("missing", missing_summary),
            ("do", verb),
            ("excerpt", excerpt.text.as_str()),
        ];
        let parts = [provenance, &self.request, &self.constraints, &self.respond_only, &self.excerpt]
            .into_iter()
            .map(|t| substitute(t, &vars))
            .collect::<Vec<_>>();
        Ok(vec![PromptMessage::system(substitute(&self.persona, &vars)), PromptMessage::user(parts.join("\n"))])
    }

    pub fn coverage_followup(&self, still_missing: &str) -> PromptMessage {
        PromptMessage::user(substitute(
            &self.coverage_followup,
            &[("missing", still_missing), ("do", verb_for(still_missing))],
        ))
    }

    /// Error follow-up embedding the last `tail_budget` characters of the
    /// failure output.
    pub fn error_followup(&self, failure: &str, tail_budget: usize) -> PromptMessage {
        let tail = tail_chars(failure.trim_end(), tail_budget);
        PromptMessage::user(substitute(&self.error_followup, &[("failure", tail)]))
    }
}

fn verb_for(summary: &str) -> &'static str {
    match parse_missing(summary) {
        Ok((lines, branches)) if lines.len() + branches.len() == 1 => "does",
        _ => "do",
    }
}

/// The last `budget` characters of `text`.
pub fn tail_chars(text: &str, budget: usize) -> &str {
    let count = text.chars().count();
    if count <= budget {
        return text;
    }
    let skip = count - budget;
    let (idx, _) = text.char_indices().nth(skip).expect("skip < count");
    &text[idx..]
}

fn placeholders(template: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = template.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(c) if c.is_ascii_alphanumeric() || c == '_' => name.push(c),
                        _ => return Err(format!("malformed placeholder after {{{name}")),
                    }
                }
                out.push(name);
            }
            '}' => return Err("unmatched '}'".into()),
            _ => {}
        }
    }
    Ok(out)
}

/// Replaces `{name}` placeholders. Templates are validated on load, so
/// unknown names cannot occur here.
fn substitute(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
        } else if let Some(end) = tail.find('}').filter(|_| tail.starts_with('{')) {
            let name = &tail[1..end];
            let value = vars.iter().find(|(k, _)| *k == name).map_or("", |(_, v)| v);
            out.push_str(value);
            rest = &tail[end + 1..];
        } else {
            out.push_str(&tail[..1]);
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

/// Rough token count: a quarter token per character plus four per message.
pub fn estimate_tokens(messages: &[PromptMessage]) -> usize {
    if messages.is_empty() {
        return 0;
    }
    let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    chars.div_ceil(4) + 4 * messages.len()
}
