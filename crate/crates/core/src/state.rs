//! Checkpointable run progress.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coverage::{CoverageDelta, CoverageReport};
use crate::gateway::{ChatResponse, UsageCounters};
use crate::prompt::PromptMessage;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint {path} is unreadable: {message}")]
    Corrupt { path: String, message: String },
    #[error("checkpoint version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint was written under a different configuration (digest {found}, current {expected})")]
    ConfigMismatch { found: String, expected: String },
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so
/// readers see either the old or the new content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Hex SHA-256 of a value's canonical JSON.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    FailedError,
    FailedNoImprovement,
    MissingModules,
    Discarded,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accepted => "accepted",
            Verdict::FailedError => "failed_error",
            Verdict::FailedNoImprovement => "failed_no_improvement",
            Verdict::MissingModules => "missing_modules",
            Verdict::Discarded => "discarded",
        }
    }
}

/// One generated candidate and what happened to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateTest {
    pub source_text: String,
    pub segment_key: String,
    pub round: u32,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<CoverageDelta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_excerpt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentOutcome {
    pub segment_key: String,
    pub segment_name: String,
    pub rounds_used: u32,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub candidates: Vec<CandidateTest>,
    pub transcript: Vec<PromptMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedTest {
    pub segment_key: String,
    pub round: u32,
    /// Coverage of the test run alone, used to price disabling it.
    pub coverage: CoverageReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub version: u32,
    pub config_digest: String,
    pub baseline: CoverageReport,
    pub cumulative: CoverageReport,
    /// Sorted by segment key.
    pub outcomes: Vec<SegmentOutcome>,
    /// Accepted test files, keyed by file name in the suite directory.
    pub accepted: BTreeMap<String, AcceptedTest>,
    /// `success_by_round[i]` counts tests accepted on prompt `i + 1`.
    pub success_by_round: Vec<u64>,
    pub usage: UsageCounters,
    pub requirements: BTreeSet<String>,
    pub next_test_index: u64,
}

impl RunState {
    pub fn new(config_digest: String, baseline: CoverageReport, max_rounds: u32) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_digest,
            cumulative: baseline.clone(),
            baseline,
            outcomes: Vec::new(),
            accepted: BTreeMap::new(),
            success_by_round: vec![0; max_rounds as usize],
            usage: UsageCounters::default(),
            requirements: BTreeSet::new(),
            next_test_index: 1,
        }
    }

    pub fn outcome(&self, key: &str) -> Option<&SegmentOutcome> {
        self.outcomes.binary_search_by(|o| o.segment_key.as_str().cmp(key)).ok().map(|i| &self.outcomes[i])
    }

    pub fn record_outcome(&mut self, outcome: SegmentOutcome) {
        match self.outcomes.binary_search_by(|o| o.segment_key.cmp(&outcome.segment_key)) {
            Ok(i) => self.outcomes[i] = outcome,
            Err(i) => self.outcomes.insert(i, outcome),
        }
    }

    pub fn record_usage(&mut self, response: &ChatResponse) {
        self.usage.record(response);
    }

    pub fn tally(&mut self, round: u32) {
        let idx = round.saturating_sub(1) as usize;
        if self.success_by_round.len() <= idx {
            self.success_by_round.resize(idx + 1, 0);
        }
        self.success_by_round[idx] += 1;
    }

    pub fn accepted_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.verdict == Verdict::Accepted).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), StateError> {
        write_atomic(path, self.to_json().as_bytes())
            .map_err(|source| StateError::Io { path: path.display().to_string(), source })
    }

    /// Loads a checkpoint, refusing anything unreadable or written under a
    /// different configuration.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<Self, StateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| StateError::Io { path: path.display().to_string(), source })?;
        let state: RunState = serde_json::from_str(&text)
            .map_err(|e| StateError::Corrupt { path: path.display().to_string(), message: e.to_string() })?;
        if state.version != CHECKPOINT_VERSION {
            return Err(StateError::Version { found: state.version });
        }
        if let Some(expected) = expected_digest {
            if state.config_digest != expected {
                return Err(StateError::ConfigMismatch { found: state.config_digest, expected: expected.to_string() });
            }
        }
        Ok(state)
    }

    /// The state with fields that legitimately depend on scheduling
    /// removed: test file numbering follows completion order under
    /// parallelism.
    pub fn canonical(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("state serializes");
        let by_segment: BTreeMap<&str, &AcceptedTest> =
            self.accepted.values().map(|t| (t.segment_key.as_str(), t)).collect();
        v["accepted"] = serde_json::to_value(by_segment).unwrap();
        if let Some(outcomes) = v["outcomes"].as_array_mut() {
            for o in outcomes {
                if o.get("test_file").is_some() {
                    o["test_file"] = serde_json::Value::Bool(true);
                }
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(key: &str, verdict: Verdict) -> SegmentOutcome {
        SegmentOutcome {
            segment_key: key.into(),
            segment_name: key.into(),
            rounds_used: 1,
            verdict,
            test_file: (verdict == Verdict::Accepted).then(|| format!("test_{key}.py")),
            reason: None,
            candidates: vec![],
            transcript: vec![PromptMessage::user("hi")],
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut s = RunState::new("abc".into(), CoverageReport::default(), 3);
        s.record_outcome(outcome("b", Verdict::Accepted));
        s.record_outcome(outcome("a", Verdict::Discarded));
        s.tally(2);
        s.requirements.insert("pytest_ansible".into());
        s.save(&path).unwrap();
        let back = RunState::load(&path, Some("abc")).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.outcomes[0].segment_key, "a");
        assert!(back.outcome("b").is_some());
        assert_eq!(back.success_by_round, vec![0, 1, 0]);
    }

    #[test]
    fn refuses_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        RunState::new("abc".into(), CoverageReport::default(), 3).save(&path).unwrap();
        assert!(matches!(RunState::load(&path, Some("xyz")), Err(StateError::ConfigMismatch { .. })));
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(RunState::load(&path, None), Err(StateError::Corrupt { .. })));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn canonical_ignores_file_numbering() {
        let mut a = RunState::new("d".into(), CoverageReport::default(), 3);
        let mut b = a.clone();
        let acc = |k: &str| AcceptedTest { segment_key: k.into(), round: 1, coverage: CoverageReport::default() };
        a.accepted.insert("test_covergen_1.py".into(), acc("x"));
        a.accepted.insert("test_covergen_2.py".into(), acc("y"));
        b.accepted.insert("test_covergen_1.py".into(), acc("y"));
        b.accepted.insert("test_covergen_2.py".into(), acc("x"));
        assert_ne!(a, b);
        assert_eq!(a.canonical(), b.canonical());
    }
}
