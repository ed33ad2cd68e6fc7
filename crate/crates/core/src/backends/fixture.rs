//! Replay backend over a recorded JSONL fixture.
//!
//! One JSON object per line with keys `sample_id`, `stage`, `text`, and
//! optional `token_logps`. The same schema is produced by flattening run
//! interactions, so recorded real runs replay directly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_token_logps, BackendRequest, BackendResponse, ModelBackend};
use crate::error::{Error, Result};
use crate::pipeline::Stage;

/// One fixture line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureLine {
    pub sample_id: String,
    pub stage: Stage,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logps: Option<Vec<f64>>,
}

impl FixtureLine {
    /// Flattens recorded runs into fixture lines (one per interaction,
    /// plus one per probe answer), so a recorded run set replays through
    /// [`FixtureBackend`].
    pub fn from_runs(runs: &[crate::pipeline::PipelineRun]) -> Vec<FixtureLine> {
        let mut lines = Vec::new();
        for run in runs {
            for interaction in &run.interactions {
                lines.push(FixtureLine {
                    sample_id: run.sample_id.clone(),
                    stage: interaction.stage,
                    text: interaction.response.clone(),
                    token_logps: None,
                });
            }
            if let Some(answer) = &run.probe_answer {
                lines.push(FixtureLine {
                    sample_id: run.sample_id.clone(),
                    stage: Stage::Probe,
                    text: answer.clone(),
                    token_logps: None,
                });
            }
        }
        lines
    }
}

#[derive(Debug, Clone)]
struct FixtureEntry {
    text: String,
    token_logps: Option<Vec<f64>>,
}

/// Immutable in-memory replay backend.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    entries: HashMap<(String, Stage), FixtureEntry>,
}

/// Loads a fixture file. Duplicate keys resolve to the last occurrence with
/// a warning; parse and validation errors report the offending line.
pub fn load_fixture(path: impl AsRef<Path>) -> Result<FixtureBackend> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let content =
        std::fs::read_to_string(path).map_err(|source| Error::io(display.clone(), source))?;

    let mut entries = HashMap::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FixtureLine = serde_json::from_str(line).map_err(|err| Error::Schema {
            path: display.clone(),
            line: line_no,
            detail: err.to_string(),
        })?;
        if let Some(logps) = &parsed.token_logps {
            validate_token_logps(logps).map_err(|err| Error::Schema {
                path: display.clone(),
                line: line_no,
                detail: err.to_string(),
            })?;
        }
        let key = (parsed.sample_id.clone(), parsed.stage);
        if entries.contains_key(&key) {
            log::warn!(
                "{display}:{line_no}: duplicate fixture key ({}, {}), last occurrence wins",
                parsed.sample_id,
                parsed.stage
            );
        }
        entries.insert(
            key,
            FixtureEntry {
                text: parsed.text,
                token_logps: parsed.token_logps,
            },
        );
    }
    Ok(FixtureBackend { entries })
}

impl FixtureBackend {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ModelBackend for FixtureBackend {
    fn complete(&self, request: &BackendRequest) -> Result<BackendResponse> {
        request.validate()?;
        let entry = self
            .entries
            .get(&(request.sample_id.clone(), request.stage))
            .ok_or_else(|| Error::MissingKey {
                sample_id: request.sample_id.clone(),
                stage: request.stage,
            })?;
        let token_logps = if request.want_logprobs {
            entry.token_logps.clone()
        } else {
            None
        };
        Ok(BackendResponse {
            text: entry.text.clone(),
            token_logps,
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_fixture(content: &str) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        file.write_all(content.as_bytes()).unwrap();
        file
    }

    fn request(sample_id: &str, stage: Stage, want_logprobs: bool) -> BackendRequest {
        BackendRequest {
            sample_id: sample_id.to_string(),
            stage,
            prompt_text: "q".to_string(),
            context: Vec::new(),
            attachments: Vec::new(),
            want_logprobs,
        }
    }

    #[test]
    fn empty_file_errors_on_every_key() {
        let file = write_fixture("");
        let backend = load_fixture(file.path()).unwrap();
        assert!(backend.is_empty());
        assert!(backend
            .complete(&request("s1", Stage::Roundness, false))
            .is_err());
    }

    #[test]
    fn five_lines_give_five_keys() {
        let lines: Vec<String> = Stage::COT_ORDER
            .iter()
            .map(|stage| format!(r#"{{"sample_id":"s1","stage":"{stage}","text":"yes"}}"#,))
            .collect();
        let file = write_fixture(&lines.join("\n"));
        let backend = load_fixture(file.path()).unwrap();
        assert_eq!(backend.len(), 5);
        for stage in Stage::COT_ORDER {
            assert_eq!(
                backend.complete(&request("s1", stage, false)).unwrap().text,
                "yes"
            );
        }
    }

    #[test]
    fn malformed_line_names_its_number() {
        let file = write_fixture(concat!(
            "{\"sample_id\":\"s1\",\"stage\":\"roundness\",\"text\":\"yes\"}\n",
            "{\"sample_id\":\"s1\",\"stage\":\"length\",\"text\":\"no\"}\n",
            "{not json}\n",
        ));
        let err = load_fixture(file.path()).unwrap_err();
        match err {
            Error::Schema { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_last_wins() {
        let file = write_fixture(concat!(
            "{\"sample_id\":\"s1\",\"stage\":\"probe\",\"text\":\"first\"}\n",
            "{\"sample_id\":\"s1\",\"stage\":\"probe\",\"text\":\"second\"}\n",
        ));
        let backend = load_fixture(file.path()).unwrap();
        assert_eq!(backend.len(), 1);
        assert_eq!(
            backend
                .complete(&request("s1", Stage::Probe, false))
                .unwrap()
                .text,
            "second"
        );
    }

    #[test]
    fn logprobs_only_when_requested() {
        let file = write_fixture(
            "{\"sample_id\":\"s1\",\"stage\":\"probe\",\"text\":\"a\",\"token_logps\":[-0.5,-1.0]}\n",
        );
        let backend = load_fixture(file.path()).unwrap();
        let with = backend
            .complete(&request("s1", Stage::Probe, true))
            .unwrap();
        assert_eq!(with.token_logps, Some(vec![-0.5, -1.0]));
        let without = backend
            .complete(&request("s1", Stage::Probe, false))
            .unwrap();
        assert!(without.token_logps.is_none());
    }

    #[test]
    fn positive_logprobs_are_rejected_at_load() {
        let file = write_fixture(
            "{\"sample_id\":\"s1\",\"stage\":\"probe\",\"text\":\"a\",\"token_logps\":[0.5]}\n",
        );
        let err = load_fixture(file.path()).unwrap_err();
        match err {
            Error::Schema { line, detail, .. } => {
                assert_eq!(line, 1);
                assert!(detail.contains("logprob"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn replay_is_byte_identical() {
        let file = write_fixture(
            "{\"sample_id\":\"s1\",\"stage\":\"final_decision\",\"text\":\"a cell phone\"}\n",
        );
        let backend = load_fixture(file.path()).unwrap();
        let a = backend
            .complete(&request("s1", Stage::FinalDecision, false))
            .unwrap();
        let b = backend
            .complete(&request("s1", Stage::FinalDecision, false))
            .unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
    }
}
