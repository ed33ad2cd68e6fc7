//! Staged recognition cascade: three attribute probes, a clarity
//! self-reflection, and a final decision that conditionally routes through a
//! 3D reconstruction expert. Every run produces a complete audit trace.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendRequest, ExpertBackend, ModelBackend};
use crate::error::{Error, Result};

/// Request kinds seen by a backend. The five reasoning stages run in the
/// fixed order below; `Probe` is the standalone recognition question used
/// for description scoring and never appears in a reasoning trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Roundness,
    Length,
    Thickness,
    SelfReflection,
    FinalDecision,
    Probe,
}

impl Stage {
    /// The five reasoning stages in execution order.
    pub const COT_ORDER: [Stage; 5] = [
        Stage::Roundness,
        Stage::Length,
        Stage::Thickness,
        Stage::SelfReflection,
        Stage::FinalDecision,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Roundness => "roundness",
            Stage::Length => "length",
            Stage::Thickness => "thickness",
            Stage::SelfReflection => "self_reflection",
            Stage::FinalDecision => "final_decision",
            Stage::Probe => "probe",
        };
        f.write_str(name)
    }
}

/// One answered question, carried forward as prompt context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

/// Boolean attribute triple (roundness / length / thickness).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attributes {
    pub round: bool,
    pub long: bool,
    pub thin: bool,
}

/// One input item: an image locator plus gold labels used downstream for
/// annotation and scoring (never shown to the backend).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub image_ref: String,
    pub gold_object: String,
    pub gold_attributes: Attributes,
    pub occlusion_ratio: f64,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("sample id must be non-empty"));
        }
        if self.image_ref.is_empty() {
            return Err(Error::invalid(format!(
                "sample `{}` has an empty image_ref",
                self.id
            )));
        }
        if !self.occlusion_ratio.is_finite() || !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(Error::invalid(format!(
                "sample `{}` occlusion_ratio {} outside [0, 1]",
                self.id, self.occlusion_ratio
            )));
        }
        Ok(())
    }
}

/// A fully assembled prompt for one stage: question text, the ordered QA
/// context accumulated so far, and attached visual resources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePrompt {
    pub stage: Stage,
    pub text: String,
    pub context: Vec<QaPair>,
    pub attachments: Vec<String>,
}

/// One model call in the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interaction {
    pub stage: Stage,
    pub prompt: StagePrompt,
    pub response: String,
    pub latency_ms: u64,
}

/// Verdict of the self-reflection stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clarity {
    Clear,
    Unclear,
}

/// Raw answers of the three attribute probes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdAnswers {
    pub round: String,
    pub long: String,
    pub thin: String,
}

/// Anomalies recorded on a run without failing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunFlag {
    /// The reflection answer had no leading yes/no and the configured
    /// fallback was applied.
    ReflectionFallback,
    /// The expert failed and the run degraded to a direct final decision.
    ExpertDegraded,
}

/// Complete execution trace of the cascade for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineRun {
    pub sample_id: String,
    pub sd_answers: SdAnswers,
    pub sr_answer: Clarity,
    pub expert_invoked: bool,
    pub expert_output_ref: Option<String>,
    pub fd_answer: String,
    /// Answer of the standalone recognition probe, when probing is enabled.
    pub probe_answer: Option<String>,
    /// Whether expert gating was active for this run.
    pub expert_enabled: bool,
    pub flags: Vec<RunFlag>,
    pub interactions: Vec<Interaction>,
}

impl PipelineRun {
    /// Checks every structural invariant of a completed run: exactly five
    /// reasoning interactions in fixed stage order, monotone context,
    /// gating consistency, and expert-reference consistency.
    pub fn check_invariants(&self) -> Result<()> {
        if self.interactions.len() != 5 {
            return Err(Error::invalid(format!(
                "run `{}` has {} interactions, expected 5",
                self.sample_id,
                self.interactions.len()
            )));
        }
        for (interaction, expected) in self.interactions.iter().zip(Stage::COT_ORDER) {
            if interaction.stage != expected || interaction.prompt.stage != expected {
                return Err(Error::invalid(format!(
                    "run `{}` stage order violation: found {}, expected {}",
                    self.sample_id, interaction.stage, expected
                )));
            }
        }
        for pair in self.interactions.windows(2) {
            let (prev, next) = (&pair[0].prompt.context, &pair[1].prompt.context);
            if next.len() < prev.len() || &next[..prev.len()] != prev.as_slice() {
                return Err(Error::invalid(format!(
                    "run `{}` context is not a prefix-extension across stages",
                    self.sample_id
                )));
            }
        }
        if self.expert_enabled {
            if self.expert_invoked != (self.sr_answer == Clarity::Unclear) {
                return Err(Error::invalid(format!(
                    "run `{}` gating violation: expert_invoked={} but sr_answer={:?}",
                    self.sample_id, self.expert_invoked, self.sr_answer
                )));
            }
        } else if self.expert_invoked {
            return Err(Error::invalid(format!(
                "run `{}` invoked the expert while gating was disabled",
                self.sample_id
            )));
        }
        let degraded = self.flags.contains(&RunFlag::ExpertDegraded);
        let expect_ref = self.expert_invoked && !degraded;
        if expect_ref != self.expert_output_ref.is_some() {
            return Err(Error::invalid(format!(
                "run `{}` expert_output_ref presence inconsistent with invocation",
                self.sample_id
            )));
        }
        Ok(())
    }
}

/// The five question templates. Defaults match the evaluation wording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuestionTemplates {
    pub roundness: String,
    pub length: String,
    pub thickness: String,
    pub self_reflection: String,
    pub final_decision: String,
}

impl Default for QuestionTemplates {
    fn default() -> Self {
        Self {
            roundness: "Is the object in the hand round?".to_string(),
            length: "Is the object in the hand long?".to_string(),
            thickness: "Is the object in the hand thin?".to_string(),
            self_reflection: "Is it clear to identify the object?".to_string(),
            final_decision: "What is the object in the hand?".to_string(),
        }
    }
}

impl QuestionTemplates {
    pub fn for_stage(&self, stage: Stage) -> &str {
        match stage {
            Stage::Roundness => &self.roundness,
            Stage::Length => &self.length,
            Stage::Thickness => &self.thickness,
            Stage::SelfReflection => &self.self_reflection,
            // The probe asks the recognition question standalone.
            Stage::FinalDecision | Stage::Probe => &self.final_decision,
        }
    }
}

/// What to do when the expert fails on an unclear sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertFailurePolicy {
    FailRun,
    /// Proceed to a direct final decision and flag the run.
    #[default]
    DegradeToDirect,
}

/// Per-stage retry policy for transient backend errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay_ms: 100,
        }
    }
}

/// Execution configuration for the cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub templates: QuestionTemplates,
    /// Clarity assigned when the reflection answer has no leading yes/no.
    /// Defaults to `Unclear` so ambiguity routes to the expert.
    pub reflection_fallback: Clarity,
    pub expert_failure_policy: ExpertFailurePolicy,
    pub retry: RetryPolicy,
    /// When false the expert is never invoked, regardless of clarity.
    pub expert_enabled: bool,
    /// When true each run also asks the recognition question standalone.
    pub probe_enabled: bool,
    /// Bounded worker count for batch execution.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            templates: QuestionTemplates::default(),
            reflection_fallback: Clarity::Unclear,
            expert_failure_policy: ExpertFailurePolicy::default(),
            retry: RetryPolicy::default(),
            expert_enabled: true,
            probe_enabled: true,
            workers: 8,
        }
    }
}

/// Builds the three description-stage prompts in fixed order
/// (roundness, length, thickness). Contexts start empty and are extended
/// with each answered question during execution.
pub fn build_stage_prompts(
    sample: &Sample,
    templates: &QuestionTemplates,
) -> Result<Vec<StagePrompt>> {
    sample.validate()?;
    Ok([Stage::Roundness, Stage::Length, Stage::Thickness]
        .into_iter()
        .map(|stage| StagePrompt {
            stage,
            text: templates.for_stage(stage).to_string(),
            context: Vec::new(),
            attachments: vec![sample.image_ref.clone()],
        })
        .collect())
}

/// Parses a reflection answer: a case-insensitive leading "yes"/"no" token
/// wins; anything else yields the fallback plus a flag.
pub fn parse_reflection(raw: &str, fallback: Clarity) -> (Clarity, bool) {
    let token: String = raw
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    match token.as_str() {
        "yes" => (Clarity::Clear, false),
        "no" => (Clarity::Unclear, false),
        _ => (fallback, true),
    }
}

fn context_from(trace: &[Interaction]) -> Vec<QaPair> {
    trace
        .iter()
        .map(|i| QaPair {
            question: i.prompt.text.clone(),
            answer: i.response.clone(),
        })
        .collect()
}

/// Calls the backend with per-stage retries for transient errors.
fn call_with_retry(
    backend: &dyn ModelBackend,
    request: &BackendRequest,
    retry: &RetryPolicy,
) -> Result<crate::backends::BackendResponse> {
    let mut attempt = 0;
    loop {
        match backend.complete(request) {
            Ok(response) => return Ok(response),
            Err(err) if err.is_transient() && attempt < retry.max_retries => {
                let delay = retry.base_delay_ms.saturating_mul(1 << attempt);
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            Err(err) => return Err(err),
        }
    }
}

fn run_stage(
    backend: &dyn ModelBackend,
    sample: &Sample,
    prompt: StagePrompt,
    config: &PipelineConfig,
    trace: &mut Vec<Interaction>,
) -> Result<String> {
    let request = BackendRequest {
        sample_id: sample.id.clone(),
        stage: prompt.stage,
        prompt_text: prompt.text.clone(),
        context: prompt.context.clone(),
        attachments: prompt.attachments.clone(),
        want_logprobs: false,
    };
    let stage = prompt.stage;
    let response =
        call_with_retry(backend, &request, &config.retry).map_err(|err| Error::StageFailure {
            sample_id: sample.id.clone(),
            stage,
            detail: err.to_string(),
            partial: trace.clone(),
        })?;
    trace.push(Interaction {
        stage,
        prompt,
        response: response.text.clone(),
        latency_ms: response.latency_ms,
    });
    Ok(response.text)
}

/// Runs the three attribute probes in order, threading each answer into the
/// next prompt's context.
pub fn run_description_stage(
    backend: &dyn ModelBackend,
    sample: &Sample,
    config: &PipelineConfig,
    trace: &mut Vec<Interaction>,
) -> Result<SdAnswers> {
    let mut answers = Vec::with_capacity(3);
    for mut prompt in build_stage_prompts(sample, &config.templates)? {
        prompt.context = context_from(trace);
        answers.push(run_stage(backend, sample, prompt, config, trace)?);
    }
    let mut it = answers.into_iter();
    Ok(SdAnswers {
        round: it.next().unwrap(),
        long: it.next().unwrap(),
        thin: it.next().unwrap(),
    })
}

/// Asks the clarity question over the accumulated context and parses the
/// verdict. Returns the clarity and whether the fallback rule fired.
pub fn run_reflection_stage(
    backend: &dyn ModelBackend,
    sample: &Sample,
    config: &PipelineConfig,
    trace: &mut Vec<Interaction>,
) -> Result<(Clarity, bool)> {
    let prompt = StagePrompt {
        stage: Stage::SelfReflection,
        text: config.templates.self_reflection.clone(),
        context: context_from(trace),
        attachments: vec![sample.image_ref.clone()],
    };
    let raw = run_stage(backend, sample, prompt, config, trace)?;
    Ok(parse_reflection(&raw, config.reflection_fallback))
}

/// Outcome of the final decision stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FdOutcome {
    pub fd_answer: String,
    pub expert_invoked: bool,
    pub expert_output_ref: Option<String>,
    pub degraded: bool,
}

/// Runs the final decision. On an unclear verdict the expert is invoked
/// exactly once and its output attached to the prompt; on a clear verdict
/// the question is asked directly.
pub fn run_final_decision_stage(
    backend: &dyn ModelBackend,
    expert: &dyn ExpertBackend,
    sample: &Sample,
    sr_answer: Clarity,
    config: &PipelineConfig,
    trace: &mut Vec<Interaction>,
) -> Result<FdOutcome> {
    let mut attachments = vec![sample.image_ref.clone()];
    let mut expert_invoked = false;
    let mut expert_output_ref = None;
    let mut degraded = false;

    if config.expert_enabled && sr_answer == Clarity::Unclear {
        expert_invoked = true;
        match expert.reconstruct(&sample.image_ref) {
            Ok(recon_ref) => {
                attachments.push(recon_ref.clone());
                expert_output_ref = Some(recon_ref);
            }
            Err(err) => match config.expert_failure_policy {
                ExpertFailurePolicy::FailRun => {
                    return Err(Error::StageFailure {
                        sample_id: sample.id.clone(),
                        stage: Stage::FinalDecision,
                        detail: err.to_string(),
                        partial: trace.clone(),
                    });
                }
                ExpertFailurePolicy::DegradeToDirect => degraded = true,
            },
        }
    }

    let prompt = StagePrompt {
        stage: Stage::FinalDecision,
        text: config.templates.final_decision.clone(),
        context: context_from(trace),
        attachments,
    };
    let fd_answer = run_stage(backend, sample, prompt, config, trace)?;
    Ok(FdOutcome {
        fd_answer,
        expert_invoked,
        expert_output_ref,
        degraded,
    })
}

/// Asks the recognition question standalone, with no reasoning context.
pub fn run_probe(
    backend: &dyn ModelBackend,
    sample: &Sample,
    config: &PipelineConfig,
) -> Result<String> {
    sample.validate()?;
    let request = BackendRequest {
        sample_id: sample.id.clone(),
        stage: Stage::Probe,
        prompt_text: config.templates.final_decision.clone(),
        context: Vec::new(),
        attachments: vec![sample.image_ref.clone()],
        want_logprobs: false,
    };
    let response =
        call_with_retry(backend, &request, &config.retry).map_err(|err| Error::StageFailure {
            sample_id: sample.id.clone(),
            stage: Stage::Probe,
            detail: err.to_string(),
            partial: Vec::new(),
        })?;
    Ok(response.text)
}

/// Executes the full cascade for one sample. Deterministic given
/// deterministic backends; the returned run satisfies
/// [`PipelineRun::check_invariants`].
pub fn run_pipeline(
    backend: &dyn ModelBackend,
    expert: &dyn ExpertBackend,
    sample: &Sample,
    config: &PipelineConfig,
) -> Result<PipelineRun> {
    sample.validate()?;
    let probe_answer = if config.probe_enabled {
        Some(run_probe(backend, sample, config)?)
    } else {
        None
    };

    let mut trace = Vec::with_capacity(5);
    let mut flags = Vec::new();

    let sd_answers = run_description_stage(backend, sample, config, &mut trace)?;
    let (sr_answer, fallback_used) = run_reflection_stage(backend, sample, config, &mut trace)?;
    if fallback_used {
        flags.push(RunFlag::ReflectionFallback);
    }
    let outcome = run_final_decision_stage(backend, expert, sample, sr_answer, config, &mut trace)?;
    if outcome.degraded {
        flags.push(RunFlag::ExpertDegraded);
    }

    let run = PipelineRun {
        sample_id: sample.id.clone(),
        sd_answers,
        sr_answer,
        expert_invoked: outcome.expert_invoked,
        expert_output_ref: outcome.expert_output_ref,
        fd_answer: outcome.fd_answer,
        probe_answer,
        expert_enabled: config.expert_enabled,
        flags,
        interactions: trace,
    };
    run.check_invariants()?;
    Ok(run)
}

/// Runs independent samples concurrently under a bounded worker pool.
/// Results are returned in input order; each run is strictly sequential.
pub fn run_batch(
    backend: &dyn ModelBackend,
    expert: &dyn ExpertBackend,
    samples: &[Sample],
    config: &PipelineConfig,
) -> Vec<Result<PipelineRun>> {
    if samples.is_empty() {
        return Vec::new();
    }
    let workers = config.workers.clamp(1, samples.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<PipelineRun>>>> =
        samples.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples.len() {
                    break;
                }
                let result = run_pipeline(backend, expert, &samples[i], config);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker filled every slot")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendResponse, MockBackend, MockExpert, MockScript};

    fn sample(id: &str, occlusion: f64) -> Sample {
        Sample {
            id: id.to_string(),
            image_ref: format!("img/{id}.png"),
            gold_object: "bottle".to_string(),
            gold_attributes: Attributes {
                round: true,
                long: true,
                thin: false,
            },
            occlusion_ratio: occlusion,
        }
    }

    fn scripted(id: &str, answers: [&str; 5]) -> MockScript {
        let mut script = MockScript::new();
        for (stage, answer) in Stage::COT_ORDER.into_iter().zip(answers) {
            script.insert(id, stage, answer);
        }
        script.insert(id, Stage::Probe, "bottle");
        script
    }

    #[test]
    fn prompts_in_fixed_order_with_template_text() {
        let templates = QuestionTemplates::default();
        let prompts = build_stage_prompts(&sample("s1", 0.2), &templates).unwrap();
        assert_eq!(prompts.len(), 3);
        assert_eq!(prompts[0].stage, Stage::Roundness);
        assert_eq!(prompts[2].stage, Stage::Thickness);
        assert_eq!(prompts[0].text, "Is the object in the hand round?");
        assert_eq!(prompts[0].attachments, vec!["img/s1.png".to_string()]);
    }

    #[test]
    fn empty_image_ref_is_rejected() {
        let mut s = sample("s1", 0.2);
        s.image_ref.clear();
        assert!(build_stage_prompts(&s, &QuestionTemplates::default()).is_err());
    }

    #[test]
    fn reflection_parsing_rules() {
        assert_eq!(
            parse_reflection("Yes, it is clear.", Clarity::Unclear),
            (Clarity::Clear, false)
        );
        assert_eq!(
            parse_reflection("no", Clarity::Clear),
            (Clarity::Unclear, false)
        );
        assert_eq!(
            parse_reflection("maybe", Clarity::Unclear),
            (Clarity::Unclear, true)
        );
        assert_eq!(
            parse_reflection("  NO way", Clarity::Clear),
            (Clarity::Unclear, false)
        );
        assert_eq!(parse_reflection("", Clarity::Clear), (Clarity::Clear, true));
        // "yesterday" starts with yes but is not a yes token.
        assert_eq!(
            parse_reflection("yesterday", Clarity::Unclear),
            (Clarity::Unclear, true)
        );
    }

    #[test]
    fn clear_run_skips_expert() {
        let s = sample("s1", 0.1);
        let backend = MockBackend::new(scripted("s1", ["yes", "no", "yes", "yes", "a bottle"]));
        let expert = MockExpert::never_failing();
        let run = run_pipeline(&backend, &expert, &s, &PipelineConfig::default()).unwrap();
        assert_eq!(
            run.sd_answers,
            SdAnswers {
                round: "yes".to_string(),
                long: "no".to_string(),
                thin: "yes".to_string(),
            }
        );
        assert_eq!(run.sr_answer, Clarity::Clear);
        assert!(!run.expert_invoked);
        assert!(run.expert_output_ref.is_none());
        assert_eq!(run.fd_answer, "a bottle");
        assert_eq!(run.probe_answer.as_deref(), Some("bottle"));
        assert_eq!(run.interactions.len(), 5);
        // FD prompt carries only the sample image.
        assert_eq!(run.interactions[4].prompt.attachments.len(), 1);
    }

    #[test]
    fn unclear_run_invokes_expert_and_attaches_reconstruction() {
        let s = sample("s2", 0.9);
        let backend = MockBackend::new(scripted("s2", ["yes", "no", "yes", "no", "a bottle"]));
        let expert = MockExpert::never_failing();
        let run = run_pipeline(&backend, &expert, &s, &PipelineConfig::default()).unwrap();
        assert_eq!(run.sr_answer, Clarity::Unclear);
        assert!(run.expert_invoked);
        assert_eq!(run.expert_output_ref.as_deref(), Some("img/s2.png#recon"));
        let fd = &run.interactions[4];
        assert_eq!(fd.prompt.attachments.len(), 2);
        assert_eq!(fd.prompt.attachments[1], "img/s2.png#recon");
    }

    #[test]
    fn expert_failure_degrades_and_flags() {
        let s = sample("s3", 0.9);
        let backend = MockBackend::new(scripted("s3", ["yes", "no", "yes", "no", "a bottle"]));
        let expert = MockExpert::always_failing();
        let run = run_pipeline(&backend, &expert, &s, &PipelineConfig::default()).unwrap();
        assert!(run.expert_invoked);
        assert!(run.expert_output_ref.is_none());
        assert!(run.flags.contains(&RunFlag::ExpertDegraded));
        assert_eq!(run.interactions[4].prompt.attachments.len(), 1);
        run.check_invariants().unwrap();
    }

    #[test]
    fn expert_failure_fails_run_under_strict_policy() {
        let s = sample("s3", 0.9);
        let backend = MockBackend::new(scripted("s3", ["yes", "no", "yes", "no", "a bottle"]));
        let expert = MockExpert::always_failing();
        let config = PipelineConfig {
            expert_failure_policy: ExpertFailurePolicy::FailRun,
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&backend, &expert, &s, &config).unwrap_err();
        match err {
            Error::StageFailure { stage, partial, .. } => {
                assert_eq!(stage, Stage::FinalDecision);
                assert_eq!(partial.len(), 4); // three probes plus reflection
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_fixture_key_names_the_stage() {
        let s = sample("s1", 0.1);
        let mut script = scripted("s1", ["yes", "no", "yes", "yes", "a bottle"]);
        script.remove("s1", Stage::Length);
        let backend = MockBackend::new(script);
        let expert = MockExpert::never_failing();
        let err = run_pipeline(&backend, &expert, &s, &PipelineConfig::default()).unwrap_err();
        match err {
            Error::StageFailure {
                stage,
                detail,
                partial,
                ..
            } => {
                assert_eq!(stage, Stage::Length);
                assert!(detail.contains("length"), "detail: {detail}");
                assert_eq!(partial.len(), 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn context_grows_in_qa_order() {
        let s = sample("s1", 0.1);
        let backend = MockBackend::new(scripted("s1", ["a1", "a2", "a3", "yes", "a bottle"]));
        let expert = MockExpert::never_failing();
        let run = run_pipeline(&backend, &expert, &s, &PipelineConfig::default()).unwrap();
        let contexts: Vec<usize> = run
            .interactions
            .iter()
            .map(|i| i.prompt.context.len())
            .collect();
        assert_eq!(contexts, vec![0, 1, 2, 3, 4]);
        let sr_context = &run.interactions[3].prompt.context;
        assert_eq!(sr_context[0].answer, "a1");
        assert_eq!(sr_context[2].answer, "a3");
        run.check_invariants().unwrap();
    }

    #[test]
    fn runs_are_deterministic() {
        let s = sample("s1", 0.4);
        let backend = MockBackend::new(scripted("s1", ["yes", "no", "yes", "no", "a bottle"]));
        let expert = MockExpert::never_failing();
        let config = PipelineConfig::default();
        let a = run_pipeline(&backend, &expert, &s, &config).unwrap();
        let b = run_pipeline(&backend, &expert, &s, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn batch_preserves_order_and_counts_expert_calls() {
        let mut script = MockScript::new();
        let mut samples = Vec::new();
        for i in 0..10 {
            let id = format!("s{i}");
            // Mark three samples unclear.
            let sr = if i % 3 == 0 { "no" } else { "yes" };
            for (stage, answer) in Stage::COT_ORDER
                .into_iter()
                .zip(["yes", "no", "yes", sr, "a bottle"])
            {
                script.insert(&id, stage, answer);
            }
            script.insert(&id, Stage::Probe, "bottle");
            samples.push(sample(&id, 0.5));
        }
        let backend = MockBackend::new(script);
        let expert = MockExpert::never_failing();
        let config = PipelineConfig {
            workers: 4,
            ..PipelineConfig::default()
        };
        let runs = run_batch(&backend, &expert, &samples, &config);
        assert_eq!(runs.len(), 10);
        let mut expert_calls = 0;
        for (i, run) in runs.iter().enumerate() {
            let run = run.as_ref().unwrap();
            assert_eq!(run.sample_id, format!("s{i}"));
            assert_eq!(run.interactions.len(), 5);
            if run.expert_invoked {
                expert_calls += 1;
            }
        }
        assert_eq!(expert_calls, 4); // i = 0, 3, 6, 9
    }

    #[test]
    fn transient_errors_are_retried_up_to_cap() {
        struct Flaky {
            failures_before_success: u32,
            calls: AtomicUsize,
        }
        impl ModelBackend for Flaky {
            fn complete(&self, _request: &BackendRequest) -> Result<BackendResponse> {
                let n = self.calls.fetch_add(1, Ordering::SeqCst) as u32;
                if n < self.failures_before_success {
                    Err(Error::Transport {
                        detail: "simulated timeout".to_string(),
                        transient: true,
                    })
                } else {
                    Ok(BackendResponse {
                        text: "yes".to_string(),
                        token_logps: None,
                        latency_ms: 0,
                    })
                }
            }
        }

        let s = sample("s1", 0.1);
        let config = PipelineConfig {
            retry: RetryPolicy {
                max_retries: 2,
                base_delay_ms: 0,
            },
            probe_enabled: false,
            ..PipelineConfig::default()
        };

        let backend = Flaky {
            failures_before_success: 2,
            calls: AtomicUsize::new(0),
        };
        let mut trace = Vec::new();
        let answers = run_description_stage(&backend, &s, &config, &mut trace).unwrap();
        assert_eq!(answers.round, "yes");

        // Three consecutive failures exhaust the two retries.
        let backend = Flaky {
            failures_before_success: 3,
            calls: AtomicUsize::new(0),
        };
        let mut trace = Vec::new();
        assert!(run_description_stage(&backend, &s, &config, &mut trace).is_err());
    }
}
