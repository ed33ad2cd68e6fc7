//! Corpus generation and file schemas: object records, five-step reasoning
//! annotations, preference pairs, and JSONL round-trip I/O.
//!
//! File schemas (UTF-8, one JSON object per line, stable key order):
//!
//! `object-records.jsonl` — [`ObjectRecord`]:
//! - `id`: string, unique within the corpus.
//! - `category`: string, the canonical object name.
//! - `image_ref`: string locator (opaque).
//! - `occlusion_ratio`: number in `[0, 1]`.
//! - `geometry_stats` (optional): `{elongation >= 0, flatness >= 0,
//!   circularity in [0, 1]}`.
//!
//! `annotations.jsonl` — [`CoTAnnotation`]:
//! - `sample_id`: string.
//! - `steps`: exactly five `{stage, question, gold_answer}` entries in fixed
//!   order: three `description` steps (roundness, length, thickness), one
//!   `self_reflection`, one `final_decision`. Gold answers of steps 1-4 are
//!   `yes`/`no`; step 5 carries the object name.
//!
//! `preference-pairs.jsonl` — [`PreferencePair`]:
//! - `sample_id`, `query`, `chosen`, `rejected`, `corruption_kind`.
//!
//! `runs.jsonl` — [`crate::pipeline::PipelineRun`], one record per sample:
//! `sample_id`, `sd_answers{round,long,thin}`, `sr_answer`,
//! `expert_invoked`, `expert_output_ref`, `fd_answer`, `probe_answer`,
//! `expert_enabled`, `flags`, and the five-entry `interactions` log
//! (`stage`, `prompt{stage,text,context,attachments}`, `response`,
//! `latency_ms`). Interactions flatten to the fixture-backend schema
//! (`sample_id`, `stage`, `text`), so recorded runs replay directly.
//!
//! Desk-scale corpora default to `n = 1000`; the generator accepts any `n`.
//! The full-scale corpus this mirrors holds 104,671 records (110k nominal;
//! both figures circulate, so the generator takes `n` explicitly).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Attributes, PipelineRun, QuestionTemplates, Sample};

/// Default occlusion threshold at or above which a sample counts as
/// unclear.
pub const DEFAULT_CLARITY_THRESHOLD: f64 = 0.5;

/// Geometry summary used to derive attribute gold labels when present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryStats {
    pub elongation: f64,
    pub flatness: f64,
    pub circularity: f64,
}

impl GeometryStats {
    pub fn validate(&self) -> Result<()> {
        if !self.elongation.is_finite() || self.elongation < 0.0 {
            return Err(Error::invalid(format!(
                "elongation {} must be finite and >= 0",
                self.elongation
            )));
        }
        if !self.flatness.is_finite() || self.flatness < 0.0 {
            return Err(Error::invalid(format!(
                "flatness {} must be finite and >= 0",
                self.flatness
            )));
        }
        if !self.circularity.is_finite() || !(0.0..=1.0).contains(&self.circularity) {
            return Err(Error::invalid(format!(
                "circularity {} outside [0, 1]",
                self.circularity
            )));
        }
        Ok(())
    }
}

/// One corpus entry: an object held in a hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub id: String,
    pub category: String,
    pub image_ref: String,
    pub occlusion_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_stats: Option<GeometryStats>,
}

impl ObjectRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("field `id` must be non-empty"));
        }
        if self.category.is_empty() {
            return Err(Error::invalid(format!(
                "field `category` must be non-empty (record `{}`)",
                self.id
            )));
        }
        if !self.occlusion_ratio.is_finite() || !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(Error::invalid(format!(
                "field `occlusion_ratio` {} outside [0, 1] (record `{}`)",
                self.occlusion_ratio, self.id
            )));
        }
        if let Some(stats) = &self.geometry_stats {
            stats.validate()?;
        }
        Ok(())
    }

    /// Converts the record into a pipeline sample, deriving gold attributes.
    pub fn to_sample(&self, table: &AttributeTable) -> Result<Sample> {
        let sample = Sample {
            id: self.id.clone(),
            image_ref: self.image_ref.clone(),
            gold_object: self.category.clone(),
            gold_attributes: derive_attributes(self, table)?,
            occlusion_ratio: self.occlusion_ratio,
        };
        sample.validate()?;
        Ok(sample)
    }
}

/// Editable category-to-attributes lookup, shipped with hand-checked
/// entries for common graspable objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeTable {
    map: BTreeMap<String, Attributes>,
}

impl Default for AttributeTable {
    fn default() -> Self {
        let triple = |round, long, thin| Attributes { round, long, thin };
        let entries = [
            ("bottle", triple(true, true, false)),
            ("bowl", triple(true, false, false)),
            ("camera", triple(false, false, false)),
            ("can", triple(true, false, false)),
            ("cell phone", triple(false, true, true)),
            ("cup", triple(true, false, false)),
            ("flashlight", triple(true, true, false)),
            ("hammer", triple(false, true, false)),
            ("jug", triple(true, false, false)),
            ("knife", triple(false, true, true)),
            ("mug", triple(true, false, false)),
            ("pen", triple(false, true, true)),
            ("remote control", triple(false, true, true)),
            ("scissors", triple(false, true, true)),
            ("spoon", triple(false, true, true)),
        ];
        Self {
            map: entries
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl AttributeTable {
    pub fn empty() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let content =
            std::fs::read_to_string(path).map_err(|source| Error::io(display.clone(), source))?;
        serde_json::from_str(&content).map_err(|err| Error::Schema {
            path: display,
            line: 1,
            detail: err.to_string(),
        })
    }

    pub fn insert(&mut self, category: &str, attributes: Attributes) {
        self.map.insert(category.to_string(), attributes);
    }

    pub fn get(&self, category: &str) -> Option<Attributes> {
        self.map.get(category).copied()
    }

    /// Categories in sorted order.
    pub fn categories(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Geometry thresholds for attribute derivation.
const CIRCULARITY_ROUND: f64 = 0.8;
const ELONGATION_LONG: f64 = 2.0;
const FLATNESS_THIN: f64 = 2.0;

/// Derives the attribute triple: geometry thresholds when stats are
/// present, otherwise the category table.
pub fn derive_attributes(record: &ObjectRecord, table: &AttributeTable) -> Result<Attributes> {
    record.validate()?;
    if let Some(stats) = &record.geometry_stats {
        return Ok(Attributes {
            round: stats.circularity >= CIRCULARITY_ROUND,
            long: stats.elongation >= ELONGATION_LONG,
            thin: stats.flatness >= FLATNESS_THIN,
        });
    }
    table
        .get(&record.category)
        .ok_or_else(|| Error::UnmappedCategory {
            id: record.id.clone(),
            category: record.category.clone(),
        })
}

/// Stage tag of one annotation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStage {
    Description,
    SelfReflection,
    FinalDecision,
}

/// Fixed stage layout of the five steps.
pub const STEP_STAGES: [AnnotationStage; 5] = [
    AnnotationStage::Description,
    AnnotationStage::Description,
    AnnotationStage::Description,
    AnnotationStage::SelfReflection,
    AnnotationStage::FinalDecision,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationStep {
    pub stage: AnnotationStage,
    pub question: String,
    pub gold_answer: String,
}

/// The five-step question/gold-answer record for one sample: three
/// attribute steps, one clarity step, one decision step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoTAnnotation {
    pub sample_id: String,
    pub steps: Vec<AnnotationStep>,
}

impl CoTAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::invalid("field `sample_id` must be non-empty"));
        }
        if self.steps.len() != 5 {
            return Err(Error::invalid(format!(
                "annotation `{}` has {} steps, expected 5",
                self.sample_id,
                self.steps.len()
            )));
        }
        for (i, (step, expected)) in self.steps.iter().zip(STEP_STAGES).enumerate() {
            if step.stage != expected {
                return Err(Error::invalid(format!(
                    "annotation `{}` step {} has stage {:?}, expected {:?}",
                    self.sample_id,
                    i + 1,
                    step.stage,
                    expected
                )));
            }
            if i < 4 && step.gold_answer != "yes" && step.gold_answer != "no" {
                return Err(Error::invalid(format!(
                    "annotation `{}` step {} gold answer `{}` is not yes/no",
                    self.sample_id,
                    i + 1,
                    step.gold_answer
                )));
            }
        }
        if self.steps[4].gold_answer.is_empty() {
            return Err(Error::invalid(format!(
                "annotation `{}` final step has an empty gold answer",
                self.sample_id
            )));
        }
        Ok(())
    }

    /// Gold object name (step 5).
    pub fn gold_object(&self) -> &str {
        &self.steps[4].gold_answer
    }

    /// Gold clarity (step 4): `yes` means clear.
    pub fn gold_clear(&self) -> bool {
        self.steps[3].gold_answer == "yes"
    }
}

fn yes_no(value: bool) -> &'static str {
    if value {
        "yes"
    } else {
        "no"
    }
}

/// Builds the five-step annotation for one record. The clarity gold is
/// `no` (unclear) exactly when `occlusion_ratio >= clarity_threshold`.
pub fn build_annotation(
    record: &ObjectRecord,
    attributes: Attributes,
    clarity_threshold: f64,
    templates: &QuestionTemplates,
) -> Result<CoTAnnotation> {
    record.validate()?;
    if !clarity_threshold.is_finite() || !(0.0..=1.0).contains(&clarity_threshold) {
        return Err(Error::invalid(format!(
            "clarity threshold {clarity_threshold} outside [0, 1]"
        )));
    }
    let clear = record.occlusion_ratio < clarity_threshold;
    let steps = vec![
        AnnotationStep {
            stage: AnnotationStage::Description,
            question: templates.roundness.clone(),
            gold_answer: yes_no(attributes.round).to_string(),
        },
        AnnotationStep {
            stage: AnnotationStage::Description,
            question: templates.length.clone(),
            gold_answer: yes_no(attributes.long).to_string(),
        },
        AnnotationStep {
            stage: AnnotationStage::Description,
            question: templates.thickness.clone(),
            gold_answer: yes_no(attributes.thin).to_string(),
        },
        AnnotationStep {
            stage: AnnotationStage::SelfReflection,
            question: templates.self_reflection.clone(),
            gold_answer: yes_no(clear).to_string(),
        },
        AnnotationStep {
            stage: AnnotationStage::FinalDecision,
            question: templates.final_decision.clone(),
            gold_answer: record.category.clone(),
        },
    ];
    let annotation = CoTAnnotation {
        sample_id: record.id.clone(),
        steps,
    };
    annotation.validate()?;
    Ok(annotation)
}

/// How a rejected response is constructed from the gold answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Replace the object name with a different category.
    WrongObject,
    /// Flip one attribute answer.
    FlippedAttribute,
    /// Flip the clarity answer.
    FlippedReflection,
}

/// A (query, chosen, rejected) triple for preference training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub sample_id: String,
    pub query: String,
    pub chosen: String,
    pub rejected: String,
    pub corruption_kind: CorruptionKind,
}

impl PreferencePair {
    pub fn new(
        sample_id: String,
        query: String,
        chosen: String,
        rejected: String,
        corruption_kind: CorruptionKind,
    ) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::invalid(format!(
                "degenerate preference pair for `{sample_id}`: chosen equals rejected (`{chosen}`)"
            )));
        }
        Ok(Self {
            sample_id,
            query,
            chosen,
            rejected,
            corruption_kind,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::invalid(format!(
                "degenerate preference pair for `{}`: chosen equals rejected",
                self.sample_id
            )));
        }
        Ok(())
    }
}

fn flip_yes_no(answer: &str) -> Result<String> {
    match answer {
        "yes" => Ok("no".to_string()),
        "no" => Ok("yes".to_string()),
        other => Err(Error::invalid(format!(
            "cannot flip non-yes/no answer `{other}`"
        ))),
    }
}

/// Builds one preference pair by corrupting the targeted step's gold
/// answer. Seed-deterministic: the same `(annotation, kind, seed)` always
/// yields the same pair.
pub fn build_preference_pair(
    annotation: &CoTAnnotation,
    kind: CorruptionKind,
    seed: u64,
    categories: &[String],
) -> Result<PreferencePair> {
    annotation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step_index = match kind {
        CorruptionKind::WrongObject => 4,
        CorruptionKind::FlippedReflection => 3,
        CorruptionKind::FlippedAttribute => rng.gen_range(0..3),
    };
    let step = &annotation.steps[step_index];
    let chosen = step.gold_answer.clone();
    let rejected = match kind {
        CorruptionKind::WrongObject => {
            let others: Vec<&String> = categories.iter().filter(|c| **c != chosen).collect();
            if others.is_empty() {
                return Err(Error::invalid(format!(
                    "cannot build a wrong-object pair for `{}`: no category other than `{chosen}`",
                    annotation.sample_id
                )));
            }
            others[rng.gen_range(0..others.len())].clone()
        }
        CorruptionKind::FlippedAttribute | CorruptionKind::FlippedReflection => {
            flip_yes_no(&chosen)?
        }
    };
    PreferencePair::new(
        annotation.sample_id.clone(),
        step.question.clone(),
        chosen,
        rejected,
        kind,
    )
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub clarity_threshold: f64,
    pub templates: QuestionTemplates,
    pub attribute_table: AttributeTable,
    /// Corruption kinds assigned round-robin over records.
    pub corruption_mix: Vec<CorruptionKind>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            clarity_threshold: DEFAULT_CLARITY_THRESHOLD,
            templates: QuestionTemplates::default(),
            attribute_table: AttributeTable::default(),
            corruption_mix: vec![
                CorruptionKind::WrongObject,
                CorruptionKind::FlippedAttribute,
                CorruptionKind::FlippedReflection,
            ],
        }
    }
}

/// A generated corpus: records, annotations, and preference pairs, index
/// aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<ObjectRecord>,
    pub annotations: Vec<CoTAnnotation>,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusCounts {
    pub records: usize,
    pub annotations: usize,
    pub annotation_steps: usize,
    pub preference_pairs: usize,
}

impl Corpus {
    pub fn counts(&self) -> CorpusCounts {
        CorpusCounts {
            records: self.records.len(),
            annotations: self.annotations.len(),
            annotation_steps: self.annotations.iter().map(|a| a.steps.len()).sum(),
            preference_pairs: self.pairs.len(),
        }
    }

    /// Writes the three corpus files into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|source| Error::io(dir.display().to_string(), source))?;
        write_jsonl(dir.join("object-records.jsonl"), &self.records)?;
        write_jsonl(dir.join("annotations.jsonl"), &self.annotations)?;
        write_jsonl(dir.join("preference-pairs.jsonl"), &self.pairs)?;
        Ok(())
    }
}

/// Generates a seed-deterministic corpus of `n` samples: records with
/// categories and occlusion ratios drawn from the seeded generator, their
/// annotations, and one preference pair per record (kinds cycling through
/// the configured mix).
pub fn generate_corpus(n: usize, seed: u64, config: &CorpusConfig) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::invalid("corpus size must be >= 1"));
    }
    if config.attribute_table.is_empty() {
        return Err(Error::invalid("attribute table must be non-empty"));
    }
    if config.corruption_mix.is_empty() {
        return Err(Error::invalid("corruption mix must be non-empty"));
    }
    let pool = config.attribute_table.categories();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut records = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("s{:06}", i + 1);
        let category = pool[rng.gen_range(0..pool.len())].clone();
        let occlusion_ratio = rng.gen::<f64>();
        let pair_seed = rng.gen::<u64>();
        let record = ObjectRecord {
            image_ref: format!("img/{id}.png"),
            id,
            category,
            occlusion_ratio,
            geometry_stats: None,
        };
        let attributes = derive_attributes(&record, &config.attribute_table)?;
        let annotation = build_annotation(
            &record,
            attributes,
            config.clarity_threshold,
            &config.templates,
        )?;
        let kind = config.corruption_mix[i % config.corruption_mix.len()];
        let pair = build_preference_pair(&annotation, kind, pair_seed, &pool)?;
        records.push(record);
        annotations.push(annotation);
        pairs.push(pair);
    }
    Ok(Corpus {
        records,
        annotations,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// JSONL I/O
// ---------------------------------------------------------------------------

/// Writes items as JSONL with stable key order, one object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut buffer = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buffer, item).map_err(|err| Error::Schema {
            path: display.clone(),
            line: 0,
            detail: err.to_string(),
        })?;
        buffer.push(b'\n');
    }
    let mut file =
        std::fs::File::create(path).map_err(|source| Error::io(display.clone(), source))?;
    file.write_all(&buffer)
        .map_err(|source| Error::io(display, source))
}

fn strip_serde_position(message: &str) -> &str {
    message.split(" at line ").next().unwrap_or(message)
}

/// Reads JSONL, validating each parsed item; errors carry the 1-based line
/// number. An empty file yields an empty vector.
pub fn read_jsonl_validated<T, F>(path: impl AsRef<Path>, validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<()>,
{
    let path = path.as_ref();
    let display = path.display().to_string();
    let content =
        std::fs::read_to_string(path).map_err(|source| Error::io(display.clone(), source))?;
    let mut items = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line).map_err(|err| Error::Schema {
            path: display.clone(),
            line: line_no,
            detail: strip_serde_position(&err.to_string()).to_string(),
        })?;
        validate(&item).map_err(|err| Error::Schema {
            path: display.clone(),
            line: line_no,
            detail: err.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Reads object records, enforcing per-record invariants and id uniqueness.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ObjectRecord>> {
    let records: Vec<ObjectRecord> = read_jsonl_validated(&path, ObjectRecord::validate)?;
    let mut seen = BTreeSet::new();
    for record in &records {
        if !seen.insert(record.id.as_str()) {
            return Err(Error::invalid(format!(
                "duplicate record id `{}` in {}",
                record.id,
                path.as_ref().display()
            )));
        }
    }
    Ok(records)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<CoTAnnotation>> {
    read_jsonl_validated(path, CoTAnnotation::validate)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    read_jsonl_validated(path, PreferencePair::validate)
}

pub fn read_runs(path: impl AsRef<Path>) -> Result<Vec<PipelineRun>> {
    read_jsonl_validated(path, PipelineRun::check_invariants)
}
