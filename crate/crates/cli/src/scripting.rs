//! Builds mock-backend scripts from gold annotations, with optional
//! seed-deterministic answer corruption so desk-scale runs produce
//! non-trivial scores.

use std::collections::BTreeSet;

use occot::backends::MockScript;
use occot::dataset::CoTAnnotation;
use occot::pipeline::Stage;

use crate::CliError;

/// FNV-1a mapped into `[0, 1)`; stable across platforms.
fn hash01(seed: u64, sample_id: &str, stage: Stage) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let stage_tag = stage.to_string();
    for byte in seed
        .to_le_bytes()
        .iter()
        .chain(sample_id.as_bytes())
        .chain([0u8].iter())
        .chain(stage_tag.as_bytes())
    {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn flip(answer: &str) -> String {
    if answer == "yes" { "no" } else { "yes" }.to_string()
}

fn wrong_object(gold: &str, categories: &BTreeSet<String>, pick: f64) -> String {
    let others: Vec<&String> = categories.iter().filter(|c| c.as_str() != gold).collect();
    if others.is_empty() {
        return "unidentified object".to_string();
    }
    let index = ((pick * others.len() as f64) as usize).min(others.len() - 1);
    others[index].clone()
}

/// Scripts every reasoning stage plus the probe from gold answers. With
/// `noise > 0`, each answer is independently corrupted with that
/// probability (attributes and clarity flip; object answers swap to a
/// different category), decided by a hash of `(seed, sample, stage)` so
/// regeneration is exact.
pub fn script_from_annotations(
    annotations: &[CoTAnnotation],
    noise: f64,
    seed: u64,
) -> Result<MockScript, CliError> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(CliError::Config(format!("noise {noise} outside [0, 1]")));
    }
    let categories: BTreeSet<String> = annotations
        .iter()
        .map(|a| a.gold_object().to_string())
        .collect();

    let mut script = MockScript::new();
    for annotation in annotations {
        let id = &annotation.sample_id;
        for (stage, step) in Stage::COT_ORDER.into_iter().zip(&annotation.steps) {
            let roll = hash01(seed, id, stage);
            let corrupt = noise > 0.0 && roll < noise;
            let answer = match (corrupt, stage) {
                (false, _) => step.gold_answer.clone(),
                (true, Stage::FinalDecision) => {
                    wrong_object(&step.gold_answer, &categories, roll / noise)
                }
                (true, _) => flip(&step.gold_answer),
            };
            script.insert(id, stage, &answer);
        }
        let gold = annotation.gold_object();
        let roll = hash01(seed, id, Stage::Probe);
        let answer = if noise > 0.0 && roll < noise {
            wrong_object(gold, &categories, roll / noise)
        } else {
            gold.to_string()
        };
        script.insert(id, Stage::Probe, &answer);
    }
    Ok(script)
}
