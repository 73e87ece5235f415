use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{InvestigationError, Investigator};
use crate::cloze::{
    aggregate, evaluate_captions, forge_item, item_seed, render_cloze, AnswerKey, ClozeItem, ClozeQuota, EvalError,
    ForgeError, RowLabel,
};
use crate::gateway::{DecodeParams, Gateway, SyntheticWorld};
use crate::model::CaptionRecord;
use crate::prompt::PromptSet;
use crate::synth::{world_captions, world_media};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("cloze generation failed for `{0}`")]
    ForgeFailed(String),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error("investigation of `{media}`: {source}")]
    Investigation { media: String, source: InvestigationError },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Rates at one budget, in percent, over all blanks of all worlds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub budget: u32,
    pub detail_rate: f64,
    pub not_given_rate: f64,
    pub hallucination_rate: f64,
    pub n_blanks: usize,
    pub mean_turns: f64,
}

/// Forges one cloze item per world from its ground-truth captions and
/// renders it with a per-world seed.
pub fn world_benchmark(
    gateway: &Gateway,
    author_backend: &str,
    prompts: &PromptSet,
    worlds: &[SyntheticWorld],
    quota: &ClozeQuota,
    base_seed: u64,
) -> Result<HashMap<String, (ClozeItem, AnswerKey)>, SweepError> {
    let mut out = HashMap::new();
    for w in worlds {
        let outcome = forge_item(gateway, author_backend, prompts, &world_captions(w, "ground-truth"), quota, &DecodeParams::default())?;
        let passage = outcome.passage.ok_or_else(|| SweepError::ForgeFailed(w.media_id.clone()))?;
        let r = render_cloze(&passage, item_seed(base_seed, &w.media_id));
        out.insert(w.media_id.clone(), (r.item, r.answer_key));
    }
    Ok(out)
}

/// Investigates every world at each budget, scores the final captions
/// with the cloze judge and reports the three rates per budget.
pub fn step_sweep_analysis(
    investigator: &Investigator<'_>,
    judge_backend: &str,
    worlds: &[SyntheticWorld],
    items: &HashMap<String, (ClozeItem, AnswerKey)>,
    budgets: &[u32],
) -> Result<Vec<SweepPoint>, SweepError> {
    let media: Vec<_> = worlds.iter().map(world_media).collect();
    let mut points = Vec::with_capacity(budgets.len());
    for &budget in budgets {
        let records = investigator.run_all(&media, budget);
        let mut captions = Vec::with_capacity(records.len());
        let mut turns = 0usize;
        for (m, rec) in media.iter().zip(records) {
            let rec = rec.map_err(|source| SweepError::Investigation { media: m.id.clone(), source })?;
            turns += rec.turns.len();
            captions.push(CaptionRecord::new(
                &m.id,
                format!("detective@{budget}"),
                crate::model::Modality::AudioVisual,
                rec.final_caption,
            ));
        }
        let scored = evaluate_captions(investigator.gateway, judge_backend, investigator.prompts, items, &captions)?;
        let report = aggregate(&scored)?;
        let total = report.row(RowLabel::Total);
        points.push(SweepPoint {
            budget,
            detail_rate: total.acc_pct,
            not_given_rate: total.ng_pct,
            hallucination_rate: total.hall_pct,
            n_blanks: total.n_blanks,
            mean_turns: turns as f64 / media.len().max(1) as f64,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloze::ContentJudge;
    use crate::detective::FactGreedyDetective;
    use crate::gateway::{FactDetail, ObserverBackend, ToolBox, WorldFact};
    use crate::model::Modality;
    use crate::synth::{generate_worlds, ClozeAuthorBackend, WorldSpec, AUDIO_TOOL, VISUAL_TOOL};
    use std::collections::BTreeMap;

    fn rig(worlds: &[SyntheticWorld]) -> (Gateway, ToolBox) {
        let gw = Gateway::new()
            .with_backend("det", FactGreedyDetective::new(worlds.to_vec()))
            .with_backend("asr-obs", ObserverBackend::new(AUDIO_TOOL, worlds.to_vec()))
            .with_backend("vision-obs", ObserverBackend::new(VISUAL_TOOL, worlds.to_vec()))
            .with_backend("author", ClozeAuthorBackend::new(worlds.to_vec(), ClozeQuota::default()))
            .with_backend("judge", ContentJudge::new());
        (gw, ToolBox::new([(AUDIO_TOOL, "asr-obs"), (VISUAL_TOOL, "vision-obs")]).unwrap())
    }

    #[test]
    fn zero_budget_is_the_no_evidence_floor() {
        let worlds = generate_worlds(3, 1, &WorldSpec::default());
        let (gw, tb) = rig(&worlds);
        let prompts = PromptSet::builtin();
        let items = world_benchmark(&gw, "author", &prompts, &worlds, &ClozeQuota::default(), 4).unwrap();
        let inv = Investigator::new(&gw, &prompts, &tb, "det");
        let pts = step_sweep_analysis(&inv, "judge", &worlds, &items, &[0, 3]).unwrap();
        assert_eq!(pts[0].detail_rate, 0.0);
        assert_eq!(pts[0].not_given_rate, 100.0);
        assert!(pts[1].detail_rate > 0.0);
        for p in &pts {
            assert_eq!(p.hallucination_rate, 0.0);
            assert!((p.detail_rate + p.not_given_rate + p.hallucination_rate - 100.0).abs() <= 0.1 + 1e-9);
        }
    }

    #[test]
    fn single_query_world_saturates_at_budget_one() {
        let facts: Vec<WorldFact> = (1..=30)
            .map(|i| {
                let answer = format!("zumarot{i}");
                WorldFact {
                    fact_id: format!("f{i}"),
                    modality: match i { 1..=12 => Modality::Audio, 13..=24 => Modality::Visual, _ => Modality::AudioVisual },
                    statement: format!("Item {i} shows {answer}."),
                    cues: vec!["everything".into()],
                    detail: Some(FactDetail { answer, distractors: vec![format!("pa{i}"), format!("pe{i}"), format!("pi{i}")] }),
                }
            })
            .collect();
        let all: Vec<String> = facts.iter().map(|f| f.fact_id.clone()).collect();
        let world = SyntheticWorld {
            media_id: "sat".into(),
            facts,
            reveal_policy: BTreeMap::from([(AUDIO_TOOL.to_string(), all.clone()), (VISUAL_TOOL.to_string(), all)]),
        };
        world.validate().unwrap();
        let worlds = vec![world];
        let (gw, tb) = rig(&worlds);
        let prompts = PromptSet::builtin();
        let items = world_benchmark(&gw, "author", &prompts, &worlds, &ClozeQuota::default(), 4).unwrap();
        let inv = Investigator::new(&gw, &prompts, &tb, "det");
        let pts = step_sweep_analysis(&inv, "judge", &worlds, &items, &[1, 2, 5, 10]).unwrap();
        assert!(pts.iter().all(|p| p.detail_rate == 100.0 && p.mean_turns == 1.0), "{pts:?}");
    }
}
