//! Seeded synthetic worlds: ground-truth facts with pseudo-word answers,
//! the captions and cloze passage they imply, and a mock cloze author.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cloze::{ClozeBlank, ClozePassage, ClozeQuota, ClozeRejection};
use crate::gateway::{BackendError, ChatBackend, ChatRequest, FactDetail, SyntheticWorld, WorldFact};
use crate::model::{CaptionRecord, Channel, MediaRef, Modality};

const AUDIO_CUES: [&str; 12] =
    ["voice", "music", "footsteps", "engine", "wind", "crowd", "bell", "rain", "dog", "radio", "door", "phone"];
const VISUAL_CUES: [&str; 12] =
    ["sky", "car", "jacket", "table", "window", "sign", "tree", "lamp", "floor", "poster", "boat", "bicycle"];
const AV_CUES: [&str; 6] = ["drum", "kettle", "clapping", "hammer", "whistle", "typing"];
const ASPECTS: [&str; 10] = ["tone", "pattern", "texture", "rhythm", "shade", "shape", "marking", "quality", "timing", "grain"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Tool that hears audio facts.
pub const AUDIO_TOOL: &str = "asr";
/// Tool that sees visual facts.
pub const VISUAL_TOOL: &str = "vision";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub audio_facts: usize,
    pub visual_facts: usize,
    pub av_facts: usize,
    /// Largest number of facts sharing one cue.
    pub max_topic: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { audio_facts: 12, visual_facts: 12, av_facts: 6, max_topic: 4 }
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    // CVCVCVC never collides with the English template words
    let mut w = String::with_capacity(7);
    for i in 0..7 {
        let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
        w.push(set[rng.gen_range(0..set.len())] as char);
    }
    w
}

fn cue(pool: &[&str], k: usize) -> String {
    if k < pool.len() {
        pool[k].to_string()
    } else {
        format!("{}{}", pool[k % pool.len()], k / pool.len() + 1)
    }
}

/// Builds one world. `asr` reveals audio and audio-visual facts, `vision`
/// reveals visual and audio-visual facts. Facts sharing a cue form a topic
/// that a single question can uncover.
pub fn generate_world(media_id: &str, seed: u64, spec: &WorldSpec) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let max_topic = spec.max_topic.clamp(1, ASPECTS.len());
    let mut facts = Vec::new();
    for (modality, count, pool) in [
        (Modality::Audio, spec.audio_facts, &AUDIO_CUES[..]),
        (Modality::Visual, spec.visual_facts, &VISUAL_CUES[..]),
        (Modality::AudioVisual, spec.av_facts, &AV_CUES[..]),
    ] {
        let mut topic = 0;
        let mut left = count;
        while left > 0 {
            let size = rng.gen_range(1..=max_topic.min(left));
            let cue = cue(pool, topic);
            for aspect in &ASPECTS[..size] {
                let answer = fresh(&mut rng);
                let distractors = (0..3).map(|_| fresh(&mut rng)).collect();
                let n = facts.len() + 1;
                facts.push(WorldFact {
                    fact_id: format!("f{n}"),
                    modality,
                    statement: format!("The {cue} has a {aspect} of {answer}."),
                    cues: vec![cue.clone()],
                    detail: Some(FactDetail { answer, distractors }),
                });
            }
            left -= size;
            topic += 1;
        }
    }
    let ids = |keep: &dyn Fn(Modality) -> bool| -> Vec<String> {
        facts.iter().filter(|f| keep(f.modality)).map(|f| f.fact_id.clone()).collect()
    };
    let mut reveal_policy = BTreeMap::new();
    reveal_policy.insert(AUDIO_TOOL.to_string(), ids(&|m| m != Modality::Visual));
    reveal_policy.insert(VISUAL_TOOL.to_string(), ids(&|m| m != Modality::Audio));
    SyntheticWorld { media_id: media_id.to_string(), facts, reveal_policy }
}

/// `n` worlds named `world-000`, `world-001`, ... with per-world seeds
/// drawn from `seed`.
pub fn generate_worlds(n: usize, seed: u64, spec: &WorldSpec) -> Vec<SyntheticWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
    seeds.shuffle(&mut rng);
    seeds.iter().enumerate().map(|(i, &s)| generate_world(&format!("world-{i:03}"), s, spec)).collect()
}

/// Media reference for a world, with both channels present.
pub fn world_media(world: &SyntheticWorld) -> MediaRef {
    MediaRef::new(&world.media_id, format!("synthetic://{}", world.media_id), &[Channel::Audio, Channel::Visual], 10.0)
}

/// Ground-truth audio, visual and audio-visual captions of a world.
pub fn world_captions(world: &SyntheticWorld, source_model: &str) -> Vec<CaptionRecord> {
    let text = |keep: &dyn Fn(Modality) -> bool| -> String {
        world.facts.iter().filter(|f| keep(f.modality)).map(|f| f.statement.as_str()).collect::<Vec<_>>().join(" ")
    };
    vec![
        CaptionRecord::new(&world.media_id, source_model, Modality::Audio, text(&|m| m != Modality::Visual)),
        CaptionRecord::new(&world.media_id, source_model, Modality::Visual, text(&|m| m != Modality::Audio)),
        CaptionRecord::new(&world.media_id, source_model, Modality::AudioVisual, world.full_text()),
    ]
}

/// The cloze passage a faithful author would write for the world: every
/// fact with a detail becomes one blank, numbered in fact order.
pub fn author_passage(world: &SyntheticWorld, quota: &ClozeQuota) -> Result<ClozePassage, ClozeRejection> {
    let mut sentences = Vec::new();
    let mut blanks = Vec::new();
    for f in &world.facts {
        match &f.detail {
            Some(d) => {
                let number = blanks.len() as u32 + 1;
                sentences.push(f.statement.replacen(&d.answer, &format!("[BLANK_{number}]"), 1));
                blanks.push(ClozeBlank {
                    number,
                    answer: d.answer.clone(),
                    distractors: d.distractors.clone(),
                    required_modality: f.modality,
                });
            }
            None => sentences.push(f.statement.clone()),
        }
    }
    ClozePassage::new(&world.media_id, sentences.join(" "), blanks, *quota)
}

/// Mock cloze generator: answers a generation prompt with the authored
/// passage of the world named by the request's `media_id` metadata.
pub struct ClozeAuthorBackend {
    worlds: HashMap<String, SyntheticWorld>,
    quota: ClozeQuota,
}

impl ClozeAuthorBackend {
    pub fn new(worlds: impl IntoIterator<Item = SyntheticWorld>, quota: ClozeQuota) -> Self {
        Self { worlds: worlds.into_iter().map(|w| (w.media_id.clone(), w)).collect(), quota }
    }
}

impl ChatBackend for ClozeAuthorBackend {
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let id = req.metadata.get("media_id").ok_or_else(|| BackendError::Fatal("request has no media_id".into()))?;
        let world = self.worlds.get(id).ok_or_else(|| BackendError::Fatal(format!("no synthetic world `{id}`")))?;
        let p = author_passage(world, &self.quota).map_err(|e| BackendError::Fatal(e.to_string()))?;
        Ok(format!("```json\n{}\n```", json!({ "passage": p.passage(), "blanks": p.blanks() })))
    }
}
