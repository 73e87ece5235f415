use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CorrelationPair, CorrelationResult, EloConfig, EloError, EloState, MatchRecord, Outcome};
use crate::cloze::{ClozePassage, EvalReport, ReviewDecision, ReviewError, ReviewItem, ReviewQueue, RowLabel};
use crate::jsonl::{read_jsonl, JsonlError};
use crate::model::{CaptionRecord, Modality};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArenaError {
    #[error("unknown or missing annotator token")]
    Unauthorized,
    #[error("pair token was issued to another annotator")]
    Forbidden,
    #[error("unknown pair token `{0}`")]
    UnknownPair(String),
    #[error("pair `{0}` was already judged")]
    DuplicateJudgment(String),
    #[error("need captions from at least two models on a shared clip")]
    NotEnoughModels,
    #[error(transparent)]
    Elo(#[from] EloError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("match log: {0}")]
    Log(String),
}

impl From<JsonlError> for ArenaError {
    fn from(e: JsonlError) -> Self {
        ArenaError::Log(e.to_string())
    }
}

/// Captions by clip and model. When a model has several captions for one
/// clip the audio-visual one is kept.
#[derive(Debug, Clone, Default)]
pub struct CaptionStore {
    by_media: BTreeMap<String, BTreeMap<String, CaptionRecord>>,
}

impl CaptionStore {
    pub fn new(records: impl IntoIterator<Item = CaptionRecord>) -> Self {
        let mut by_media: BTreeMap<String, BTreeMap<String, CaptionRecord>> = BTreeMap::new();
        for r in records {
            let slot = by_media.entry(r.media_id.clone()).or_default();
            let keep = match slot.get(&r.source_model) {
                Some(old) => old.modality_condition != Modality::AudioVisual,
                None => true,
            };
            if keep {
                slot.insert(r.source_model.clone(), r);
            }
        }
        Self { by_media }
    }

    pub fn models(&self) -> BTreeSet<String> {
        self.by_media.values().flat_map(|m| m.keys().cloned()).collect()
    }

    pub fn get(&self, media_id: &str, model: &str) -> Option<&CaptionRecord> {
        self.by_media.get(media_id)?.get(model)
    }

    /// Unordered model pairs with at least one clip captioned by both.
    fn pairs(&self) -> BTreeMap<(String, String), Vec<String>> {
        let mut out: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        for (media, models) in &self.by_media {
            let names: Vec<&String> = models.keys().collect();
            for (i, a) in names.iter().enumerate() {
                for b in &names[i + 1..] {
                    out.entry(((*a).clone(), (*b).clone())).or_default().push(media.clone());
                }
            }
        }
        out
    }
}

/// A blinded comparison: two captions of one clip, with no model names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairView {
    pub pair_token: String,
    pub media_id: String,
    pub caption_a: String,
    pub caption_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Assignment {
    media_id: String,
    model_a: String,
    model_b: String,
    annotator_id: String,
    judged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub model: String,
    pub rating: f64,
    pub matches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaStats {
    pub matches: u64,
    pub models: usize,
    pub pending_pairs: usize,
    pub reports: BTreeMap<String, EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation: Option<CorrelationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_error: Option<String>,
}

struct Inner {
    elo: EloState,
    log: Vec<MatchRecord>,
    sink: Option<File>,
    pairs: HashMap<String, Assignment>,
    rng: ChaCha8Rng,
    reviews: ReviewQueue,
    reports: BTreeMap<String, EvalReport>,
}

/// State behind the arena HTTP API. Judgments are applied one at a time in
/// submission order and appended to the match log before they count.
pub struct ArenaService {
    cfg: EloConfig,
    captions: CaptionStore,
    annotators: HashMap<String, String>,
    log_path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ArenaService {
    /// `annotators` maps bearer tokens to annotator ids. An existing match
    /// log at `log_path` is replayed so ratings resume where they stopped.
    pub fn open(
        cfg: EloConfig,
        captions: CaptionStore,
        annotators: HashMap<String, String>,
        log_path: Option<&Path>,
        seed: u64,
    ) -> Result<Self, ArenaError> {
        cfg.validate()?;
        if captions.pairs().is_empty() {
            return Err(ArenaError::NotEnoughModels);
        }
        let mut elo = EloState::new(captions.models(), &cfg);
        let mut log = Vec::new();
        let mut sink = None;
        if let Some(path) = log_path {
            if path.exists() {
                log = read_jsonl::<MatchRecord>(path)?;
                for m in &log {
                    elo.apply(m, &cfg)?;
                }
            }
            sink = Some(
                OpenOptions::new().create(true).append(true).open(path).map_err(|e| ArenaError::Log(e.to_string()))?,
            );
        }
        Ok(Self {
            cfg,
            captions,
            annotators,
            log_path: log_path.map(Path::to_path_buf),
            inner: Mutex::new(Inner {
                elo,
                log,
                sink,
                pairs: HashMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                reviews: ReviewQueue::new(),
                reports: BTreeMap::new(),
            }),
        })
    }

    pub fn config(&self) -> &EloConfig {
        &self.cfg
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn models(&self) -> BTreeSet<String> {
        self.captions.models()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("arena state poisoned")
    }

    pub fn authenticate(&self, bearer: Option<&str>) -> Result<String, ArenaError> {
        bearer.and_then(|t| self.annotators.get(t)).cloned().ok_or(ArenaError::Unauthorized)
    }

    /// Draws a model pair uniformly among pairs that share a clip, then a
    /// shared clip uniformly, then which model is shown as A.
    pub fn next_pair(&self, annotator_id: &str) -> Result<PairView, ArenaError> {
        let pairs: Vec<((String, String), Vec<String>)> = self.captions.pairs().into_iter().collect();
        let mut inner = self.lock();
        let ((a, b), media) = pairs.choose(&mut inner.rng).ok_or(ArenaError::NotEnoughModels)?.clone();
        let media_id = media.choose(&mut inner.rng).expect("pairs always share a clip").clone();
        let (model_a, model_b) = if inner.rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let token = hex::encode(inner.rng.gen::<[u8; 16]>());
        let view = PairView {
            pair_token: token.clone(),
            media_id: media_id.clone(),
            caption_a: self.captions.get(&media_id, &model_a).expect("stored").text.clone(),
            caption_b: self.captions.get(&media_id, &model_b).expect("stored").text.clone(),
        };
        inner.pairs.insert(
            token,
            Assignment { media_id, model_a, model_b, annotator_id: annotator_id.to_string(), judged: false },
        );
        Ok(view)
    }

    /// Records a judgment for an issued pair and applies it to the ratings.
    pub fn submit_judgment(&self, annotator_id: &str, pair_token: &str, outcome: Outcome) -> Result<MatchRecord, ArenaError> {
        let mut inner = self.lock();
        let a = inner.pairs.get(pair_token).ok_or_else(|| ArenaError::UnknownPair(pair_token.to_string()))?;
        if a.annotator_id != annotator_id {
            return Err(ArenaError::Forbidden);
        }
        if a.judged {
            return Err(ArenaError::DuplicateJudgment(pair_token.to_string()));
        }
        let seq = inner.elo.matches_applied + 1;
        let rec = MatchRecord {
            match_id: pair_token.to_string(),
            media_id: a.media_id.clone(),
            model_a: a.model_a.clone(),
            model_b: a.model_b.clone(),
            outcome,
            annotator_id: annotator_id.to_string(),
            sequence_no: seq,
        };
        let mut next = inner.elo.clone();
        next.apply(&rec, &self.cfg)?;
        if let Some(f) = &mut inner.sink {
            let line = serde_json::to_string(&rec).map_err(|e| ArenaError::Log(e.to_string()))?;
            writeln!(f, "{line}").and_then(|_| f.sync_data()).map_err(|e| ArenaError::Log(e.to_string()))?;
        }
        inner.elo = next;
        inner.log.push(rec.clone());
        inner.pairs.get_mut(pair_token).expect("checked above").judged = true;
        Ok(rec)
    }

    pub fn elo(&self) -> EloState {
        self.lock().elo.clone()
    }

    pub fn match_log(&self) -> Vec<MatchRecord> {
        self.lock().log.clone()
    }

    pub fn leaderboard(&self) -> Vec<LeaderboardRow> {
        let inner = self.lock();
        let mut played: HashMap<&str, usize> = HashMap::new();
        for m in &inner.log {
            *played.entry(&m.model_a).or_default() += 1;
            *played.entry(&m.model_b).or_default() += 1;
        }
        inner
            .elo
            .leaderboard()
            .into_iter()
            .enumerate()
            .map(|(i, (model, rating))| LeaderboardRow {
                rank: i + 1,
                matches: played.get(model.as_str()).copied().unwrap_or(0),
                model,
                rating,
            })
            .collect()
    }

    /// Attaches an automatic-metric report for a model, used by stats.
    pub fn set_report(&self, model: impl Into<String>, report: EvalReport) {
        self.lock().reports.insert(model.into(), report);
    }

    pub fn stats(&self) -> ArenaStats {
        let inner = self.lock();
        let pairs: Vec<CorrelationPair> = inner
            .reports
            .iter()
            .filter_map(|(model, rep)| {
                inner.elo.rating(model).map(|elo| CorrelationPair {
                    model: model.clone(),
                    elo,
                    metric: rep.row(RowLabel::Total).acc_pct,
                })
            })
            .collect();
        let (correlation, correlation_error) = match CorrelationResult::from_pairs(pairs) {
            Ok(c) => (Some(c), None),
            Err(e) => (None, Some(e.to_string())),
        };
        ArenaStats {
            matches: inner.elo.matches_applied,
            models: inner.elo.ratings.len(),
            pending_pairs: inner.pairs.values().filter(|a| !a.judged).count(),
            reports: inner.reports.clone(),
            correlation,
            correlation_error,
        }
    }

    pub fn submit_review(&self, passage: ClozePassage, submitter: &str) -> Result<String, ArenaError> {
        Ok(self.lock().reviews.submit(passage, submitter)?)
    }

    pub fn pending_reviews(&self) -> Vec<ReviewItem> {
        self.lock().reviews.pending().cloned().collect()
    }

    pub fn review_item(&self, item_id: &str) -> Option<ReviewItem> {
        self.lock().reviews.get(item_id).cloned()
    }

    pub fn decide_review(
        &self,
        item_id: &str,
        reviewer: &str,
        decision: ReviewDecision,
        expected_revision: Option<u32>,
    ) -> Result<ReviewItem, ArenaError> {
        Ok(self.lock().reviews.decide(item_id, reviewer, decision, expected_revision)?)
    }
}
