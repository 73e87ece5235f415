use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EloConfig {
    pub initial_mean: f64,
    pub log_base: f64,
    pub scale: f64,
    pub k_factor: f64,
}

impl Default for EloConfig {
    fn default() -> Self {
        Self { initial_mean: 1000.0, log_base: 10.0, scale: 400.0, k_factor: 32.0 }
    }
}

impl EloConfig {
    pub fn validate(&self) -> Result<(), EloError> {
        if self.scale > 0.0 && self.k_factor > 0.0 && self.log_base > 1.0 && self.initial_mean.is_finite() {
            Ok(())
        } else {
            Err(EloError::InvalidConfig)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "A_wins")]
    AWins,
    #[serde(rename = "B_wins")]
    BWins,
    Draw,
}

impl Outcome {
    /// Score of side A.
    pub fn score_a(self) -> f64 {
        match self {
            Outcome::AWins => 1.0,
            Outcome::BWins => 0.0,
            Outcome::Draw => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub match_id: String,
    pub media_id: String,
    pub model_a: String,
    pub model_b: String,
    pub outcome: Outcome,
    pub annotator_id: String,
    pub sequence_no: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EloError {
    #[error("match {got} applied out of order (expected {expected})")]
    OutOfOrderMatch { expected: u64, got: u64 },
    #[error("match log skips from {expected} to {got}")]
    GapInSequence { expected: u64, got: u64 },
    #[error("a model cannot play itself (`{0}`)")]
    SelfMatch(String),
    #[error("invalid Elo configuration")]
    InvalidConfig,
}

/// Probability that a player rated `r_a` beats one rated `r_b`.
pub fn expected_score(r_a: f64, r_b: f64, cfg: &EloConfig) -> f64 {
    1.0 / (1.0 + cfg.log_base.powf((r_b - r_a) / cfg.scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloState {
    pub ratings: BTreeMap<String, f64>,
    pub matches_applied: u64,
}

impl EloState {
    /// Registers `models` at the initial rating.
    pub fn new<I, S>(models: I, cfg: &EloConfig) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { ratings: models.into_iter().map(|m| (m.into(), cfg.initial_mean)).collect(), matches_applied: 0 }
    }

    pub fn rating(&self, model: &str) -> Option<f64> {
        self.ratings.get(model).copied()
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }

    /// Models by descending rating, ties by name.
    pub fn leaderboard(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self.ratings.iter().map(|(m, r)| (m.clone(), *r)).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows
    }

    /// Applies one match in place. The match must carry the next sequence
    /// number; unseen models enter at the initial rating.
    pub fn apply(&mut self, m: &MatchRecord, cfg: &EloConfig) -> Result<(), EloError> {
        let expected = self.matches_applied + 1;
        if m.sequence_no < expected {
            return Err(EloError::OutOfOrderMatch { expected, got: m.sequence_no });
        }
        if m.sequence_no > expected {
            return Err(EloError::GapInSequence { expected, got: m.sequence_no });
        }
        if m.model_a == m.model_b {
            return Err(EloError::SelfMatch(m.model_a.clone()));
        }
        let ra = *self.ratings.entry(m.model_a.clone()).or_insert(cfg.initial_mean);
        let rb = *self.ratings.entry(m.model_b.clone()).or_insert(cfg.initial_mean);
        let delta = cfg.k_factor * (m.outcome.score_a() - expected_score(ra, rb, cfg));
        self.ratings.insert(m.model_a.clone(), ra + delta);
        self.ratings.insert(m.model_b.clone(), rb - delta);
        self.matches_applied = m.sequence_no;
        Ok(())
    }
}

/// Pure form of [`EloState::apply`].
pub fn apply_match(state: &EloState, m: &MatchRecord, cfg: &EloConfig) -> Result<EloState, EloError> {
    let mut next = state.clone();
    next.apply(m, cfg)?;
    Ok(next)
}

/// Folds the log, in order, over freshly registered `models`.
pub fn replay_matches<S: AsRef<str>>(models: &[S], log: &[MatchRecord], cfg: &EloConfig) -> Result<EloState, EloError> {
    cfg.validate()?;
    let mut state = EloState::new(models.iter().map(|m| m.as_ref().to_string()), cfg);
    for m in log {
        state.apply(m, cfg)?;
    }
    Ok(state)
}
