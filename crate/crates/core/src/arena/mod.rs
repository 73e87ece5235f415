//! Pairwise human preference rating: Elo over a match log, correlation
//! against automatic metrics, and the state behind the arena API.

mod elo;
mod pearson;
mod service;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use elo::{apply_match, expected_score, replay_matches, EloConfig, EloError, EloState, MatchRecord, Outcome};
pub use pearson::{pearson, CorrelationError, CorrelationPair, CorrelationResult};
pub use service::{ArenaError, ArenaService, ArenaStats, CaptionStore, LeaderboardRow, PairView};

/// A seeded log of `n` matches between agents of fixed strength. Pairs are
/// uniform; agent `i` beats agent `j` with probability `s_i / (s_i + s_j)`.
pub fn simulate_matches(agents: &[(&str, f64)], n: usize, seed: u64) -> Vec<MatchRecord> {
    assert!(agents.len() >= 2, "need two agents");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let i = rng.gen_range(0..agents.len());
            let j = (i + rng.gen_range(1..agents.len())) % agents.len();
            let (a, b) = (agents[i], agents[j]);
            let outcome = if rng.gen_bool(a.1 / (a.1 + b.1)) { Outcome::AWins } else { Outcome::BWins };
            MatchRecord {
                match_id: format!("sim-{k}"),
                media_id: format!("clip-{}", rng.gen_range(0..100)),
                model_a: a.0.to_string(),
                model_b: b.0.to_string(),
                outcome,
                annotator_id: "simulated".into(),
                sequence_no: k as u64 + 1,
            }
        })
        .collect()
}
