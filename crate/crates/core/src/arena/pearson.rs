use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CorrelationError {
    #[error("need at least two pairs")]
    TooFewPairs,
    #[error("one of the series has zero variance")]
    ZeroVariance,
    #[error("non-finite value in input")]
    NonFinite,
}

/// Product-moment correlation, computed in two passes (means first, then
/// centred sums) to keep cancellation error small.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64, CorrelationError> {
    if pairs.len() < 2 {
        return Err(CorrelationError::TooFewPairs);
    }
    if pairs.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrelationError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Per-model (rating, metric) pairs and their correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub pairs: Vec<CorrelationPair>,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub model: String,
    pub elo: f64,
    pub metric: f64,
}

impl CorrelationResult {
    pub fn from_pairs(pairs: Vec<CorrelationPair>) -> Result<Self, CorrelationError> {
        let xy: Vec<(f64, f64)> = pairs.iter().map(|p| (p.elo, p.metric)).collect();
        let r = pearson(&xy)?;
        Ok(Self { pairs, r })
    }
}
