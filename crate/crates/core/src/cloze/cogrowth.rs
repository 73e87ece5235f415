use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ScoredItem, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CogrowthError {
    #[error("bin edges must be strictly increasing")]
    UnsortedEdges,
    #[error("need at least two bin edges")]
    TooFewEdges,
}

/// One word-count bin `[lo, hi)`; the last bin is closed on the right.
/// Rates are `None` when no caption fell into the bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: usize,
    pub hi: usize,
    pub captions: usize,
    pub blanks: usize,
    pub detail_rate: Option<f64>,
    pub hallucination_rate: Option<f64>,
}

/// Bins scored captions by word count and reports the Correct and
/// Hallucination fractions per bin. Captions outside the edges are dropped.
pub fn length_cogrowth(scored: &[ScoredItem], edges: &[usize]) -> Result<Vec<LengthBin>, CogrowthError> {
    if edges.len() < 2 {
        return Err(CogrowthError::TooFewEdges);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CogrowthError::UnsortedEdges);
    }
    let last = edges.len() - 2;
    let mut bins: Vec<(usize, usize, usize, usize)> = vec![(0, 0, 0, 0); edges.len() - 1];
    for s in scored {
        let wc = s.word_count;
        let Some(i) = edges.windows(2).enumerate().position(|(i, w)| wc >= w[0] && (wc < w[1] || (i == last && wc == w[1])))
        else {
            continue;
        };
        let b = &mut bins[i];
        b.0 += 1;
        b.1 += s.outcomes.len();
        b.2 += s.outcomes.iter().filter(|o| o.verdict == Verdict::Correct).count();
        b.3 += s.outcomes.iter().filter(|o| o.verdict == Verdict::Hallucination).count();
    }
    Ok(bins
        .into_iter()
        .zip(edges.windows(2))
        .map(|((captions, blanks, correct, hall), w)| {
            let rate = |k: usize| (blanks > 0).then(|| k as f64 / blanks as f64);
            LengthBin {
                lo: w[0],
                hi: w[1],
                captions,
                blanks,
                detail_rate: rate(correct),
                hallucination_rate: rate(hall),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloze::{aggregate, BlankOutcome, Letter, RowLabel};
    use crate::model::Modality;

    fn scored(wc: usize, correct: usize, hall: usize, total: usize) -> ScoredItem {
        let outcomes = (0..total)
            .map(|i| BlankOutcome {
                number: i as u32 + 1,
                modality: Modality::Audio,
                verdict: if i < correct {
                    Verdict::Correct
                } else if i < correct + hall {
                    Verdict::Hallucination
                } else {
                    Verdict::NotGiven
                },
                chosen_letter: None,
                correct_letter: Letter::A,
                anomaly: None,
            })
            .collect();
        ScoredItem { media_id: format!("m{wc}"), source_model: "x".into(), modality_condition: Modality::Audio, word_count: wc, outcomes }
    }

    #[test]
    fn identical_lengths_match_global() {
        let items = vec![scored(50, 10, 3, 30), scored(50, 20, 1, 30)];
        let bins = length_cogrowth(&items, &[0, 100, 200]).unwrap();
        assert_eq!(bins[0].captions, 2);
        assert_eq!(bins[1].captions, 0);
        let total = aggregate(&items).unwrap();
        let t = total.row(RowLabel::Total);
        assert!((bins[0].detail_rate.unwrap() * 100.0 - t.acc_pct).abs() < 0.05);
        assert!((bins[0].hallucination_rate.unwrap() * 100.0 - t.hall_pct).abs() < 0.05);
    }

    #[test]
    fn monotone_fixture() {
        // longer captions unlock more correct and more wrong picks
        let items: Vec<_> = (1..=6).map(|k| scored(k * 40, 3 * k, k / 2, 30)).collect();
        let bins = length_cogrowth(&items, &[0, 80, 160, 240, 400]).unwrap();
        let d: Vec<f64> = bins.iter().map(|b| b.detail_rate.unwrap()).collect();
        let h: Vec<f64> = bins.iter().map(|b| b.hallucination_rate.unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] >= w[0]));
        assert!(h.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn empty_middle_bin() {
        let items = vec![scored(10, 1, 0, 30), scored(250, 5, 1, 30)];
        let bins = length_cogrowth(&items, &[0, 100, 200, 300]).unwrap();
        assert_eq!(bins[1].captions, 0);
        assert_eq!(bins[1].detail_rate, None);
        assert!(bins[2].detail_rate.is_some());
        assert_eq!(length_cogrowth(&items, &[0, 10, 10]), Err(CogrowthError::UnsortedEdges));
        assert_eq!(length_cogrowth(&items, &[0]), Err(CogrowthError::TooFewEdges));
        // right edge of the last bin is inclusive
        assert_eq!(length_cogrowth(&items, &[0, 250]).unwrap()[0].captions, 2);
    }
}
