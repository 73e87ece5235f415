//! Cloze items: generation, validation, seeded rendering into lettered
//! multiple choice, human review, export, and scoring of captions against
//! them.

mod cogrowth;
mod export;
mod forge;
mod judge;
mod review;
mod scorer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::Modality;

pub use cogrowth::{length_cogrowth, CogrowthError, LengthBin};
pub use export::{export_benchmark, item_seed, load_benchmark, ExportSummary};
pub use forge::{build_generation_prompt, forge_item, validate_cloze, ForgeError, ForgeOutcome};
pub use judge::ContentJudge;
pub use review::{AuditEntry, BlankPatch, ItemState, ReviewDecision, ReviewError, ReviewItem, ReviewQueue};
pub use scorer::{
    aggregate, build_completion_prompt, evaluate_captions, parse_completion, render_report_table, score, AnomalyReason,
    BlankOutcome, CompletionResponse, EvalError, EvalReport, ItemBreakdown, ModalityRow, ParseAnomaly, RowLabel,
    ScoredItem, Selection, TotalParseFailure, Verdict,
};

/// Fixed content of option E.
pub const NOT_GIVEN: &str = "not given";

/// Minimum blanks per modality and the exact total per passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClozeQuota {
    pub min_audio: usize,
    pub min_visual: usize,
    pub min_av: usize,
    pub total: usize,
}

impl Default for ClozeQuota {
    fn default() -> Self {
        Self { min_audio: 10, min_visual: 10, min_av: 5, total: 30 }
    }
}

impl ClozeQuota {
    pub fn is_satisfiable(&self) -> bool {
        self.total >= 1 && self.min_audio + self.min_visual + self.min_av <= self.total
    }

    pub fn min_for(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.min_audio,
            Modality::Visual => self.min_visual,
            Modality::AudioVisual => self.min_av,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeBlank {
    pub number: u32,
    pub answer: String,
    pub distractors: Vec<String>,
    pub required_modality: Modality,
}

/// One reason a cloze document is not acceptable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ParseFailure { message: String },
    QuotaViolation { modality: Modality, found: usize, min: usize },
    PlaceholderMismatch { number: u32 },
    DuplicateDistractor { number: u32 },
    BlankCountMismatch { found: usize, expected: usize },
    DistractorCount { number: u32, found: usize },
    DuplicateNumber { number: u32 },
    NumberOutOfRange { number: u32 },
    InvalidModality { number: u32, value: String },
    EmptyAnswer { number: u32 },
    UnsatisfiableQuota,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ParseFailure { message } => write!(f, "output is not a cloze JSON document: {message}"),
            Violation::QuotaViolation { modality, found, min } => {
                write!(f, "only {found} `{modality}` blanks, at least {min} required")
            }
            Violation::PlaceholderMismatch { number } => {
                write!(f, "placeholder [BLANK_{number}] must appear exactly once and match a declared blank")
            }
            Violation::DuplicateDistractor { number } => {
                write!(f, "blank {number}: answer and distractors must be pairwise distinct")
            }
            Violation::BlankCountMismatch { found, expected } => write!(f, "{found} blanks declared, expected {expected}"),
            Violation::DistractorCount { number, found } => write!(f, "blank {number}: {found} distractors, expected 3"),
            Violation::DuplicateNumber { number } => write!(f, "blank number {number} declared twice"),
            Violation::NumberOutOfRange { number } => write!(f, "blank number {number} is outside 1..=total"),
            Violation::InvalidModality { number, value } => {
                write!(f, "blank {number}: required_modality `{value}` is not audio, visual or audio-visual")
            }
            Violation::EmptyAnswer { number } => write!(f, "blank {number}: empty answer"),
            Violation::UnsatisfiableQuota => write!(f, "quota minima exceed the total"),
        }
    }
}

/// All violations found in a candidate cloze document.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("cloze rejected: {}", .violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ClozeRejection {
    pub violations: Vec<Violation>,
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[BLANK_(\d+)\]").expect("blank regex"))
}

pub(crate) fn normalize_option(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Every invariant of a passage, checked together so a rejection lists all
/// problems rather than the first.
pub(crate) fn check_passage(passage: &str, blanks: &[ClozeBlank], quota: &ClozeQuota) -> Vec<Violation> {
    let mut out = Vec::new();
    if !quota.is_satisfiable() {
        out.push(Violation::UnsatisfiableQuota);
    }
    if blanks.len() != quota.total {
        out.push(Violation::BlankCountMismatch { found: blanks.len(), expected: quota.total });
    }
    let mut numbers = BTreeSet::new();
    for b in blanks {
        if !numbers.insert(b.number) {
            out.push(Violation::DuplicateNumber { number: b.number });
        }
        if b.number == 0 || b.number as usize > quota.total {
            out.push(Violation::NumberOutOfRange { number: b.number });
        }
        if b.answer.trim().is_empty() {
            out.push(Violation::EmptyAnswer { number: b.number });
        }
        if b.distractors.len() != 3 {
            out.push(Violation::DistractorCount { number: b.number, found: b.distractors.len() });
        }
        let mut opts = BTreeSet::new();
        let distinct = std::iter::once(&b.answer).chain(&b.distractors).all(|o| opts.insert(normalize_option(o)));
        if !distinct {
            out.push(Violation::DuplicateDistractor { number: b.number });
        }
    }
    let mut occurrences: BTreeMap<u32, usize> = BTreeMap::new();
    for cap in placeholder_re().captures_iter(passage) {
        match cap[1].parse::<u32>() {
            Ok(n) => *occurrences.entry(n).or_default() += 1,
            Err(_) => out.push(Violation::PlaceholderMismatch { number: u32::MAX }),
        }
    }
    let mismatched: BTreeSet<u32> = numbers
        .iter()
        .filter(|n| occurrences.get(n) != Some(&1))
        .chain(occurrences.keys().filter(|n| !numbers.contains(n)))
        .copied()
        .collect();
    out.extend(mismatched.into_iter().map(|number| Violation::PlaceholderMismatch { number }));
    for m in Modality::ALL {
        let found = blanks.iter().filter(|b| b.required_modality == m).count();
        let min = quota.min_for(m);
        if found < min {
            out.push(Violation::QuotaViolation { modality: m, found, min });
        }
    }
    out
}

#[derive(Deserialize)]
struct PassageWire {
    media_id: String,
    passage: String,
    blanks: Vec<ClozeBlank>,
    quota: ClozeQuota,
}

/// A validated cloze passage. Values only exist if every structural and
/// quota invariant holds; deserialization re-checks them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PassageWire")]
pub struct ClozePassage {
    media_id: String,
    passage: String,
    blanks: Vec<ClozeBlank>,
    quota: ClozeQuota,
}

impl TryFrom<PassageWire> for ClozePassage {
    type Error = ClozeRejection;

    fn try_from(w: PassageWire) -> Result<Self, Self::Error> {
        ClozePassage::new(w.media_id, w.passage, w.blanks, w.quota)
    }
}

impl ClozePassage {
    pub fn new(
        media_id: impl Into<String>,
        passage: impl Into<String>,
        mut blanks: Vec<ClozeBlank>,
        quota: ClozeQuota,
    ) -> Result<Self, ClozeRejection> {
        let passage = passage.into();
        let violations = check_passage(&passage, &blanks, &quota);
        if !violations.is_empty() {
            return Err(ClozeRejection { violations });
        }
        blanks.sort_by_key(|b| b.number);
        Ok(Self { media_id: media_id.into(), passage, blanks, quota })
    }

    pub fn media_id(&self) -> &str {
        &self.media_id
    }

    pub fn passage(&self) -> &str {
        &self.passage
    }

    pub fn blanks(&self) -> &[ClozeBlank] {
        &self.blanks
    }

    pub fn quota(&self) -> &ClozeQuota {
        &self.quota
    }

    pub fn blank(&self, number: u32) -> Option<&ClozeBlank> {
        self.blanks.iter().find(|b| b.number == number)
    }

    pub fn modality_counts(&self) -> BTreeMap<Modality, usize> {
        let mut counts = BTreeMap::new();
        for b in &self.blanks {
            *counts.entry(b.required_modality).or_default() += 1;
        }
        counts
    }

    pub(crate) fn into_parts(self) -> (String, String, Vec<ClozeBlank>, ClozeQuota) {
        (self.media_id, self.passage, self.blanks, self.quota)
    }
}

/// Option letter. A-D hold content; E is always "not given".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
    E,
}

impl Letter {
    pub const CONTENT: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn from_char(c: char) -> Option<Letter> {
        match c {
            'A' => Some(Letter::A),
            'B' => Some(Letter::B),
            'C' => Some(Letter::C),
            'D' => Some(Letter::D),
            'E' => Some(Letter::E),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Letter::A => 'A',
            Letter::B => 'B',
            Letter::C => 'C',
            Letter::D => 'D',
            Letter::E => 'E',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// A blank as shown to a judge: four content options, E implied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedBlank {
    pub number: u32,
    pub required_modality: Modality,
    pub options: [String; 4],
}

impl RenderedBlank {
    pub fn option(&self, letter: Letter) -> &str {
        match letter {
            Letter::E => NOT_GIVEN,
            l => &self.options[l.index()],
        }
    }
}

/// The judge-visible part of a rendered cloze. Carries no answer key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClozeItem {
    pub media_id: String,
    pub passage: String,
    pub blanks: Vec<RenderedBlank>,
    pub seed: u64,
}

impl ClozeItem {
    pub fn blank_numbers(&self) -> Vec<u32> {
        self.blanks.iter().map(|b| b.number).collect()
    }

    pub fn blank(&self, number: u32) -> Option<&RenderedBlank> {
        self.blanks.iter().find(|b| b.number == number)
    }

    /// The text filled into the completion prompt's `{cloze}` slot: the
    /// passage, then one option group per blank with E last.
    pub fn prompt_text(&self) -> String {
        let mut out = String::with_capacity(self.passage.len() + self.blanks.len() * 96);
        out.push_str(&self.passage);
        out.push_str("\n\nOptions:");
        for b in &self.blanks {
            out.push_str(&format!("\n[BLANK_{}]", b.number));
            for l in Letter::CONTENT {
                out.push_str(&format!("\n{}: {}", l, b.options[l.index()]));
            }
            out.push_str(&format!("\nE: {NOT_GIVEN}"));
        }
        out
    }
}

/// Correct letters per blank, stored apart from the items.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub media_id: String,
    pub seed: u64,
    pub key: BTreeMap<u32, Letter>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedCloze {
    pub item: ClozeItem,
    pub answer_key: AnswerKey,
}

/// Places each blank's answer and distractors into A-D by a seeded
/// permutation. Every blank draws from its own ChaCha stream, so editing one
/// blank never reshuffles the others.
pub fn render_cloze(p: &ClozePassage, seed: u64) -> RenderedCloze {
    let mut blanks = Vec::with_capacity(p.blanks.len());
    let mut key = BTreeMap::new();
    for b in &p.blanks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(b.number));
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut rng);
        let content: Vec<&String> = std::iter::once(&b.answer).chain(&b.distractors).collect();
        let options: [String; 4] = order.map(|i| content[i].clone());
        let pos = order.iter().position(|&i| i == 0).expect("answer placed");
        key.insert(b.number, Letter::CONTENT[pos]);
        blanks.push(RenderedBlank { number: b.number, required_modality: b.required_modality, options });
    }
    RenderedCloze {
        item: ClozeItem { media_id: p.media_id.clone(), passage: p.passage.clone(), blanks, seed },
        answer_key: AnswerKey { media_id: p.media_id.clone(), seed, key },
    }
}

/// Looks items up by media id.
pub fn index_by_media<T, F: Fn(&T) -> &str>(items: Vec<T>, id: F) -> HashMap<String, T> {
    items.into_iter().map(|t| (id(&t).to_string(), t)).collect()
}

pub(crate) fn stable_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// A valid passage with the given modality counts; blank n's answer is
    /// `ans{n}` and its distractors `d{n}x`, `d{n}y`, `d{n}z`.
    pub fn passage_with(media_id: &str, audio: usize, visual: usize, av: usize, quota: ClozeQuota) -> (String, Vec<ClozeBlank>) {
        let mods = std::iter::repeat(Modality::Audio)
            .take(audio)
            .chain(std::iter::repeat(Modality::Visual).take(visual))
            .chain(std::iter::repeat(Modality::AudioVisual).take(av));
        let blanks: Vec<ClozeBlank> = mods
            .enumerate()
            .map(|(i, m)| {
                let n = i as u32 + 1;
                ClozeBlank {
                    number: n,
                    answer: format!("ans{n}"),
                    distractors: vec![format!("d{n}x"), format!("d{n}y"), format!("d{n}z")],
                    required_modality: m,
                }
            })
            .collect();
        let text = blanks.iter().map(|b| format!("Detail {} is [BLANK_{}].", b.number, b.number)).collect::<Vec<_>>().join(" ");
        let _ = (media_id, quota);
        (text, blanks)
    }

    pub fn default_passage(media_id: &str) -> ClozePassage {
        let q = ClozeQuota::default();
        let (text, blanks) = passage_with(media_id, 12, 13, 5, q);
        ClozePassage::new(media_id, text, blanks, q).expect("fixture passage is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn quota_defaults() {
        let q = ClozeQuota::default();
        assert_eq!((q.min_audio, q.min_visual, q.min_av, q.total), (10, 10, 5, 30));
        assert!(q.is_satisfiable());
        assert!(!ClozeQuota { min_audio: 20, min_visual: 20, min_av: 5, total: 30 }.is_satisfiable());
    }

    #[test]
    fn all_violations_are_reported() {
        let q = ClozeQuota::default();
        let (text, mut blanks) = passage_with("m", 9, 16, 5, q);
        blanks[3].distractors[1] = " ANS4 ".into();
        let text = text.replace("[BLANK_17]", "something");
        let err = ClozePassage::new("m", text, blanks, q).unwrap_err();
        assert!(err.violations.contains(&Violation::QuotaViolation { modality: Modality::Audio, found: 9, min: 10 }));
        assert!(err.violations.contains(&Violation::PlaceholderMismatch { number: 17 }));
        assert!(err.violations.contains(&Violation::DuplicateDistractor { number: 4 }));
        assert_eq!(err.violations.len(), 3);
    }

    #[test]
    fn placeholder_for_undeclared_blank() {
        let q = ClozeQuota::default();
        let (text, blanks) = passage_with("m", 12, 13, 5, q);
        let err = ClozePassage::new("m", format!("{text} [BLANK_31]"), blanks, q).unwrap_err();
        assert_eq!(err.violations, vec![Violation::PlaceholderMismatch { number: 31 }]);
        let (text, blanks) = passage_with("m", 12, 13, 5, q);
        let err = ClozePassage::new("m", format!("{text} [BLANK_2]"), blanks, q).unwrap_err();
        assert_eq!(err.violations, vec![Violation::PlaceholderMismatch { number: 2 }]);
    }

    #[test]
    fn render_is_seeded_and_bijective() {
        let p = default_passage("m");
        let a = render_cloze(&p, 7);
        assert_eq!(a, render_cloze(&p, 7));
        for (rb, b) in a.item.blanks.iter().zip(p.blanks()) {
            let mut shown: Vec<&String> = rb.options.iter().collect();
            let mut expected: Vec<&String> = std::iter::once(&b.answer).chain(&b.distractors).collect();
            shown.sort();
            expected.sort();
            assert_eq!(shown, expected);
            let letter = a.answer_key.key[&b.number];
            assert_ne!(letter, Letter::E);
            assert_eq!(rb.option(letter), b.answer);
            assert_eq!(rb.option(Letter::E), NOT_GIVEN);
            assert_eq!(rb.options.iter().filter(|o| **o == b.answer).count(), 1);
        }
    }

    #[test]
    fn red_blank_placement() {
        let q = ClozeQuota { min_audio: 0, min_visual: 1, min_av: 0, total: 1 };
        let blank = ClozeBlank {
            number: 1,
            answer: "red".into(),
            distractors: vec!["blue".into(), "green".into(), "black".into()],
            required_modality: Modality::Visual,
        };
        let p = ClozePassage::new("m", "The car is [BLANK_1].", vec![blank], q).unwrap();
        for seed in 0..20 {
            let r = render_cloze(&p, seed);
            let b = &r.item.blanks[0];
            assert_eq!(b.options.iter().filter(|o| *o == "red").count(), 1);
            assert_eq!(b.option(r.answer_key.key[&1]), "red");
            assert!(r.item.prompt_text().ends_with("E: not given"));
        }
    }

    #[test]
    fn answer_letter_is_roughly_uniform_over_seeds() {
        let p = default_passage("m");
        let mut counts = [0usize; 4];
        for seed in 1..=1000u64 {
            counts[render_cloze(&p, seed).answer_key.key[&1].index()] += 1;
        }
        for c in counts {
            let frac = c as f64 / 1000.0;
            assert!((frac - 0.25).abs() <= 0.04, "{counts:?}");
        }
    }

    #[test]
    fn passage_deserialization_rechecks() {
        let p = default_passage("m");
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<ClozePassage>(&json).unwrap(), p);
        let broken = json.replace("[BLANK_5]", "");
        assert!(serde_json::from_str::<ClozePassage>(&broken).is_err());
    }

    #[test]
    fn benchmark_scale_arithmetic() {
        assert_eq!(2340 * ClozeQuota::default().total, 70200);
    }
}
