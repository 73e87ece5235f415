//! Caption scoring: one judge call per caption fills every blank, and each
//! blank resolves to Correct, NotGiven or Hallucination.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{normalize_option, AnswerKey, ClozeItem, Letter};
use crate::gateway::{parallel_map, ChatMessage, ChatRequest, DecodeParams, Gateway, GatewayError};
use crate::json_extract;
use crate::model::{pct_of, CaptionRecord, Modality};
use crate::prompt::{PromptSet, TemplateError, CLOZE_COMPLETION};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("caption is for `{caption}` but the cloze item is `{item}`")]
    MismatchedMedia { caption: String, item: String },
    #[error("no cloze item for media `{0}`")]
    MissingItem(String),
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Fills the completion template with the lettered cloze and the caption.
/// The answer key is not an input, so it cannot leak into the prompt.
pub fn build_completion_prompt(prompts: &PromptSet, item: &ClozeItem, caption: &CaptionRecord) -> Result<String, EvalError> {
    if item.media_id != caption.media_id {
        return Err(EvalError::MismatchedMedia { caption: caption.media_id.clone(), item: item.media_id.clone() });
    }
    let number = item.blanks.len().to_string();
    let cloze = item.prompt_text();
    Ok(prompts.require(CLOZE_COMPLETION).fill(&[
        ("number", &number),
        ("modality", caption.modality_condition.as_str()),
        ("cloze", &cloze),
        ("prediction", &caption.text),
    ])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyReason {
    MissingBlank,
    InvalidLetter,
    Unparseable,
    UnexpectedBlank,
    LetterTextMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseAnomaly {
    pub number: u32,
    pub reason: AnomalyReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub letter: Letter,
    /// Text the judge echoed after the letter, if any.
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub selections: BTreeMap<u32, Selection>,
    pub parse_anomalies: Vec<ParseAnomaly>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("judge output contains no JSON object")]
pub struct TotalParseFailure;

fn blank_number(key: &str) -> Option<u32> {
    let digits: String = key.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

fn parse_selection(v: &Value) -> Result<Selection, AnomalyReason> {
    let s = v.as_str().ok_or(AnomalyReason::Unparseable)?.trim();
    let first = s.chars().next().ok_or(AnomalyReason::Unparseable)?;
    let letter = Letter::from_char(first).ok_or(AnomalyReason::InvalidLetter)?;
    let rest = s[first.len_utf8()..].trim_start();
    if rest.chars().next().is_some_and(char::is_alphanumeric) {
        // "Audio ..." is a word, not a letter choice
        return Err(AnomalyReason::InvalidLetter);
    }
    let text = rest.trim_start_matches([':', ')', '.', '-']).trim().to_string();
    Ok(Selection { letter, text })
}

/// Reads the judge's `{"1": "A: xxx", ...}` object. Blanks that are absent
/// or malformed become anomalies instead of selections.
pub fn parse_completion(raw: &str, expected: &[u32]) -> Result<CompletionResponse, TotalParseFailure> {
    let obj = json_extract::outermost_object(raw).ok_or(TotalParseFailure)?;
    let mut resp = CompletionResponse::default();
    for (key, value) in &obj {
        let Some(n) = blank_number(key) else { continue };
        if !expected.contains(&n) {
            resp.parse_anomalies.push(ParseAnomaly { number: n, reason: AnomalyReason::UnexpectedBlank });
            continue;
        }
        match parse_selection(value) {
            Ok(sel) => {
                resp.selections.insert(n, sel);
            }
            Err(reason) => resp.parse_anomalies.push(ParseAnomaly { number: n, reason }),
        }
    }
    for &n in expected {
        if !resp.selections.contains_key(&n) && !resp.parse_anomalies.iter().any(|a| a.number == n) {
            resp.parse_anomalies.push(ParseAnomaly { number: n, reason: AnomalyReason::MissingBlank });
        }
    }
    resp.parse_anomalies.sort_by_key(|a| a.number);
    Ok(resp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    NotGiven,
    Hallucination,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlankOutcome {
    pub number: u32,
    pub modality: Modality,
    pub verdict: Verdict,
    /// `None` when the judge gave no usable letter for this blank.
    pub chosen_letter: Option<Letter>,
    pub correct_letter: Letter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly: Option<AnomalyReason>,
}

/// Scores every blank of `item`. A missing or unusable selection counts as
/// NotGiven with its anomaly kept. When the echoed text disagrees with the
/// chosen option the letter still decides, and the mismatch is flagged.
pub fn score(item: &ClozeItem, key: &AnswerKey, resp: &CompletionResponse) -> Vec<BlankOutcome> {
    let anomalies: HashMap<u32, AnomalyReason> = resp.parse_anomalies.iter().map(|a| (a.number, a.reason)).collect();
    item.blanks
        .iter()
        .map(|b| {
            let correct = key.key[&b.number];
            match resp.selections.get(&b.number) {
                None => BlankOutcome {
                    number: b.number,
                    modality: b.required_modality,
                    verdict: Verdict::NotGiven,
                    chosen_letter: None,
                    correct_letter: correct,
                    anomaly: Some(anomalies.get(&b.number).copied().unwrap_or(AnomalyReason::MissingBlank)),
                },
                Some(sel) => {
                    let verdict = if sel.letter == correct {
                        Verdict::Correct
                    } else if sel.letter == Letter::E {
                        Verdict::NotGiven
                    } else {
                        Verdict::Hallucination
                    };
                    let mismatch = sel.letter != Letter::E
                        && !sel.text.is_empty()
                        && normalize_option(&sel.text) != normalize_option(b.option(sel.letter));
                    BlankOutcome {
                        number: b.number,
                        modality: b.required_modality,
                        verdict,
                        chosen_letter: Some(sel.letter),
                        correct_letter: correct,
                        anomaly: mismatch.then_some(AnomalyReason::LetterTextMismatch),
                    }
                }
            }
        })
        .collect()
}

/// Outcomes for one (caption, item) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub media_id: String,
    pub source_model: String,
    pub modality_condition: Modality,
    pub word_count: usize,
    pub outcomes: Vec<BlankOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowLabel {
    Audio,
    Visual,
    AudioVisual,
    Total,
}

impl RowLabel {
    fn title(self) -> &'static str {
        match self {
            RowLabel::Audio => "Audio",
            RowLabel::Visual => "Visual",
            RowLabel::AudioVisual => "Audio-Visual",
            RowLabel::Total => "Total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub modality: RowLabel,
    pub acc_pct: f64,
    pub ng_pct: f64,
    pub hall_pct: f64,
    pub n_blanks: usize,
    pub correct: usize,
    pub not_given: usize,
    pub hallucination: usize,
}

impl ModalityRow {
    fn from_counts(modality: RowLabel, correct: usize, not_given: usize, hallucination: usize) -> Self {
        let n = correct + not_given + hallucination;
        Self {
            modality,
            acc_pct: pct_of(correct, n),
            ng_pct: pct_of(not_given, n),
            hall_pct: pct_of(hallucination, n),
            n_blanks: n,
            correct,
            not_given,
            hallucination,
        }
    }

    pub fn pct_sum(&self) -> f64 {
        self.acc_pct + self.ng_pct + self.hall_pct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemBreakdown {
    pub media_id: String,
    pub source_model: String,
    pub n_blanks: usize,
    pub correct: usize,
    pub not_given: usize,
    pub hallucination: usize,
    pub anomalies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Audio, Visual, Audio-Visual, then Total.
    pub rows: Vec<ModalityRow>,
    pub items: Vec<ItemBreakdown>,
    pub judge_call_count: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn row(&self, label: RowLabel) -> &ModalityRow {
        self.rows.iter().find(|r| r.modality == label).expect("every report carries all four rows")
    }
}

fn tally<'a>(outcomes: impl Iterator<Item = &'a BlankOutcome>) -> (usize, usize, usize) {
    outcomes.fold((0, 0, 0), |(c, n, h), o| match o.verdict {
        Verdict::Correct => (c + 1, n, h),
        Verdict::NotGiven => (c, n + 1, h),
        Verdict::Hallucination => (c, n, h + 1),
    })
}

/// Folds scored items into per-modality and total rows. One judge call is
/// counted per scored item.
pub fn aggregate(items: &[ScoredItem]) -> Result<EvalReport, EvalError> {
    if items.is_empty() || items.iter().all(|i| i.outcomes.is_empty()) {
        return Err(EvalError::EmptyInput);
    }
    let all = || items.iter().flat_map(|i| i.outcomes.iter());
    let mut rows = Vec::with_capacity(4);
    for (label, m) in [
        (RowLabel::Audio, Modality::Audio),
        (RowLabel::Visual, Modality::Visual),
        (RowLabel::AudioVisual, Modality::AudioVisual),
    ] {
        let (c, n, h) = tally(all().filter(|o| o.modality == m));
        rows.push(ModalityRow::from_counts(label, c, n, h));
    }
    let (c, n, h) = tally(all());
    rows.push(ModalityRow::from_counts(RowLabel::Total, c, n, h));
    let breakdown = items
        .iter()
        .map(|i| {
            let (c, n, h) = tally(i.outcomes.iter());
            ItemBreakdown {
                media_id: i.media_id.clone(),
                source_model: i.source_model.clone(),
                n_blanks: i.outcomes.len(),
                correct: c,
                not_given: n,
                hallucination: h,
                anomalies: i.outcomes.iter().filter(|o| o.anomaly.is_some()).count(),
            }
        })
        .collect();
    Ok(EvalReport { rows, items: breakdown, judge_call_count: items.len(), metadata: BTreeMap::new() })
}

/// Aligned text table in NG / Hall / Acc column order, one line per row.
pub fn render_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14}{:>9}{:>9}{:>9}{:>9}", "Modality", "NG(↓)", "Hall(↓)", "Acc(↑)", "Blanks");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<14}{:>9.1}{:>9.1}{:>9.1}{:>9}",
            r.modality.title(),
            r.ng_pct,
            r.hall_pct,
            r.acc_pct,
            r.n_blanks
        );
    }
    let _ = writeln!(out, "judge calls: {}", report.judge_call_count);
    for (k, v) in &report.metadata {
        let _ = writeln!(out, "{k}: {v}");
    }
    out
}

/// Judges every caption against its item, one call each at temperature 0,
/// and scores the result. Output order follows `captions`.
pub fn evaluate_captions(
    gateway: &Gateway,
    judge_backend: &str,
    prompts: &PromptSet,
    items: &HashMap<String, (ClozeItem, AnswerKey)>,
    captions: &[CaptionRecord],
) -> Result<Vec<ScoredItem>, EvalError> {
    for c in captions {
        if !items.contains_key(&c.media_id) {
            return Err(EvalError::MissingItem(c.media_id.clone()));
        }
    }
    let results = parallel_map(captions, gateway.parallelism(), |caption| -> Result<ScoredItem, EvalError> {
        let (item, key) = &items[&caption.media_id];
        let prompt = build_completion_prompt(prompts, item, caption)?;
        let req = ChatRequest::new(judge_backend, "", vec![ChatMessage::user(prompt)])
            .with_decode(DecodeParams { temperature: 0.0, ..DecodeParams::default() })
            .with_meta("media_id", caption.media_id.clone())
            .with_meta("source_model", caption.source_model.clone());
        let ex = gateway.complete(req)?;
        let resp = parse_completion(&ex.response_text, &item.blank_numbers()).unwrap_or_else(|_| CompletionResponse {
            selections: BTreeMap::new(),
            parse_anomalies: item
                .blank_numbers()
                .into_iter()
                .map(|number| ParseAnomaly { number, reason: AnomalyReason::Unparseable })
                .collect(),
        });
        Ok(ScoredItem {
            media_id: caption.media_id.clone(),
            source_model: caption.source_model.clone(),
            modality_condition: caption.modality_condition,
            word_count: caption.word_count,
            outcomes: score(item, key, &resp),
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloze::fixtures::default_passage;
    use crate::cloze::render_cloze;

    fn rendered() -> (ClozeItem, AnswerKey) {
        let r = render_cloze(&default_passage("clip1"), 5);
        (r.item, r.answer_key)
    }

    fn respond(item: &ClozeItem, pick: impl Fn(u32, Letter) -> Letter, key: &AnswerKey) -> CompletionResponse {
        let obj: serde_json::Map<String, Value> = item
            .blanks
            .iter()
            .map(|b| {
                let l = pick(b.number, key.key[&b.number]);
                (b.number.to_string(), Value::String(format!("{}: {}", l, b.option(l))))
            })
            .collect();
        parse_completion(&Value::Object(obj).to_string(), &item.blank_numbers()).unwrap()
    }

    #[test]
    fn completion_prompt_has_no_key_material() {
        let (item, key) = rendered();
        let cap = CaptionRecord::new("clip1", "m", Modality::AudioVisual, "A caption.");
        let p = build_completion_prompt(&PromptSet::builtin(), &item, &cap).unwrap();
        assert!(p.contains("with 30 blanks"));
        assert!(p.contains("A caption (audio-visual description of the scene)."));
        assert_eq!(p.matches("\nE: not given").count(), 30);
        assert!(!p.to_lowercase().contains("answer_key") && !p.contains("correct_letter"));
        let _ = key;
        assert_eq!(p, build_completion_prompt(&PromptSet::builtin(), &item, &cap).unwrap());
        let other = CaptionRecord::new("clip2", "m", Modality::Audio, "x");
        assert!(matches!(build_completion_prompt(&PromptSet::builtin(), &item, &other), Err(EvalError::MismatchedMedia { .. })));
    }

    #[test]
    fn parse_direct_and_anomalies() {
        let r = parse_completion(r#"{"1":"A: red","2":"E: not given"}"#, &[1, 2]).unwrap();
        assert_eq!(r.selections[&1], Selection { letter: Letter::A, text: "red".into() });
        assert_eq!(r.selections[&2].letter, Letter::E);
        assert!(r.parse_anomalies.is_empty());

        let r = parse_completion(r#"{"1":"F: blue","2":"B","3":7, "4": "Audio cue"}"#, &[1, 2, 3, 4]).unwrap();
        assert_eq!(r.selections.len(), 1);
        assert_eq!(r.selections[&2], Selection { letter: Letter::B, text: String::new() });
        let reasons: Vec<_> = r.parse_anomalies.iter().map(|a| (a.number, a.reason)).collect();
        assert_eq!(
            reasons,
            [(1, AnomalyReason::InvalidLetter), (3, AnomalyReason::Unparseable), (4, AnomalyReason::InvalidLetter)]
        );
        assert_eq!(parse_completion("no object", &[1]), Err(TotalParseFailure));
    }

    #[test]
    fn parse_counts_missing_blanks() {
        let expected: Vec<u32> = (1..=30).collect();
        let obj: serde_json::Map<String, Value> =
            (1..=28).map(|n| (n.to_string(), Value::String("C: x".into()))).collect();
        let r = parse_completion(&format!("```json\n{}\n```", Value::Object(obj)), &expected).unwrap();
        assert_eq!(r.selections.len(), 28);
        assert_eq!(r.parse_anomalies.len(), 2);
        assert!(r.parse_anomalies.iter().all(|a| a.reason == AnomalyReason::MissingBlank));
    }

    #[test]
    fn scoring_table() {
        let (item, key) = rendered();
        let perfect = score(&item, &key, &respond(&item, |_, c| c, &key));
        assert!(perfect.iter().all(|o| o.verdict == Verdict::Correct));
        let abstain = score(&item, &key, &respond(&item, |_, _| Letter::E, &key));
        assert!(abstain.iter().all(|o| o.verdict == Verdict::NotGiven));

        let wrong = |c: Letter| if c == Letter::A { Letter::B } else { Letter::A };
        let mixed = score(&item, &key, &respond(&item, |n, c| if n <= 20 { c } else if n <= 27 { Letter::E } else { wrong(c) }, &key));
        let report = aggregate(&[ScoredItem {
            media_id: "clip1".into(),
            source_model: "m".into(),
            modality_condition: Modality::AudioVisual,
            word_count: 10,
            outcomes: mixed,
        }])
        .unwrap();
        let total = report.row(RowLabel::Total);
        assert_eq!((total.acc_pct, total.ng_pct, total.hall_pct), (66.7, 23.3, 10.0));
        assert_eq!(report.judge_call_count, 1);
    }

    #[test]
    fn letter_beats_echo_text() {
        let (item, key) = rendered();
        let b1 = &item.blanks[0];
        let correct = key.key[&1];
        let raw = format!(r#"{{"1": "{}: something else entirely"}}"#, correct);
        let out = score(&item, &key, &parse_completion(&raw, &item.blank_numbers()).unwrap());
        assert_eq!(out[0].verdict, Verdict::Correct);
        assert_eq!(out[0].anomaly, Some(AnomalyReason::LetterTextMismatch));
        let raw = format!(r#"{{"1": "{}: {}"}}"#, correct, b1.option(correct).to_uppercase());
        let out = score(&item, &key, &parse_completion(&raw, &item.blank_numbers()).unwrap());
        assert_eq!(out[0].anomaly, None);
        // blanks the judge skipped are NotGiven and flagged
        assert!(out[1..].iter().all(|o| o.verdict == Verdict::NotGiven && o.anomaly == Some(AnomalyReason::MissingBlank)));
    }

    #[test]
    fn single_blank_aggregation() {
        let o = BlankOutcome {
            number: 1,
            modality: Modality::Visual,
            verdict: Verdict::Correct,
            chosen_letter: Some(Letter::C),
            correct_letter: Letter::C,
            anomaly: None,
        };
        let r = aggregate(&[ScoredItem {
            media_id: "x".into(),
            source_model: "m".into(),
            modality_condition: Modality::Visual,
            word_count: 1,
            outcomes: vec![o],
        }])
        .unwrap();
        let t = r.row(RowLabel::Total);
        assert_eq!((t.acc_pct, t.ng_pct, t.hall_pct, t.n_blanks), (100.0, 0.0, 0.0, 1));
        let v = r.row(RowLabel::Visual);
        assert_eq!((v.acc_pct, v.ng_pct, v.hall_pct, v.n_blanks), (100.0, 0.0, 0.0, 1));
        assert_eq!(r.row(RowLabel::Audio).n_blanks, 0);
        assert_eq!(r.row(RowLabel::AudioVisual).n_blanks, 0);
        assert_eq!(aggregate(&[]), Err(EvalError::EmptyInput));
    }

    #[test]
    fn table_layout() {
        let (item, key) = rendered();
        let outcomes = score(&item, &key, &respond(&item, |_, c| c, &key));
        let r = aggregate(&[ScoredItem {
            media_id: "clip1".into(),
            source_model: "m".into(),
            modality_condition: Modality::AudioVisual,
            word_count: 3,
            outcomes,
        }])
        .unwrap();
        let t = render_report_table(&r);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Modality"));
        assert!(lines[4].starts_with("Total") && lines[4].contains("100.0"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn letter() -> impl Strategy<Value = Letter> {
            prop_oneof![Just(Letter::A), Just(Letter::B), Just(Letter::C), Just(Letter::D), Just(Letter::E)]
        }

        proptest! {
            #[test]
            fn decomposition_identity(picks in proptest::collection::vec(proptest::option::of(letter()), 30)) {
                let (item, key) = rendered();
                let obj: serde_json::Map<String, Value> = picks.iter().enumerate()
                    .filter_map(|(i, p)| p.map(|l| ((i + 1).to_string(), Value::String(l.to_string()))))
                    .collect();
                let resp = parse_completion(&Value::Object(obj).to_string(), &item.blank_numbers()).unwrap();
                let outcomes = score(&item, &key, &resp);
                let r = aggregate(&[ScoredItem { media_id: "clip1".into(), source_model: "m".into(),
                    modality_condition: Modality::AudioVisual, word_count: 1, outcomes }]).unwrap();
                let mut sum_n = 0;
                for row in &r.rows {
                    prop_assert_eq!(row.correct + row.not_given + row.hallucination, row.n_blanks);
                    if row.n_blanks > 0 {
                        prop_assert!((row.pct_sum() - 100.0).abs() <= 0.1 + 1e-9);
                    }
                    if row.modality != RowLabel::Total { sum_n += row.n_blanks; }
                }
                prop_assert_eq!(sum_n, r.row(RowLabel::Total).n_blanks);
            }

            #[test]
            fn anomalies_never_add_hallucination(picks in proptest::collection::vec(letter(), 30), drop_mask in proptest::collection::vec(any::<bool>(), 30)) {
                let (item, key) = rendered();
                let full: serde_json::Map<String, Value> = picks.iter().enumerate()
                    .map(|(i, l)| ((i + 1).to_string(), Value::String(l.to_string()))).collect();
                let partial: serde_json::Map<String, Value> = picks.iter().enumerate()
                    .map(|(i, l)| ((i + 1).to_string(), Value::String(if drop_mask[i] { "Z".to_string() } else { l.to_string() }))).collect();
                let h = |m: serde_json::Map<String, Value>| {
                    let r = parse_completion(&Value::Object(m).to_string(), &item.blank_numbers()).unwrap();
                    score(&item, &key, &r).iter().filter(|o| o.verdict == Verdict::Hallucination).count()
                };
                prop_assert!(h(partial) <= h(full));
            }
        }
    }
}
