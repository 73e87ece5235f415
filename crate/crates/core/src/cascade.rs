//! Caption-to-QA cascade: a text-only QA model answers multiple-choice
//! questions about a clip from its caption alone.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{parallel_map, ChatMessage, ChatRequest, DecodeParams, Gateway, GatewayError};
use crate::model::{pct_of, CaptionRecord};
use crate::prompt::{PromptSet, TemplateError};

/// One multiple-choice question in the neutral JSONL layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub item_id: String,
    pub media_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub gold: char,
    /// Split family -> value, e.g. `difficulty -> hard`.
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

impl McqItem {
    pub fn validate(&self) -> Result<(), CascadeError> {
        let bad = |why: &str| Err(CascadeError::InvalidItem { item_id: self.item_id.clone(), reason: why.to_string() });
        if !(2..=26).contains(&self.options.len()) {
            return bad("needs between 2 and 26 options");
        }
        match letter_index(self.gold) {
            Some(i) if i < self.options.len() => Ok(()),
            _ => bad("gold letter outside the option range"),
        }
    }

    /// Options as `A. text` lines.
    pub fn options_block(&self) -> String {
        self.options
            .iter()
            .enumerate()
            .map(|(i, o)| format!("{}. {}", (b'A' + i as u8) as char, o))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn letter_index(c: char) -> Option<usize> {
    c.is_ascii_uppercase().then(|| (c as u8 - b'A') as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Letter(char),
    Abstain,
}

fn patterns() -> &'static [Regex; 4] {
    static RE: OnceLock<[Regex; 4]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            // "Answer: B", "the answer is (B)", "Final answer - **B**"
            Regex::new(r"(?i:answer)\W{0,3}(?:(?i:is|would be|should be)\W{1,3})?(?:(?i:option|choice)\s+)?[\(\[*]*([A-Z])(?:[^A-Za-z]|$)")
                .unwrap(),
            Regex::new(r"\b(?i:option|choice)[:\s]+\(?([A-Z])(?:[^A-Za-z']|$)").unwrap(),
            Regex::new(r"\(([A-Z])\)").unwrap(),
            // leading "B.", "B)", "B:" or a lone letter
            Regex::new(r"^[\s*\[]*([A-Z])(?:[.):\]]|\s*$|\*)").unwrap(),
        ]
    })
}

/// Pulls the chosen letter out of a QA reply. Patterns are tried in
/// priority order ("Answer: X" forms, "option X", "(X)", a leading "X.");
/// within the first pattern the last match counts, so a reasoned reply is
/// read from its closing line. Letters beyond `n_options` never count.
pub fn extract_choice(raw: &str, n_options: usize) -> Choice {
    let in_range = |c: char| letter_index(c).is_some_and(|i| i < n_options);
    for (i, re) in patterns().iter().enumerate() {
        let mut found = re.captures_iter(raw).filter_map(|c| c[1].chars().next()).filter(|&c| in_range(c));
        let hit = if i == 0 { found.last() } else { found.next() };
        if let Some(c) = hit {
            return Choice::Letter(c);
        }
    }
    Choice::Abstain
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CascadeError {
    #[error("no caption for media `{0}`")]
    MissingCaption(String),
    #[error("item `{item_id}`: {reason}")]
    InvalidItem { item_id: String, reason: String },
    #[error("unknown QA template `{0}`")]
    UnknownTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeRow {
    pub item_id: String,
    pub chosen: Choice,
    pub gold: char,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub family: String,
    pub value: String,
    pub n: usize,
    pub correct: usize,
    pub acc_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeReport {
    pub template_id: String,
    pub qa_backend: String,
    pub decode: DecodeParams,
    pub n_items: usize,
    pub correct: usize,
    pub abstentions: usize,
    pub overall_pct: f64,
    pub splits: Vec<SplitRow>,
    pub rows: Vec<CascadeRow>,
}

impl CascadeReport {
    pub fn split(&self, family: &str, value: &str) -> Option<&SplitRow> {
        self.splits.iter().find(|s| s.family == family && s.value == value)
    }
}

/// Builds the report from scored rows; `items` supplies the tags.
pub fn summarize(items: &[McqItem], rows: Vec<CascadeRow>, template_id: &str, qa_backend: &str, decode: DecodeParams) -> CascadeReport {
    let correct = rows.iter().filter(|r| r.correct).count();
    let abstentions = rows.iter().filter(|r| r.chosen == Choice::Abstain).count();
    let mut splits: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    for (item, row) in items.iter().zip(&rows) {
        for (family, value) in &item.tags {
            let e = splits.entry((family.clone(), value.clone())).or_default();
            e.0 += 1;
            e.1 += usize::from(row.correct);
        }
    }
    CascadeReport {
        template_id: template_id.to_string(),
        qa_backend: qa_backend.to_string(),
        decode,
        n_items: rows.len(),
        correct,
        abstentions,
        overall_pct: pct_of(correct, rows.len()),
        splits: splits
            .into_iter()
            .map(|((family, value), (n, c))| SplitRow { family, value, n, correct: c, acc_pct: pct_of(c, n) })
            .collect(),
        rows,
    }
}

/// Asks the QA backend every item once, with the item's caption, and
/// scores the extracted letters. Abstentions count as wrong.
pub fn run_cascade(
    gateway: &Gateway,
    prompts: &PromptSet,
    template_id: &str,
    qa_backend: &str,
    captions: &[CaptionRecord],
    items: &[McqItem],
    decode: &DecodeParams,
) -> Result<CascadeReport, CascadeError> {
    let template = prompts.get(template_id).ok_or_else(|| CascadeError::UnknownTemplate(template_id.to_string()))?;
    let by_media: HashMap<&str, &CaptionRecord> = captions.iter().map(|c| (c.media_id.as_str(), c)).collect();
    for item in items {
        item.validate()?;
        if !by_media.contains_key(item.media_id.as_str()) {
            return Err(CascadeError::MissingCaption(item.media_id.clone()));
        }
    }
    let rows = parallel_map(items, gateway.parallelism(), |item| -> Result<CascadeRow, CascadeError> {
        let caption = by_media[item.media_id.as_str()];
        let prompt = template.fill(&[
            ("caption", &caption.text),
            ("question", &item.question),
            ("options", &item.options_block()),
        ])?;
        let req = ChatRequest::new(qa_backend, "", vec![ChatMessage::user(prompt)])
            .with_decode(decode.clone())
            .with_meta("item_id", item.item_id.clone())
            .with_meta("media_id", item.media_id.clone());
        let ex = gateway.complete(req)?;
        let chosen = extract_choice(&ex.response_text, item.options.len());
        Ok(CascadeRow { item_id: item.item_id.clone(), chosen, gold: item.gold, correct: chosen == Choice::Letter(item.gold) })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(items, rows, template_id, qa_backend, decode.clone()))
}

pub fn render_cascade_table(report: &CascadeReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "template: {}  backend: {}", report.template_id, report.qa_backend);
    let _ = writeln!(
        out,
        "overall: {:.1}% ({}/{}), abstained {}",
        report.overall_pct, report.correct, report.n_items, report.abstentions
    );
    for s in &report.splits {
        let _ = writeln!(out, "{:<16}{:<16}{:>7.1}%{:>6}", s.family, s.value, s.acc_pct, s.n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FnBackend;
    use crate::prompt::{QA_DIRECT, QA_REASONED};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    #[derive(Deserialize)]
    struct Phrasing {
        raw: String,
        n_options: usize,
        expected: Option<char>,
    }

    #[test]
    fn labeled_phrasing_corpus() {
        let corpus: Vec<Phrasing> = include_str!("../tests/fixtures/qa_phrasings.jsonl")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(corpus.len(), 50);
        let (mut extracted, mut wrong) = (0, 0);
        for p in &corpus {
            match (extract_choice(&p.raw, p.n_options), p.expected) {
                (Choice::Letter(c), Some(e)) if c == e => extracted += 1,
                (Choice::Abstain, None) => {}
                (got, want) => {
                    wrong += 1;
                    eprintln!("{:?}: got {got:?}, want {want:?}", p.raw);
                }
            }
        }
        assert!(extracted >= 48, "{extracted}");
        assert_eq!(wrong, 0);
    }

    #[test]
    fn extraction_basics() {
        assert_eq!(extract_choice("The answer is (B).", 4), Choice::Letter('B'));
        assert_eq!(extract_choice("E", 4), Choice::Abstain);
        assert_eq!(extract_choice("E", 5), Choice::Letter('E'));
        assert_eq!(extract_choice("A dog barks loudly in the clip.", 4), Choice::Abstain);
    }

    fn item(id: &str, gold: char, k: usize, tags: &[(&str, &str)]) -> McqItem {
        McqItem {
            item_id: id.into(),
            media_id: "m1".into(),
            question: format!("Question {id}?"),
            options: (0..k).map(|i| format!("opt{i}")).collect(),
            gold,
            tags: tags.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }

    fn caps() -> Vec<CaptionRecord> {
        vec![CaptionRecord::new("m1", "cap", crate::model::Modality::AudioVisual, "A caption.")]
    }

    #[test]
    fn oracle_and_hand_count() {
        let items = vec![
            item("e1", 'A', 4, &[("difficulty", "easy")]),
            item("e2", 'B', 4, &[("difficulty", "easy")]),
            item("h1", 'C', 4, &[("difficulty", "hard")]),
            item("h2", 'D', 4, &[("difficulty", "hard")]),
        ];
        // answers A for everything except the hard items, which it gets right
        let gw = Gateway::new().with_backend(
            "qa",
            FnBackend::new(|r: &ChatRequest| {
                Ok(match r.metadata["item_id"].as_str() {
                    "h1" => "Answer: C".to_string(),
                    "h2" => "Answer: D".to_string(),
                    _ => "Answer: A".to_string(),
                })
            }),
        );
        let rep = run_cascade(&gw, &PromptSet::builtin(), QA_DIRECT, "qa", &caps(), &items, &DecodeParams::default()).unwrap();
        assert_eq!(rep.overall_pct, 75.0);
        assert_eq!(rep.split("difficulty", "easy").unwrap().acc_pct, 50.0);
        assert_eq!(rep.split("difficulty", "hard").unwrap().acc_pct, 100.0);
        assert_eq!(gw.exchange_count("qa"), 4);
        assert_eq!(rep.template_id, "qa_direct");

        let gold: HashMap<String, char> = items.iter().map(|i| (i.item_id.clone(), i.gold)).collect();
        let gw = Gateway::new().with_backend(
            "qa",
            FnBackend::new(move |r: &ChatRequest| Ok(format!("Reasoning...\nAnswer: {}", gold[&r.metadata["item_id"]]))),
        );
        let rep = run_cascade(&gw, &PromptSet::builtin(), QA_REASONED, "qa", &caps(), &items, &DecodeParams::default()).unwrap();
        assert_eq!(rep.overall_pct, 100.0);
        let prompt = &gw.exchanges()[0].request.messages[0].content;
        assert!(prompt.contains("A caption.") && prompt.contains("A. opt0\nB. opt1"));
    }

    #[test]
    fn uniform_guessing_converges_to_chance() {
        let k = 4;
        let n = 2000;
        let items: Vec<McqItem> = (0..n).map(|i| item(&format!("q{i}"), (b'A' + (i % k) as u8) as char, k, &[])).collect();
        let gw = Gateway::new().with_parallelism(8).with_backend(
            "qa",
            FnBackend::new(move |r: &ChatRequest| {
                let seed = Sha256::digest(r.metadata["item_id"].as_bytes());
                let mut rng = ChaCha8Rng::from_seed(seed.into());
                Ok(format!("Answer: {}", (b'A' + rng.gen_range(0..k) as u8) as char))
            }),
        );
        let rep = run_cascade(&gw, &PromptSet::builtin(), QA_DIRECT, "qa", &caps(), &items, &DecodeParams::default()).unwrap();
        // 4 standard deviations of a binomial(2000, 0.25) proportion
        let sd = (0.25f64 * 0.75 / n as f64).sqrt() * 100.0;
        assert!((rep.overall_pct - 25.0).abs() < 4.0 * sd, "{}", rep.overall_pct);
    }

    #[test]
    fn errors() {
        let gw = Gateway::new().with_backend("qa", FnBackend::new(|_: &ChatRequest| Ok("Answer: A".to_string())));
        let mut it = item("x", 'A', 4, &[]);
        it.media_id = "nope".into();
        assert_eq!(
            run_cascade(&gw, &PromptSet::builtin(), QA_DIRECT, "qa", &caps(), &[it], &DecodeParams::default()),
            Err(CascadeError::MissingCaption("nope".into()))
        );
        let it = item("x", 'F', 4, &[]);
        assert!(matches!(
            run_cascade(&gw, &PromptSet::builtin(), QA_DIRECT, "qa", &caps(), &[it], &DecodeParams::default()),
            Err(CascadeError::InvalidItem { .. })
        ));
        assert!(matches!(
            run_cascade(&gw, &PromptSet::builtin(), "qa_nope", "qa", &caps(), &[], &DecodeParams::default()),
            Err(CascadeError::UnknownTemplate(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_counts_partition_correct(results in proptest::collection::vec((any::<bool>(), 0usize..3), 1..60)) {
                let items: Vec<McqItem> = results.iter().enumerate()
                    .map(|(i, (_, t))| item(&format!("q{i}"), 'A', 4, &[("tier", ["low", "mid", "high"][*t])]))
                    .collect();
                let rows = results.iter().enumerate().map(|(i, (ok, _))| CascadeRow {
                    item_id: format!("q{i}"),
                    chosen: if *ok { Choice::Letter('A') } else { Choice::Abstain },
                    gold: 'A',
                    correct: *ok,
                }).collect();
                let rep = summarize(&items, rows, "t", "b", DecodeParams::default());
                let sum: usize = rep.splits.iter().filter(|s| s.family == "tier").map(|s| s.correct).sum();
                prop_assert_eq!(sum, rep.correct);
                let n: usize = rep.splits.iter().map(|s| s.n).sum();
                prop_assert_eq!(n, rep.n_items);
            }

            #[test]
            fn never_extracts_out_of_range(raw in ".{0,40}", n in 2usize..6) {
                if let Choice::Letter(c) = extract_choice(&raw, n) {
                    prop_assert!(((c as u8 - b'A') as usize) < n);
                }
            }
        }
    }
}
