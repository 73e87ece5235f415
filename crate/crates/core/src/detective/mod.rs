//! The investigation loop: a detective model questions observer tools
//! under a fixed inquiry budget, then writes the final caption.

mod policy;
mod sweep;

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::gateway::{parallel_map, ChatMessage, ChatRequest, DecodeParams, Gateway, GatewayError, ToolBox};
use crate::json_extract;
use crate::model::MediaRef;
use crate::prompt::{PromptSet, TemplateError, DETECTIVE_SYSTEM, DETECTIVE_TURN, OBSERVER_SYSTEM, OBSERVER_TURN};

pub use policy::{FactGreedyDetective, NO_EVIDENCE_CAPTION};
pub use sweep::{step_sweep_analysis, world_benchmark, SweepError, SweepPoint};

/// Default inquiry budget.
pub const DEFAULT_MAX_CALLS: u32 = 10;

/// Observation shown on the first turn, before any tool was asked.
pub const INITIAL_OBSERVATION: &str = "No observations yet. Begin your investigation.";
/// Observation sent when the detective asks again with no inquiries left.
pub const EXHAUSTED_OBSERVATION: &str =
    "You have no inquiries remaining. Stop asking questions and produce your final description now.";
/// Observation sent after a reply that looked like a directive but was not valid JSON.
pub const MALFORMED_OBSERVATION: &str = "Your last reply was not valid JSON. Reply with exactly one JSON object with the keys \"tool\" and \"question\", or give your final description.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvestigationBudget {
    pub max_calls: u32,
    pub calls_used: u32,
}

impl Default for InvestigationBudget {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_CALLS)
    }
}

impl InvestigationBudget {
    pub fn new(max_calls: u32) -> Self {
        Self { max_calls, calls_used: 0 }
    }

    pub fn remaining(&self) -> u32 {
        self.max_calls - self.calls_used
    }

    fn spend(&mut self) {
        assert!(self.calls_used < self.max_calls, "inquiry budget overrun");
        self.calls_used += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnDirective {
    pub tool: String,
    pub question: String,
}

/// What one detective reply amounts to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectiveReply {
    Directive(TurnDirective),
    /// No directive: the text is the candidate final caption.
    Final(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DirectiveError {
    #[error("empty detective reply")]
    EmptyResponse,
    #[error("detective asked for unknown tool `{0}`")]
    UnknownTool(String),
    #[error("reply looks like a directive but is not valid JSON")]
    Malformed,
}

fn directive_hint() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"\{\s*"(tool|question)"\s*:"#).expect("valid regex"))
}

/// Classifies a detective reply. A JSON object with `tool` and `question`
/// (fenced or inside prose) is a directive; anything without one is final.
pub fn parse_turn_directive(raw: &str, toolbox: &ToolBox) -> Result<DetectiveReply, DirectiveError> {
    if raw.trim().is_empty() {
        return Err(DirectiveError::EmptyResponse);
    }
    for span in json_extract::object_spans(raw) {
        let Some(obj) = json_extract::parse_object(span) else { continue };
        let (Some(tool), Some(question)) = (obj.get("tool"), obj.get("question")) else { continue };
        let (Some(tool), Some(question)) = (tool.as_str(), question.as_str()) else {
            return Err(DirectiveError::Malformed);
        };
        let (tool, question) = (tool.trim(), question.trim());
        if question.is_empty() {
            return Err(DirectiveError::Malformed);
        }
        if !toolbox.contains(tool) {
            return Err(DirectiveError::UnknownTool(tool.to_string()));
        }
        return Ok(DetectiveReply::Directive(TurnDirective { tool: tool.to_string(), question: question.to_string() }));
    }
    if directive_hint().is_match(raw) {
        return Err(DirectiveError::Malformed);
    }
    Ok(DetectiveReply::Final(raw.trim().to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub directive: TurnDirective,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestigationRecord {
    pub media: MediaRef,
    pub turns: Vec<Turn>,
    pub final_caption: String,
    pub stopped_early: bool,
    pub budget: InvestigationBudget,
    /// Every raw detective reply in order, for replay.
    pub detective_replies: Vec<String>,
    /// The detective asked again at zero budget and had to be told to stop.
    #[serde(default)]
    pub forced_final: bool,
    /// Malformed replies that were answered with a format reminder.
    #[serde(default)]
    pub nudges: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvestigationError {
    #[error("detective kept asking after the budget was exhausted")]
    BudgetExhaustedWithoutFinal,
    #[error(transparent)]
    Directive(#[from] DirectiveError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Routing and prompts for an investigation.
#[derive(Clone)]
pub struct Investigator<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub toolbox: &'a ToolBox,
    pub detective_backend: &'a str,
    pub decode: DecodeParams,
}

impl<'a> Investigator<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptSet, toolbox: &'a ToolBox, detective_backend: &'a str) -> Self {
        Self { gateway, prompts, toolbox, detective_backend, decode: DecodeParams::default() }
    }

    pub fn system_prompt(&self, max_calls: u32) -> Result<String, TemplateError> {
        self.prompts
            .require(DETECTIVE_SYSTEM)
            .fill(&[("max_calls", &max_calls.to_string()), ("tool_list", &self.toolbox.display_list())])
    }

    fn turn_prompt(&self, observation: &str, calls_left: u32) -> Result<String, TemplateError> {
        self.prompts
            .require(DETECTIVE_TURN)
            .fill(&[("observation", observation), ("calls_left", &calls_left.to_string())])
    }

    fn observe(&self, media: &MediaRef, d: &TurnDirective) -> Result<String, InvestigationError> {
        let backend = self.toolbox.backend_for(&d.tool).ok_or_else(|| DirectiveError::UnknownTool(d.tool.clone()))?;
        let question = self.prompts.require(OBSERVER_TURN).fill(&[("question", &d.question)])?;
        let req = ChatRequest::new(
            backend,
            self.prompts.require(OBSERVER_SYSTEM).text(),
            vec![ChatMessage::user(question).with_media(media.clone())],
        )
        .with_decode(self.decode.clone())
        .with_meta("media_id", media.id.clone())
        .with_meta("tool", d.tool.clone());
        Ok(self.gateway.complete(req)?.response_text)
    }

    /// Runs one investigation. `max_calls` may be 0, which asks for a
    /// caption without any evidence.
    pub fn run(&self, media: &MediaRef, max_calls: u32) -> Result<InvestigationRecord, InvestigationError> {
        let system = self.system_prompt(max_calls)?;
        let mut budget = InvestigationBudget::new(max_calls);
        let mut messages = vec![ChatMessage::user(self.turn_prompt(INITIAL_OBSERVATION, budget.remaining())?)];
        let mut record = InvestigationRecord {
            media: media.clone(),
            turns: Vec::new(),
            final_caption: String::new(),
            stopped_early: false,
            budget,
            detective_replies: Vec::new(),
            forced_final: false,
            nudges: 0,
        };
        let mut nudged_this_turn = false;
        loop {
            let req = ChatRequest::new(self.detective_backend, system.clone(), messages.clone())
                .with_decode(self.decode.clone())
                .with_meta("media_id", media.id.clone());
            let reply = self.gateway.complete(req)?.response_text;
            record.detective_replies.push(reply.clone());
            let parsed = match parse_turn_directive(&reply, self.toolbox) {
                Err(DirectiveError::Malformed) if !nudged_this_turn => {
                    nudged_this_turn = true;
                    record.nudges += 1;
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(self.turn_prompt(MALFORMED_OBSERVATION, budget.remaining())?));
                    continue;
                }
                Err(DirectiveError::Malformed) => DetectiveReply::Final(reply.trim().to_string()),
                other => other?,
            };
            nudged_this_turn = false;
            match parsed {
                DetectiveReply::Final(text) => {
                    record.final_caption = text;
                    break;
                }
                DetectiveReply::Directive(_) if budget.remaining() == 0 => {
                    if record.forced_final {
                        return Err(InvestigationError::BudgetExhaustedWithoutFinal);
                    }
                    record.forced_final = true;
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(self.turn_prompt(EXHAUSTED_OBSERVATION, 0)?));
                }
                DetectiveReply::Directive(d) => {
                    let observation = self.observe(media, &d)?;
                    budget.spend();
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(self.turn_prompt(&observation, budget.remaining())?));
                    record.turns.push(Turn { directive: d, observation });
                }
            }
        }
        record.budget = budget;
        record.stopped_early = budget.calls_used < budget.max_calls;
        Ok(record)
    }

    /// Investigates every clip, concurrently up to the gateway's bound.
    /// Results are in input order.
    pub fn run_all(&self, media: &[MediaRef], max_calls: u32) -> Vec<Result<InvestigationRecord, InvestigationError>> {
        parallel_map(media, self.gateway.parallelism(), |m| self.run(m, max_calls))
    }
}

/// Single-call convenience over [`Investigator::run`].
pub fn run_investigation(
    gateway: &Gateway,
    prompts: &PromptSet,
    media: &MediaRef,
    toolbox: &ToolBox,
    max_calls: u32,
    detective_backend: &str,
) -> Result<InvestigationRecord, InvestigationError> {
    Investigator::new(gateway, prompts, toolbox, detective_backend).run(media, max_calls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FnBackend, ObserverBackend, ScriptedBackend};
    use crate::model::Channel;
    use crate::synth::{generate_world, world_media, WorldSpec, AUDIO_TOOL, VISUAL_TOOL};

    fn tb() -> ToolBox {
        ToolBox::new([("asr", "asr-obs"), ("mllm", "mllm-obs")]).unwrap()
    }

    fn clip() -> MediaRef {
        MediaRef::new("clip1", "file:///clip1.wav", &[Channel::Audio], 12.0)
    }

    fn directive(tool: &str, q: &str) -> String {
        serde_json::json!({ "tool": tool, "question": q }).to_string()
    }

    fn echo_observer() -> FnBackend<impl Fn(&ChatRequest) -> Result<String, crate::gateway::BackendError>> {
        FnBackend::new(|r: &ChatRequest| Ok(format!("heard: {}", r.last_user().unwrap().content)))
    }

    fn gateway(script: Vec<String>) -> Gateway {
        Gateway::new()
            .with_backend("det", ScriptedBackend::new(script))
            .with_backend("asr-obs", echo_observer())
            .with_backend("mllm-obs", echo_observer())
    }

    #[test]
    fn parse_forms() {
        let t = tb();
        let d = parse_turn_directive(r#"{"tool":"asr","question":"What words are spoken?"}"#, &t).unwrap();
        assert_eq!(d, DetectiveReply::Directive(TurnDirective { tool: "asr".into(), question: "What words are spoken?".into() }));
        let fenced = "Next I will ask.\n```json\n{\n  \"tool\": \"mllm\",\n  \"question\": \"Describe the music.\"\n}\n```";
        assert!(matches!(parse_turn_directive(fenced, &t).unwrap(), DetectiveReply::Directive(d) if d.tool == "mllm"));
        assert_eq!(parse_turn_directive("  ", &t), Err(DirectiveError::EmptyResponse));
        assert_eq!(
            parse_turn_directive(r#"{"tool":"ocr","question":"x"}"#, &t),
            Err(DirectiveError::UnknownTool("ocr".into()))
        );
        assert_eq!(parse_turn_directive(r#"{"tool": "asr", "question": "unterminated"#, &t), Err(DirectiveError::Malformed));
        assert!(matches!(parse_turn_directive("A quiet room {with hum}.", &t).unwrap(), DetectiveReply::Final(_)));
    }

    #[test]
    fn prose_finals_are_never_directives() {
        let corpus = include_str!("../../tests/fixtures/detective_finals.txt");
        let finals: Vec<&str> = corpus.split("\n---\n").map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(finals.len(), 20);
        for f in finals {
            assert_eq!(parse_turn_directive(f, &tb()).unwrap(), DetectiveReply::Final(f.to_string()));
        }
    }

    #[test]
    fn three_directives_then_final() {
        let gw = gateway(vec![
            directive("asr", "What language is being spoken?"),
            directive("mllm", "Describe the background music."),
            directive("asr", "Any other sounds?"),
            "A man speaks English over soft piano.".into(),
        ]);
        let rec = run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap();
        assert_eq!(rec.turns.len(), 3);
        assert!(rec.stopped_early);
        assert_eq!(rec.budget.calls_used, 3);
        assert_eq!(rec.final_caption, "A man speaks English over soft piano.");
        assert_eq!(rec.turns[0].observation, "heard: Question: What language is being spoken?");

        let ex = gw.exchanges();
        let first = &ex[0].request;
        assert!(first.system.contains("You have a total of 10 inquiries."));
        assert!(first.system.contains("You have specific analysis tools from [asr, mllm]."));
        assert_eq!(
            first.messages[0].content,
            format!("Observation: {INITIAL_OBSERVATION}\n\nInquiries remaining: 10\n\nTool and Question:")
        );
        // observer call carries the media and the observer prompt
        let obs = &ex[1].request;
        assert_eq!(obs.backend_id, "asr-obs");
        assert_eq!(obs.media().unwrap().id, "clip1");
        assert!(obs.system.starts_with("You are a hyper-perceptive audio analysis system."));
        let last = ex.last().unwrap().request.messages.last().unwrap();
        assert!(last.content.ends_with("Inquiries remaining: 7\n\nTool and Question:"));
    }

    #[test]
    fn budget_cap_then_forced_synthesis() {
        let mut script: Vec<String> = (0..11).map(|i| directive("asr", &format!("q{i}"))).collect();
        script.push("Final description.".into());
        let gw = gateway(script);
        let rec = run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap();
        assert_eq!(rec.turns.len(), 10);
        assert!(!rec.stopped_early && rec.forced_final);
        assert_eq!(gw.exchange_count("asr-obs"), 10);
        let reprompt = gw.exchanges().last().unwrap().request.messages.last().unwrap().content.clone();
        assert!(reprompt.contains(EXHAUSTED_OBSERVATION) && reprompt.contains("Inquiries remaining: 0"));

        let gw = gateway((0..20).map(|i| directive("asr", &format!("q{i}"))).collect());
        let err = run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap_err();
        assert_eq!(err, InvestigationError::BudgetExhaustedWithoutFinal);
        assert_eq!(gw.exchange_count("asr-obs"), 10);
    }

    #[test]
    fn malformed_turn_is_retried_once() {
        let gw = gateway(vec![r#"{"tool": "asr", "question": "broken"#.into(), directive("asr", "ok?"), "Done.".into()]);
        let rec = run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap();
        assert_eq!((rec.nudges, rec.turns.len()), (1, 1));

        let bad = r#"{"tool": "asr", "question": "broken"#;
        let gw = gateway(vec![bad.into(), bad.into()]);
        let rec = run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap();
        assert_eq!(rec.final_caption, bad);
        assert!(rec.turns.is_empty());
    }

    #[test]
    fn unknown_tool_and_backend_failure_propagate() {
        let gw = gateway(vec![directive("ocr", "read the sign")]);
        assert_eq!(
            run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap_err(),
            InvestigationError::Directive(DirectiveError::UnknownTool("ocr".into()))
        );
        let gw = gateway(vec![]);
        assert!(matches!(
            run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), 10, "det").unwrap_err(),
            InvestigationError::Gateway(GatewayError::BackendFailure { .. })
        ));
    }

    fn world_gateway(world: &crate::gateway::SyntheticWorld) -> (Gateway, ToolBox) {
        let gw = Gateway::new()
            .with_backend("det", FactGreedyDetective::new([world.clone()]))
            .with_backend("asr-obs", ObserverBackend::new(AUDIO_TOOL, [world.clone()]))
            .with_backend("vision-obs", ObserverBackend::new(VISUAL_TOOL, [world.clone()]));
        let tb = ToolBox::new([(AUDIO_TOOL, "asr-obs"), (VISUAL_TOOL, "vision-obs")]).unwrap();
        (gw, tb)
    }

    #[test]
    fn greedy_policy_covers_twelve_facts() {
        let spec = WorldSpec { audio_facts: 4, visual_facts: 4, av_facts: 4, max_topic: 1 };
        let world = generate_world("w12", 5, &spec);
        let (gw, tb) = world_gateway(&world);
        let rec = run_investigation(&gw, &PromptSet::builtin(), &world_media(&world), &tb, 12, "det").unwrap();
        assert_eq!(rec.turns.len(), 12);
        for f in &world.facts {
            assert!(rec.final_caption.contains(&f.statement), "missing {}", f.statement);
        }
        // every sentence of the caption came from some observation
        for sentence in rec.final_caption.split_inclusive(". ") {
            assert!(rec.turns.iter().any(|t| t.observation.contains(sentence.trim())));
        }
    }

    #[test]
    fn replay_reproduces_record() {
        let world = generate_world("wr", 9, &WorldSpec::default());
        let (gw, tb) = world_gateway(&world);
        let rec = run_investigation(&gw, &PromptSet::builtin(), &world_media(&world), &tb, 6, "det").unwrap();

        let per_tool = |tool: &str| -> Vec<String> {
            rec.turns.iter().filter(|t| t.directive.tool == tool).map(|t| t.observation.clone()).collect()
        };
        let replay = Gateway::new()
            .with_backend("det", ScriptedBackend::new(rec.detective_replies.clone()))
            .with_backend("asr-obs", ScriptedBackend::new(per_tool(AUDIO_TOOL)))
            .with_backend("vision-obs", ScriptedBackend::new(per_tool(VISUAL_TOOL)));
        let again = run_investigation(&replay, &PromptSet::builtin(), &world_media(&world), &tb, 6, "det").unwrap();
        assert_eq!(again, rec);
        let reqs = |g: &Gateway| g.exchanges().into_iter().map(|e| e.request).collect::<Vec<_>>();
        assert_eq!(reqs(&replay), reqs(&gw));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn budget_is_never_exceeded(max_calls in 1u32..12, directives in 0usize..16, final_after in any::<bool>()) {
                let mut script: Vec<String> = (0..directives).map(|i| directive("asr", &format!("q{i}"))).collect();
                if final_after { script.push("Final.".into()); }
                let gw = gateway(script);
                match run_investigation(&gw, &PromptSet::builtin(), &clip(), &tb(), max_calls, "det") {
                    Ok(rec) => {
                        prop_assert!(rec.turns.len() as u32 <= max_calls);
                        prop_assert_eq!(rec.turns.len() as u32, rec.budget.calls_used);
                        prop_assert_eq!(rec.stopped_early, rec.budget.calls_used < max_calls);
                    }
                    Err(_) => {}
                }
                prop_assert!(gw.exchange_count("asr-obs") as u32 <= max_calls);
            }
        }
    }
}
