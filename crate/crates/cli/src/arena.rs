use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use clap::Subcommand;
use omnicap_core::arena::{replay_matches, ArenaService, CaptionStore, CorrelationPair, CorrelationResult, MatchRecord};
use omnicap_core::cloze::{EvalReport, RowLabel};
use omnicap_core::jsonl::read_jsonl;
use omnicap_core::model::CaptionRecord;
use serde_json::{json, Value};

use crate::context::{read_json, write_json, Context};
use crate::{emit, CliError, GlobalArgs};

#[derive(Debug, Subcommand)]
pub enum ArenaCmd {
    /// Serve the judging API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        captions: PathBuf,
        /// JSON object mapping bearer tokens to annotator ids.
        #[arg(long)]
        annotators: PathBuf,
        /// Match log to append to (and resume from); defaults to the run directory.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Metric reports (`cloze eval` output) shown by /api/stats.
        #[arg(long)]
        reports: Option<PathBuf>,
        /// Static UI bundle served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
    /// Recompute ratings from a match log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Extra models that never played; they keep the initial rating.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate arena ratings with an automatic metric.
    Corr {
        /// JSON object model -> number, or model -> eval report (total accuracy is used).
        #[arg(long)]
        metric: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// The metric value of one model entry: a bare number, a cloze report
/// (total accuracy) or a cascade report (overall accuracy).
fn metric_value(v: &Value) -> Option<f64> {
    if let Some(x) = v.as_f64() {
        return Some(x);
    }
    if v.get("rows").is_some() {
        let r: EvalReport = serde_json::from_value(v.clone()).ok()?;
        return Some(r.row(RowLabel::Total).acc_pct);
    }
    v.get("overall_pct").and_then(Value::as_f64)
}

fn replay(log: &PathBuf, extra: &[String], cfg: &omnicap_core::arena::EloConfig) -> Result<(Vec<MatchRecord>, omnicap_core::arena::EloState), CliError> {
    let matches: Vec<MatchRecord> = read_jsonl(log)?;
    let mut models: BTreeSet<String> = extra.iter().cloned().collect();
    for m in &matches {
        models.insert(m.model_a.clone());
        models.insert(m.model_b.clone());
    }
    let models: Vec<String> = models.into_iter().collect();
    let state = replay_matches(&models, &matches, cfg)?;
    Ok((matches, state))
}

pub fn run(g: &GlobalArgs, cmd: ArenaCmd, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        ArenaCmd::Serve { port, host, captions, annotators, log, reports, static_dir } => {
            let ctx = Context::open(g, "arena-serve", None)?;
            let captions: Vec<CaptionRecord> = read_jsonl(&captions)?;
            let annotators: HashMap<String, String> = read_json(&annotators)?;
            let log = log.unwrap_or_else(|| ctx.path("matches.jsonl"));
            let svc = Arc::new(ArenaService::open(ctx.cfg.elo, CaptionStore::new(captions), annotators, Some(&log), ctx.cfg.seed)?);
            if let Some(p) = reports {
                let reports: BTreeMap<String, EvalReport> = read_json(&p)?;
                for (model, r) in reports {
                    svc.set_report(model, r);
                }
            }
            let router = match &static_dir {
                Some(dir) => omnicap_arena_server::router_with_static(svc, dir),
                None => omnicap_arena_server::router(svc),
            };
            let addr = SocketAddr::new(host, port);
            emit(out, &format!("serving on http://{addr}/api/\nmatch log: {}\n", log.display()))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
            rt.block_on(omnicap_arena_server::serve(router, addr)).map_err(|e| CliError::Io(e.to_string()))
        }
        ArenaCmd::Replay { log, models, out: copy } => {
            let ctx = Context::open(g, "arena-replay", None)?;
            let (matches, state) = replay(&log, &models, &ctx.cfg.elo)?;
            let mut played: HashMap<&str, usize> = HashMap::new();
            for m in &matches {
                *played.entry(&m.model_a).or_default() += 1;
                *played.entry(&m.model_b).or_default() += 1;
            }
            let mut text = format!("{:<6}{:<24}{:>12}{:>9}\n", "rank", "model", "rating", "matches");
            for (i, (model, rating)) in state.leaderboard().iter().enumerate() {
                let n = played.get(model.as_str()).copied().unwrap_or(0);
                text.push_str(&format!("{:<6}{:<24}{:>12.4}{:>9}\n", i + 1, model, rating, n));
            }
            text.push_str(&format!("matches applied: {}\n", state.matches_applied));
            let doc = json!({ "config_hash": ctx.config_hash, "matches_applied": state.matches_applied, "ratings": state.ratings });
            write_json(&ctx.path("ratings.json"), &doc)?;
            if let Some(p) = copy {
                write_json(&p, &doc)?;
            }
            emit(out, &text)
        }
        ArenaCmd::Corr { metric, log, out: copy } => {
            let ctx = Context::open(g, "arena-corr", None)?;
            let (_, state) = replay(&log, &[], &ctx.cfg.elo)?;
            let doc: Value = read_json(&metric)?;
            let obj = doc.get("reports").unwrap_or(&doc).as_object().ok_or_else(|| {
                CliError::Validation(format!("{}: expected a JSON object keyed by model", metric.display()))
            })?;
            let mut pairs = Vec::new();
            for (model, v) in obj {
                let Some(value) = metric_value(v) else { continue };
                if let Some(elo) = state.rating(model) {
                    pairs.push(CorrelationPair { model: model.clone(), elo, metric: value });
                }
            }
            let result = CorrelationResult::from_pairs(pairs)?;
            let mut text = format!("{:<24}{:>12}{:>10}\n", "model", "elo", "metric");
            for p in &result.pairs {
                text.push_str(&format!("{:<24}{:>12.2}{:>10.2}\n", p.model, p.elo, p.metric));
            }
            text.push_str(&format!("pearson r = {:.4} over {} models\n", result.r, result.pairs.len()));
            let doc = json!({ "config_hash": ctx.config_hash, "correlation": result });
            write_json(&ctx.path("correlation.json"), &doc)?;
            if let Some(p) = copy {
                write_json(&p, &doc)?;
            }
            emit(out, &text)
        }
    }
}
