use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::Subcommand;
use omnicap_core::cloze::{
    aggregate, evaluate_captions, export_benchmark, forge_item, item_seed, load_benchmark, render_cloze,
    ClozePassage, EvalReport, ForgeOutcome,
};
use omnicap_core::gateway::parallel_map;
use omnicap_core::jsonl::{read_jsonl, write_jsonl, RecordStore};
use omnicap_core::model::{CaptionRecord, Modality, RunKind, RunRecord};
use serde_json::json;

use crate::context::{load_config, write_json, Context};
use crate::{emit, CliError, GlobalArgs};

#[derive(Debug, Subcommand)]
pub enum ClozeCmd {
    /// Generate cloze passages from per-clip caption triples.
    Gen {
        /// Captions JSONL; each clip needs audio, visual and audio-visual captions.
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Check a passages JSONL file; exits 1 if any line is invalid.
    Validate {
        #[arg(long)]
        passages: PathBuf,
    },
    /// Print the lettered prompt text of each passage.
    Render {
        #[arg(long)]
        passages: PathBuf,
        /// Only this clip.
        #[arg(long)]
        media: Option<String>,
    },
    /// Write judge-visible items and answer keys to separate files.
    Export {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        keys: PathBuf,
    },
    /// Score captions against an exported benchmark.
    Eval {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        /// Judge backend id; defaults to the config's judge role.
        #[arg(long)]
        judge: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Report key for a group of captions: the model name for audio-visual
/// captions, `model@condition` otherwise.
pub fn group_key(c: &CaptionRecord) -> String {
    match c.modality_condition {
        Modality::AudioVisual => c.source_model.clone(),
        m => format!("{}@{}", c.source_model, m.as_str()),
    }
}

fn read_passages(path: &Path) -> Result<Vec<ClozePassage>, CliError> {
    Ok(read_jsonl(path)?)
}

pub fn run(g: &GlobalArgs, cmd: ClozeCmd, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        ClozeCmd::Gen { captions, out: copy, resume } => {
            let ctx = Context::open(g, "cloze-gen", resume.as_deref())?;
            let gw = ctx.gateway()?;
            let prompts = ctx.cfg.prompts()?;
            let backend = ctx.cfg.role("generator")?.to_string();
            let mut groups: BTreeMap<String, Vec<CaptionRecord>> = BTreeMap::new();
            for c in read_jsonl::<CaptionRecord>(&captions)? {
                groups.entry(c.media_id.clone()).or_default().push(c);
            }
            let store = RecordStore::open(ctx.path("records.jsonl"))?;
            let run_id = |id: &str| format!("cloze-gen:{id}");
            let pending: Vec<(&String, &Vec<CaptionRecord>)> =
                groups.iter().filter(|(id, _)| !store.contains(&run_id(id))).collect();
            let results = parallel_map(&pending, gw.parallelism(), |(_, caps)| {
                forge_item(&gw, &backend, &prompts, caps, &ctx.cfg.quota, &ctx.cfg.decode)
            });
            let mut first_err = None;
            for ((id, _), res) in pending.iter().zip(results) {
                match res {
                    Ok(o) => store.append(&RunRecord::new(run_id(id), RunKind::ClozeGen, &o).map_err(|e| CliError::Io(e.to_string()))?)?,
                    Err(e) => {
                        let _ = writeln!(out, "{id}: {e}");
                        first_err.get_or_insert(CliError::from(e));
                    }
                }
            }
            let mut outcomes: BTreeMap<String, ForgeOutcome> = BTreeMap::new();
            for r in store.read_all()? {
                if r.kind == RunKind::ClozeGen {
                    let o: ForgeOutcome = r.payload_as().map_err(|e| CliError::Io(e.to_string()))?;
                    outcomes.insert(o.media_id.clone(), o);
                }
            }
            let passages: Vec<ClozePassage> = outcomes.values().filter_map(|o| o.passage.clone()).collect();
            let failed: Vec<&ForgeOutcome> = outcomes.values().filter(|o| o.failed()).collect();
            let io = |e: std::io::Error| CliError::Io(e.to_string());
            write_jsonl(ctx.path("passages.jsonl"), &passages).map_err(io)?;
            write_jsonl(ctx.path("failures.jsonl"), &failed).map_err(io)?;
            if let Some(p) = copy {
                write_jsonl(&p, &passages).map_err(io)?;
            }
            let regenerated = outcomes.values().filter(|o| o.attempts > 1 && !o.failed()).count();
            emit(
                out,
                &format!(
                    "{} passages ({} after regeneration), {} failed\nrun: {}\n",
                    passages.len(),
                    regenerated,
                    failed.len(),
                    ctx.run_dir.display()
                ),
            )?;
            first_err.map_or(Ok(()), Err)
        }
        ClozeCmd::Validate { passages } => {
            let file = std::fs::File::open(&passages).map_err(|e| CliError::Validation(format!("{}: {e}", passages.display())))?;
            let (mut ok, mut bad) = (0usize, 0usize);
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| CliError::Io(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ClozePassage>(&line) {
                    Ok(p) => {
                        ok += 1;
                        emit(out, &format!("line {}: ok {} ({} blanks)\n", i + 1, p.media_id(), p.blanks().len()))?;
                    }
                    Err(e) => {
                        bad += 1;
                        emit(out, &format!("line {}: invalid: {e}\n", i + 1))?;
                    }
                }
            }
            emit(out, &format!("{ok} valid, {bad} invalid\n"))?;
            if bad > 0 {
                return Err(CliError::Validation(format!("{bad} invalid passage(s)")));
            }
            Ok(())
        }
        ClozeCmd::Render { passages, media } => {
            let (cfg, _) = load_config(g)?;
            for p in read_passages(&passages)? {
                if media.as_deref().is_some_and(|m| m != p.media_id()) {
                    continue;
                }
                let r = render_cloze(&p, item_seed(cfg.seed, p.media_id()));
                emit(out, &format!("## {}\n{}\n", p.media_id(), r.item.prompt_text()))?;
            }
            Ok(())
        }
        ClozeCmd::Export { passages, items, keys } => {
            let (cfg, hash) = load_config(g)?;
            let passages = read_passages(&passages)?;
            let summary = export_benchmark(&passages, cfg.seed, &items, &keys).map_err(|e| CliError::Io(e.to_string()))?;
            let mut v = serde_json::to_value(&summary).map_err(|e| CliError::Io(e.to_string()))?;
            v["config_hash"] = json!(hash);
            emit(out, &format!("{}\n", serde_json::to_string_pretty(&v).expect("value serializes")))
        }
        ClozeCmd::Eval { items, keys, captions, judge, out: copy } => {
            let ctx = Context::open(g, "cloze-eval", None)?;
            let gw = ctx.gateway()?;
            let prompts = ctx.cfg.prompts()?;
            let judge = match judge {
                Some(j) => j,
                None => ctx.cfg.role("judge")?.to_string(),
            };
            let bench: HashMap<_, _> =
                load_benchmark(&items, &keys)?.into_iter().map(|(i, k)| (i.media_id.clone(), (i, k))).collect();
            let mut groups: BTreeMap<String, Vec<CaptionRecord>> = BTreeMap::new();
            for c in read_jsonl::<CaptionRecord>(&captions)? {
                groups.entry(group_key(&c)).or_default().push(c);
            }
            if groups.is_empty() {
                return Err(CliError::Validation(format!("{}: no captions", captions.display())));
            }
            let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
            for (key, caps) in &groups {
                let scored = evaluate_captions(&gw, &judge, &prompts, &bench, caps)?;
                let mut report = aggregate(&scored)?;
                report.metadata.insert("config_hash".into(), ctx.config_hash.clone());
                report.metadata.insert("judge".into(), judge.clone());
                report.metadata.insert("captions".into(), key.clone());
                reports.insert(key.clone(), report);
            }
            write_json(&ctx.path("report.json"), &reports)?;
            if let Some(p) = copy {
                write_json(&p, &reports)?;
            }
            emit(out, &crate::report::render_eval_reports(&reports))
        }
    }
}
