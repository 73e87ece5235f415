use std::io::Write;
use std::path::PathBuf;

use clap::Subcommand;
use omnicap_core::detective::{step_sweep_analysis, world_benchmark, InvestigationRecord, Investigator};
use omnicap_core::gateway::{ToolBox, ToolEntry};
use omnicap_core::jsonl::{load_media_manifest, write_jsonl, write_media_manifest, RecordStore};
use omnicap_core::synth::{generate_worlds, world_captions, world_media, WorldSpec};
use omnicap_core::model::{CaptionRecord, Modality, RunKind, RunRecord};
use serde_json::json;

use crate::context::{load_config, read_json, write_json, Context};
use crate::{emit, CliError, GlobalArgs};

#[derive(Debug, Subcommand)]
pub enum DetectiveCmd {
    /// Investigate every clip of a media manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON list of `{name, backend}`; defaults to the config's toolbox.
        #[arg(long)]
        toolbox: Option<PathBuf>,
        #[arg(long)]
        max_calls: Option<u32>,
        /// Copy of the investigation records as JSONL.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run; completed clips are skipped.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Budget sweep over the configured synthetic worlds.
    Sweep {
        /// Comma-separated budgets; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<u32>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic worlds for offline runs.
    Worlds {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write each world's reference audio, visual and audio-visual captions.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Also write a media manifest of the worlds.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

pub fn run(g: &GlobalArgs, cmd: DetectiveCmd, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        DetectiveCmd::Run { manifest, toolbox, max_calls, out: copy, resume } => {
            let ctx = Context::open(g, "detective-run", resume.as_deref())?;
            let gw = ctx.gateway()?;
            let prompts = ctx.cfg.prompts()?;
            let toolbox = match toolbox {
                Some(p) => ToolBox::try_from(read_json::<Vec<ToolEntry>>(&p)?)?,
                None => ctx.cfg.toolbox()?,
            };
            toolbox.validate(&gw)?;
            let backend = ctx.cfg.role("detective")?.to_string();
            let max_calls = max_calls.unwrap_or(ctx.cfg.detective.max_calls);
            let media = load_media_manifest(&manifest)?;

            let store = RecordStore::open(ctx.path("records.jsonl"))?;
            let run_id = |id: &str| format!("investigation:{id}:{max_calls}");
            let pending: Vec<_> = media.iter().filter(|m| !store.contains(&run_id(&m.id))).cloned().collect();
            let mut inv = Investigator::new(&gw, &prompts, &toolbox, &backend);
            inv.decode = ctx.cfg.decode.clone();
            let mut first_err = None;
            for (m, res) in pending.iter().zip(inv.run_all(&pending, max_calls)) {
                match res {
                    Ok(rec) => store.append(
                        &RunRecord::new(run_id(&m.id), RunKind::Investigation, &rec).map_err(|e| CliError::Io(e.to_string()))?,
                    )?,
                    Err(e) => {
                        let _ = writeln!(out, "{}: {e}", m.id);
                        first_err.get_or_insert(CliError::from(e));
                    }
                }
            }

            let mut by_id = std::collections::HashMap::new();
            for r in store.read_all()? {
                if r.kind == RunKind::Investigation {
                    let rec: InvestigationRecord = r.payload_as().map_err(|e| CliError::Io(e.to_string()))?;
                    by_id.insert(r.run_id, rec);
                }
            }
            let records: Vec<InvestigationRecord> = media.iter().filter_map(|m| by_id.remove(&run_id(&m.id))).collect();
            let captions: Vec<CaptionRecord> = records
                .iter()
                .map(|r| CaptionRecord::new(&r.media.id, &backend, Modality::AudioVisual, &r.final_caption))
                .collect();
            let io = |e: std::io::Error| CliError::Io(e.to_string());
            write_jsonl(ctx.path("investigations.jsonl"), &records).map_err(io)?;
            write_jsonl(ctx.path("captions.jsonl"), &captions).map_err(io)?;
            if let Some(p) = copy {
                write_jsonl(&p, &records).map_err(io)?;
            }
            let turns: usize = records.iter().map(|r| r.turns.len()).sum();
            emit(
                out,
                &format!(
                    "{} of {} clips captioned, {} tool calls, {} skipped as already done\nrun: {}\n",
                    records.len(),
                    media.len(),
                    turns,
                    media.len() - pending.len(),
                    ctx.run_dir.display()
                ),
            )?;
            first_err.map_or(Ok(()), Err)
        }
        DetectiveCmd::Worlds { n, out: path, captions, manifest } => {
            let (cfg, _) = load_config(g)?;
            let worlds = generate_worlds(n, cfg.seed, &WorldSpec::default());
            let io = |e: std::io::Error| CliError::Io(e.to_string());
            write_jsonl(&path, &worlds).map_err(io)?;
            if let Some(p) = captions {
                let caps: Vec<CaptionRecord> = worlds.iter().flat_map(|w| world_captions(w, "reference")).collect();
                write_jsonl(&p, &caps).map_err(io)?;
            }
            if let Some(p) = manifest {
                write_media_manifest(&p, &worlds.iter().map(world_media).collect::<Vec<_>>()).map_err(io)?;
            }
            emit(out, &format!("{} worlds written to {}\n", worlds.len(), path.display()))
        }
        DetectiveCmd::Sweep { budgets, out: copy } => {
            let ctx = Context::open(g, "detective-sweep", None)?;
            let gw = ctx.gateway()?;
            let prompts = ctx.cfg.prompts()?;
            let toolbox = ctx.cfg.toolbox()?;
            toolbox.validate(&gw)?;
            let worlds = ctx.cfg.worlds()?;
            if worlds.is_empty() {
                return Err(CliError::Config("the sweep needs `paths.worlds`".into()));
            }
            let budgets = budgets.unwrap_or_else(|| ctx.cfg.detective.budgets.clone());
            let items = world_benchmark(&gw, ctx.cfg.role("generator")?, &prompts, &worlds, &ctx.cfg.quota, ctx.cfg.seed)?;
            let detective = ctx.cfg.role("detective")?.to_string();
            let mut inv = Investigator::new(&gw, &prompts, &toolbox, &detective);
            inv.decode = ctx.cfg.decode.clone();
            let points = step_sweep_analysis(&inv, ctx.cfg.role("judge")?, &worlds, &items, &budgets)?;
            let doc = json!({ "config_hash": ctx.config_hash, "worlds": worlds.len(), "sweep": points });
            write_json(&ctx.path("sweep.json"), &doc)?;
            if let Some(p) = copy {
                write_json(&p, &doc)?;
            }
            emit(out, &crate::report::render_sweep(&points))
        }
    }
}
