use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use clap::Subcommand;
use omnicap_core::cascade::{run_cascade, CascadeReport, McqItem};
use omnicap_core::jsonl::read_jsonl;
use omnicap_core::model::CaptionRecord;

use crate::cloze::group_key;
use crate::context::{write_json, Context};
use crate::{emit, CliError, GlobalArgs};

#[derive(Debug, Subcommand)]
pub enum CascadeCmd {
    /// Answer multiple-choice questions from captions alone.
    Run {
        #[arg(long)]
        captions: PathBuf,
        /// MCQ JSONL: {item_id, media_id, question, options, gold, tags}.
        #[arg(long)]
        items: PathBuf,
        /// QA backend id; defaults to the config's qa role.
        #[arg(long)]
        qa: Option<String>,
        /// Prompt template id; defaults to the config's qa_template.
        #[arg(long)]
        template: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(g: &GlobalArgs, cmd: CascadeCmd, out: &mut dyn Write) -> Result<(), CliError> {
    let CascadeCmd::Run { captions, items, qa, template, out: copy } = cmd;
    let ctx = Context::open(g, "cascade-run", None)?;
    let gw = ctx.gateway()?;
    let prompts = ctx.cfg.prompts()?;
    let qa = match qa {
        Some(q) => q,
        None => ctx.cfg.role("qa")?.to_string(),
    };
    let template = template.unwrap_or_else(|| ctx.cfg.qa_template.clone());
    let items: Vec<McqItem> = read_jsonl(&items)?;
    for it in &items {
        it.validate()?;
    }
    let mut groups: BTreeMap<String, Vec<CaptionRecord>> = BTreeMap::new();
    for c in read_jsonl::<CaptionRecord>(&captions)? {
        groups.entry(group_key(&c)).or_default().push(c);
    }
    let mut reports: BTreeMap<String, CascadeReport> = BTreeMap::new();
    for (key, caps) in &groups {
        reports.insert(key.clone(), run_cascade(&gw, &prompts, &template, &qa, caps, &items, &ctx.cfg.decode)?);
    }
    let doc = serde_json::json!({ "config_hash": ctx.config_hash, "reports": reports });
    write_json(&ctx.path("cascade.json"), &doc)?;
    if let Some(p) = copy {
        write_json(&p, &doc)?;
    }
    emit(out, &crate::report::render_cascade_reports(&reports))
}
