use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use omnicap_core::cascade::{render_cascade_table, CascadeReport};
use omnicap_core::cloze::{render_report_table, EvalReport};
use omnicap_core::detective::SweepPoint;
use serde_json::Value;

use crate::context::{read_json, RunManifest};
use crate::{emit, CliError};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// A report JSON written by another command, or a run directory.
    pub path: PathBuf,
}

pub fn render_eval_reports(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut out = String::new();
    for (key, r) in reports {
        out.push_str(&format!("== {key}\n"));
        out.push_str(&render_report_table(r));
    }
    out
}

pub fn render_cascade_reports(reports: &BTreeMap<String, CascadeReport>) -> String {
    let mut out = String::new();
    for (key, r) in reports {
        out.push_str(&format!("== {key}\n"));
        out.push_str(&render_cascade_table(r));
    }
    out
}

pub fn render_sweep(points: &[SweepPoint]) -> String {
    let mut out = format!("{:>6}{:>10}{:>10}{:>10}{:>9}{:>8}\n", "budget", "detail", "NG", "hall", "blanks", "turns");
    for p in points {
        out.push_str(&format!(
            "{:>6}{:>10.1}{:>10.1}{:>10.1}{:>9}{:>8.2}\n",
            p.budget, p.detail_rate, p.not_given_rate, p.hallucination_rate, p.n_blanks, p.mean_turns
        ));
    }
    out
}

/// Picks a renderer from the document's shape.
fn render_file(path: &Path) -> Result<String, CliError> {
    let doc: Value = read_json(path)?;
    let bad = |e: serde_json::Error| CliError::Validation(format!("{}: {e}", path.display()));
    if let Some(sweep) = doc.get("sweep") {
        let points: Vec<SweepPoint> = serde_json::from_value(sweep.clone()).map_err(bad)?;
        return Ok(render_sweep(&points));
    }
    if let Some(reports) = doc.get("reports") {
        let reports: BTreeMap<String, CascadeReport> = serde_json::from_value(reports.clone()).map_err(bad)?;
        return Ok(render_cascade_reports(&reports));
    }
    if let Some(corr) = doc.get("correlation") {
        return Ok(format!("pearson r = {:.4}\n", corr["r"].as_f64().unwrap_or(f64::NAN)));
    }
    if let Some(ratings) = doc.get("ratings").and_then(Value::as_object) {
        let mut rows: Vec<(&String, f64)> = ratings.iter().map(|(m, r)| (m, r.as_f64().unwrap_or(f64::NAN))).collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        return Ok(rows.iter().map(|(m, r)| format!("{m:<24}{r:>12.4}\n")).collect());
    }
    let reports: BTreeMap<String, EvalReport> = serde_json::from_value(doc).map_err(bad)?;
    Ok(render_eval_reports(&reports))
}

const KNOWN: [&str; 5] = ["report.json", "cascade.json", "sweep.json", "ratings.json", "correlation.json"];

pub fn run(args: ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !args.path.is_dir() {
        return emit(out, &render_file(&args.path)?);
    }
    let manifest: RunManifest = read_json(&args.path.join("run.json"))?;
    emit(
        out,
        &format!("run: {}\ncommand: {}\nconfig_hash: {}\ncreated: {}\n", args.path.display(), manifest.command, manifest.config_hash, manifest.created_at),
    )?;
    for name in KNOWN {
        let p = args.path.join(name);
        if p.exists() {
            emit(out, &format!("\n[{name}]\n{}", render_file(&p)?))?;
        }
    }
    Ok(())
}
