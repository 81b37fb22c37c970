//! File formats.
//!
//! Traces are CSV with the header `run_id,epoch,validation_error`, one row per
//! (run, epoch). Epochs start at 1 and each run's rows must form a gap-free
//! prefix; rows may appear in any order. A value of `NaN` marks an invalid
//! observation. The canonical form sorts rows by run id then epoch and prints
//! values in Rust's shortest round-trip notation.
//!
//! The manifest is a JSON sidecar:
//! `{"horizon_T": 50, "runs": [{"id": "run-000", "config": {...}}]}`
//! where `config` is optional free-form metadata.
//!
//! Reports are JSON documents ([`ReportDocument`]) or fixed-width text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::inference::{Epoch, InferenceConfig, RunId};
use crate::race::{FailRecord, RaceReport, SweepCell, Traces};

pub const TRACE_HEADER: [&str; 3] = ["run_id", "epoch", "validation_error"];

/// Parsed trace rows: every run's observed prefix.
pub type TraceRows = BTreeMap<RunId, Vec<f64>>;

pub fn parse_trace(text: &str) -> Result<TraceRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut by_run: BTreeMap<RunId, BTreeMap<Epoch, (f64, u64)>> = BTreeMap::new();
    let mut saw_header = false;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::format(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if !saw_header {
            if record.iter().ne(TRACE_HEADER.iter().copied()) {
                return Err(Error::format(
                    line,
                    format!("expected header {:?}", TRACE_HEADER.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if record.len() != 3 {
            return Err(Error::format(line, format!("expected 3 fields, got {}", record.len())));
        }
        let run = &record[0];
        if run.is_empty() {
            return Err(Error::format(line, "empty run_id"));
        }
        let epoch: Epoch = record[1]
            .parse()
            .map_err(|_| Error::format(line, format!("invalid epoch {:?}", &record[1])))?;
        if epoch == 0 {
            return Err(Error::format(line, "epochs start at 1"));
        }
        let value: f64 = record[2]
            .parse()
            .map_err(|_| Error::format(line, format!("invalid validation_error {:?}", &record[2])))?;
        if value.is_infinite() || value < 0.0 {
            return Err(Error::format(
                line,
                format!("validation_error must be >= 0 and finite, or NaN; got {value}"),
            ));
        }
        let rows = by_run.entry(RunId::new(run)).or_default();
        if let Some(&(_, first)) = rows.get(&epoch) {
            return Err(Error::format(
                line,
                format!("duplicate epoch {epoch} for run {run} (first at line {first})"),
            ));
        }
        rows.insert(epoch, (value, line));
    }
    if !saw_header {
        return Err(Error::format(1, "missing header"));
    }
    by_run
        .into_iter()
        .map(|(run, rows)| {
            let mut values = Vec::with_capacity(rows.len());
            for (expected, (epoch, (value, line))) in (1..).zip(rows) {
                if epoch != expected {
                    return Err(Error::format(
                        line,
                        format!("epoch gap for run {run}: expected {expected}, got {epoch}"),
                    ));
                }
                values.push(value);
            }
            Ok((run, values))
        })
        .collect()
}

pub fn emit_trace(rows: &TraceRows) -> String {
    let mut out = TRACE_HEADER.join(",");
    out.push('\n');
    for (run, values) in rows {
        for (i, v) in values.iter().enumerate() {
            writeln!(out, "{},{},{}", run, i + 1, v).expect("write to string");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDescriptor {
    pub id: RunId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "horizon_T")]
    pub horizon: Epoch,
    pub runs: Vec<RunDescriptor>,
}

impl Manifest {
    pub fn for_rows(horizon: Epoch, rows: &TraceRows) -> Self {
        Manifest {
            horizon,
            runs: rows
                .keys()
                .map(|id| RunDescriptor {
                    id: id.clone(),
                    config: None,
                })
                .collect(),
        }
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_str(text)?;
    if manifest.horizon == 0 {
        return Err(Error::domain("manifest horizon_T must be positive"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &manifest.runs {
        if !seen.insert(&r.id) {
            return Err(Error::domain(format!("manifest lists run {} twice", r.id)));
        }
    }
    Ok(manifest)
}

pub fn emit_manifest(manifest: &Manifest) -> String {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    s
}

/// Joins rows with a manifest. Every row's run must be listed; listed runs
/// without rows get empty sequences; no run may exceed the horizon.
pub fn assemble_traces(rows: TraceRows, manifest: &Manifest) -> Result<Traces> {
    let listed: BTreeMap<&RunId, ()> = manifest.runs.iter().map(|r| (&r.id, ())).collect();
    if let Some(extra) = rows.keys().find(|id| !listed.contains_key(id)) {
        return Err(Error::domain(format!("run {extra} has rows but is not in the manifest")));
    }
    let mut runs = rows;
    for r in &manifest.runs {
        runs.entry(r.id.clone()).or_default();
    }
    if let Some((id, v)) = runs.iter().find(|(_, v)| v.len() > manifest.horizon as usize) {
        return Err(Error::domain(format!(
            "run {id} has {} epochs, beyond horizon {}",
            v.len(),
            manifest.horizon
        )));
    }
    Ok(Traces::new(manifest.horizon, runs))
}

/// One (criterion, δ) entry of a report: one race report per testbed race.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub criterion: Criterion,
    pub delta: f64,
    pub guards_enabled: bool,
    pub mean_savings: f64,
    pub fail_count: usize,
    pub races: Vec<RaceReport>,
}

impl ReportEntry {
    pub fn from_cell(cell: SweepCell, guards_enabled: bool) -> Self {
        ReportEntry {
            criterion: cell.criterion,
            delta: cell.delta,
            guards_enabled,
            mean_savings: cell.mean_savings,
            fail_count: cell.fail_count,
            races: cell.reports,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub testbed: String,
    pub horizon: Epoch,
    pub master_seed: u64,
    pub warmup_epochs: Epoch,
    pub inference: InferenceConfig,
    pub entries: Vec<ReportEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Machine,
    Table,
}

pub fn emit_report(doc: &ReportDocument, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => {
            let mut s = serde_json::to_string_pretty(doc).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => render_table(doc),
    }
}

pub fn parse_report(text: &str) -> Result<ReportDocument> {
    Ok(serde_json::from_str(text)?)
}

/// Savings as a negative percentage with one decimal, e.g. `−72.1%`.
pub fn format_savings(savings: f64) -> String {
    let pct = format!("{:.1}", savings * 100.0);
    if pct == "0.0" || pct == "-0.0" {
        "0.0%".to_string()
    } else {
        format!("\u{2212}{pct}%")
    }
}

/// `FAIL by <best final> → <best surviving final>`, three decimals.
pub fn format_fail(fail: &FailRecord) -> String {
    let surviving = fail
        .surviving_best_final_error
        .map_or_else(|| "none".to_string(), |v| format!("{v:.3}"));
    format!("FAIL by {:.3} \u{2192} {surviving}", fail.best_final_error)
}

/// Table cell for a single race: savings, followed by the FAIL record if any.
pub fn format_cell(report: &RaceReport) -> String {
    match &report.fail {
        None => format_savings(report.savings),
        Some(f) => format!("{} {}", format_savings(report.savings), format_fail(f)),
    }
}

fn pad(s: &str, width: usize) -> String {
    let n = s.chars().count();
    format!("{s}{}", " ".repeat(width.saturating_sub(n)))
}

/// One block per δ and one row per (testbed, criterion). The `best` column
/// marks the criterion with the highest mean savings among those without
/// any FAIL.
fn render_table(doc: &ReportDocument) -> String {
    let mut deltas: Vec<f64> = Vec::new();
    for e in &doc.entries {
        if !deltas.iter().any(|d| d.to_bits() == e.delta.to_bits()) {
            deltas.push(e.delta);
        }
    }
    let header = ["testbed", "criterion", "savings", "FAIL", "best"];
    let mut out = String::new();
    for (bi, delta) in deltas.iter().enumerate() {
        let entries: Vec<&ReportEntry> = doc
            .entries
            .iter()
            .filter(|e| e.delta.to_bits() == delta.to_bits())
            .collect();
        let best = entries
            .iter()
            .filter(|e| e.fail_count == 0)
            .map(|e| e.mean_savings)
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        let rows: Vec<[String; 5]> = entries
            .iter()
            .map(|e| {
                let fail = match e.races.as_slice() {
                    [single] => single.fail.as_ref().map_or_else(|| "-".to_string(), format_fail),
                    races => format!("{}/{}", e.fail_count, races.len()),
                };
                let marker = if best == Some(e.mean_savings) && e.fail_count == 0 { "*" } else { "" };
                [
                    doc.testbed.clone(),
                    e.criterion.to_string(),
                    format_savings(e.mean_savings),
                    fail,
                    marker.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        if bi > 0 {
            out.push('\n');
        }
        let guards = entries.first().is_some_and(|e| e.guards_enabled);
        writeln!(out, "delta = {delta}{}", if guards { " (guards on)" } else { "" })
            .expect("write to string");
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| pad(c, w))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(out, "{}", line(&header.map(String::from))).expect("write to string");
        for row in &rows {
            writeln!(out, "{}", line(row)).expect("write to string");
        }
    }
    out
}

/// Plot-ready series: one CSV row per (criterion, δ).
pub fn emit_series(doc: &ReportDocument) -> String {
    let mut out = String::from("criterion,delta,mean_savings,fail_rate,races\n");
    for e in &doc.entries {
        let n = e.races.len();
        let rate = if n == 0 { 0.0 } else { e.fail_count as f64 / n as f64 };
        writeln!(out, "{},{},{},{},{}", e.criterion, e.delta, e.mean_savings, rate, n)
            .expect("write to string");
    }
    out
}
