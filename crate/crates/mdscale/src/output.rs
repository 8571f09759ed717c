//! On-disk formats. Phases and iterations are 1-based in every CSV file.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use mdscale_core::agents::AgentKind;
use mdscale_core::dqn::QPolicy;
use mdscale_core::harness::{summarize, summarize_phases, IterationRow, RunReport, SummaryRow};
use mdscale_core::lgbn::{LgbnModel, MetricSnapshot};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiRecord {
    pub rep: usize,
    pub phase: usize,
    pub iteration: usize,
    pub service: String,
    pub agent: AgentKind,
    pub phi_sigma: f64,
}

impl From<&IterationRow> for PhiRecord {
    fn from(r: &IterationRow) -> Self {
        PhiRecord {
            rep: r.rep,
            phase: r.phase + 1,
            iteration: r.iteration + 1,
            service: r.service.clone(),
            agent: r.agent,
            phi_sigma: r.phi_sigma,
        }
    }
}

impl From<PhiRecord> for IterationRow {
    fn from(r: PhiRecord) -> Self {
        IterationRow {
            rep: r.rep,
            phase: r.phase.saturating_sub(1),
            iteration: r.iteration.saturating_sub(1),
            service: r.service,
            agent: r.agent,
            phi_sigma: r.phi_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub rep: usize,
    pub tick: u64,
    pub from: String,
    pub to: String,
    pub estimated_gain: f64,
    pub realized_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub agent: AgentKind,
    pub service: String,
    pub phase: usize,
    pub iteration: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl From<&SummaryRow> for SummaryRecord {
    fn from(r: &SummaryRow) -> Self {
        SummaryRecord {
            agent: r.agent,
            service: r.service.clone(),
            phase: r.phase + 1,
            iteration: r.iteration + 1,
            n: r.n,
            mean: r.mean,
            std: r.std,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_jsonl(path: &Path, metrics: &[MetricSnapshot]) -> Result<()> {
    write_jsonl(path, metrics)
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<MetricSnapshot>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn write_metrics_csv(path: &Path, metrics: &[MetricSnapshot]) -> Result<()> {
    write_csv(path, metrics)
}

pub fn write_phi_csv(path: &Path, rows: &[IterationRow]) -> Result<()> {
    write_csv(path, rows.iter().map(PhiRecord::from))
}

pub fn read_phi_csv(path: &Path) -> Result<Vec<IterationRow>> {
    let recs: Vec<PhiRecord> = read_csv(path)?;
    Ok(recs.into_iter().map(IterationRow::from).collect())
}

pub fn write_swaps_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    let rows = reports.iter().flat_map(|r| {
        r.swaps.iter().map(move |s| SwapRecord {
            rep: r.rep,
            tick: s.tick,
            from: s.from.clone(),
            to: s.to.clone(),
            estimated_gain: s.estimated_gain,
            realized_gain: s.realized_gain,
        })
    });
    write_csv(path, rows)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows.iter().map(SummaryRecord::from))
}

/// Phase-level summary; the iteration column is left out.
pub fn write_phase_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    #[derive(Serialize)]
    struct Rec<'a> {
        agent: AgentKind,
        service: &'a str,
        phase: usize,
        n: usize,
        mean: f64,
        std: f64,
    }
    write_csv(
        path,
        rows.iter().map(|r| Rec {
            agent: r.agent,
            service: &r.service,
            phase: r.phase + 1,
            n: r.n,
            mean: r.mean,
            std: r.std,
        }),
    )
}

/// Decisions, swaps and retrains of one run as tagged JSON lines.
pub fn write_audit_jsonl(path: &Path, report: &RunReport) -> Result<()> {
    #[derive(Serialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum Entry<'a> {
        Decision(&'a mdscale_core::agents::DecisionRecord),
        Swap(&'a mdscale_core::harness::SwapEvent),
        Retrain(&'a mdscale_core::harness::RetrainEvent),
    }
    let mut entries: Vec<(u64, u8, Entry<'_>)> = Vec::new();
    entries.extend(report.retrains.iter().map(|e| (e.tick, 0, Entry::Retrain(e))));
    entries.extend(report.decisions.iter().map(|e| (e.tick, 1, Entry::Decision(e))));
    entries.extend(report.swaps.iter().map(|e| (e.tick, 2, Entry::Swap(e))));
    // Stable sort keeps the per-kind order within a tick.
    entries.sort_by_key(|(t, k, _)| (*t, *k));
    write_jsonl(path, entries.into_iter().map(|(_, _, e)| e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn save_lgbn(path: &Path, model: &LgbnModel) -> Result<()> {
    write_json(path, model)
}

pub fn load_lgbn(path: &Path) -> Result<LgbnModel> {
    read_json(path)
}

pub fn save_policy(path: &Path, policy: &QPolicy) -> Result<()> {
    write_json(path, policy)
}

pub fn load_policy(path: &Path) -> Result<QPolicy> {
    let p: QPolicy = read_json(path)?;
    p.validate()
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(p)
}

#[derive(Serialize)]
struct RunOverview<'a> {
    rep: usize,
    seed: u64,
    exhaustion_tick: Option<u64>,
    swaps: usize,
    retrains: usize,
    failed_retrains: usize,
    phase_means: Vec<mdscale_core::harness::PhaseMean>,
    action_histogram: &'a std::collections::BTreeMap<String, [u64; 5]>,
}

/// Writes every artifact of a scenario run below `dir`.
pub fn write_run(dir: &Path, reports: &[RunReport]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows: Vec<IterationRow> = reports.iter().flat_map(RunReport::iteration_rows).collect();
    write_phi_csv(&dir.join("phi_sigma.csv"), &rows)?;
    write_swaps_csv(&dir.join("swaps.csv"), reports)?;
    if !rows.is_empty() {
        write_summary_csv(&dir.join("summary.csv"), &summarize(&rows)?)?;
        write_phase_summary_csv(&dir.join("phase_summary.csv"), &summarize_phases(&rows)?)?;
    }
    if let Some(first) = reports.first() {
        fs::write(dir.join("config.toml"), crate::config::to_toml(&first.config))?;
    }
    let overview: Vec<RunOverview<'_>> = reports
        .iter()
        .map(|r| RunOverview {
            rep: r.rep,
            seed: r.seed,
            exhaustion_tick: r.exhaustion_tick,
            swaps: r.swaps.len(),
            retrains: r.retrains.len(),
            failed_retrains: r.retrains.iter().filter(|e| e.error.is_some()).count(),
            phase_means: r.phase_means(),
            action_histogram: &r.action_histogram,
        })
        .collect();
    write_json(&dir.join("runs.json"), &overview)?;
    for r in reports {
        let rep = dir.join(format!("rep{}", r.rep));
        write_metrics_jsonl(&rep.join("metrics.jsonl"), &r.metrics)?;
        write_metrics_csv(&rep.join("metrics.csv"), &r.metrics)?;
        write_audit_jsonl(&rep.join("audit.jsonl"), r)?;
        for (id, m) in &r.models {
            save_lgbn(&rep.join(format!("{id}.lgbn.json")), m)?;
        }
        for (id, p) in &r.policies {
            save_policy(&rep.join(format!("{id}.policy.json")), p)?;
        }
    }
    Ok(())
}
