//! Four-way ablation over warm-up and rectification, and tables built from
//! finished run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{train_on, CheckpointMeta, EpochRecord, RunRecord, PR_CSV_HEADER};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::synth::{read_dataset, read_json, write_json};

/// `(label, directory slug, ggw, ggr)` in table order.
pub const ABLATION_ROWS: [(&str, &str, bool, bool); 4] = [
    ("baseline", "baseline", false, false),
    ("+GGW", "ggw", true, false),
    ("+GGR", "ggr", false, true),
    ("+GGW+GGR", "ggw_ggr", true, true),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    /// Sample standard deviation; zero for a single value.
    pub std: Option<f64>,
}

impl MeanStd {
    /// Undefined values are skipped.
    pub fn of(values: &[Option<f64>]) -> Self {
        let v: Vec<f64> = values.iter().flatten().copied().collect();
        if v.is_empty() {
            return Self { mean: None, std: None };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(mean),
            std: Some(std),
        }
    }

    fn cell(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "n/a".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ggw: bool,
    pub ggr: bool,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
    pub ap_range: MeanStd,
    pub ap_20: MeanStd,
    pub ap_50: MeanStd,
    pub ar: MeanStd,
    pub confounder_fp_rate: MeanStd,
}

impl AblationRow {
    fn new(name: &str, ggw: bool, ggr: bool, runs: Vec<(u64, EvalReport)>) -> Self {
        let pick = |f: fn(&EvalReport) -> Option<f64>| MeanStd::of(&runs.iter().map(|r| f(&r.1)).collect::<Vec<_>>());
        Self {
            name: name.into(),
            ggw,
            ggr,
            seeds: runs.iter().map(|r| r.0).collect(),
            ap_range: pick(|r| r.ap_range),
            ap_20: pick(|r| r.ap_20),
            ap_50: pick(|r| r.ap_50),
            ar: pick(|r| r.ar),
            confounder_fp_rate: pick(|r| r.confounder_fp_rate),
            reports: runs.into_iter().map(|r| r.1).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Groups `(ggw, ggr, seed, report)` runs into the fixed row order.
    /// Rows without runs are left out.
    pub fn from_runs(runs: &[(bool, bool, u64, EvalReport)]) -> Self {
        let rows = ABLATION_ROWS
            .iter()
            .filter_map(|&(name, _, ggw, ggr)| {
                let mut mine: Vec<(u64, EvalReport)> = runs
                    .iter()
                    .filter(|r| r.0 == ggw && r.1 == ggr)
                    .map(|r| (r.2, r.3.clone()))
                    .collect();
                mine.sort_by_key(|r| r.0);
                (!mine.is_empty()).then(|| AblationRow::new(name, ggw, ggr, mine))
            })
            .collect();
        Self { rows }
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_markdown(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "" };
        let mut s = String::new();
        let _ = writeln!(s, "| GGW | GGR | AP_0.2:0.5 | AP_0.2 | AP_0.5 | AR | conf. FP rate | seeds |");
        let _ = writeln!(s, "|-----|-----|------------|--------|--------|----|---------------|-------|");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                mark(r.ggw),
                mark(r.ggr),
                r.ap_range.cell(),
                r.ap_20.cell(),
                r.ap_50.cell(),
                r.ar.cell(),
                r.confounder_fp_rate.cell(),
                seeds.join(",")
            );
        }
        s
    }
}

/// The record of a completed run in `dir` whose saved config equals `cfg`.
pub fn finished_run(dir: &Path, cfg: &TrainConfig) -> Result<Option<RunRecord>> {
    let (meta_path, record_path) = (dir.join("final/meta.json"), dir.join("run_record.json"));
    if !meta_path.exists() || !record_path.exists() {
        return Ok(None);
    }
    let meta: CheckpointMeta = read_json(&meta_path)?;
    let record: RunRecord = read_json(&record_path)?;
    let complete = record.epochs.len() == cfg.total_epochs && record.epochs.last().is_some_and(|e| e.val.is_some());
    Ok((meta.config == *cfg && complete).then_some(record))
}

/// Trains every row for every seed under `out_dir/<slug>_seed<seed>` and
/// writes `ablation.json` and `ablation.md`. Runs already finished with the
/// same config are reused, their epoch records replayed through `on_epoch`.
pub fn ablate(
    base: &TrainConfig,
    seeds: &[u64],
    out_dir: &Path,
    on_epoch: &mut dyn FnMut(&str, u64, &EpochRecord),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let dataset = read_dataset(&base.dataset)?;
    let mut runs = Vec::new();
    for &(name, slug, ggw, ggr) in &ABLATION_ROWS {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ggw_enabled: ggw,
                ggr_enabled: ggr,
                ..base.clone()
            };
            let dir = out_dir.join(format!("{slug}_seed{seed}"));
            let record = match finished_run(&dir, &cfg)? {
                Some(r) => {
                    r.epochs.iter().for_each(|e| on_epoch(name, seed, e));
                    r
                }
                None => train_on(&cfg, &dataset, Some(&dir), &mut |e| on_epoch(name, seed, e))?.record,
            };
            let report = record
                .epochs
                .last()
                .and_then(|e| e.val.clone())
                .expect("final epoch is validated");
            runs.push((ggw, ggr, seed, report));
        }
    }
    let table = AblationTable::from_runs(&runs);
    write_json(&out_dir.join("ablation.json"), &table)?;
    fs::write(out_dir.join("ablation.md"), table.to_markdown()).map_err(|e| Error::file(out_dir, e))?;
    Ok(table)
}

/// Collects every finished run below `runs_dir` into an ablation table
/// (`report.md`) and merges their PR curves into `pr_curves.csv`.
pub fn report(runs_dir: &Path) -> Result<AblationTable> {
    let mut entries: Vec<_> = fs::read_dir(runs_dir)
        .map_err(|e| Error::file(runs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("eval.json").exists() && p.join("final/meta.json").exists())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::file(runs_dir, "no finished runs (eval.json + final/meta.json) found"));
    }
    let mut runs = Vec::new();
    let mut csv = format!("run,{PR_CSV_HEADER}\n");
    for dir in &entries {
        let meta: CheckpointMeta = read_json(&dir.join("final/meta.json"))?;
        let eval: EvalReport = read_json(&dir.join("eval.json"))?;
        runs.push((meta.config.ggw_enabled, meta.config.ggr_enabled, meta.config.seed, eval));
        let pr = dir.join("pr_curve.csv");
        if pr.exists() {
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let text = fs::read_to_string(&pr).map_err(|e| Error::file(&pr, e))?;
            for line in text.lines().skip(1) {
                let _ = writeln!(csv, "{name},{line}");
            }
        }
    }
    let table = AblationTable::from_runs(&runs);
    fs::write(runs_dir.join("report.md"), table.to_markdown()).map_err(|e| Error::file(runs_dir, e))?;
    fs::write(runs_dir.join("pr_curves.csv"), csv).map_err(|e| Error::file(runs_dir, e))?;
    Ok(table)
}
