use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pipeline::{PatchRow, ProbeResult};
use super::plots;
use super::stats::{mean, median, spearman, std_dev};
use crate::error::{Error, Result};

pub const PER_PATCH_FILE: &str = "per_patch.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const CELLS_FILE: &str = "cells.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const MIN_CORRELATION_CELLS: usize = 4;

pub const METRICS: [&str; 3] = ["pixel_f1", "object_f1", "dsm_to_source"];
pub const PROBE_METRIC: &str = "noise_probe_factor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub variant: String,
    pub seed: u64,
    pub e1: f64,
    pub e2: f64,
    pub factor: f64,
}

impl ProbeRow {
    pub fn new(variant: &str, seed: u64, r: ProbeResult) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            e1: r.e1,
            e2: r.e2,
            factor: r.factor,
        }
    }
}

/// Per-(variant, seed) means over patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub variant: String,
    pub seed: u64,
    pub n_patches: usize,
    pub pixel_f1: f64,
    pub object_f1: f64,
    pub dsm_to_source: f64,
}

impl CellRow {
    pub fn metric(&self, name: &str) -> f64 {
        match name {
            "pixel_f1" => self.pixel_f1,
            "object_f1" => self.object_f1,
            "dsm_to_source" => self.dsm_to_source,
            _ => f64::NAN,
        }
    }
}

/// Mean, sample std and median over the seeds of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub n: usize,
}

impl AggregateRow {
    fn of(variant: &str, metric: &str, values: &[f64]) -> Self {
        Self {
            variant: variant.to_string(),
            metric: metric.to_string(),
            mean: mean(values),
            std: std_dev(values),
            median: median(values),
            n: values.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Value(f64),
    TooFewCells(usize),
    ConstantColumn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub per_patch: Vec<PatchRow>,
    pub probes: Vec<ProbeRow>,
    pub cells: Vec<CellRow>,
    pub aggregates: Vec<AggregateRow>,
    pub correlation: Correlation,
}

/// Spearman correlation between `dsm_to_source` and pixel F1 across cells.
pub fn correlate_dsm_f1(cells: &[CellRow]) -> Result<f64> {
    match correlation_of(cells) {
        Correlation::Value(v) => Ok(v),
        Correlation::TooFewCells(n) => Err(Error::Config(format!(
            "correlation needs at least {MIN_CORRELATION_CELLS} cells, got {n}"
        ))),
        Correlation::ConstantColumn => Err(Error::Config("correlation undefined: constant column".into())),
    }
}

fn correlation_of(cells: &[CellRow]) -> Correlation {
    if cells.len() < MIN_CORRELATION_CELLS {
        return Correlation::TooFewCells(cells.len());
    }
    let dsm: Vec<f64> = cells.iter().map(|c| c.dsm_to_source).collect();
    let f1: Vec<f64> = cells.iter().map(|c| c.pixel_f1).collect();
    spearman(&dsm, &f1).map_or(Correlation::ConstantColumn, Correlation::Value)
}

pub fn cells_from_rows(rows: &[PatchRow]) -> Vec<CellRow> {
    let mut groups: BTreeMap<(&str, u64), Vec<&PatchRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.variant.as_str(), r.seed)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((variant, seed), rs)| {
            let col = |f: fn(&PatchRow) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            CellRow {
                variant: variant.to_string(),
                seed,
                n_patches: rs.len(),
                pixel_f1: col(|r| r.pixel_f1),
                object_f1: col(|r| r.object_f1),
                dsm_to_source: col(|r| r.dsm_to_source),
            }
        })
        .collect()
}

impl EvaluationReport {
    pub fn from_rows(per_patch: Vec<PatchRow>, mut probes: Vec<ProbeRow>) -> Result<Self> {
        if per_patch.is_empty() {
            return Err(Error::EmptySamples("report rows"));
        }
        if let Some(r) = per_patch.iter().find(|r| !(0.0..=1.0).contains(&r.pixel_f1)) {
            return Err(Error::Shape(format!("pixel_f1 {} outside [0, 1]", r.pixel_f1)));
        }
        probes.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
        let cells = cells_from_rows(&per_patch);
        let mut by_variant: BTreeMap<&str, Vec<&CellRow>> = BTreeMap::new();
        for c in &cells {
            by_variant.entry(c.variant.as_str()).or_default().push(c);
        }
        let mut aggregates = Vec::new();
        for (variant, cs) in &by_variant {
            for metric in METRICS {
                let values: Vec<f64> = cs.iter().map(|c| c.metric(metric)).collect();
                aggregates.push(AggregateRow::of(variant, metric, &values));
            }
            let factors: Vec<f64> = probes.iter().filter(|p| p.variant == *variant).map(|p| p.factor).collect();
            if !factors.is_empty() {
                aggregates.push(AggregateRow::of(variant, PROBE_METRIC, &factors));
            }
        }
        let correlation = correlation_of(&cells);
        Ok(Self {
            per_patch,
            probes,
            cells,
            aggregates,
            correlation,
        })
    }

    pub fn aggregate(&self, variant: &str, metric: &str) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.variant == variant && a.metric == metric)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = self.cells.iter().map(|c| c.variant.clone()).collect();
        v.dedup();
        v
    }

    pub fn summary_markdown(&self) -> String {
        let mut out = String::from("# Results\n\nMean (standard deviation) over seeds; median in brackets.\n\n");
        out.push_str("| variant | seeds | pixel F1 | object F1 | DSM to source | noise probe factor |\n");
        out.push_str("|---|---|---|---|---|---|\n");
        for variant in self.variants() {
            let cell = |metric: &str| match self.aggregate(&variant, metric) {
                Some(a) => format!("{:.3} ({:.3}) [{:.3}]", a.mean, a.std, a.median),
                None => "n/a".to_string(),
            };
            let seeds = self.cells.iter().filter(|c| c.variant == variant).count();
            let _ = writeln!(
                out,
                "| {variant} | {seeds} | {} | {} | {} | {} |",
                cell("pixel_f1"),
                cell("object_f1"),
                cell("dsm_to_source"),
                cell(PROBE_METRIC)
            );
        }
        out.push('\n');
        let _ = match self.correlation {
            Correlation::Value(v) => writeln!(
                out,
                "Spearman correlation of DSM to source and pixel F1 over {} cells: {v:.4}",
                self.cells.len()
            ),
            Correlation::TooFewCells(n) => writeln!(
                out,
                "Spearman correlation undefined: {n} cells (needs at least {MIN_CORRELATION_CELLS})"
            ),
            Correlation::ConstantColumn => writeln!(out, "Spearman correlation undefined: constant column"),
        };
        out
    }

    /// Writes raw rows plus every derived table and plot into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join(PER_PATCH_FILE), &self.per_patch)?;
        write_csv(&dir.join(PROBE_FILE), &self.probes)?;
        self.write_derived(dir)
    }

    fn write_derived(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join(CELLS_FILE), &self.cells)?;
        write_csv(&dir.join(RESULTS_FILE), &self.aggregates)?;
        std::fs::write(dir.join(SUMMARY_FILE), self.summary_markdown())?;
        std::fs::write(dir.join(plots::DISTRIBUTION_FILE), plots::f1_distribution(&self.per_patch))?;
        std::fs::write(dir.join(plots::SCATTER_FILE), plots::dsm_f1_scatter(&self.cells))?;
        Ok(())
    }
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, csv_string(rows)?)?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::artifact(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Rebuilds every derived table and plot in `dir` from its raw per-patch and
/// probe rows. Running it twice yields byte-identical files.
pub fn report(dir: &Path) -> Result<EvaluationReport> {
    let per_patch: Vec<PatchRow> = read_csv(&dir.join(PER_PATCH_FILE))?;
    let probe_path = dir.join(PROBE_FILE);
    let probes = if probe_path.exists() { read_csv(&probe_path)? } else { Vec::new() };
    let rep = EvaluationReport::from_rows(per_patch, probes)?;
    rep.write_derived(dir)?;
    Ok(rep)
}
