use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::Device;

use super::config::ExperimentConfig;
use super::translator::{run_dir, train_translator, TrainInputs};
use crate::dsm::ReferenceBank;
use crate::error::Result;
use crate::eval::report::{read_csv, write_csv, PER_PATCH_FILE};
use crate::eval::{mds1_evaluate, noise_probe, EvalSet, EvaluationReport, PatchRow, ProbeRow};
use crate::nets::{FrozenSegmenter, TranslatorBundle};
use crate::synth::{Dataset, Split};
use crate::variants::VariantRegistry;

pub const CELL_FILE: &str = "cell.json";
pub const PROBE_JSON: &str = "probe.json";
pub const FAILURES_FILE: &str = "failures.json";

/// Shared read-only artifacts of a protocol grid.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolInputs<'a> {
    pub dataset: &'a Dataset,
    pub segmenter: &'a FrozenSegmenter,
    pub bank: &'a ReferenceBank,
    /// Where the segmenter was saved; recorded in segmenter-dependent variants.
    pub segmenter_path: &'a Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub variant: String,
    pub seed: u64,
    pub category: String,
    pub error: String,
}

/// Marks a finished cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellRecord {
    variant: String,
    seed: u64,
    n_patches: usize,
}

#[derive(Debug)]
pub struct ProtocolOutcome {
    pub report: Option<EvaluationReport>,
    pub failures: Vec<CellFailure>,
    pub run_dirs: Vec<PathBuf>,
}

/// Scores a trained bundle on the target test split and probes it.
pub fn evaluate_bundle(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    segmenter: &FrozenSegmenter,
    bundle: &TranslatorBundle,
    variant: &str,
    seed: u64,
) -> Result<(Vec<PatchRow>, ProbeRow)> {
    let test = dataset.split(Split::Test);
    let target = test.images(cfg.source_profile.other());
    let set = EvalSet {
        images: target,
        masks: &test.masks,
        scene_ids: &test.scene_ids,
    };
    let source = test.images(cfg.source_profile);
    let rows = mds1_evaluate(bundle, segmenter, &set, source, &cfg.run.dsm_layer, variant, seed)?;
    let probe = noise_probe(bundle, target, cfg.protocol.probe_sigma, seed)?;
    Ok((rows, ProbeRow::new(variant, seed, probe)))
}

fn run_cell(
    cfg: &ExperimentConfig,
    inputs: &ProtocolInputs,
    variant: &str,
    seed: u64,
    dir: &Path,
    registry: &VariantRegistry,
    device: Device,
) -> Result<(Vec<PatchRow>, ProbeRow)> {
    let record_path = dir.join(CELL_FILE);
    if record_path.exists() {
        let probe: ProbeRow = serde_json::from_slice(&std::fs::read(dir.join(PROBE_JSON))?)?;
        return Ok((read_csv(&dir.join(PER_PATCH_FILE))?, probe));
    }
    let mut run = cfg.run.clone();
    run.variant = variant.to_string();
    if run.variant_params.seg_checkpoint.is_none() {
        run.variant_params.seg_checkpoint = Some(inputs.segmenter_path.to_path_buf());
    }
    let streams = inputs.dataset.translation_streams(cfg.source_profile);
    let train_inputs = TrainInputs {
        data: &streams,
        segmenter: Some(inputs.segmenter),
        bank: Some(inputs.bank),
    };
    let outcome = train_translator(&train_inputs, &run, seed, registry, Some(dir), device)?;
    let (rows, probe) = evaluate_bundle(cfg, inputs.dataset, inputs.segmenter, &outcome.bundle, variant, seed)?;
    write_csv(&dir.join(PER_PATCH_FILE), &rows)?;
    std::fs::write(dir.join(PROBE_JSON), serde_json::to_vec_pretty(&probe)?)?;
    let record = CellRecord {
        variant: variant.to_string(),
        seed,
        n_patches: rows.len(),
    };
    std::fs::write(&record_path, serde_json::to_vec_pretty(&record)?)?;
    Ok((rows, probe))
}

/// Trains and evaluates every (variant, seed) cell, skipping finished cells and
/// resuming interrupted ones. A failing cell is recorded and the grid goes on.
pub fn run_protocol(
    cfg: &ExperimentConfig,
    inputs: &ProtocolInputs,
    out: &Path,
    registry: &VariantRegistry,
    device: Device,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    let mut probes = Vec::new();
    let mut failures = Vec::new();
    let mut run_dirs = Vec::new();
    for variant in &cfg.protocol.variants {
        for &seed in &cfg.run.seeds {
            let dir = run_dir(out, variant, seed);
            run_dirs.push(dir.clone());
            match run_cell(cfg, inputs, variant, seed, &dir, registry, device) {
                Ok((r, p)) => {
                    rows.extend(r);
                    probes.push(p);
                }
                Err(e) => {
                    log::error!("cell {variant} seed {seed} failed: {e}");
                    failures.push(CellFailure {
                        variant: variant.clone(),
                        seed,
                        category: e.category().to_string(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    std::fs::write(out.join(FAILURES_FILE), serde_json::to_vec_pretty(&failures)?)?;
    let report = if rows.is_empty() {
        None
    } else {
        let rep = EvaluationReport::from_rows(rows, probes)?;
        rep.write(out)?;
        Some(rep)
    };
    Ok(ProtocolOutcome {
        report,
        failures,
        run_dirs,
    })
}
