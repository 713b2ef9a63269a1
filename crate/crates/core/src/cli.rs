//! Command-line entry point: one subcommand per workflow stage.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use tch::Device;

use crate::dsm::ReferenceBank;
use crate::error::{Error, Result};
use crate::eval::report::{read_csv, report, write_csv, PER_PATCH_FILE};
use crate::eval::{noise_probe, EvaluationReport, PatchRow, ProbeRow};
use crate::nets::FrozenSegmenter;
use crate::synth::{build_dataset, BuildOutcome, Dataset};
use crate::training::protocol::PROBE_JSON;
use crate::training::translator::{run_dir, TRANSLATOR_FILE};
use crate::training::{
    evaluate_bundle, load_translator, run_protocol, train_segmenter, train_translator, ExperimentConfig,
    ProtocolInputs, TrainInputs,
};
use crate::variants::VariantRegistry;

pub const DEVICE_ENV: &str = "DSA_DEVICE";
pub const DATA_DIR: &str = "data";
pub const SEGMENTER_FILE: &str = "segmenter.bin";
pub const SEGMENTER_REPORT: &str = "segmenter_report.json";
pub const BANK_FILE: &str = "bank.bin";
pub const CONFIG_ECHO: &str = "config.toml";
pub const COMMANDS_DIR: &str = "commands";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "dsa-cyclegan", version, about = "Stain translation with a segmenter-anchored domain-shift metric")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Experiment directory holding every artifact.
    #[arg(long, global = true, default_value = "experiment")]
    pub out: PathBuf,
    /// Replaces the translator seed list with this single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Single-threaded kernels for bit-stable reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Render the synthetic rich/poor dataset.
    GenData,
    /// Train the source-stain segmenter.
    TrainSeg,
    /// Compute the reference bank from source patches.
    BuildBank,
    /// Train the configured variant for each seed.
    TrainTranslate,
    /// Translate-then-segment evaluation of trained runs.
    Evaluate,
    /// Noise-embedding probe of trained runs.
    Probe,
    /// Every variant and seed, then evaluation and report.
    Protocol,
    /// Rebuild tables and plots from raw rows.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSeg => "train-seg",
            Command::BuildBank => "build-bank",
            Command::TrainTranslate => "train-translate",
            Command::Evaluate => "evaluate",
            Command::Probe => "probe",
            Command::Protocol => "protocol",
            Command::Report => "report",
        }
    }
}

/// `DSA_DEVICE`: `cpu` (default), `cuda`, `cuda:N` or `auto`.
pub fn device_from_env() -> Result<Device> {
    match std::env::var(DEVICE_ENV).unwrap_or_default().trim() {
        "" | "cpu" => Ok(Device::Cpu),
        "auto" => Ok(Device::cuda_if_available()),
        "cuda" => Ok(Device::Cuda(0)),
        other => other
            .strip_prefix("cuda:")
            .and_then(|n| n.parse().ok())
            .map(Device::Cuda)
            .ok_or_else(|| Error::Config(format!("{DEVICE_ENV}={other} is not cpu, auto, cuda or cuda:N"))),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        "config" => 2,
        "io" => 3,
        "training" => 4,
        _ => 5,
    }
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    device: Device,
    registry: VariantRegistry,
}

impl Context {
    fn data(&self) -> Result<Dataset> {
        Dataset::load(&self.out.join(DATA_DIR))
    }

    fn segmenter(&self) -> Result<FrozenSegmenter> {
        let path = self.segmenter_path();
        if !path.exists() {
            return Err(Error::artifact(&path, "missing; run `train-seg` first"));
        }
        FrozenSegmenter::load(&path, self.device)
    }

    /// Relative checkpoint paths are taken from the experiment directory.
    fn segmenter_path(&self) -> PathBuf {
        match &self.cfg.run.variant_params.seg_checkpoint {
            Some(p) => self.out.join(p),
            None => self.out.join(SEGMENTER_FILE),
        }
    }

    fn bank(&self) -> Result<ReferenceBank> {
        let path = self.out.join(BANK_FILE);
        if !path.exists() {
            return Err(Error::artifact(&path, "missing; run `build-bank` first"));
        }
        ReferenceBank::load(&path, self.cfg.run.reference_bank_size)
    }
}

fn gen_data(ctx: &Context) -> Result<()> {
    let (manifest, outcome) = build_dataset(&ctx.out.join(DATA_DIR), &ctx.cfg.data)?;
    match outcome {
        BuildOutcome::Written => println!("wrote dataset {}", manifest.digest()),
        BuildOutcome::Unchanged => println!("dataset {} already present; nothing to do", manifest.digest()),
    }
    Ok(())
}

fn train_seg(ctx: &Context) -> Result<()> {
    let data = ctx.data()?;
    let (seg, rep) = train_segmenter(&data, ctx.cfg.source_profile, &ctx.cfg.segmenter_training, ctx.device)?;
    let seg = seg.freeze();
    seg.save(&ctx.segmenter_path())?;
    std::fs::write(ctx.out.join(SEGMENTER_REPORT), serde_json::to_vec_pretty(&rep)?)?;
    println!(
        "segmenter: best validation dice {:.4} at step {} ({} steps run)",
        rep.best_val_dice, rep.best_step, rep.steps_run
    );
    Ok(())
}

fn bank_images(ctx: &Context, data: &Dataset) -> tch::Tensor {
    let source = data.translation_streams(ctx.cfg.source_profile).source;
    let n = (ctx.cfg.run.reference_bank_size as i64).min(source.size()[0]);
    source.narrow(0, 0, n)
}

fn build_bank(ctx: &Context) -> Result<()> {
    let data = ctx.data()?;
    let seg = ctx.segmenter()?;
    let images = bank_images(ctx, &data).to_device(ctx.device);
    let bank = ReferenceBank::build(&seg, &images, &ctx.cfg.run.dsm_layer, ctx.cfg.run.reference_bank_size)?;
    bank.save(&ctx.out.join(BANK_FILE))?;
    println!(
        "bank: {} samples x {} filters at `{}` ({})",
        bank.n_ref(),
        bank.k_filters(),
        bank.layer_id(),
        bank.checksum()
    );
    Ok(())
}

fn run_config(ctx: &Context) -> crate::training::RunConfig {
    let mut run = ctx.cfg.run.clone();
    if run.variant_params.seg_checkpoint.is_none() {
        run.variant_params.seg_checkpoint = Some(ctx.segmenter_path());
    }
    run
}

fn train_translate(ctx: &Context) -> Result<()> {
    let data = ctx.data()?;
    let run = run_config(ctx);
    let variant = ctx.registry.create(&run.variant, &run.variant_params)?;
    let seg = if variant.requires_segmenter() { Some(ctx.segmenter()?) } else { None };
    let bank = if variant.dsl_terms().is_empty() { None } else { Some(ctx.bank()?) };
    let streams = data.translation_streams(ctx.cfg.source_profile);
    let inputs = TrainInputs {
        data: &streams,
        segmenter: seg.as_ref(),
        bank: bank.as_ref(),
    };
    for &seed in &run.seeds {
        let dir = run_dir(&ctx.out, &run.variant, seed);
        let outcome = train_translator(&inputs, &run, seed, &ctx.registry, Some(&dir), ctx.device)?;
        let last = outcome.history.last().map(|r| r.losses.total_g).unwrap_or(f64::NAN);
        println!("{} seed {seed}: {} steps, final generator loss {last:.4}", run.variant, outcome.history.len());
    }
    Ok(())
}

fn trained_runs(ctx: &Context) -> Vec<(u64, PathBuf)> {
    ctx.cfg
        .run
        .seeds
        .iter()
        .map(|&s| (s, run_dir(&ctx.out, &ctx.cfg.run.variant, s)))
        .collect()
}

fn evaluate(ctx: &Context) -> Result<()> {
    let data = ctx.data()?;
    let seg = ctx.segmenter()?;
    for (seed, dir) in trained_runs(ctx) {
        let bundle = load_translator(&dir.join(TRANSLATOR_FILE), ctx.device)?;
        let (rows, _) = evaluate_bundle(&ctx.cfg, &data, &seg, &bundle, &ctx.cfg.run.variant, seed)?;
        write_csv(&dir.join(PER_PATCH_FILE), &rows)?;
        let mean = rows.iter().map(|r| r.pixel_f1).sum::<f64>() / rows.len() as f64;
        println!(
            "{} seed {seed}: mean pixel F1 {mean:.4}, DSM to source {:.4}",
            ctx.cfg.run.variant, rows[0].dsm_to_source
        );
    }
    Ok(())
}

fn probe(ctx: &Context) -> Result<()> {
    let data = ctx.data()?;
    let target = data.split(crate::synth::Split::Test).images(ctx.cfg.source_profile.other());
    for (seed, dir) in trained_runs(ctx) {
        let bundle = load_translator(&dir.join(TRANSLATOR_FILE), ctx.device)?;
        let r = noise_probe(&bundle, target, ctx.cfg.protocol.probe_sigma, seed)?;
        let row = ProbeRow::new(&ctx.cfg.run.variant, seed, r);
        std::fs::write(dir.join(PROBE_JSON), serde_json::to_vec_pretty(&row)?)?;
        println!("{} seed {seed}: E1 {:.5} E2 {:.5} factor {:.4}", row.variant, r.e1, r.e2, r.factor);
    }
    Ok(())
}

fn protocol(ctx: &Context) -> Result<()> {
    gen_data(ctx)?;
    if !ctx.segmenter_path().exists() {
        train_seg(ctx)?;
    }
    if !ctx.out.join(BANK_FILE).exists() {
        build_bank(ctx)?;
    }
    let data = ctx.data()?;
    let seg = ctx.segmenter()?;
    let bank = ctx.bank()?;
    let segmenter_path = ctx.segmenter_path();
    let inputs = ProtocolInputs {
        dataset: &data,
        segmenter: &seg,
        bank: &bank,
        segmenter_path: &segmenter_path,
    };
    let outcome = run_protocol(&ctx.cfg, &inputs, &ctx.out, &ctx.registry, ctx.device)?;
    for f in &outcome.failures {
        eprintln!("cell {} seed {} failed ({}): {}", f.variant, f.seed, f.category, f.error);
    }
    if let Some(rep) = &outcome.report {
        print!("{}", rep.summary_markdown());
    }
    if outcome.report.is_none() {
        return Err(Error::Config("every protocol cell failed".into()));
    }
    Ok(())
}

/// Collects raw rows from run directories when the experiment-level files are absent.
fn gather_rows(out: &Path) -> Result<()> {
    if out.join(PER_PATCH_FILE).exists() {
        return Ok(());
    }
    let mut rows: Vec<PatchRow> = Vec::new();
    let mut probes: Vec<ProbeRow> = Vec::new();
    let runs = out.join("runs");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
        .map_err(|e| Error::artifact(&runs, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    dirs.sort();
    for dir in dirs {
        if dir.join(PER_PATCH_FILE).exists() {
            rows.extend(read_csv::<PatchRow>(&dir.join(PER_PATCH_FILE))?);
        }
        if dir.join(PROBE_JSON).exists() {
            probes.push(serde_json::from_slice(&std::fs::read(dir.join(PROBE_JSON))?)?);
        }
    }
    EvaluationReport::from_rows(rows, probes)?.write(out)
}

fn report_cmd(ctx: &Context) -> Result<()> {
    gather_rows(&ctx.out)?;
    let rep = report(&ctx.out)?;
    print!("{}", rep.summary_markdown());
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Echoes the effective configuration and records what ran.
fn write_echo(ctx: &Context, cli: &Cli) -> Result<()> {
    std::fs::create_dir_all(ctx.out.join(COMMANDS_DIR))?;
    let text = ctx.cfg.to_toml()?;
    std::fs::write(ctx.out.join(CONFIG_ECHO), &text)?;
    let manifest = serde_json::json!({
        "manifest_version": MANIFEST_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "config_sha256": sha256_hex(text.as_bytes()),
        "config_source": cli.config.as_ref().map(|p| p.display().to_string()),
        "seed_override": cli.seed,
        "deterministic": cli.deterministic,
        "device": format!("{:?}", ctx.device),
    });
    std::fs::write(
        ctx.out.join(COMMANDS_DIR).join(format!("{}.json", cli.command.name())),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seeds = vec![seed];
    }
    cfg.validate()?;
    if cli.deterministic {
        tch::set_num_threads(1);
        tch::set_num_interop_threads(1);
    }
    let ctx = Context {
        cfg,
        out: cli.out.clone(),
        device: device_from_env()?,
        registry: VariantRegistry::with_builtins(),
    };
    write_echo(&ctx, cli)?;
    match cli.command {
        Command::GenData => gen_data(&ctx),
        Command::TrainSeg => train_seg(&ctx),
        Command::BuildBank => build_bank(&ctx),
        Command::TrainTranslate => train_translate(&ctx),
        Command::Evaluate => evaluate(&ctx),
        Command::Probe => probe(&ctx),
        Command::Protocol => protocol(&ctx),
        Command::Report => report_cmd(&ctx),
    }
}

/// Parses `argv`, runs the command and maps the outcome to an exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            exit_code(&e)
        }
    }
}
