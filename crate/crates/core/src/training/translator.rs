use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Device, Tensor};

use super::config::RunConfig;
use super::optim::Adam;
use super::replay::ReplayBuffer;
use crate::dsm::ReferenceBank;
use crate::error::{Error, Result};
use crate::losses::{
    compose_total, cycle_loss, dsl_loss, identity_loss, lsgan_discriminator_loss, lsgan_generator_loss,
    seg_consistency_loss, DslParts, LossBreakdown, LossParts, LossWeights,
};
use crate::nets::archive::named_variables;
use crate::nets::{to_signed, FrozenSegmenter, TensorArchive, TranslatorBundle};
use crate::rng::NamedStreams;
use crate::synth::TranslationStreams;
use crate::variants::{CycleVariant, Phase, VariantRegistry};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRANSLATOR_FILE: &str = "translator.bin";
const CHECKPOINT_VERSION: u64 = 1;

/// Frozen artifacts and data a translator run reads but never modifies.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    pub data: &'a TranslationStreams,
    pub segmenter: Option<&'a FrozenSegmenter>,
    pub bank: Option<&'a ReferenceBank>,
}

/// One logged step: the loss breakdown plus the learning rate used.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Serialize, Deserialize)]
struct FlatRow {
    step: u64,
    lr: f64,
    adv: f64,
    cyc: f64,
    id: f64,
    dsl_fake: f64,
    dsl_cyc: f64,
    dsl_id: f64,
    seg_consistency: f64,
    total_g: f64,
    total_d: f64,
}

impl From<&MetricsRow> for FlatRow {
    fn from(r: &MetricsRow) -> Self {
        let l = &r.losses;
        Self {
            step: r.step,
            lr: r.lr,
            adv: l.adv,
            cyc: l.cyc,
            id: l.id,
            dsl_fake: l.dsl_fake,
            dsl_cyc: l.dsl_cyc,
            dsl_id: l.dsl_id,
            seg_consistency: l.seg_consistency,
            total_g: l.total_g,
            total_d: l.total_d,
        }
    }
}

impl From<FlatRow> for MetricsRow {
    fn from(r: FlatRow) -> Self {
        Self {
            step: r.step,
            lr: r.lr,
            losses: LossBreakdown {
                adv: r.adv,
                cyc: r.cyc,
                id: r.id,
                dsl_fake: r.dsl_fake,
                dsl_cyc: r.dsl_cyc,
                dsl_id: r.dsl_id,
                seg_consistency: r.seg_consistency,
                total_g: r.total_g,
                total_d: r.total_d,
            },
        }
    }
}

#[derive(Debug)]
pub struct TranslatorTrainer {
    cfg: RunConfig,
    seed: u64,
    variant: Box<dyn CycleVariant>,
    weights: LossWeights,
    bundle: TranslatorBundle,
    opt_g: Adam,
    opt_d: Adam,
    pool_s: ReplayBuffer,
    pool_t: ReplayBuffer,
    rngs: NamedStreams,
    step: u64,
    history: Vec<MetricsRow>,
}

fn sample(images: &Tensor, n: usize, rng: &mut ChaCha8Rng, device: Device) -> Tensor {
    let total = images.size()[0];
    let idx: Vec<i64> = (0..n).map(|_| rng.gen_range(0..total)).collect();
    to_signed(&images.index_select(0, &Tensor::from_slice(&idx))).to_device(device)
}

impl TranslatorTrainer {
    pub fn new(cfg: &RunConfig, seed: u64, registry: &VariantRegistry, device: Device) -> Result<Self> {
        cfg.validate()?;
        let variant = registry.create(&cfg.variant, &cfg.variant_params)?;
        let weights = cfg.weights.effective_for(variant.as_ref());
        tch::manual_seed(seed as i64);
        let bundle = TranslatorBundle::new(variant.name(), variant.carrier_channels(), cfg.translator.clone(), device)?;
        let opt_g = Adam::new(named_variables(&bundle.generators).into_iter().collect(), cfg.beta1, cfg.beta2);
        let opt_d = Adam::new(named_variables(&bundle.discriminators).into_iter().collect(), cfg.beta1, cfg.beta2);
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            variant,
            weights,
            bundle,
            opt_g,
            opt_d,
            pool_s: ReplayBuffer::new(cfg.replay_buffer_size),
            pool_t: ReplayBuffer::new(cfg.replay_buffer_size),
            rngs: NamedStreams::new(seed),
            step: 0,
            history: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn bundle(&self) -> &TranslatorBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> TranslatorBundle {
        self.bundle
    }

    pub fn variant(&self) -> &dyn CycleVariant {
        self.variant.as_ref()
    }

    pub fn history(&self) -> &[MetricsRow] {
        &self.history
    }

    fn check_inputs(&self, inputs: &TrainInputs) -> Result<()> {
        if self.variant.requires_segmenter() && inputs.segmenter.is_none() {
            return Err(Error::Config(format!("variant `{}` needs a segmenter", self.variant.name())));
        }
        if !self.variant.dsl_terms().is_empty() {
            let bank = inputs
                .bank
                .ok_or_else(|| Error::Config(format!("variant `{}` needs a reference bank", self.variant.name())))?;
            if bank.layer_id() != self.cfg.dsm_layer {
                return Err(Error::LayerMismatch {
                    expected: self.cfg.dsm_layer.clone(),
                    actual: bank.layer_id().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Input for the second generator of a cycle: the perturbed visible
    /// channels plus any carrier channels, untouched.
    fn cycle_input(&mut self, full: &Tensor) -> Tensor {
        let visible = self.bundle.visible(full);
        let perturbed = self.variant.perturb_translation(&visible, self.rngs.get("noise"), Phase::Train);
        let c = self.bundle.carrier_channels as i64;
        if c == 0 {
            perturbed
        } else {
            Tensor::cat(&[perturbed, full.narrow(1, self.bundle.channels() as i64, c)], 1)
        }
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, inputs: &TrainInputs) -> Result<LossBreakdown> {
        self.check_inputs(inputs)?;
        let device = self.bundle.generators.device();
        let b = self.cfg.batch_size;
        let s = sample(&inputs.data.source, b, self.rngs.get("source_batches"), device);
        let t = sample(&inputs.data.target, b, self.rngs.get("target_batches"), device);
        let s_in = self.bundle.with_carrier(&s);
        let t_in = self.bundle.with_carrier(&t);
        let lr = self.cfg.lr_at(self.step);

        self.opt_g.zero_grad();
        let fake_t_full = self.bundle.g_st.forward(&s_in)?;
        let fake_s_full = self.bundle.g_ts.forward(&t_in)?;
        let fake_t = self.bundle.visible(&fake_t_full);
        let fake_s = self.bundle.visible(&fake_s_full);
        let back_s = self.cycle_input(&fake_t_full);
        let back_t = self.cycle_input(&fake_s_full);
        let cyc_s = self.bundle.visible(&self.bundle.g_ts.forward(&back_s)?);
        let cyc_t = self.bundle.visible(&self.bundle.g_st.forward(&back_t)?);
        let id_s = self.bundle.visible(&self.bundle.g_ts.forward(&s_in)?);
        let id_t = self.bundle.visible(&self.bundle.g_st.forward(&t_in)?);

        let adv = lsgan_generator_loss(&self.bundle.d_t.forward(&fake_t)?)
            + lsgan_generator_loss(&self.bundle.d_s.forward(&fake_s)?);
        let cyc = cycle_loss(&s, &cyc_s)? + cycle_loss(&t, &cyc_t)?;
        let id = identity_loss(&s, &id_s)? + identity_loss(&t, &id_t)?;
        let terms = self.variant.dsl_terms();
        let dsl = match (terms.is_empty(), inputs.segmenter, inputs.bank) {
            (false, Some(seg), Some(bank)) => dsl_loss(seg, bank, &fake_s, &cyc_s, &id_s, terms)?,
            _ => DslParts::default(),
        };
        let seg_consistency = match (self.variant.uses_seg_consistency(), inputs.segmenter) {
            (true, Some(seg)) => Some(seg_consistency_loss(seg, &s, &cyc_s, &id_s)?),
            _ => None,
        };
        let parts = LossParts {
            adv,
            cyc,
            id,
            dsl,
            seg_consistency,
        };
        let (total, mut breakdown) = compose_total(self.variant.as_ref(), &self.weights, &parts);
        total.backward();
        self.opt_g.step(lr);

        self.opt_d.zero_grad();
        let pooled_t = self.pool_t.query(&fake_t, self.rngs.get("replay_t"));
        let pooled_s = self.pool_s.query(&fake_s, self.rngs.get("replay_s"));
        let d_t = lsgan_discriminator_loss(&self.bundle.d_t.forward(&t)?, &self.bundle.d_t.forward(&pooled_t)?)?;
        let d_s = lsgan_discriminator_loss(&self.bundle.d_s.forward(&s)?, &self.bundle.d_s.forward(&pooled_s)?)?;
        let total_d = d_t + d_s;
        total_d.backward();
        self.opt_d.step(lr);
        breakdown.total_d = total_d.double_value(&[]);

        if !breakdown.total_g.is_finite() || !breakdown.total_d.is_finite() {
            return Err(Error::Shape(format!("non-finite loss at step {}", self.step)));
        }
        self.history.push(MetricsRow {
            step: self.step,
            lr,
            losses: breakdown.clone(),
        });
        self.step += 1;
        Ok(breakdown)
    }

    /// Full run state: weights, optimizer moments, replay pools and RNG positions.
    pub fn checkpoint(&self, frozen: &FrozenChecksums) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new(serde_json::json!({
            "kind": "translator-run",
            "version": CHECKPOINT_VERSION,
            "config": serde_json::to_value(&self.cfg)?,
            "seed": self.seed,
            "step": self.step,
            "streams": serde_json::to_value(&self.rngs)?,
            "bundle": self.bundle.header(),
            "frozen": serde_json::to_value(frozen)?,
        }));
        self.bundle.write_into(&mut archive);
        self.opt_g.write_into(&mut archive, "opt_g/");
        self.opt_d.write_into(&mut archive, "opt_d/");
        self.pool_s.write_into(&mut archive, "pool_s/");
        self.pool_t.write_into(&mut archive, "pool_t/");
        Ok(archive)
    }

    pub fn resume(
        archive: &TensorArchive,
        cfg: &RunConfig,
        registry: &VariantRegistry,
        device: Device,
    ) -> Result<Self> {
        let header = &archive.header;
        if header["kind"] != "translator-run" || header["version"] != CHECKPOINT_VERSION {
            return Err(Error::artifact("<checkpoint>", "not a translator run checkpoint"));
        }
        let saved: RunConfig = serde_json::from_value(header["config"].clone())?;
        if &saved != cfg {
            return Err(Error::Config("checkpoint was written with a different run configuration".into()));
        }
        let seed = header["seed"].as_u64().unwrap_or_default();
        let mut trainer = Self::new(cfg, seed, registry, device)?;
        trainer.bundle.restore_from(archive)?;
        trainer.opt_g.restore_from(archive, "opt_g/")?;
        trainer.opt_d.restore_from(archive, "opt_d/")?;
        trainer.pool_s.restore_from(archive, "pool_s/");
        trainer.pool_t.restore_from(archive, "pool_t/");
        trainer.rngs = serde_json::from_value(header["streams"].clone())?;
        trainer.step = header["step"].as_u64().unwrap_or_default();
        Ok(trainer)
    }
}

/// Checksums of the frozen segmenter and bank a run depends on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub segmenter: Option<String>,
    pub bank: Option<String>,
}

impl FrozenChecksums {
    pub fn of(inputs: &TrainInputs) -> Self {
        Self {
            segmenter: inputs.segmenter.map(FrozenSegmenter::checksum),
            bank: inputs.bank.map(ReferenceBank::checksum),
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub bundle: TranslatorBundle,
    pub history: Vec<MetricsRow>,
    pub resumed_from: Option<u64>,
    pub frozen: FrozenChecksums,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for row in rows {
            w.serialize(FlatRow::from(row))?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<FlatRow>()
        .map(|row| row.map(MetricsRow::from).map_err(Into::into))
        .collect()
}

/// Trains (or resumes) a translator until `until` steps, checkpointing into
/// `run_dir` every `checkpoint_every` steps and at the end.
pub fn train_translator_until(
    inputs: &TrainInputs,
    cfg: &RunConfig,
    seed: u64,
    registry: &VariantRegistry,
    run_dir: Option<&Path>,
    until: u64,
    device: Device,
) -> Result<RunOutcome> {
    let frozen = FrozenChecksums::of(inputs);
    let checkpoint_path = run_dir.map(|d| d.join(CHECKPOINT_FILE));
    let mut resumed_from = None;
    let mut trainer = match checkpoint_path.as_deref().filter(|p| p.exists()) {
        Some(path) => {
            let archive = TensorArchive::load(path)?;
            let saved: FrozenChecksums = serde_json::from_value(archive.header["frozen"].clone())?;
            if saved != frozen {
                return Err(Error::artifact(path, "segmenter or reference bank changed since this checkpoint"));
            }
            let mut t = TranslatorTrainer::resume(&archive, cfg, registry, device)?;
            let metrics = run_dir.expect("run dir").join(METRICS_FILE);
            if metrics.exists() {
                t.history = read_metrics(&metrics)?.into_iter().filter(|r| r.step < t.step).collect();
            }
            resumed_from = Some(t.step);
            log::info!("resuming {} seed {} at step {}", cfg.variant, seed, t.step);
            t
        }
        None => TranslatorTrainer::new(cfg, seed, registry, device)?,
    };
    trainer.check_inputs(inputs)?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let save = |trainer: &TranslatorTrainer, dir: &Path| -> Result<()> {
        trainer.checkpoint(&frozen)?.save(&dir.join(CHECKPOINT_FILE))?;
        write_metrics(&dir.join(METRICS_FILE), &trainer.history)
    };
    let until = until.min(cfg.steps);
    while trainer.step < until {
        let row = trainer.train_step(inputs)?;
        if trainer.step % 50 == 0 {
            log::info!(
                "{} seed {} step {} g {:.4} d {:.4}",
                cfg.variant,
                seed,
                trainer.step,
                row.total_g,
                row.total_d
            );
        }
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
                save(&trainer, dir)?;
            }
        }
    }
    if FrozenChecksums::of(inputs) != frozen {
        return Err(Error::Config("frozen segmenter or bank changed during training".into()));
    }
    if let Some(dir) = run_dir {
        save(&trainer, dir)?;
        if trainer.step >= cfg.steps {
            save_translator(&trainer.bundle, &dir.join(TRANSLATOR_FILE))?;
        }
    }
    Ok(RunOutcome {
        history: trainer.history.clone(),
        bundle: trainer.into_bundle(),
        resumed_from,
        frozen,
    })
}

pub fn train_translator(
    inputs: &TrainInputs,
    cfg: &RunConfig,
    seed: u64,
    registry: &VariantRegistry,
    run_dir: Option<&Path>,
    device: Device,
) -> Result<RunOutcome> {
    train_translator_until(inputs, cfg, seed, registry, run_dir, cfg.steps, device)
}

pub fn save_translator(bundle: &TranslatorBundle, path: &Path) -> Result<()> {
    let mut archive = TensorArchive::new(serde_json::json!({
        "kind": "translator",
        "bundle": bundle.header(),
    }));
    bundle.write_into(&mut archive);
    archive.save(path)
}

pub fn load_translator(path: &Path, device: Device) -> Result<TranslatorBundle> {
    let archive = TensorArchive::load(path)?;
    match archive.header["kind"].as_str() {
        Some("translator") | Some("translator-run") => TranslatorBundle::from_archive(&archive, device),
        _ => Err(Error::artifact(path, "not a translator checkpoint")),
    }
}

/// Run directory of one (variant, seed) cell.
pub fn run_dir(root: &Path, variant: &str, seed: u64) -> PathBuf {
    root.join("runs").join(format!("{variant}-seed{seed}"))
}
