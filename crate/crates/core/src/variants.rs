//! Training-objective variants behind a common trait, registered by name.
//!
//! A variant decides which optional loss terms are active, whether the
//! generators carry hidden channels, and how a translation is perturbed
//! before it is fed to the reconstruction generator. The trainer only talks
//! to [`CycleVariant`]; new variants are added by registering a factory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::losses::seg_consistency_loss;
use crate::nets::FrozenSegmenter;
use crate::rng::gaussian_tensor;

/// Which of the three metric anchors a variant applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DslTerms {
    pub fake: bool,
    pub cyc: bool,
    pub id: bool,
}

impl DslTerms {
    pub const NONE: DslTerms = DslTerms {
        fake: false,
        cyc: false,
        id: false,
    };
    pub const ALL: DslTerms = DslTerms {
        fake: true,
        cyc: true,
        id: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.fake || self.cyc || self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantParams {
    pub sigma: f64,
    pub n_extra: usize,
    pub seg_checkpoint: Option<PathBuf>,
}

impl Default for VariantParams {
    fn default() -> Self {
        Self {
            sigma: 0.0125,
            n_extra: 1,
            seg_checkpoint: None,
        }
    }
}

impl VariantParams {
    pub fn with_segmenter(path: impl Into<PathBuf>) -> Self {
        Self {
            seg_checkpoint: Some(path.into()),
            ..Default::default()
        }
    }
}

/// Whether a hook runs inside a training step or at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Inference,
}

pub trait CycleVariant: fmt::Debug + Send + Sync {
    fn name(&self) -> &str;

    fn carrier_channels(&self) -> usize {
        0
    }

    fn requires_segmenter(&self) -> bool {
        false
    }

    fn dsl_terms(&self) -> DslTerms {
        DslTerms::NONE
    }

    fn uses_seg_consistency(&self) -> bool {
        false
    }

    /// Applied to the visible part of a translation before reconstruction.
    fn perturb_translation(&self, translated: &Tensor, _rng: &mut ChaCha8Rng, _phase: Phase) -> Tensor {
        translated.shallow_clone()
    }

    fn params(&self) -> VariantParams;
}

/// Adds i.i.d. `N(0, sigma^2)` noise during training; identity at inference.
pub fn gaussian_noise_hook(translated: &Tensor, sigma: f64, rng: &mut ChaCha8Rng, phase: Phase) -> Tensor {
    if phase == Phase::Inference || sigma == 0.0 {
        return translated.shallow_clone();
    }
    let noise = gaussian_tensor(rng, &translated.size(), sigma, translated.kind(), translated.device());
    translated + noise
}

/// Splits a `C + n_extra` generator output into its visible and carrier channels.
pub fn extra_channels_split(output: &Tensor, visible_channels: usize, n_extra: usize) -> Result<(Tensor, Tensor)> {
    let dims = output.size();
    if dims.len() != 4 || dims[1] as usize != visible_channels + n_extra {
        return Err(Error::Shape(format!(
            "expected {} channels ({visible_channels} visible + {n_extra} carrier), got {dims:?}",
            visible_channels + n_extra
        )));
    }
    Ok((
        output.narrow(1, 0, visible_channels as i64),
        output.narrow(1, visible_channels as i64, n_extra as i64),
    ))
}

/// Segmentation-consistency objective on source-originating images only.
pub fn self_supervision_hook(segmenter: &FrozenSegmenter, s: &Tensor, cyc_s: &Tensor, id_s: &Tensor) -> Result<Tensor> {
    seg_consistency_loss(segmenter, s, cyc_s, id_s)
}

#[derive(Debug, Clone)]
pub struct Baseline;

impl CycleVariant for Baseline {
    fn name(&self) -> &str {
        "baseline"
    }

    fn params(&self) -> VariantParams {
        VariantParams::default()
    }
}

#[derive(Debug, Clone)]
pub struct GaussianNoise {
    pub sigma: f64,
}

impl CycleVariant for GaussianNoise {
    fn name(&self) -> &str {
        "gaussian_noise"
    }

    fn perturb_translation(&self, translated: &Tensor, rng: &mut ChaCha8Rng, phase: Phase) -> Tensor {
        gaussian_noise_hook(translated, self.sigma, rng, phase)
    }

    fn params(&self) -> VariantParams {
        VariantParams {
            sigma: self.sigma,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtraChannels {
    pub n_extra: usize,
}

impl CycleVariant for ExtraChannels {
    fn name(&self) -> &str {
        "extra_channels"
    }

    fn carrier_channels(&self) -> usize {
        self.n_extra
    }

    fn params(&self) -> VariantParams {
        VariantParams {
            n_extra: self.n_extra,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfSupervision {
    pub seg_checkpoint: PathBuf,
}

impl CycleVariant for SelfSupervision {
    fn name(&self) -> &str {
        "self_supervision"
    }

    fn requires_segmenter(&self) -> bool {
        true
    }

    fn uses_seg_consistency(&self) -> bool {
        true
    }

    fn params(&self) -> VariantParams {
        VariantParams::with_segmenter(self.seg_checkpoint.clone())
    }
}

/// Domain-shift-aware objective; the ablation arms differ only in `terms`.
#[derive(Debug, Clone)]
pub struct DomainShiftAware {
    pub name: &'static str,
    pub terms: DslTerms,
    pub seg_checkpoint: PathBuf,
}

impl CycleVariant for DomainShiftAware {
    fn name(&self) -> &str {
        self.name
    }

    fn requires_segmenter(&self) -> bool {
        true
    }

    fn dsl_terms(&self) -> DslTerms {
        self.terms
    }

    fn params(&self) -> VariantParams {
        VariantParams::with_segmenter(self.seg_checkpoint.clone())
    }
}

pub type VariantFactory = fn(&VariantParams) -> Result<Box<dyn CycleVariant>>;

fn require_checkpoint(name: &str, params: &VariantParams) -> Result<PathBuf> {
    params
        .seg_checkpoint
        .clone()
        .ok_or_else(|| Error::Config(format!("variant `{name}` needs `seg_checkpoint`")))
}

fn dsa_arm(name: &'static str, terms: DslTerms, params: &VariantParams) -> Result<Box<dyn CycleVariant>> {
    Ok(Box::new(DomainShiftAware {
        name,
        terms,
        seg_checkpoint: require_checkpoint(name, params)?,
    }))
}

#[derive(Default)]
pub struct VariantRegistry {
    factories: BTreeMap<String, VariantFactory>,
}

impl fmt::Debug for VariantRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl VariantRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::new();
        reg.register("baseline", |_| Ok(Box::new(Baseline)));
        reg.register("gaussian_noise", |p| {
            if !(p.sigma.is_finite() && p.sigma >= 0.0) {
                return Err(Error::Config(format!("gaussian_noise sigma must be >= 0, got {}", p.sigma)));
            }
            if p.sigma == 0.0 {
                log::warn!("gaussian_noise with sigma = 0 behaves exactly like baseline");
            }
            Ok(Box::new(GaussianNoise { sigma: p.sigma }))
        });
        reg.register("extra_channels", |p| {
            if p.n_extra == 0 {
                return Err(Error::Config("extra_channels needs n_extra >= 1".into()));
            }
            Ok(Box::new(ExtraChannels { n_extra: p.n_extra }))
        });
        reg.register("self_supervision", |p| {
            Ok(Box::new(SelfSupervision {
                seg_checkpoint: require_checkpoint("self_supervision", p)?,
            }))
        });
        reg.register("dsa", |p| dsa_arm("dsa", DslTerms::ALL, p));
        reg.register("dsa_fake", |p| {
            let terms = DslTerms {
                fake: true,
                ..DslTerms::NONE
            };
            dsa_arm("dsa_fake", terms, p)
        });
        reg.register("dsa_cyc_id", |p| {
            let terms = DslTerms {
                cyc: true,
                id: true,
                ..DslTerms::NONE
            };
            dsa_arm("dsa_cyc_id", terms, p)
        });
        reg
    }

    pub fn register(&mut self, name: &str, factory: VariantFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn create(&self, name: &str, params: &VariantParams) -> Result<Box<dyn CycleVariant>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownVariant {
            name: name.to_string(),
            valid: self.names(),
        })?;
        factory(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use tch::{Device, Kind};

    #[test]
    fn registry_knows_all_builtins() {
        let reg = VariantRegistry::with_builtins();
        assert_eq!(
            reg.names(),
            vec!["baseline", "dsa", "dsa_cyc_id", "dsa_fake", "extra_channels", "gaussian_noise", "self_supervision"]
        );
        match reg.create("cyclegan++", &VariantParams::default()) {
            Err(Error::UnknownVariant { valid, .. }) => assert_eq!(valid.len(), 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segmenter_variants_need_a_checkpoint() {
        let reg = VariantRegistry::with_builtins();
        for name in ["self_supervision", "dsa", "dsa_fake", "dsa_cyc_id"] {
            assert!(matches!(reg.create(name, &VariantParams::default()), Err(Error::Config(_))));
            let v = reg.create(name, &VariantParams::with_segmenter("s.ckpt")).unwrap();
            assert!(v.requires_segmenter());
        }
    }

    #[test]
    fn parameter_validation() {
        let reg = VariantRegistry::with_builtins();
        let bad = VariantParams {
            n_extra: 0,
            ..Default::default()
        };
        assert!(reg.create("extra_channels", &bad).is_err());
        let bad = VariantParams {
            sigma: -0.1,
            ..Default::default()
        };
        assert!(reg.create("gaussian_noise", &bad).is_err());
    }

    #[test]
    fn self_supervision_has_no_dsl_terms() {
        let reg = VariantRegistry::with_builtins();
        let v = reg.create("self_supervision", &VariantParams::with_segmenter("s")).unwrap();
        assert!(v.dsl_terms().is_empty());
        assert!(v.uses_seg_consistency());
    }

    #[test]
    fn gaussian_hook_contracts() {
        let x = Tensor::rand([2, 3, 8, 8], (Kind::Float, Device::Cpu));
        let mut rng = stream(1, "noise");
        assert!(gaussian_noise_hook(&x, 0.0, &mut rng, Phase::Train).equal(&x));
        assert!(gaussian_noise_hook(&x, 0.5, &mut rng, Phase::Inference).equal(&x));
        let a = gaussian_noise_hook(&x, 0.0125, &mut stream(3, "noise"), Phase::Train);
        let b = gaussian_noise_hook(&x, 0.0125, &mut stream(3, "noise"), Phase::Train);
        assert!(a.equal(&b));
        assert!(!a.equal(&x));
    }

    #[test]
    fn gaussian_hook_std_matches_sigma() {
        let x = Tensor::zeros([1_000_000], (Kind::Double, Device::Cpu));
        let mut rng = stream(2024, "noise");
        let y = gaussian_noise_hook(&x, 0.0125, &mut rng, Phase::Train);
        let std = y.std(true).double_value(&[]);
        assert!((std - 0.0125).abs() / 0.0125 < 0.02, "std {std}");
    }

    #[test]
    fn split_contract() {
        let out = Tensor::rand([2, 4, 8, 8], (Kind::Float, Device::Cpu));
        let (vis, carrier) = extra_channels_split(&out, 3, 1).unwrap();
        assert_eq!(vis.size(), vec![2, 3, 8, 8]);
        assert_eq!(carrier.size(), vec![2, 1, 8, 8]);
        assert!(extra_channels_split(&out, 3, 2).is_err());
    }
}
