//! Loss terms and their per-variant composition.

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::dsm::{dsm_loss, extract_dsm_features, ReferenceBank};
use crate::error::{Error, Result};
use crate::nets::{to_unit, FrozenSegmenter};
use crate::variants::{CycleVariant, DslTerms};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_cyc: f64,
    pub w_id: f64,
    pub w_dsl: f64,
    pub w_seg: f64,
    /// Noise std in generator units; consumed by the gaussian-noise variant.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cyc: 10.0,
            w_id: 5.0,
            w_dsl: 1.0,
            w_seg: 1.0,
            sigma: 0.0125,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_cyc", self.w_cyc),
            ("w_id", self.w_id),
            ("w_dsl", self.w_dsl),
            ("w_seg", self.w_seg),
            ("sigma", self.sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Zeroes weights of terms the variant does not use, warning once per weight.
    pub fn effective_for(&self, variant: &dyn CycleVariant) -> LossWeights {
        let mut out = self.clone();
        if variant.dsl_terms().is_empty() && out.w_dsl != 0.0 {
            log::warn!("variant `{}` has no dsl terms; ignoring w_dsl = {}", variant.name(), out.w_dsl);
            out.w_dsl = 0.0;
        }
        if !variant.uses_seg_consistency() && out.w_seg != 0.0 {
            log::warn!("variant `{}` has no segmentation term; ignoring w_seg = {}", variant.name(), out.w_seg);
            out.w_seg = 0.0;
        }
        out
    }
}

/// Scalar values of every logged component of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub cyc: f64,
    pub id: f64,
    pub dsl_fake: f64,
    pub dsl_cyc: f64,
    pub dsl_id: f64,
    pub seg_consistency: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBreakdown {
    /// Weighted generator objective recomputed from the logged parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        self.adv
            + w.w_cyc * self.cyc
            + w.w_id * self.id
            + w.w_dsl * (self.dsl_fake + self.dsl_cyc + self.dsl_id)
            + w.w_seg * self.seg_consistency
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Least-squares generator term: fake scores pushed to 1.
pub fn lsgan_generator_loss(fake_scores: &Tensor) -> Tensor {
    (fake_scores - 1.0).square().mean(fake_scores.kind())
}

/// Least-squares discriminator term: real to 1, fake to 0, averaged.
pub fn lsgan_discriminator_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    same_shape(real_scores, fake_scores, "discriminator score maps")?;
    let real = (real_scores - 1.0).square().mean(real_scores.kind());
    let fake = fake_scores.square().mean(fake_scores.kind());
    Ok((real + fake) * 0.5)
}

/// `(generator term, discriminator term)` of the least-squares objective.
pub fn adversarial_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = lsgan_discriminator_loss(real_scores, fake_scores)?;
    Ok((lsgan_generator_loss(fake_scores), d))
}

/// Mean absolute error between an image batch and its reconstruction.
pub fn cycle_loss(x: &Tensor, reconstructed: &Tensor) -> Result<Tensor> {
    same_shape(x, reconstructed, "cycle loss")?;
    Ok((x - reconstructed).abs().mean(x.kind()))
}

/// Mean absolute error between an image and its same-domain mapping.
pub fn identity_loss(x: &Tensor, mapped: &Tensor) -> Result<Tensor> {
    same_shape(x, mapped, "identity loss")?;
    Ok((x - mapped).abs().mean(x.kind()))
}

/// The three anchored metric terms. Absent terms were not computed.
#[derive(Debug, Default)]
pub struct DslParts {
    pub fake: Option<Tensor>,
    pub cyc: Option<Tensor>,
    pub id: Option<Tensor>,
}

impl DslParts {
    pub fn sum(&self) -> Option<Tensor> {
        [&self.fake, &self.cyc, &self.id]
            .into_iter()
            .flatten()
            .fold(None, |acc: Option<Tensor>, t| Some(match acc {
                None => t.shallow_clone(),
                Some(a) => a + t,
            }))
    }
}

/// Metric terms between the source bank and the three source-like outputs.
/// Inputs are in the generator range; only the requested terms are evaluated.
pub fn dsl_loss(
    segmenter: &FrozenSegmenter,
    bank: &ReferenceBank,
    fake_s: &Tensor,
    cyc_s: &Tensor,
    id_s: &Tensor,
    terms: DslTerms,
) -> Result<DslParts> {
    let layer = bank.layer_id();
    if !segmenter.layer_names().iter().any(|l| l == layer) {
        return Err(Error::LayerMismatch {
            expected: layer.to_string(),
            actual: format!("segmenter layers {:?}", segmenter.layer_names()),
        });
    }
    let term = |on: bool, images: &Tensor| -> Result<Option<Tensor>> {
        if !on {
            return Ok(None);
        }
        let feats = extract_dsm_features(segmenter, &to_unit(images), layer)?;
        Ok(Some(dsm_loss(bank, &feats)?))
    };
    Ok(DslParts {
        fake: term(terms.fake, fake_s)?,
        cyc: term(terms.cyc, cyc_s)?,
        id: term(terms.id, id_s)?,
    })
}

/// Per-image soft Dice discrepancy `1 - 2 sum(pq) / (sum(p^2) + sum(q^2))`,
/// averaged over the batch. Inputs are `(B, H, W)` probabilities.
pub fn soft_dice_discrepancy(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    same_shape(p, q, "soft dice")?;
    const EPS: f64 = 1e-6;
    let kind = p.kind();
    let dims = [1i64, 2].as_slice();
    let num = (p * q).sum_dim_intlist(dims, false, kind) * 2.0;
    let den = p.square().sum_dim_intlist(dims, false, kind) + q.square().sum_dim_intlist(dims, false, kind);
    let ratio = (num + EPS) / (den + EPS);
    let one_minus: Tensor = 1.0 - ratio;
    Ok(one_minus.mean(kind))
}

/// Agreement of segmenter predictions on `s` with its reconstruction and identity mapping.
pub fn seg_consistency_loss(segmenter: &FrozenSegmenter, s: &Tensor, cyc_s: &Tensor, id_s: &Tensor) -> Result<Tensor> {
    same_shape(s, cyc_s, "segmentation consistency")?;
    same_shape(s, id_s, "segmentation consistency")?;
    let reference = tch::no_grad(|| segmenter.foreground_probability(&to_unit(s)))?;
    let on_cyc = segmenter.foreground_probability(&to_unit(cyc_s))?;
    let on_id = segmenter.foreground_probability(&to_unit(id_s))?;
    let total = soft_dice_discrepancy(&reference, &on_cyc)? + soft_dice_discrepancy(&reference, &on_id)?;
    Ok(total * 0.5)
}

/// Differentiable per-step terms before weighting.
#[derive(Debug)]
pub struct LossParts {
    pub adv: Tensor,
    pub cyc: Tensor,
    pub id: Tensor,
    pub dsl: DslParts,
    pub seg_consistency: Option<Tensor>,
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

/// Weighted generator objective for `variant` and its logged breakdown.
/// `total_d` is left at zero for the caller to fill after the discriminator step.
pub fn compose_total(variant: &dyn CycleVariant, weights: &LossWeights, parts: &LossParts) -> (Tensor, LossBreakdown) {
    let w = weights.effective_for(variant);
    let terms = variant.dsl_terms();
    let mut total = &parts.adv + &parts.cyc * w.w_cyc + &parts.id * w.w_id;
    let pick = |on: bool, t: &Option<Tensor>| if on { t.as_ref().map(scalar).unwrap_or(0.0) } else { 0.0 };
    let mut breakdown = LossBreakdown {
        adv: scalar(&parts.adv),
        cyc: scalar(&parts.cyc),
        id: scalar(&parts.id),
        dsl_fake: pick(terms.fake, &parts.dsl.fake),
        dsl_cyc: pick(terms.cyc, &parts.dsl.cyc),
        dsl_id: pick(terms.id, &parts.dsl.id),
        seg_consistency: 0.0,
        total_g: 0.0,
        total_d: 0.0,
    };
    if !terms.is_empty() {
        let active = DslParts {
            fake: parts.dsl.fake.as_ref().filter(|_| terms.fake).map(Tensor::shallow_clone),
            cyc: parts.dsl.cyc.as_ref().filter(|_| terms.cyc).map(Tensor::shallow_clone),
            id: parts.dsl.id.as_ref().filter(|_| terms.id).map(Tensor::shallow_clone),
        };
        if let Some(sum) = active.sum() {
            total = total + sum * w.w_dsl;
        }
    }
    if variant.uses_seg_consistency() {
        if let Some(seg) = &parts.seg_consistency {
            breakdown.seg_consistency = scalar(seg);
            total = total + seg * w.w_seg;
        }
    }
    breakdown.total_g = breakdown.recompose(&w);
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variants::VariantRegistry;
    use tch::{Device, Kind};

    fn full(v: f64, shape: &[i64]) -> Tensor {
        Tensor::full(shape, v, (Kind::Double, Device::Cpu))
    }

    #[test]
    fn adversarial_examples() {
        let (g, _) = adversarial_loss(&full(0.3, &[2, 1, 4, 4]), &full(1.0, &[2, 1, 4, 4])).unwrap();
        assert_eq!(g.double_value(&[]), 0.0);
        let (_, d) = adversarial_loss(&full(1.0, &[2, 1, 4, 4]), &full(0.0, &[2, 1, 4, 4])).unwrap();
        assert_eq!(d.double_value(&[]), 0.0);
        let (_, d) = adversarial_loss(&full(0.5, &[1, 1, 3, 3]), &full(0.5, &[1, 1, 3, 3])).unwrap();
        assert!((d.double_value(&[]) - 0.25).abs() < 1e-15);
        assert!(adversarial_loss(&full(0.5, &[1, 1, 3, 3]), &full(0.5, &[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn l1_examples() {
        let x = Tensor::randn([2, 3, 4, 4], (Kind::Double, Device::Cpu));
        assert_eq!(cycle_loss(&x, &x).unwrap().double_value(&[]), 0.0);
        let a = full(0.25, &[1, 3, 2, 2]);
        let b = full(0.75, &[1, 3, 2, 2]);
        assert_eq!(identity_loss(&a, &b).unwrap().double_value(&[]), 0.5);
        assert!(cycle_loss(&a, &full(0.0, &[1, 3, 2, 1])).is_err());
    }

    #[test]
    fn l1_matches_elementwise_oracle() {
        tch::manual_seed(9);
        let a = Tensor::rand([2, 3, 5, 5], (Kind::Float, Device::Cpu));
        let b = Tensor::rand([2, 3, 5, 5], (Kind::Float, Device::Cpu));
        let va: Vec<f32> = Vec::try_from(a.flatten(0, -1)).unwrap();
        let vb: Vec<f32> = Vec::try_from(b.flatten(0, -1)).unwrap();
        let oracle = va.iter().zip(&vb).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>() / va.len() as f64;
        assert!((cycle_loss(&a, &b).unwrap().double_value(&[]) - oracle).abs() <= 1e-7);
    }

    #[test]
    fn soft_dice_limits() {
        let p = Tensor::from_slice(&[1.0f64, 1.0, 0.0, 0.0]).view([1, 2, 2]);
        let q = Tensor::from_slice(&[0.0f64, 0.0, 1.0, 1.0]).view([1, 2, 2]);
        assert_eq!(soft_dice_discrepancy(&p, &p).unwrap().double_value(&[]), 0.0);
        assert!((soft_dice_discrepancy(&p, &q).unwrap().double_value(&[]) - 1.0).abs() < 1e-6);
        let soft = Tensor::from_slice(&[0.3f64, 0.7, 0.2, 0.9]).view([1, 2, 2]);
        assert_eq!(soft_dice_discrepancy(&soft, &soft).unwrap().double_value(&[]), 0.0);
    }

    #[test]
    fn soft_dice_matches_reference_implementation() {
        tch::manual_seed(4);
        let p = Tensor::rand([3, 6, 6], (Kind::Double, Device::Cpu));
        let q = Tensor::rand([3, 6, 6], (Kind::Double, Device::Cpu));
        let vp: Vec<f64> = Vec::try_from(p.flatten(0, -1)).unwrap();
        let vq: Vec<f64> = Vec::try_from(q.flatten(0, -1)).unwrap();
        let mut acc = 0.0;
        for (cp, cq) in vp.chunks(36).zip(vq.chunks(36)) {
            let num: f64 = 2.0 * cp.iter().zip(cq).map(|(a, b)| a * b).sum::<f64>();
            let den: f64 = cp.iter().map(|a| a * a).sum::<f64>() + cq.iter().map(|b| b * b).sum::<f64>();
            acc += 1.0 - (num + 1e-6) / (den + 1e-6);
        }
        let oracle = acc / 3.0;
        assert!((soft_dice_discrepancy(&p, &q).unwrap().double_value(&[]) - oracle).abs() <= 1e-6);
    }

    fn parts() -> LossParts {
        LossParts {
            adv: Tensor::from(0.7f64),
            cyc: Tensor::from(0.2f64),
            id: Tensor::from(0.1f64),
            dsl: DslParts {
                fake: Some(Tensor::from(0.05f64)),
                cyc: Some(Tensor::from(0.03f64)),
                id: Some(Tensor::from(0.02f64)),
            },
            seg_consistency: Some(Tensor::from(0.4f64)),
        }
    }

    #[test]
    fn baseline_total_has_only_cycle_terms() {
        let reg = VariantRegistry::with_builtins();
        let v = reg.create("baseline", &Default::default()).unwrap();
        let (total, b) = compose_total(v.as_ref(), &LossWeights::default(), &parts());
        let expected = 0.7 + 10.0 * 0.2 + 5.0 * 0.1;
        assert!((total.double_value(&[]) - expected).abs() < 1e-12);
        assert_eq!((b.dsl_fake, b.dsl_cyc, b.dsl_id, b.seg_consistency), (0.0, 0.0, 0.0, 0.0));
        assert!((b.total_g - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_dsl_weight_equals_baseline() {
        let reg = VariantRegistry::with_builtins();
        let base = reg.create("baseline", &Default::default()).unwrap();
        let dsa = reg.create("dsa", &crate::variants::VariantParams::with_segmenter("seg.ckpt")).unwrap();
        let w = LossWeights {
            w_dsl: 0.0,
            ..Default::default()
        };
        let (a, _) = compose_total(base.as_ref(), &w, &parts());
        let (b, _) = compose_total(dsa.as_ref(), &w, &parts());
        assert_eq!(a.double_value(&[]), b.double_value(&[]));
    }

    #[test]
    fn ablation_arm_keeps_only_its_terms() {
        let reg = VariantRegistry::with_builtins();
        let params = crate::variants::VariantParams::with_segmenter("seg.ckpt");
        let arm = reg.create("dsa_fake", &params).unwrap();
        let (_, b) = compose_total(arm.as_ref(), &LossWeights::default(), &parts());
        assert_eq!((b.dsl_fake, b.dsl_cyc, b.dsl_id), (0.05, 0.0, 0.0));
        let arm = reg.create("dsa_cyc_id", &params).unwrap();
        let (_, b) = compose_total(arm.as_ref(), &LossWeights::default(), &parts());
        assert_eq!((b.dsl_fake, b.dsl_cyc, b.dsl_id), (0.0, 0.03, 0.02));
    }

    #[test]
    fn recomposition_of_weighted_breakdown() {
        let reg = VariantRegistry::with_builtins();
        let v = reg.create("dsa", &crate::variants::VariantParams::with_segmenter("seg.ckpt")).unwrap();
        let w = LossWeights {
            w_dsl: 1.0,
            w_cyc: 10.0,
            w_id: 5.0,
            w_seg: 1.0,
            sigma: 0.0125,
        };
        let (total, b) = compose_total(v.as_ref(), &w, &parts());
        assert!((b.recompose(&w.effective_for(v.as_ref())) - b.total_g).abs() <= 1e-9);
        assert!((total.double_value(&[]) - b.total_g).abs() <= 1e-9);
        assert_eq!(b.seg_consistency, 0.0);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let w = LossWeights {
            w_id: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
