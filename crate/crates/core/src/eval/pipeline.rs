use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::scores::{object_f1, pixel_f1};
use crate::dsm::{dsm, extract_dsm_features, FeatureMeanBatch};
use crate::error::{Error, Result};
use crate::nets::{to_signed, FrozenSegmenter, TranslatorBundle};
use crate::rng::gaussian_tensor;

const CHUNK: i64 = 32;
pub const THRESHOLD: f64 = 0.5;
pub const IOU_THRESHOLD: f64 = 0.5;

/// Maps target-stain images in `[0, 1]` to source-stain images in `[0, 1]`.
pub trait TargetToSource {
    fn to_source(&self, target_unit: &Tensor) -> Result<Tensor>;
}

impl TargetToSource for TranslatorBundle {
    fn to_source(&self, target_unit: &Tensor) -> Result<Tensor> {
        TranslatorBundle::to_source(self, target_unit)
    }
}

/// Leaves images untouched; segments the target stain directly.
#[derive(Debug, Clone, Copy)]
pub struct IdentityTranslation;

impl TargetToSource for IdentityTranslation {
    fn to_source(&self, target_unit: &Tensor) -> Result<Tensor> {
        Ok(target_unit.shallow_clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub scene_id: u64,
    pub variant: String,
    pub seed: u64,
    pub pixel_f1: f64,
    pub object_f1: f64,
    pub dsm_to_source: f64,
}

/// Images and ground truth for one evaluation.
#[derive(Debug)]
pub struct EvalSet<'a> {
    /// `(N, 3, H, W)` in `[0, 1]`.
    pub images: &'a Tensor,
    /// `(N, H, W)` in `{0, 1}`.
    pub masks: &'a Tensor,
    pub scene_ids: &'a [u64],
}

fn chunked_features(segmenter: &FrozenSegmenter, images: &Tensor, layer: &str) -> Result<FeatureMeanBatch> {
    let n = images.size()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK as usize) {
        let len = CHUNK.min(n - start);
        parts.push(extract_dsm_features(segmenter, &images.narrow(0, start, len), layer)?.values().shallow_clone());
    }
    FeatureMeanBatch::new(layer, Tensor::cat(&parts, 0))
}

/// Hard masks at the fixed 0.5 threshold, `(N, H, W)` uint8.
pub fn segment(segmenter: &FrozenSegmenter, images: &Tensor) -> Result<Tensor> {
    Ok(segmenter.foreground_probability(images)?.gt(THRESHOLD).to_kind(Kind::Uint8))
}

/// Translate every target patch to the source stain, segment it at 0.5 and
/// score it against the shared mask. The metric to the source is computed on
/// the full translated set against the full source reference set.
pub fn mds1_evaluate(
    translator: &dyn TargetToSource,
    segmenter: &FrozenSegmenter,
    target: &EvalSet,
    source_reference: &Tensor,
    layer: &str,
    variant: &str,
    seed: u64,
) -> Result<Vec<PatchRow>> {
    let n = target.images.size()[0];
    if n == 0 || target.scene_ids.is_empty() {
        return Err(Error::EmptySamples("test set"));
    }
    if target.scene_ids.len() as i64 != n || target.masks.size()[0] != n {
        return Err(Error::Shape("images, masks and scene ids disagree in length".into()));
    }
    let _guard = tch::no_grad_guard();
    let (h, w) = (target.images.size()[2] as usize, target.images.size()[3] as usize);
    let mut translated = Vec::new();
    let mut scores = Vec::with_capacity(n as usize);
    for start in (0..n).step_by(CHUNK as usize) {
        let len = CHUNK.min(n - start);
        let out = translator.to_source(&target.images.narrow(0, start, len))?;
        let pred = segment(segmenter, &out)?;
        for i in 0..len {
            let p = Vec::<u8>::try_from(pred.get(i).flatten(0, -1))?;
            let t = Vec::<u8>::try_from(target.masks.get(start + i).flatten(0, -1).to_kind(Kind::Uint8))?;
            scores.push((pixel_f1(&p, &t)?, object_f1(&p, &t, h, w, IOU_THRESHOLD)?));
        }
        translated.push(out);
    }
    let translated = Tensor::cat(&translated, 0);
    let value = dsm(
        &chunked_features(segmenter, &translated, layer)?,
        &chunked_features(segmenter, source_reference, layer)?,
    )?
    .value;
    Ok(target
        .scene_ids
        .iter()
        .zip(scores)
        .map(|(id, (pf, of))| PatchRow {
            scene_id: *id,
            variant: variant.to_string(),
            seed,
            pixel_f1: pf,
            object_f1: of,
            dsm_to_source: value,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub e1: f64,
    pub e2: f64,
    pub factor: f64,
}

/// Sensitivity of the target cycle to perturbing its intermediate translation.
///
/// `E1` is the mean absolute reconstruction error of `t -> source -> t`;
/// `E2` is the same with `N(0, sigma^2)` noise (generator units) added to
/// the visible channels of the intermediate image. Returns `E2 / E1`.
pub fn noise_probe(bundle: &TranslatorBundle, target_unit: &Tensor, sigma: f64, seed: u64) -> Result<ProbeResult> {
    let n = target_unit.size()[0];
    if n == 0 {
        return Err(Error::EmptySamples("test set"));
    }
    let _guard = tch::no_grad_guard();
    let mut rng = crate::rng::stream(seed, "noise_probe");
    let c = bundle.channels() as i64;
    let (mut e1, mut e2, mut count) = (0.0, 0.0, 0.0);
    for start in (0..n).step_by(CHUNK as usize) {
        let len = CHUNK.min(n - start);
        let t = to_signed(&target_unit.narrow(0, start, len).to_kind(bundle.kind()));
        let mid = bundle.g_ts.forward(&bundle.with_carrier(&t))?;
        let noise = gaussian_tensor(&mut rng, &[len, c, t.size()[2], t.size()[3]], sigma, mid.kind(), mid.device());
        let noisy = if bundle.carrier_channels == 0 {
            &mid + &noise
        } else {
            Tensor::cat(&[mid.narrow(1, 0, c) + &noise, mid.narrow(1, c, bundle.carrier_channels as i64)], 1)
        };
        let clean = bundle.visible(&bundle.g_st.forward(&mid)?);
        let perturbed = bundle.visible(&bundle.g_st.forward(&noisy)?);
        e1 += (&t - clean).abs().sum(Kind::Double).double_value(&[]);
        e2 += (&t - perturbed).abs().sum(Kind::Double).double_value(&[]);
        count += t.numel() as f64;
    }
    let (e1, e2) = (e1 / count, e2 / count);
    Ok(ProbeResult { e1, e2, factor: e2 / e1 })
}
