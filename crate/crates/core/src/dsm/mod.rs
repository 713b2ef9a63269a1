//! Domain shift metric over frozen-model feature statistics.
//!
//! Each image contributes one spatial-mean activation per filter of a chosen
//! layer. For every filter the two image sets give two empirical
//! distributions; the metric is the mean over filters of their 1-Wasserstein
//! distances. The same quantity is available as a host-side metric ([`dsm`])
//! and as a differentiable loss ([`dsm_loss`]).

mod bank;
mod wasserstein;

pub use bank::{ReferenceBank, DEFAULT_MIN_BANK_SIZE};
pub use wasserstein::{
    wasserstein_1d, wasserstein_1d_grad, wasserstein_1d_tensor, wasserstein_rows,
    QuantileCoupling,
};

use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::nets::FrozenSegmenter;

/// Per-image, per-filter spatial activation means for one layer.
#[derive(Debug)]
pub struct FeatureMeanBatch {
    layer_id: String,
    /// `(n_images, k_filters)`; keeps the autograd graph of the activations.
    values: Tensor,
}

impl FeatureMeanBatch {
    pub fn new(layer_id: impl Into<String>, values: Tensor) -> Result<Self> {
        let (n, k) = values.size2()?;
        if n < 1 || k < 1 {
            return Err(Error::Shape(format!("feature batch must be non-empty, got ({n}, {k})")));
        }
        check_finite_rows(&values)?;
        Ok(Self {
            layer_id: layer_id.into(),
            values,
        })
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_images(&self) -> usize {
        self.values.size()[0] as usize
    }

    pub fn n_filters(&self) -> usize {
        self.values.size()[1] as usize
    }

    /// Row-major copy of the values as `f64`.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let flat: Vec<f64> = Vec::try_from(self.values.detach().to_kind(Kind::Double).flatten(0, -1))
            .expect("feature tensor is numeric");
        flat.chunks(self.n_filters()).map(<[f64]>::to_vec).collect()
    }
}

/// Sample sets that can serve as one side of the metric.
pub trait FeatureSamples {
    fn layer_id(&self) -> &str;
    fn n_filters(&self) -> usize;
    /// Column `j` holds every sample of filter `j`.
    fn columns(&self) -> Vec<Vec<f64>>;
}

impl FeatureSamples for FeatureMeanBatch {
    fn layer_id(&self) -> &str {
        &self.layer_id
    }

    fn n_filters(&self) -> usize {
        FeatureMeanBatch::n_filters(self)
    }

    fn columns(&self) -> Vec<Vec<f64>> {
        transpose(&self.to_rows(), self.n_filters())
    }
}

impl FeatureSamples for ReferenceBank {
    fn layer_id(&self) -> &str {
        ReferenceBank::layer_id(self)
    }

    fn n_filters(&self) -> usize {
        self.k_filters()
    }

    fn columns(&self) -> Vec<Vec<f64>> {
        let k = self.k_filters();
        let mut cols = vec![Vec::with_capacity(self.n_ref()); k];
        for row in self.samples().chunks(k) {
            for (col, v) in cols.iter_mut().zip(row) {
                col.push(f64::from(*v));
            }
        }
        cols
    }
}

fn transpose(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|j| rows.iter().map(|r| r[j]).collect()).collect()
}

/// Metric value together with the per-filter distances it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmValue {
    pub value: f64,
    pub per_filter: Vec<f64>,
}

impl DsmValue {
    pub fn from_per_filter(per_filter: Vec<f64>) -> Self {
        let value = per_filter.iter().sum::<f64>() / per_filter.len() as f64;
        Self { value, per_filter }
    }
}

fn check_compatible(a: &dyn FeatureSamples, b: &dyn FeatureSamples) -> Result<()> {
    if a.layer_id() != b.layer_id() {
        return Err(Error::LayerMismatch {
            expected: a.layer_id().to_string(),
            actual: b.layer_id().to_string(),
        });
    }
    if a.n_filters() != b.n_filters() {
        return Err(Error::FilterMismatch {
            left: a.n_filters(),
            right: b.n_filters(),
        });
    }
    Ok(())
}

/// Host-side metric between two sample sets of the same layer.
pub fn dsm(a: &dyn FeatureSamples, b: &dyn FeatureSamples) -> Result<DsmValue> {
    check_compatible(a, b)?;
    let per_filter = a
        .columns()
        .iter()
        .zip(b.columns().iter())
        .map(|(ca, cb)| wasserstein_1d(ca, cb))
        .collect::<Result<Vec<_>>>()?;
    Ok(DsmValue::from_per_filter(per_filter))
}

/// Differentiable metric between a frozen bank and a generated feature batch.
/// Gradients reach the batch only.
pub fn dsm_loss(bank: &ReferenceBank, batch: &FeatureMeanBatch) -> Result<Tensor> {
    check_compatible(bank, batch)?;
    let values = batch.values();
    let reference = bank.columns_tensor(values.kind(), values.device());
    let rows = wasserstein_rows(&reference, &values.tr())?;
    Ok(rows.mean(values.kind()))
}

/// Differentiable metric between two feature batches; gradients reach both.
pub fn dsm_loss_pair(a: &FeatureMeanBatch, b: &FeatureMeanBatch) -> Result<Tensor> {
    check_compatible(a, b)?;
    let rows = wasserstein_rows(&a.values().tr(), &b.values().tr())?;
    Ok(rows.mean(a.values().kind()))
}

fn check_finite_rows(values: &Tensor) -> Result<()> {
    let finite = values.detach().isfinite();
    if finite.all().int64_value(&[]) == 1 {
        return Ok(());
    }
    let flat = finite.flatten(1, -1);
    let cols = flat.size()[1];
    let bad: Vec<i64> = Vec::try_from(flat.logical_not().flatten(0, -1).nonzero().flatten(0, -1))
        .unwrap_or_default();
    let first = bad.first().copied().unwrap_or(0);
    Err(Error::NonFiniteActivation {
        image: (first / cols) as usize,
        filter: (first % cols) as usize,
    })
}

/// Spatial mean of every activation map: `(n, k, h, w) -> (n, k)`.
pub fn filter_means(layer_id: &str, activations: &Tensor) -> Result<FeatureMeanBatch> {
    let dims = activations.size();
    if dims.len() != 4 {
        return Err(Error::Shape(format!("activations must be (n, k, h, w), got {dims:?}")));
    }
    if dims[2] < 1 || dims[3] < 1 {
        return Err(Error::Shape(format!("empty activation maps {dims:?}")));
    }
    let finite = activations.detach().isfinite();
    if finite.all().int64_value(&[]) == 0 {
        let per_image = finite.logical_not().flatten(1, -1).any_dim(1, false);
        let image = Vec::<bool>::try_from(per_image)
            .ok()
            .and_then(|v| v.iter().position(|b| *b))
            .unwrap_or(0);
        let per_filter = activations.detach().get(image as i64).isfinite().logical_not().flatten(1, -1).any_dim(1, false);
        let filter = Vec::<bool>::try_from(per_filter)
            .ok()
            .and_then(|v| v.iter().position(|b| *b))
            .unwrap_or(0);
        return Err(Error::NonFiniteActivation { image, filter });
    }
    let means = activations.mean_dim([2i64, 3].as_slice(), false, activations.kind());
    FeatureMeanBatch::new(layer_id, means)
}

/// Runs the frozen segmenter up to `layer` and reduces the activations.
/// `images` are in `[0, 1]`; gradients reach them but never the segmenter.
pub fn extract_dsm_features(
    segmenter: &FrozenSegmenter,
    images: &Tensor,
    layer: &str,
) -> Result<FeatureMeanBatch> {
    let activations = segmenter.capture(images, layer)?;
    filter_means(layer, &activations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]]) -> FeatureMeanBatch {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureMeanBatch::new("l", Tensor::from_slice(&flat).view([rows.len() as i64, k as i64]))
            .unwrap()
    }

    #[test]
    fn filter_means_examples() {
        let ones = Tensor::ones([1, 1, 2, 2], (Kind::Double, tch::Device::Cpu));
        assert_eq!(filter_means("l", &ones).unwrap().to_rows(), vec![vec![1.0]]);
        let map = Tensor::from_slice(&[1.0f64, 2.0, 3.0, 4.0]).view([1, 1, 2, 2]);
        assert_eq!(filter_means("l", &map).unwrap().to_rows(), vec![vec![2.5]]);
        let zeros = Tensor::zeros([3, 4, 5, 2], (Kind::Float, tch::Device::Cpu));
        let rows = filter_means("l", &zeros).unwrap().to_rows();
        assert!(rows.iter().flatten().all(|v| *v == 0.0));
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn filter_means_names_offending_image() {
        let mut acts = Tensor::zeros([4, 2, 3, 3], (Kind::Float, tch::Device::Cpu));
        let _ = acts.get(2).get(1).get(0).get(1).fill_(f64::NAN);
        let _ = &mut acts;
        match filter_means("l", &acts) {
            Err(Error::NonFiniteActivation { image, filter }) => {
                assert_eq!(image, 2);
                assert_eq!(filter, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dsm_examples() {
        let a = batch(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, -1.0]]);
        let same = dsm(&a, &a).unwrap();
        assert_eq!(same.value, 0.0);
        assert!(same.per_filter.iter().all(|v| *v == 0.0));

        let single_a = batch(&[&[0.0], &[1.0]]);
        let single_b = batch(&[&[1.0], &[2.0], &[5.0]]);
        let v = dsm(&single_a, &single_b).unwrap();
        let w = wasserstein_1d(&[0.0, 1.0], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(v.value, w);

        let value = DsmValue::from_per_filter(vec![0.2, 0.4]);
        assert!((value.value - 0.3).abs() < 1e-15);
    }

    #[test]
    fn dsm_rejects_mismatch() {
        let a = batch(&[&[0.0, 1.0]]);
        let b = batch(&[&[0.0]]);
        assert!(matches!(dsm(&a, &b), Err(Error::FilterMismatch { left: 2, right: 1 })));
        let c = FeatureMeanBatch::new("other", Tensor::from_slice(&[1.0f64, 2.0]).view([1, 2])).unwrap();
        assert!(matches!(dsm(&a, &c), Err(Error::LayerMismatch { .. })));
    }

    #[test]
    fn loss_path_matches_metric_path() {
        let a = batch(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, -1.0], &[0.5, 0.5]]);
        let b = batch(&[&[1.0, 0.0], &[2.5, 3.5]]);
        let host = dsm(&a, &b).unwrap().value;
        let dev = dsm_loss_pair(&a, &b).unwrap().double_value(&[]);
        assert!((host - dev).abs() < 1e-12);
    }
}
