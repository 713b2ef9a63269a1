use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

use super::archive::{named_variables, parameter_checksum, restore_variables, TensorArchive};
use crate::error::{Error, Result};

pub const BOTTLENECK: &str = "bottleneck";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub base_filters: usize,
    /// Number of encoder levels, each followed by 2x pooling.
    pub depth: usize,
    pub n_classes: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_filters: 16,
            depth: 4,
            n_classes: 2,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("segmenter depth must be >= 2, got {}", self.depth)));
        }
        if self.base_filters < 4 {
            return Err(Error::Config(format!(
                "segmenter base_filters must be >= 4, got {}",
                self.base_filters
            )));
        }
        if self.in_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config("segmenter needs >= 1 input channel and >= 2 classes".into()));
        }
        Ok(())
    }

    pub fn filters_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn bottleneck_filters(&self) -> usize {
        self.filters_at(self.depth - 1)
    }

    /// Stable identifiers of every block, in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.depth).map(|i| format!("enc{i}")).collect();
        names.push(BOTTLENECK.to_string());
        names.extend((0..self.depth).rev().map(|i| format!("dec{i}")));
        names.push("head".to_string());
        names
    }
}

#[derive(Debug)]
struct ConvBlock {
    first: nn::Conv2D,
    second: nn::Conv2D,
}

impl ConvBlock {
    fn new(p: nn::Path, c_in: usize, c_out: usize) -> Self {
        let cfg = nn::ConvConfig {
            padding: 1,
            ..Default::default()
        };
        Self {
            first: nn::conv2d(&p / "conv1", c_in as i64, c_out as i64, 3, cfg),
            second: nn::conv2d(&p / "conv2", c_out as i64, c_out as i64, 3, cfg),
        }
    }
}

impl Module for ConvBlock {
    fn forward(&self, xs: &Tensor) -> Tensor {
        xs.apply(&self.first).relu().apply(&self.second).relu()
    }
}

/// Encoder-decoder segmenter with skip connections.
#[derive(Debug)]
pub struct Segmenter {
    cfg: SegmenterConfig,
    vs: nn::VarStore,
    encoders: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    decoders: Vec<ConvBlock>,
    head: nn::Conv2D,
}

pub fn build_segmenter(cfg: &SegmenterConfig, device: Device) -> Result<Segmenter> {
    Segmenter::new(cfg.clone(), device)
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig, device: Device) -> Result<Self> {
        cfg.validate()?;
        let vs = nn::VarStore::new(device);
        let root = vs.root();
        let encoders = (0..cfg.depth)
            .map(|i| {
                let c_in = if i == 0 { cfg.in_channels } else { cfg.filters_at(i - 1) };
                ConvBlock::new(&root / format!("enc{i}"), c_in, cfg.filters_at(i))
            })
            .collect();
        let deep = cfg.bottleneck_filters();
        let bottleneck = ConvBlock::new(&root / BOTTLENECK, deep, deep);
        // decoders[i] serves level i.
        let decoders = (0..cfg.depth)
            .map(|i| {
                let below = if i + 1 == cfg.depth { deep } else { cfg.filters_at(i + 1) };
                ConvBlock::new(&root / format!("dec{i}"), below + cfg.filters_at(i), cfg.filters_at(i))
            })
            .collect();
        let head = nn::conv2d(
            &root / "head",
            cfg.base_filters as i64,
            cfg.n_classes as i64,
            1,
            Default::default(),
        );
        Ok(Self {
            cfg,
            vs,
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn parameter_count(&self) -> usize {
        self.vs.variables().values().map(|t| t.numel()).sum()
    }

    fn check_input(&self, xs: &Tensor) -> Result<()> {
        let dims = xs.size();
        if dims.len() != 4 || dims[1] as usize != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "segmenter expects (B, {}, H, W), got {dims:?}",
                self.cfg.in_channels
            )));
        }
        let unit = 1i64 << self.cfg.depth;
        if dims[2] % unit != 0 || dims[3] % unit != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not divisible by 2^depth = {unit}",
                dims[2], dims[3]
            )));
        }
        Ok(())
    }

    fn check_layer(&self, layer: &str) -> Result<()> {
        let names = self.cfg.layer_names();
        if names.iter().any(|n| n == layer) {
            Ok(())
        } else {
            Err(Error::UnknownLayer {
                name: layer.to_string(),
                valid: names,
            })
        }
    }

    /// Runs the forward pass, calling `visit` on each named block output.
    /// Stops as soon as `visit` returns `false`.
    fn walk(&self, xs: &Tensor, mut visit: impl FnMut(&str, &Tensor) -> bool) -> Result<Option<Tensor>> {
        self.check_input(xs)?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = xs.shallow_clone();
        for (i, enc) in self.encoders.iter().enumerate() {
            h = enc.forward(&h);
            if !visit(&format!("enc{i}"), &h) {
                return Ok(None);
            }
            skips.push(h.shallow_clone());
            h = h.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false);
        }
        h = self.bottleneck.forward(&h);
        if !visit(BOTTLENECK, &h) {
            return Ok(None);
        }
        for i in (0..self.cfg.depth).rev() {
            let (_, _, hh, ww) = h.size4()?;
            h = h.upsample_nearest2d([hh * 2, ww * 2], None, None);
            h = Tensor::cat(&[&h, &skips[i]], 1);
            h = self.decoders[i].forward(&h);
            if !visit(&format!("dec{i}"), &h) {
                return Ok(None);
            }
        }
        let logits = h.apply(&self.head);
        visit("head", &logits);
        Ok(Some(logits))
    }

    /// Per-pixel class scores `(B, n_classes, H, W)`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.walk(xs, |_, _| true)?.expect("full pass returns logits"))
    }

    /// Activation of `layer`, stopping the forward pass there.
    pub fn capture(&self, xs: &Tensor, layer: &str) -> Result<Tensor> {
        self.check_layer(layer)?;
        let mut found = None;
        self.walk(xs, |name, t| {
            if name == layer {
                found = Some(t.shallow_clone());
                false
            } else {
                true
            }
        })?;
        found.ok_or_else(|| Error::UnknownLayer {
            name: layer.to_string(),
            valid: self.cfg.layer_names(),
        })
    }

    /// Every named block output of a full pass, in forward order.
    pub fn trace(&self, xs: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        self.walk(xs, |name, t| {
            out.push((name.to_string(), t.shallow_clone()));
            true
        })?;
        Ok(out)
    }

    pub fn checksum(&self) -> String {
        parameter_checksum(&self.vs)
    }

    pub fn freeze(mut self) -> FrozenSegmenter {
        self.vs.freeze();
        FrozenSegmenter { inner: self }
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive::new(serde_json::json!({
            "kind": "segmenter",
            "config": serde_json::to_value(&self.cfg)?,
        }));
        archive.insert_prefixed("", &named_variables(&self.vs));
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive, device: Device) -> Result<Self> {
        if archive.header["kind"] != "segmenter" {
            return Err(Error::artifact("<archive>", "not a segmenter checkpoint"));
        }
        let cfg: SegmenterConfig = serde_json::from_value(archive.header["config"].clone())?;
        let seg = Self::new(cfg, device)?;
        restore_variables(&seg.vs, archive, "")?;
        Ok(seg)
    }
}

/// A segmenter whose parameters no longer take gradients.
#[derive(Debug)]
pub struct FrozenSegmenter {
    inner: Segmenter,
}

impl FrozenSegmenter {
    pub fn config(&self) -> &SegmenterConfig {
        &self.inner.cfg
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.inner.cfg.layer_names()
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.inner.forward(xs)
    }

    /// Foreground probability `(B, H, W)` from the two-class softmax.
    pub fn foreground_probability(&self, xs: &Tensor) -> Result<Tensor> {
        let logits = self.inner.forward(xs)?;
        Ok(logits.softmax(1, logits.kind()).select(1, 1))
    }

    pub fn capture(&self, xs: &Tensor, layer: &str) -> Result<Tensor> {
        self.inner.capture(xs, layer)
    }

    pub fn trace(&self, xs: &Tensor) -> Result<Vec<(String, Tensor)>> {
        self.inner.trace(xs)
    }

    pub fn checksum(&self) -> String {
        self.inner.checksum()
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.vs.variables().values().all(|t| !t.requires_grad())
    }

    /// The parameter tensors, for gradient inspection.
    pub fn parameters(&self) -> Vec<Tensor> {
        named_variables(&self.inner.vs).into_values().collect()
    }

    pub fn kind(&self) -> Kind {
        self.inner.vs.variables().values().next().map(|t| t.kind()).unwrap_or(Kind::Float)
    }

    pub fn device(&self) -> Device {
        self.inner.vs.device()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.inner.to_archive()?.save(path)
    }

    pub fn load(path: &Path, device: Device) -> Result<Self> {
        Ok(Segmenter::from_archive(&TensorArchive::load(path)?, device)?.freeze())
    }

    /// Converts parameters to double precision, for gradient checks.
    pub fn into_double(mut self) -> Self {
        self.inner.vs.double();
        self
    }
}
