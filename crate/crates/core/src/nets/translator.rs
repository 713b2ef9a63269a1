use serde::{Deserialize, Serialize};
use tch::nn::{self, Init, Module};
use tch::{Device, Kind, Tensor};

use super::archive::{named_variables, restore_variables, TensorArchive};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    /// Visible image channels.
    pub channels: usize,
    pub base_filters: usize,
    pub n_downsampling: usize,
    pub n_res_blocks: usize,
    pub disc_base_filters: usize,
    /// Strided layers in the patch discriminator.
    pub disc_layers: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_filters: 32,
            n_downsampling: 2,
            n_res_blocks: 4,
            disc_base_filters: 32,
            disc_layers: 2,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_filters == 0 || self.disc_base_filters == 0 {
            return Err(Error::Config("translator channel counts must be positive".into()));
        }
        if self.disc_layers == 0 {
            return Err(Error::Config("discriminator needs at least one strided layer".into()));
        }
        Ok(())
    }
}

fn conv_cfg(stride: i64, padding: i64) -> nn::ConvConfig {
    nn::ConvConfig {
        stride,
        padding,
        ws_init: Init::Randn {
            mean: 0.0,
            stdev: 0.02,
        },
        bs_init: Init::Const(0.0),
        ..Default::default()
    }
}

fn instance_norm(xs: &Tensor) -> Tensor {
    Tensor::instance_norm(xs, None::<Tensor>, None::<Tensor>, None::<Tensor>, None::<Tensor>, true, 0.1, 1e-5, false)
}

#[derive(Debug)]
struct ResBlock {
    first: nn::Conv2D,
    second: nn::Conv2D,
}

impl Module for ResBlock {
    fn forward(&self, xs: &Tensor) -> Tensor {
        let h = instance_norm(&xs.reflection_pad2d([1, 1, 1, 1]).apply(&self.first)).relu();
        let h = instance_norm(&h.reflection_pad2d([1, 1, 1, 1]).apply(&self.second));
        xs + h
    }
}

/// Residual encoder-decoder generator with a `tanh` output in `[-1, 1]`.
#[derive(Debug)]
pub struct Generator {
    in_channels: usize,
    out_channels: usize,
    n_down: usize,
    stem: nn::Conv2D,
    down: Vec<nn::Conv2D>,
    blocks: Vec<ResBlock>,
    up: Vec<nn::ConvTranspose2D>,
    out: nn::Conv2D,
}

impl Generator {
    pub fn new(p: nn::Path, cfg: &TranslatorConfig, in_channels: usize, out_channels: usize) -> Self {
        let nf = cfg.base_filters as i64;
        let stem = nn::conv2d(&p / "stem", in_channels as i64, nf, 7, conv_cfg(1, 0));
        let down = (0..cfg.n_downsampling)
            .map(|i| nn::conv2d(&p / format!("down{i}"), nf << i, nf << (i + 1), 3, conv_cfg(2, 1)))
            .collect();
        let deep = nf << cfg.n_downsampling;
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                let b = &p / format!("res{i}");
                ResBlock {
                    first: nn::conv2d(&b / "conv1", deep, deep, 3, conv_cfg(1, 0)),
                    second: nn::conv2d(&b / "conv2", deep, deep, 3, conv_cfg(1, 0)),
                }
            })
            .collect();
        let up = (0..cfg.n_downsampling)
            .rev()
            .map(|i| {
                let c = nn::ConvTransposeConfig {
                    stride: 2,
                    padding: 1,
                    output_padding: 1,
                    ws_init: Init::Randn {
                        mean: 0.0,
                        stdev: 0.02,
                    },
                    bs_init: Init::Const(0.0),
                    ..Default::default()
                };
                nn::conv_transpose2d(&p / format!("up{i}"), nf << (i + 1), nf << i, 3, c)
            })
            .collect();
        let out = nn::conv2d(&p / "out", nf, out_channels as i64, 7, conv_cfg(1, 0));
        Self {
            in_channels,
            out_channels,
            n_down: cfg.n_downsampling,
            stem,
            down,
            blocks,
            up,
            out,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let dims = xs.size();
        if dims.len() != 4 || dims[1] as usize != self.in_channels {
            return Err(Error::Shape(format!(
                "generator expects (B, {}, H, W), got {dims:?}",
                self.in_channels
            )));
        }
        let unit = 1i64 << self.n_down;
        if dims[2] % unit != 0 || dims[3] % unit != 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not divisible by {unit}",
                dims[2], dims[3]
            )));
        }
        let mut h = instance_norm(&xs.reflection_pad2d([3, 3, 3, 3]).apply(&self.stem)).relu();
        for d in &self.down {
            h = instance_norm(&h.apply(d)).relu();
        }
        for b in &self.blocks {
            h = b.forward(&h);
        }
        for u in &self.up {
            h = instance_norm(&h.apply(u)).relu();
        }
        Ok(h.reflection_pad2d([3, 3, 3, 3]).apply(&self.out).tanh())
    }
}

/// Patch discriminator emitting a spatial map of realness scores.
#[derive(Debug)]
pub struct Discriminator {
    in_channels: usize,
    layers: Vec<nn::Conv2D>,
}

impl Discriminator {
    pub fn new(p: nn::Path, cfg: &TranslatorConfig, in_channels: usize) -> Self {
        let nf = cfg.disc_base_filters as i64;
        let mult = |n: usize| nf * (1i64 << n.min(3));
        let mut layers = vec![nn::conv2d(&p / "conv0", in_channels as i64, nf, 4, conv_cfg(2, 1))];
        for n in 1..cfg.disc_layers {
            layers.push(nn::conv2d(&p / format!("conv{n}"), mult(n - 1), mult(n), 4, conv_cfg(2, 1)));
        }
        let n = cfg.disc_layers;
        layers.push(nn::conv2d(&p / format!("conv{n}"), mult(n - 1), mult(n), 4, conv_cfg(1, 1)));
        layers.push(nn::conv2d(&p / "score", mult(n), 1, 4, conv_cfg(1, 1)));
        Self { in_channels, layers }
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let dims = xs.size();
        if dims.len() != 4 || dims[1] as usize != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects (B, {}, H, W), got {dims:?}",
                self.in_channels
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = xs.shallow_clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.apply(layer);
            if i == last {
                break;
            }
            if i > 0 {
                h = instance_norm(&h);
            }
            h = leaky_relu(&h);
        }
        Ok(h)
    }
}

fn leaky_relu(xs: &Tensor) -> Tensor {
    xs.maximum(&(xs * 0.2))
}

/// The four networks of a cycle translator plus the carrier channel count.
#[derive(Debug)]
pub struct TranslatorBundle {
    pub cfg: TranslatorConfig,
    pub variant: String,
    /// Extra generator channels used as a hidden reconstruction carrier.
    pub carrier_channels: usize,
    pub generators: nn::VarStore,
    pub discriminators: nn::VarStore,
    pub g_st: Generator,
    pub g_ts: Generator,
    pub d_s: Discriminator,
    pub d_t: Discriminator,
}

pub fn build_translator(
    variant: &str,
    carrier_channels: usize,
    cfg: &TranslatorConfig,
    device: Device,
) -> Result<TranslatorBundle> {
    TranslatorBundle::new(variant, carrier_channels, cfg.clone(), device)
}

impl TranslatorBundle {
    pub fn new(variant: &str, carrier_channels: usize, cfg: TranslatorConfig, device: Device) -> Result<Self> {
        cfg.validate()?;
        let generators = nn::VarStore::new(device);
        let discriminators = nn::VarStore::new(device);
        let full = cfg.channels + carrier_channels;
        let g_st = Generator::new(generators.root() / "g_st", &cfg, full, full);
        let g_ts = Generator::new(generators.root() / "g_ts", &cfg, full, full);
        let d_s = Discriminator::new(discriminators.root() / "d_s", &cfg, cfg.channels);
        let d_t = Discriminator::new(discriminators.root() / "d_t", &cfg, cfg.channels);
        Ok(Self {
            cfg,
            variant: variant.to_string(),
            carrier_channels,
            generators,
            discriminators,
            g_st,
            g_ts,
            d_s,
            d_t,
        })
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    /// Appends zero carrier channels to a real `C`-channel image.
    pub fn with_carrier(&self, xs: &Tensor) -> Tensor {
        if self.carrier_channels == 0 {
            return xs.shallow_clone();
        }
        let (b, _, h, w) = xs.size4().expect("4-d image batch");
        let zeros = Tensor::zeros([b, self.carrier_channels as i64, h, w], (xs.kind(), xs.device()));
        Tensor::cat(&[xs, &zeros], 1)
    }

    /// First `C` channels of a generator output.
    pub fn visible(&self, xs: &Tensor) -> Tensor {
        if self.carrier_channels == 0 {
            xs.shallow_clone()
        } else {
            xs.narrow(1, 0, self.cfg.channels as i64)
        }
    }

    /// Target-to-source translation of `[0, 1]` images, visible channels only.
    pub fn to_source(&self, target_unit: &Tensor) -> Result<Tensor> {
        let out = self.g_ts.forward(&self.with_carrier(&to_signed(target_unit)))?;
        Ok(to_unit(&self.visible(&out)))
    }

    /// Source-to-target translation of `[0, 1]` images, visible channels only.
    pub fn to_target(&self, source_unit: &Tensor) -> Result<Tensor> {
        let out = self.g_st.forward(&self.with_carrier(&to_signed(source_unit)))?;
        Ok(to_unit(&self.visible(&out)))
    }

    pub fn generator_parameters(&self) -> Vec<Tensor> {
        named_variables(&self.generators).into_values().collect()
    }

    pub fn discriminator_parameters(&self) -> Vec<Tensor> {
        named_variables(&self.discriminators).into_values().collect()
    }

    pub fn parameter_counts(&self) -> (usize, usize) {
        let count = |vs: &nn::VarStore| vs.variables().values().map(|t| t.numel()).sum();
        (count(&self.generators), count(&self.discriminators))
    }

    pub fn double(&mut self) {
        self.generators.double();
        self.discriminators.double();
    }

    pub fn kind(&self) -> Kind {
        self.generators.variables().values().next().map(|t| t.kind()).unwrap_or(Kind::Float)
    }

    pub fn write_into(&self, archive: &mut TensorArchive) {
        archive.insert_prefixed("gen/", &named_variables(&self.generators));
        archive.insert_prefixed("disc/", &named_variables(&self.discriminators));
    }

    pub fn restore_from(&self, archive: &TensorArchive) -> Result<()> {
        restore_variables(&self.generators, archive, "gen/")?;
        restore_variables(&self.discriminators, archive, "disc/")
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({
            "variant": self.variant,
            "carrier_channels": self.carrier_channels,
            "translator": self.cfg,
        })
    }

    pub fn from_archive(archive: &TensorArchive, device: Device) -> Result<Self> {
        let bundle = &archive.header["bundle"];
        let cfg: TranslatorConfig = serde_json::from_value(bundle["translator"].clone())?;
        let variant = bundle["variant"].as_str().unwrap_or("baseline").to_string();
        let carrier = bundle["carrier_channels"].as_u64().unwrap_or(0) as usize;
        let b = Self::new(&variant, carrier, cfg, device)?;
        b.restore_from(archive)?;
        Ok(b)
    }
}

/// `[0, 1]` image space to the generator range `[-1, 1]`.
pub fn to_signed(xs: &Tensor) -> Tensor {
    xs * 2.0 - 1.0
}

/// Generator range `[-1, 1]` to `[0, 1]` image space.
pub fn to_unit(xs: &Tensor) -> Tensor {
    (xs + 1.0) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> TranslatorConfig {
        TranslatorConfig {
            base_filters: 8,
            n_res_blocks: 1,
            disc_base_filters: 8,
            ..Default::default()
        }
    }

    #[test]
    fn baseline_shapes() {
        tch::manual_seed(0);
        let b = TranslatorBundle::new("baseline", 0, TranslatorConfig::default(), Device::Cpu).unwrap();
        let x = Tensor::rand([1, 3, 64, 64], (Kind::Float, Device::Cpu)) * 2.0 - 1.0;
        assert_eq!(b.g_st.forward(&x).unwrap().size(), vec![1, 3, 64, 64]);
        let scores = b.d_s.forward(&x).unwrap();
        let dims = scores.size();
        assert_eq!(dims[1], 1);
        assert!(dims[2] * dims[3] > 1, "{dims:?}");
    }

    #[test]
    fn carrier_channels_extend_generators_only() {
        tch::manual_seed(0);
        let b = TranslatorBundle::new("extra_channels", 1, desk(), Device::Cpu).unwrap();
        let x = Tensor::rand([2, 3, 32, 32], (Kind::Float, Device::Cpu));
        let full = b.g_st.forward(&b.with_carrier(&to_signed(&x))).unwrap();
        assert_eq!(full.size(), vec![2, 4, 32, 32]);
        assert_eq!(b.visible(&full).size(), vec![2, 3, 32, 32]);
        assert_eq!(b.g_ts.in_channels(), 4);
        assert!(b.d_t.forward(&full).is_err());
        assert!(b.d_t.forward(&b.visible(&full)).is_ok());
    }

    #[test]
    fn generator_output_is_bounded_and_size_preserving() {
        tch::manual_seed(1);
        let b = TranslatorBundle::new("baseline", 0, desk(), Device::Cpu).unwrap();
        for side in [8i64, 16, 24, 40] {
            let x = Tensor::randn([1, 3, side, side], (Kind::Float, Device::Cpu)) * 5.0;
            let y = b.g_ts.forward(&x).unwrap();
            assert_eq!(y.size(), vec![1, 3, side, side]);
            assert!(y.abs().max().double_value(&[]) <= 1.0);
        }
        let odd = Tensor::zeros([1, 3, 10, 10], (Kind::Float, Device::Cpu));
        assert!(b.g_ts.forward(&odd).is_err());
    }

    #[test]
    fn unit_signed_conversion_round_trips() {
        let x = Tensor::from_slice(&[0.0f64, 0.25, 0.5, 1.0]);
        assert!(to_unit(&to_signed(&x)).equal(&x));
        let y = Tensor::from_slice(&[-1.0f64, -0.5, 0.0, 1.0]);
        assert!(to_signed(&to_unit(&y)).equal(&y));
    }

    #[test]
    fn parameter_counts_golden_values() {
        let b = TranslatorBundle::new("baseline", 0, desk(), Device::Cpu).unwrap();
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let g = conv(3, 8, 7) + conv(8, 16, 3) + conv(16, 32, 3) + 2 * conv(32, 32, 3)
            + conv(32, 16, 3) + conv(16, 8, 3) + conv(8, 3, 7);
        let d = conv(3, 8, 4) + conv(8, 16, 4) + conv(16, 32, 4) + conv(32, 1, 4);
        assert_eq!(b.parameter_counts(), (2 * g, 2 * d));
        assert_eq!(g, 32_451);
        assert_eq!(d, 11_193);
    }
}
