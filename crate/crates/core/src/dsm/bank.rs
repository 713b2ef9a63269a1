use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use tch::{Device, Kind, Tensor};

use super::FeatureMeanBatch;
use crate::error::{Error, Result};
use crate::nets::FrozenSegmenter;

pub const DEFAULT_MIN_BANK_SIZE: usize = 256;

const MAGIC: &[u8; 8] = b"DSMBANK\0";
const VERSION: u32 = 1;

/// Feature means of real source images, computed once and never modified.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    layer_id: String,
    n_ref: usize,
    k_filters: usize,
    /// Row-major `(n_ref, k_filters)`.
    samples: Vec<f32>,
}

impl ReferenceBank {
    pub fn new(
        layer_id: impl Into<String>,
        n_ref: usize,
        k_filters: usize,
        samples: Vec<f32>,
        min_size: usize,
    ) -> Result<Self> {
        if samples.len() != n_ref * k_filters {
            return Err(Error::Shape(format!(
                "bank data has {} values, expected {n_ref} x {k_filters}",
                samples.len()
            )));
        }
        if k_filters == 0 {
            return Err(Error::Shape("bank needs at least one filter".into()));
        }
        if n_ref < min_size.max(1) {
            return Err(Error::Config(format!(
                "reference bank has {n_ref} samples, minimum is {min_size}"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample("reference bank"));
        }
        Ok(Self {
            layer_id: layer_id.into(),
            n_ref,
            k_filters,
            samples,
        })
    }

    pub fn from_features(features: &FeatureMeanBatch, min_size: usize) -> Result<Self> {
        let flat: Vec<f32> = Vec::try_from(
            features
                .values()
                .detach()
                .to_kind(Kind::Float)
                .to_device(Device::Cpu)
                .flatten(0, -1),
        )?;
        Self::new(
            features.layer_id(),
            features.n_images(),
            features.n_filters(),
            flat,
            min_size,
        )
    }

    /// Computes the bank from real source images in `[0, 1]`, in chunks.
    pub fn build(
        segmenter: &FrozenSegmenter,
        images: &Tensor,
        layer: &str,
        min_size: usize,
    ) -> Result<Self> {
        let n = images.size()[0];
        let mut chunks = Vec::new();
        let _guard = tch::no_grad_guard();
        for start in (0..n).step_by(64) {
            let len = 64.min(n - start);
            let feats = super::extract_dsm_features(segmenter, &images.narrow(0, start, len), layer)?;
            chunks.push(feats.values().to_kind(Kind::Float));
        }
        let all = FeatureMeanBatch::new(layer, Tensor::cat(&chunks, 0))?;
        Self::from_features(&all, min_size)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn n_ref(&self) -> usize {
        self.n_ref
    }

    pub fn k_filters(&self) -> usize {
        self.k_filters
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    /// A constructed bank is immutable; there is no way to unfreeze it.
    pub fn is_frozen(&self) -> bool {
        true
    }

    /// `(k_filters, n_ref)` constant tensor, one row per filter.
    pub fn columns_tensor(&self, kind: Kind, device: Device) -> Tensor {
        Tensor::from_slice(&self.samples)
            .view([self.n_ref as i64, self.k_filters as i64])
            .tr()
            .contiguous()
            .to_kind(kind)
            .to_device(device)
    }

    fn encode_body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.samples.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.layer_id.as_bytes());
        out.extend_from_slice(&(self.n_ref as u64).to_le_bytes());
        out.extend_from_slice(&(self.k_filters as u64).to_le_bytes());
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// SHA-256 over the serialized content, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.encode_body()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = self.encode_body();
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        body
    }

    pub fn from_bytes(bytes: &[u8], min_size: usize) -> Result<Self> {
        let bad = |reason: &str| Error::artifact("<reference bank>", reason);
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(bad("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut cur = body;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut cur)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let name_len = read_u32(&mut cur)? as usize;
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name)?;
        let layer_id = String::from_utf8(name).map_err(|_| bad("layer id is not utf-8"))?;
        let n_ref = read_u64(&mut cur)? as usize;
        let k = read_u64(&mut cur)? as usize;
        if cur.len() != n_ref * k * 4 {
            return Err(bad("payload size does not match shape"));
        }
        let samples = cur
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(layer_id, n_ref, k, samples, min_size)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, min_size: usize) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, min_size).map_err(|e| match e {
            Error::Artifact { reason, .. } => Error::artifact(path, reason),
            other => other,
        })
    }
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(cur: &mut &[u8]) -> Result<u64> {
    let mut buf = [0u8; 8];
    cur.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
