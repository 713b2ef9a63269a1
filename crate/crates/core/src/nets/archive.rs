//! Versioned, checksummed container for named tensors plus a JSON header.
//!
//! Layout: magic, version, header length + JSON, tensor count, then per
//! tensor its name, kind tag, shape and little-endian payload; a SHA-256 of
//! everything before it closes the file.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DSACKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct TensorArchive {
    pub header: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn kind_tag(kind: Kind) -> Result<u8> {
    match kind {
        Kind::Float => Ok(0),
        Kind::Double => Ok(1),
        Kind::Int64 => Ok(2),
        other => Err(Error::Config(format!("unsupported tensor kind {other:?} in archive"))),
    }
}

fn tag_kind(tag: u8) -> Option<(Kind, usize)> {
    match tag {
        0 => Some((Kind::Float, 4)),
        1 => Some((Kind::Double, 8)),
        2 => Some((Kind::Int64, 8)),
        _ => None,
    }
}

impl TensorArchive {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.tensors
            .insert(name.into(), tensor.detach().to_device(Device::Cpu).contiguous());
    }

    pub fn insert_prefixed(&mut self, prefix: &str, vars: &BTreeMap<String, Tensor>) {
        for (name, t) in vars {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::artifact("<archive>", format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let kind = t.kind();
            out.push(kind_tag(kind)?);
            let shape = t.size();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in &shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let flat = t.flatten(0, -1);
            match kind {
                Kind::Float => {
                    for v in Vec::<f32>::try_from(&flat)? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Kind::Double => {
                    for v in Vec::<f64>::try_from(&flat)? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in Vec::<i64>::try_from(&flat)? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::artifact("<archive>", reason);
        if bytes.len() < MAGIC.len() + 32 {
            return Err(bad("truncated archive".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        let mut cur = body;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut cur)?);
        if version != VERSION {
            return Err(bad(format!("unsupported archive version {version}")));
        }
        let header_len = u64::from_le_bytes(take(&mut cur)?) as usize;
        let header = serde_json::from_slice(take_n(&mut cur, header_len)?)?;
        let count = u32::from_le_bytes(take(&mut cur)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut cur)?) as usize;
            let name = String::from_utf8(take_n(&mut cur, name_len)?.to_vec())
                .map_err(|_| bad("tensor name is not utf-8".into()))?;
            let [tag] = take::<1>(&mut cur)?;
            let (kind, width) = tag_kind(tag).ok_or_else(|| bad(format!("unknown kind tag {tag}")))?;
            let ndim = u32::from_le_bytes(take(&mut cur)?) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut cur)?) as i64);
            }
            let numel: i64 = shape.iter().product();
            let payload = take_n(&mut cur, numel as usize * width)?;
            let t = match kind {
                Kind::Float => {
                    let v: Vec<f32> = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_slice(&v)
                }
                Kind::Double => {
                    let v: Vec<f64> = payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_slice(&v)
                }
                _ => {
                    let v: Vec<i64> = payload
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Tensor::from_slice(&v)
                }
            };
            tensors.insert(name, t.reshape(&shape));
        }
        if !cur.is_empty() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename keeps an interrupted save from clobbering the previous checkpoint.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Artifact { reason, .. } => Error::artifact(path, reason),
            other => other,
        })
    }
}

fn take<const N: usize>(cur: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    cur.read_exact(&mut buf)?;
    Ok(buf)
}

fn take_n<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::artifact("<archive>", "truncated payload"));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

/// Named variables of a store, sorted by name.
pub fn named_variables(vs: &tch::nn::VarStore) -> BTreeMap<String, Tensor> {
    vs.variables().into_iter().collect()
}

/// Copies archived tensors into the store's variables. Every variable must be present.
pub fn restore_variables(vs: &tch::nn::VarStore, archive: &TensorArchive, prefix: &str) -> Result<()> {
    let _guard = tch::no_grad_guard();
    for (name, mut var) in vs.variables() {
        let src = archive.get(&format!("{prefix}{name}"))?;
        if src.size() != var.size() {
            return Err(Error::Shape(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {:?}",
                src.size(),
                var.size()
            )));
        }
        var.copy_(&src.to_kind(var.kind()).to_device(var.device()));
    }
    Ok(())
}

/// SHA-256 over the sorted parameter names and their raw values.
pub fn parameter_checksum(vs: &tch::nn::VarStore) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in named_variables(vs) {
        hasher.update(name.as_bytes());
        let flat = t.detach().to_device(Device::Cpu).to_kind(Kind::Double).flatten(0, -1);
        for v in Vec::<f64>::try_from(&flat).expect("numeric parameter") {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}
