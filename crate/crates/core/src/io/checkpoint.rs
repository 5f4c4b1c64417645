//! Named-tensor container: `Y26E`, u16 version, u32 manifest length, JSON
//! manifest, then 64-byte aligned little-endian f32 payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"Y26E";
pub const VERSION: u16 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub stage: String,
    pub seed: u64,
    pub created: String,
}

impl Metadata {
    pub fn new(stage: impl Into<String>, seed: u64) -> Self {
        Self {
            stage: stage.into(),
            seed,
            created: concat!("yoloe26 ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: ParamSet,
    pub metadata: Metadata,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, tensors: ParamSet, metadata: Metadata) -> Self {
        Self {
            config,
            tensors,
            metadata,
        }
    }

    fn manifest(&self, start: usize) -> Manifest {
        let mut offset = start;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    byte_offset: offset as u64,
                };
                offset = align(offset + 4 * t.numel());
                e
            })
            .collect();
        Manifest {
            config: self.config.clone(),
            tensors,
            metadata: self.metadata.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        // offsets depend on the manifest length, which depends on the offsets
        let mut start = align(PREAMBLE);
        let mut json = serde_json::to_vec(&self.manifest(start))?;
        loop {
            let need = align(PREAMBLE + json.len());
            if need == start {
                break;
            }
            start = need;
            json = serde_json::to_vec(&self.manifest(start))?;
        }
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("manifest over 4 GiB".into()))?;
        let mut out = Vec::with_capacity(start + 4 * self.tensors.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.tensors.iter() {
            out.resize(align(out.len()), 0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
            return fail("bad magic: not a Y26E checkpoint".into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return fail(format!("unsupported checkpoint version {version} (expected {VERSION})"));
        }
        let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let Some(json) = bytes.get(PREAMBLE..PREAMBLE + len) else {
            return fail(format!("manifest of {len} bytes runs past the end of the file"));
        };
        let manifest: Manifest = serde_json::from_slice(json)
            .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
        let mut tensors = ParamSet::new();
        let mut floor = PREAMBLE + len;
        for e in manifest.tensors {
            let off = e.byte_offset as usize;
            if !off.is_multiple_of(ALIGN) {
                return fail(format!("tensor {} offset {off} is not {ALIGN}-byte aligned", e.name));
            }
            if off < floor {
                return fail(format!("tensor {} at offset {off} overlaps preceding data ending at {floor}", e.name));
            }
            let numel: usize = e.shape.iter().product();
            let end = off + 4 * numel;
            let Some(raw) = bytes.get(off..end) else {
                return fail(format!(
                    "tensor {} is truncated: needs bytes {off}..{end}, file has {}",
                    e.name,
                    bytes.len()
                ));
            };
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.get(&e.name).is_some() {
                return fail(format!("tensor {} appears twice", e.name));
            }
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
            floor = end;
        }
        Ok(Self {
            config: manifest.config,
            tensors,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::ppm::write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Strings stored one byte per f32 element.
pub fn encode_strings(items: &[String]) -> Tensor {
    let bytes = items.join("\n").into_bytes();
    Tensor::from_vec(bytes.into_iter().map(f32::from).collect())
}

pub fn decode_strings(t: &Tensor) -> Result<Vec<String>> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Checkpoint(format!("string tensor holds non-byte value {v}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let s = String::from_utf8(bytes).map_err(|_| Error::Checkpoint("string tensor is not UTF-8".into()))?;
    if s.is_empty() {
        return Ok(Vec::new());
    }
    Ok(s.split('\n').map(str::to_string).collect())
}
