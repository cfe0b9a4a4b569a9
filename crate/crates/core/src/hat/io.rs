//! `.hatp` parameter files.
//!
//! Layout: the 5-byte magic `HATP\x01`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as little-endian `f64`
//! values in manifest order. Each manifest entry names its tensor and gives
//! its shape, element offset and element count; readers check all three.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{HatConfig, HatError, HatParameters, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"HATP\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub provenance: Provenance,
    pub hat: HatConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Writes named tensors with a manifest built from `provenance` and `hat`.
pub fn write_tensors<W: Write>(
    mut w: W,
    provenance: &Provenance,
    hat: &HatConfig,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, len: t.len() });
        offset += t.len();
    }
    let manifest = Manifest {
        format: "hatp".into(),
        version: FORMAT_VERSION,
        provenance: provenance.clone(),
        hat: hat.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| HatError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a manifest and its tensors, validating lengths and offsets.
pub fn read_tensors<R: Read>(mut r: R) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| HatError::Format("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(HatError::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| HatError::Format("truncated manifest length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| HatError::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| HatError::Format(e.to_string()))?;
    if manifest.format != "hatp" || manifest.version != FORMAT_VERSION {
        return Err(HatError::Format(format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let total: usize = manifest.tensors.iter().map(|e| e.len).sum();
    if blob.len() != total * 8 {
        return Err(HatError::Format(format!("expected {} data bytes, found {}", total * 8, blob.len())));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        if e.offset != expected_offset || e.shape.iter().product::<usize>() != e.len {
            return Err(HatError::Format(format!("inconsistent entry for '{}'", e.name)));
        }
        let data = blob[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        expected_offset += e.len;
    }
    Ok((manifest, out))
}

/// Tensors of `params` under `prefix`, in binding order.
pub fn named_tensors<'a>(params: &'a HatParameters, prefix: &str) -> Vec<(String, &'a Tensor)> {
    HatParameters::tensor_names().into_iter().map(|n| format!("{prefix}{n}")).zip(params.tensors()).collect()
}

/// Rebuilds parameters from tensors whose names start with `prefix`.
pub fn params_from_named(hat: &HatConfig, named: &[(String, Tensor)], prefix: &str) -> Result<HatParameters> {
    let mut params = HatParameters::zeros(hat.clone())?;
    let stripped: Vec<(String, Tensor)> = named
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect();
    params.assign_named(&stripped)?;
    Ok(params)
}

impl HatParameters {
    pub fn save<W: Write>(&self, w: W, provenance: &Provenance) -> Result<()> {
        write_tensors(w, provenance, &self.config, &named_tensors(self, ""))
    }

    pub fn load<R: Read>(r: R) -> Result<(Self, Provenance)> {
        let (manifest, named) = read_tensors(r)?;
        let params = params_from_named(&manifest.hat, &named, "")?;
        Ok((params, manifest.provenance))
    }
}
