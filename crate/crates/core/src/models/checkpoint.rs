//! Checkpoint directories: `manifest.json` plus one `<tensor>.bin` per tensor
//! holding raw little-endian `f32` values in row-major order.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fpad_autograd::{Float, Tensor};

use super::net::Network;
use super::spec::{ArchConfig, NetKind, NetSpec};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(flatten)]
    pub kind: NetKind,
    pub arch: ArchConfig,
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub metadata: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

/// Tensor names become file names, so they are restricted to a safe alphabet.
fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && !name.contains("..")
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'));
    if ok {
        Ok(())
    } else {
        Err(Error::ManifestMismatch(format!("invalid tensor name {name:?}")))
    }
}

impl TensorEntry {
    pub fn numel(&self) -> Result<usize> {
        self.shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::ManifestMismatch(format!("{}: shape overflows", self.name)))
    }
}

impl Manifest {
    /// Parse and validate a manifest.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| Error::ManifestMismatch(format!("malformed manifest: {e}")))?;
        if m.format != FORMAT_VERSION {
            return Err(Error::ManifestMismatch(format!(
                "unsupported format version {}",
                m.format
            )));
        }
        let mut seen = HashSet::new();
        for t in &m.tensors {
            check_name(&t.name)?;
            if t.dtype != "f32" {
                return Err(Error::ManifestMismatch(format!(
                    "{}: unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            t.numel()?;
            if !seen.insert(t.name.as_str()) {
                return Err(Error::ManifestMismatch(format!("duplicate tensor {}", t.name)));
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

pub fn encode_blob(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decode a blob that must hold exactly `numel` values.
pub fn decode_blob(name: &str, bytes: &[u8], numel: usize) -> Result<Vec<f32>> {
    if bytes.len() != numel * 4 {
        return Err(Error::ManifestMismatch(format!(
            "{name}: blob has {} bytes, manifest needs {}",
            bytes.len(),
            numel * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_checkpoint<T: Float>(net: &Network<T>, seed: u64, epoch: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (spec, t) in net.tensor_specs().iter().zip(net.tensors()) {
        let values: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
        let path = dir.join(format!("{}.bin", spec.name));
        fs::write(&path, encode_blob(&values)).map_err(|e| Error::io(&path, e))?;
        entries.push(TensorEntry {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            dtype: "f32".into(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        metadata: CheckpointMeta {
            kind: net.kind(),
            arch: net.spec().arch.clone(),
            seed,
            epoch,
        },
        tensors: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&bytes)
}

/// Load a checkpoint into a freshly built network of the recorded kind.
pub fn load_checkpoint(dir: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let spec = NetSpec::for_kind(manifest.metadata.kind, &manifest.metadata.arch)
        .map_err(|e| Error::ManifestMismatch(format!("metadata describes no valid network: {e}")))?;
    let mut net = Network::new(spec);
    fill(&mut net, &manifest, dir)?;
    Ok((net, manifest.metadata))
}

/// Load a checkpoint into an existing network, which must have the same
/// tensors in the same order.
pub fn load_into(net: &mut Network<f32>, dir: &Path) -> Result<CheckpointMeta> {
    let manifest = read_manifest(dir)?;
    fill(net, &manifest, dir)?;
    Ok(manifest.metadata)
}

fn fill(net: &mut Network<f32>, manifest: &Manifest, dir: &Path) -> Result<()> {
    let specs = net.tensor_specs().to_vec();
    for (i, spec) in specs.iter().enumerate() {
        let Some(entry) = manifest.tensors.get(i) else {
            return Err(Error::ManifestMismatch(format!("{}: missing from manifest", spec.name)));
        };
        if entry.name != spec.name || entry.shape != spec.shape {
            return Err(Error::ManifestMismatch(format!(
                "{}: network expects {:?}, manifest has {} {:?}",
                spec.name, spec.shape, entry.name, entry.shape
            )));
        }
    }
    if let Some(extra) = manifest.tensors.get(specs.len()) {
        return Err(Error::ManifestMismatch(format!(
            "{}: not part of the network",
            extra.name
        )));
    }
    for (i, entry) in manifest.tensors.iter().enumerate() {
        let path = dir.join(format!("{}.bin", entry.name));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let values = decode_blob(&entry.name, &bytes, entry.numel()?)?;
        *net.tensor_at_mut(i) = Tensor::new(entry.shape.clone(), values);
    }
    Ok(())
}
