//! Checkpoint container: magic, length-prefixed JSON manifest, little-endian
//! f32 payload, and a trailing FNV-1a digest over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::SpectralState;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"PVNCKPT1";

/// Where a run stands: `epoch` is the current epoch and `batch` the number of
/// its batches already consumed; `step` counts all optimiser steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    AdamM,
    AdamV,
    SpectralU,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    /// Offset and length in f32 elements within the payload.
    offset: usize,
    len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    train: Option<TrainConfig>,
    progress: Progress,
    adam: AdamMeta,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: AdamState<f32>,
    pub train: Option<TrainConfig>,
    pub progress: Progress,
}

fn digest(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn checkpoint_bytes(
    params: &ModelParams<f32>,
    adam: &AdamState<f32>,
    train: Option<&TrainConfig>,
    progress: Progress,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    let mut push =
        |name: &str, kind: Kind, shape: &[usize], data: &[f32], iterations: Option<usize>| {
            entries.push(Entry {
                name: name.to_string(),
                kind,
                shape: shape.to_vec(),
                offset: payload.len(),
                len: data.len(),
                iterations,
            });
            payload.extend_from_slice(data);
        };
    for (name, t) in params.tensors() {
        push(name, Kind::Param, t.shape(), t.data(), None);
    }
    for (kind, map) in [(Kind::AdamM, &adam.m), (Kind::AdamV, &adam.v)] {
        for (name, t) in map {
            push(name, kind, t.shape(), t.data(), None);
        }
    }
    for (name, s) in params.spectral() {
        push(
            name,
            Kind::SpectralU,
            &[s.u.len()],
            &s.u,
            Some(s.iterations),
        );
    }
    let manifest = Manifest {
        model: *params.config(),
        train: train.cloned(),
        progress,
        adam: AdamMeta {
            t: adam.t,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        },
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let d = digest(&out);
    out.extend_from_slice(&d.to_le_bytes());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
        return Err(corrupt("missing PVNCKPT1 signature"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if digest(body).to_le_bytes() != tail {
        return Err(corrupt("digest mismatch"));
    }
    let jlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    if body.len() < 12 + jlen {
        return Err(corrupt("manifest length exceeds file"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[12..12 + jlen]).map_err(|e| corrupt(&e.to_string()))?;
    let raw = &body[12 + jlen..];
    if raw.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let payload: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut tensors = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    let mut spectral = BTreeMap::new();
    for e in manifest.tensors {
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(corrupt(&format!("{} lies outside the payload", e.name)));
        };
        let data = payload[e.offset..end].to_vec();
        match e.kind {
            Kind::SpectralU => {
                let iterations = e.iterations.unwrap_or(1);
                spectral.insert(
                    e.name,
                    SpectralState {
                        u: data,
                        iterations,
                    },
                );
            }
            kind => {
                let t = Tensor::from_vec(&e.shape, data)
                    .map_err(|err| corrupt(&format!("{}: {err}", e.name)))?;
                let map = match kind {
                    Kind::Param => &mut tensors,
                    Kind::AdamM => &mut m,
                    _ => &mut v,
                };
                map.insert(e.name, t);
            }
        }
    }
    let params = ModelParams::from_parts(manifest.model, tensors, spectral)?;
    let same_keys = |x: &BTreeMap<String, Tensor<f32>>| {
        x.len() == params.tensors().len()
            && x.iter()
                .all(|(k, t)| params.get(k).is_some_and(|p| p.shape() == t.shape()))
    };
    if !same_keys(&m) || !same_keys(&v) {
        return Err(Error::IncompatibleCheckpoint(
            "optimiser state does not match the parameters".into(),
        ));
    }
    let adam = AdamState {
        m,
        v,
        t: manifest.adam.t,
        beta1: manifest.adam.beta1,
        beta2: manifest.adam.beta2,
        eps: manifest.adam.eps,
    };
    Ok(Checkpoint {
        params,
        adam,
        train: manifest.train,
        progress: manifest.progress,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    adam: &AdamState<f32>,
    train: Option<&TrainConfig>,
    progress: Progress,
) -> Result<()> {
    let bytes = checkpoint_bytes(params, adam, train, progress)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Like [`load_checkpoint`] but insists on a particular architecture.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.params.config() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint holds {:?}, expected {expected:?}",
            ckpt.params.config()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            num_classes: 2,
            latent_dim: 3,
            base_width: 2,
        }
    }

    fn fixture() -> (ModelParams<f32>, AdamState<f32>) {
        let p = ModelParams::init(tiny(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut a = AdamState::new(p.tensors()).unwrap();
        a.t = 17;
        for t in a.v.values_mut() {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x = i as f32 * 0.5);
        }
        (p, a)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (p, a) = fixture();
        let progress = Progress {
            epoch: 3,
            batch: 1,
            step: 31,
        };
        let bytes = checkpoint_bytes(&p, &a, None, progress).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.adam, a);
        assert_eq!(back.progress, progress);
        assert_eq!(
            checkpoint_bytes(&back.params, &back.adam, None, progress).unwrap(),
            bytes
        );
    }

    #[test]
    fn flipped_byte_is_detected() {
        let (p, a) = fixture();
        let mut bytes = checkpoint_bytes(&p, &a, None, Progress::default()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn other_architecture_is_incompatible() {
        let (p, a) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p, &a, None, Progress::default()).unwrap();
        let mut other = tiny();
        other.latent_dim = 4;
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
        assert!(load_checkpoint_for(&path, &tiny()).is_ok());
    }
}
