//! On-disk phantom datasets: `images/`, `labels/` and a `manifest.json` with the split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{default_profiles, generate_phantom};
use super::preprocess::{preprocess, TransformRecord};
use super::volume::{write_volume, VolumeCase};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
/// Fraction of generated cases held out from optimisation.
pub const HELD_OUT_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    pub id: String,
    /// Paths relative to the dataset directory.
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub cases: Vec<ManifestCase>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &ManifestCase> {
        self.cases.iter().filter(move |c| c.split == which)
    }
}

/// Writes `cases` phantoms with seeds `seed..seed+cases` under `dir`.
pub fn generate_dataset(
    dir: &Path,
    cases: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Manifest> {
    if cases == 0 {
        return Err(Error::config("cases", "must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::config(
            "classes",
            "need background plus at least one organ",
        ));
    }
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let held_out = ((cases as f64) * HELD_OUT_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..cases).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = vec![Split::Train; cases];
    for &i in order.iter().take(held_out.min(cases.saturating_sub(1))) {
        split[i] = Split::Test;
    }
    let profiles = default_profiles(classes - 1);
    let mut entries = Vec::with_capacity(cases);
    for (i, &sp) in split.iter().enumerate() {
        let case_seed = seed + i as u64;
        let id = format!("case_{i:03}");
        let mut case = generate_phantom(case_seed, size, classes - 1, &profiles)?;
        case.case_id = id.clone();
        let image = PathBuf::from("images").join(format!("{id}.rvol"));
        let label = PathBuf::from("labels").join(format!("{id}.rvol"));
        write_volume(&case.image_rvol(), dir.join(&image))?;
        write_volume(
            &case.label_rvol().expect("phantoms carry labels"),
            dir.join(&label),
        )?;
        entries.push(ManifestCase {
            id,
            image,
            label,
            split: sp,
            seed: case_seed,
        });
    }
    let manifest = Manifest {
        size,
        classes,
        seed,
        cases: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A case loaded and mapped into model space, with its originals kept for scoring.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub case_id: String,
    /// `[1, 1, S, S, S]`.
    pub image: Tensor<f32>,
    /// `S³` labels in model space.
    pub labels: Vec<u8>,
    /// Labels at the original resolution.
    pub original_labels: Vec<u8>,
    pub record: TransformRecord,
}

pub fn prepare_case(case: &VolumeCase, model_size: usize, classes: usize) -> Result<PreparedCase> {
    let data_err = |msg: String| Error::Data {
        case_id: case.case_id.clone(),
        msg,
    };
    let original = case
        .labels
        .clone()
        .ok_or_else(|| data_err("labels missing".into()))?;
    if let Some(&bad) = original.iter().find(|&&l| l as usize >= classes) {
        return Err(data_err(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let p = preprocess(case, model_size).map_err(|e| data_err(e.to_string()))?;
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        image: p.image,
        labels: p.labels.expect("labels were present"),
        original_labels: original,
        record: p.record,
    })
}

/// Loads and prepares the cases of one split, failing on the first bad case.
pub fn load_split(
    dir: &Path,
    manifest: &Manifest,
    which: Split,
    model_size: usize,
) -> Result<Vec<PreparedCase>> {
    manifest
        .split(which)
        .map(|c| {
            let wrap = |e: Error| match e {
                Error::Data { .. } => e,
                other => Error::Data {
                    case_id: c.id.clone(),
                    msg: other.to_string(),
                },
            };
            let case =
                VolumeCase::load(dir.join(&c.image), Some(&dir.join(&c.label))).map_err(wrap)?;
            prepare_case(&case, model_size, manifest.classes).map_err(wrap)
        })
        .collect()
}
