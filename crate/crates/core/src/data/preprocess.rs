//! ROI cropping, intensity windowing and resampling to the model cube, plus the inverse.

use serde::{Deserialize, Serialize};

use super::volume::VolumeCase;
use crate::error::{Error, Result};
use crate::nn::resize::{resize_forward, resize_nearest};
use crate::nn::ResizeMode;
use crate::tensor::Tensor;

pub const ROI_THRESHOLD_HU: f32 = -300.0;
pub const ROI_MARGIN: usize = 4;
pub const WINDOW_LO_HU: f32 = -175.0;
pub const WINDOW_HI_HU: f32 = 275.0;

/// Inclusive voxel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Roi {
    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: dims.map(|d| d - 1),
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }
}

/// What [`postprocess`] needs to put a prediction back in place.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub original_shape: [usize; 3],
    pub roi: Roi,
    pub model_size: usize,
}

fn index(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// Bounding box of voxels above `threshold`, grown by `margin` and clipped.
/// Falls back to the whole volume when nothing exceeds the threshold.
pub fn compute_roi(image: &[f32], dims: [usize; 3], threshold: f32, margin: usize) -> Roi {
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if image[index(dims, z, y, x)] > threshold {
                    any = true;
                    for (a, p) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(p);
                        hi[a] = hi[a].max(p);
                    }
                }
            }
        }
    }
    if !any {
        return Roi::full(dims);
    }
    Roi {
        lo: lo.map(|l| l.saturating_sub(margin)),
        hi: [0, 1, 2].map(|a| (hi[a] + margin).min(dims[a] - 1)),
    }
}

/// Clips to the soft-tissue window and maps it linearly onto `[0, 1]`.
pub fn window_and_scale(hu: f32) -> f32 {
    (hu.clamp(WINDOW_LO_HU, WINDOW_HI_HU) - WINDOW_LO_HU) / (WINDOW_HI_HU - WINDOW_LO_HU)
}

fn crop<V: Copy>(data: &[V], dims: [usize; 3], roi: &Roi) -> Vec<V> {
    let e = roi.extent();
    let mut out = Vec::with_capacity(e.iter().product());
    for z in roi.lo[0]..=roi.hi[0] {
        for y in roi.lo[1]..=roi.hi[1] {
            let start = index(dims, z, y, roi.lo[2]);
            out.extend_from_slice(&data[start..start + e[2]]);
        }
    }
    out
}

/// Model-ready view of a case.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    /// `[1, 1, S, S, S]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `S³` labels resampled with nearest neighbour.
    pub labels: Option<Vec<u8>>,
    pub record: TransformRecord,
}

pub fn preprocess(case: &VolumeCase, model_size: usize) -> Result<Preprocessed> {
    if model_size == 0 || !model_size.is_multiple_of(16) {
        return Err(Error::contract(format!(
            "model size {model_size} is not a multiple of 16"
        )));
    }
    let n: usize = case.dims.iter().product();
    if case.image.len() != n || case.labels.as_ref().is_some_and(|l| l.len() != n) {
        return Err(Error::Data {
            case_id: case.case_id.clone(),
            msg: format!("voxel count does not match shape {:?}", case.dims),
        });
    }
    let roi = compute_roi(&case.image, case.dims, ROI_THRESHOLD_HU, ROI_MARGIN);
    let extent = roi.extent();
    let windowed: Vec<f32> = crop(&case.image, case.dims, &roi)
        .into_iter()
        .map(window_and_scale)
        .collect();
    let cropped = Tensor::from_vec(&[1, 1, extent[0], extent[1], extent[2]], windowed)?;
    let cube = [model_size; 3];
    let image = resize_forward(&cropped, cube, ResizeMode::Trilinear)?;
    let labels = case
        .labels
        .as_ref()
        .map(|l| resize_nearest(&crop(l, case.dims, &roi), extent, cube));
    Ok(Preprocessed {
        image,
        labels,
        record: TransformRecord {
            original_shape: case.dims,
            roi,
            model_size,
        },
    })
}

/// Resamples a model-space label cube back into the ROI of a background canvas.
pub fn postprocess(pred: &[u8], record: &TransformRecord) -> Result<Vec<u8>> {
    let s = record.model_size;
    if pred.len() != s * s * s {
        return Err(Error::contract(format!(
            "prediction has {} voxels, record expects {s}³",
            pred.len()
        )));
    }
    let dims = record.original_shape;
    let roi = record.roi;
    if (0..3).any(|a| roi.lo[a] > roi.hi[a] || roi.hi[a] >= dims[a]) {
        return Err(Error::contract(format!(
            "roi {roi:?} outside shape {dims:?}"
        )));
    }
    let e = roi.extent();
    let inner = resize_nearest(pred, [s; 3], e);
    let mut out = vec![0u8; dims.iter().product()];
    for z in 0..e[0] {
        for y in 0..e[1] {
            let dst = index(dims, roi.lo[0] + z, roi.lo[1] + y, roi.lo[2]);
            let src = (z * e[1] + y) * e[2];
            out[dst..dst + e[2]].copy_from_slice(&inner[src..src + e[2]]);
        }
    }
    Ok(out)
}
