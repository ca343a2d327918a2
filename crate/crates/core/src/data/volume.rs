//! The RVOL container: magic, little-endian header length, JSON header, raw voxels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RVOL_MAGIC: &[u8; 8] = b"RVOL1\0\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RvolHeader {
    pub shape: [usize; 3],
    pub dtype: Dtype,
    pub spacing: [f64; 3],
    pub case_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Voxels {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Voxels {
    pub fn len(&self) -> usize {
        match self {
            Voxels::F32(v) => v.len(),
            Voxels::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Voxels::F32(_) => Dtype::F32,
            Voxels::U8(_) => Dtype::U8,
        }
    }
}

/// One scalar volume as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Rvol {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub case_id: String,
    pub voxels: Voxels,
}

impl Rvol {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n: usize = self.shape.iter().product();
        if n != self.voxels.len() {
            return Err(Error::Format {
                field: "shape",
                msg: format!(
                    "{:?} holds {n} voxels but {} were given",
                    self.shape,
                    self.voxels.len()
                ),
            });
        }
        let header = serde_json::to_vec(&RvolHeader {
            shape: self.shape,
            dtype: self.voxels.dtype(),
            spacing: self.spacing,
            case_id: self.case_id.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * n);
        out.extend_from_slice(RVOL_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        match &self.voxels {
            Voxels::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Voxels::U8(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != RVOL_MAGIC {
            return Err(Error::Format {
                field: "magic",
                msg: "missing RVOL1 signature".into(),
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::Format {
                field: "header_length",
                msg: format!("header claims {hlen} bytes, file has {}", body.len()),
            });
        }
        let header: RvolHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format {
                field: "header",
                msg: e.to_string(),
            })?;
        if header.shape.contains(&0) {
            return Err(Error::Format {
                field: "shape",
                msg: format!("{:?} has a zero extent", header.shape),
            });
        }
        let n: usize = header.shape.iter().product();
        let payload = &body[hlen..];
        let width = match header.dtype {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        };
        if payload.len() != n * width {
            return Err(Error::Format {
                field: "payload",
                msg: format!(
                    "expected {} bytes for {:?}, found {}",
                    n * width,
                    header.shape,
                    payload.len()
                ),
            });
        }
        let voxels = match header.dtype {
            Dtype::F32 => Voxels::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => Voxels::U8(payload.to_vec()),
        };
        Ok(Self {
            shape: header.shape,
            spacing: header.spacing,
            case_id: header.case_id,
            voxels,
        })
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Rvol> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Rvol::from_bytes(&bytes)
}

pub fn write_volume(vol: &Rvol, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, vol.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// A CT image in HU with optional integer labels of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeCase {
    pub case_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub image: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl VolumeCase {
    pub fn image_rvol(&self) -> Rvol {
        Rvol {
            shape: self.dims,
            spacing: self.spacing,
            case_id: self.case_id.clone(),
            voxels: Voxels::F32(self.image.clone()),
        }
    }

    pub fn label_rvol(&self) -> Option<Rvol> {
        self.labels.as_ref().map(|l| Rvol {
            shape: self.dims,
            spacing: self.spacing,
            case_id: self.case_id.clone(),
            voxels: Voxels::U8(l.clone()),
        })
    }

    /// Loads an f32 image and, if given, a u8 label volume of the same shape.
    pub fn load(image: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let img = read_volume(image)?;
        let Voxels::F32(data) = img.voxels else {
            return Err(Error::Format {
                field: "dtype",
                msg: format!("image `{}` must be f32", img.case_id),
            });
        };
        let labels = match labels {
            None => None,
            Some(p) => {
                let lab = read_volume(p)?;
                if lab.shape != img.shape {
                    return Err(Error::Data {
                        case_id: img.case_id,
                        msg: format!(
                            "label shape {:?} differs from image {:?}",
                            lab.shape, img.shape
                        ),
                    });
                }
                match lab.voxels {
                    Voxels::U8(v) => Some(v),
                    Voxels::F32(_) => {
                        return Err(Error::Format {
                            field: "dtype",
                            msg: format!("labels of `{}` must be u8", img.case_id),
                        })
                    }
                }
            }
        };
        Ok(Self {
            case_id: img.case_id,
            dims: img.shape,
            spacing: img.spacing,
            image: data,
            labels,
        })
    }
}
