//! Procedural abdominal phantoms: a soft-tissue body over air with ellipsoidal organs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::volume::VolumeCase;
use crate::error::{Error, Result};

pub const AIR_HU: f32 = -1000.0;
pub const BODY_HU: (f64, f64) = (20.0, 15.0);
const MAX_ATTEMPTS: usize = 1000;

/// Intensity model of one organ class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuProfile {
    pub mean: f64,
    pub std: f64,
    /// Peak-to-centre amplitude of a linear intensity ramp across the organ.
    pub gradient: f64,
}

/// Organ `k` (1-based) gets mean `60 + 25k` HU.
pub fn default_profiles(num_organs: usize) -> Vec<HuProfile> {
    (1..=num_organs)
        .map(|k| HuProfile {
            mean: 60.0 + 25.0 * k as f64,
            std: 10.0,
            gradient: 10.0,
        })
        .collect()
}

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum()
    }

    /// Voxel bounds (inclusive) of the box enclosing the ellipsoid, clipped to `size`.
    fn bounds(&self, size: usize) -> [(usize, usize); 3] {
        [0, 1, 2].map(|a| {
            let lo = (self.centre[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.centre[a] + self.radii[a]).ceil() as usize).min(size - 1);
            (lo, hi)
        })
    }
}

fn idx(size: usize, z: usize, y: usize, x: usize) -> usize {
    (z * size + y) * size + x
}

/// Deterministic phantom of `size³` voxels with `num_organs` labelled organs.
pub fn generate_phantom(
    seed: u64,
    size: usize,
    num_organs: usize,
    profiles: &[HuProfile],
) -> Result<VolumeCase> {
    if size < 16 {
        return Err(Error::contract(format!("phantom size {size} is below 16")));
    }
    if num_organs == 0 || num_organs > 255 || profiles.len() < num_organs {
        return Err(Error::contract(format!(
            "need 1..=255 organs with a profile each, got {num_organs} organs and {} profiles",
            profiles.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let body = Ellipsoid {
        centre: [0, 1, 2].map(|_| mid + rng.random_range(-0.03..0.03) * s),
        radii: [(0.36, 0.44), (0.32, 0.40), (0.38, 0.46)]
            .map(|(lo, hi)| rng.random_range(lo..hi) * s),
    };
    let n = size * size * size;
    let mut image = vec![AIR_HU; n];
    let mut labels = vec![0u8; n];
    let mut inside = vec![false; n];
    let tissue = Normal::new(BODY_HU.0, BODY_HU.1).expect("valid body profile");
    for z in 0..size {
        for y in 0..size {
            for x in 0..size {
                let i = idx(size, z, y, x);
                if body.level([z as f64, y as f64, x as f64]) <= 1.0 {
                    inside[i] = true;
                    image[i] = tissue.sample(&mut rng) as f32;
                }
            }
        }
    }

    // Occupied voxels, dilated by one so organs never touch.
    let mut taken = vec![false; n];
    for (k, profile) in profiles.iter().take(num_organs).enumerate() {
        let class = (k + 1) as u8;
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let radii = [0, 1, 2].map(|_| rng.random_range(0.10..0.17) * s);
            let u = loop {
                let u = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
                if u.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                    break u;
                }
            };
            let centre =
                [0, 1, 2].map(|a| body.centre[a] + u[a] * (body.radii[a] - radii[a]).max(0.0));
            let e = Ellipsoid { centre, radii };
            let b = e.bounds(size);
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for z in b[0].0..=b[0].1 {
                for y in b[1].0..=b[1].1 {
                    for x in b[2].0..=b[2].1 {
                        if e.level([z as f64, y as f64, x as f64]) <= 1.0 {
                            let i = idx(size, z, y, x);
                            if !inside[i] || taken[i] {
                                ok = false;
                                break 'scan;
                            }
                            voxels.push((z, y, x));
                        }
                    }
                }
            }
            if ok && !voxels.is_empty() {
                placed = Some((e, voxels));
                break;
            }
        }
        let Some((e, voxels)) = placed else {
            return Err(Error::Placement {
                organs: num_organs,
                attempts: MAX_ATTEMPTS,
            });
        };
        let dir = {
            let v = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
            let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-9);
            v.map(|c| c / norm)
        };
        let noise = Normal::new(0.0, profile.std.max(0.0)).expect("valid organ profile");
        let reach = e.radii.iter().copied().fold(0.0, f64::max);
        for (z, y, x) in voxels {
            let p = [z as f64, y as f64, x as f64];
            let t: f64 = (0..3).map(|a| (p[a] - e.centre[a]) * dir[a]).sum::<f64>() / reach;
            let i = idx(size, z, y, x);
            image[i] = (profile.mean + profile.gradient * t + noise.sample(&mut rng)) as f32;
            labels[i] = class;
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let q = [z as i64 + dz, y as i64 + dy, x as i64 + dx];
                        if q.iter().all(|&c| c >= 0 && c < size as i64) {
                            taken[idx(size, q[0] as usize, q[1] as usize, q[2] as usize)] = true;
                        }
                    }
                }
            }
        }
    }
    Ok(VolumeCase {
        case_id: format!("phantom_{seed}"),
        dims: [size; 3],
        spacing: [1.0; 3],
        image,
        labels: Some(labels),
    })
}
