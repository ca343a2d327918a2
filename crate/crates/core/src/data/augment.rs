//! Intensity augmentation: at most one of blur, gamma or noise per sample.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Chance that any transform fires.
    pub apply_probability: f64,
    /// Relative weights of blur, gamma and noise.
    pub weights: [f64; 3],
    /// Gaussian blur σ range in voxels.
    pub blur_sigma: (f64, f64),
    /// `ln γ` range.
    pub log_gamma: (f64, f64),
    /// Additive noise σ range.
    pub noise_sigma: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            apply_probability: 0.5,
            weights: [1.0, 1.0, 1.0],
            blur_sigma: (0.25, 1.5),
            log_gamma: (-0.3, 0.3),
            noise_sigma: (0.0, 0.05),
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::config(
                "augment.apply_probability",
                "must lie in [0, 1]",
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "augment.weights",
                "must be non-negative with a positive sum",
            ));
        }
        for (name, (lo, hi)) in [
            ("augment.blur_sigma", self.blur_sigma),
            ("augment.log_gamma", self.log_gamma),
            ("augment.noise_sigma", self.noise_sigma),
        ] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::config(name, "range must be finite with lo <= hi"));
            }
        }
        if self.blur_sigma.0 <= 0.0 || self.noise_sigma.0 < 0.0 {
            return Err(Error::config(
                "augment",
                "blur σ must be positive and noise σ non-negative",
            ));
        }
        Ok(())
    }
}

/// A concrete transform with its drawn parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    Identity,
    Blur(f64),
    Gamma(f64),
    /// Noise σ and the seed of the noise field.
    Noise(f64, u64),
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl Augmentation {
    pub fn draw<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Self {
        if policy.apply_probability <= 0.0 || rng.random::<f64>() >= policy.apply_probability {
            return Augmentation::Identity;
        }
        let total: f64 = policy.weights.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut which = 2;
        for (i, w) in policy.weights.iter().enumerate() {
            if pick < *w {
                which = i;
                break;
            }
            pick -= w;
        }
        match which {
            0 => Augmentation::Blur(uniform(rng, policy.blur_sigma)),
            1 => Augmentation::Gamma(uniform(rng, policy.log_gamma).exp()),
            _ => Augmentation::Noise(uniform(rng, policy.noise_sigma), rng.random()),
        }
    }

    /// Applies the transform to a `[D, H, W]` volume with values in `[0, 1]`.
    pub fn apply(&self, image: &[f32], dims: [usize; 3]) -> Vec<f32> {
        match *self {
            Augmentation::Identity => image.to_vec(),
            Augmentation::Gamma(1.0) => image.to_vec(),
            Augmentation::Gamma(g) => image
                .iter()
                .map(|&v| v.clamp(0.0, 1.0).powf(g as f32))
                .collect(),
            Augmentation::Blur(sigma) => gaussian_blur(image, dims, sigma),
            Augmentation::Noise(sigma, seed) => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let Ok(normal) = Normal::new(0.0, sigma) else {
                    return image.to_vec();
                };
                image
                    .iter()
                    .map(|&v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                    .collect()
            }
        }
    }
}

/// Draws and applies one augmentation; labels are never touched.
pub fn augment<R: Rng + ?Sized>(
    image: &[f32],
    dims: [usize; 3],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Vec<f32> {
    Augmentation::draw(policy, rng).apply(image, dims)
}

/// Separable Gaussian smoothing with replicated borders.
fn gaussian_blur(image: &[f32], dims: [usize; 3], sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let mut cur: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            for s in 0..stride {
                let base = o * dims[axis] * stride + s;
                for i in 0..n {
                    let mut acc = 0.0;
                    for (t, &k) in kernel.iter().enumerate() {
                        let j = (i + t as isize - radius).clamp(0, n - 1) as usize;
                        acc += k * cur[base + j * stride];
                    }
                    next[base + i as usize * stride] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}
