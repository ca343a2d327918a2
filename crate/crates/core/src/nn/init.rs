//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// He-normal: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::randn(shape, 0.0, std, rng)
}

/// A uniformly random direction on the unit sphere in `n` dimensions.
pub fn random_unit<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| T::cast(x / norm)).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_std_matches_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Tensor<f64> = he_normal(&[100, 4, 3, 3, 3], 4 * 27, &mut rng).unwrap();
        let n = w.numel() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let want = (2.0f64 / 108.0).sqrt();
        assert!((var.sqrt() / want - 1.0).abs() < 0.1);
    }

    #[test]
    fn unit_vectors_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u: Vec<f32> = random_unit(17, &mut rng);
        let n: f32 = u.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
