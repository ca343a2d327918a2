//! Training objective: cross entropy plus generalized Dice, and the latent KL term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::Gaussian;
use crate::tensor::{Real, Tensor};

fn default_lambda1() -> f64 {
    1.0
}

fn default_lambda2() -> f64 {
    10.0
}

fn default_epsilon() -> f64 {
    1e-6
}

/// Weights of the total objective `λ1·L_seg + λ2·L_KL` and the Dice smoothing term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default = "default_lambda2")]
    pub lambda2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: default_lambda1(),
            lambda2: default_lambda2(),
            epsilon: default_epsilon(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config("lambda1", "must be finite and >= 0"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config("lambda2", "must be finite and >= 0"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be finite and > 0"));
        }
        Ok(())
    }

    /// `λ1·seg + λ2·kl` on plain numbers.
    pub fn combine(&self, seg: f64, kl: f64) -> f64 {
        self.lambda1 * seg + self.lambda2 * kl
    }
}

fn spatial_axes(rank: usize) -> Vec<usize> {
    (2..rank).collect()
}

fn check_pair<T: Real>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) || g.shape(a).len() < 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Debug-build check that every voxel of `[B, C, ...]` has exactly one unit entry.
fn debug_check_one_hot<T: Real>(t: &Tensor<T>) -> Result<()> {
    if !cfg!(debug_assertions) {
        return Ok(());
    }
    let s = t.shape();
    let (b, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    for bi in 0..b {
        for p in 0..v {
            let mut ones = 0;
            for ch in 0..c {
                let x = t.data()[(bi * c + ch) * v + p];
                if x == T::one() {
                    ones += 1;
                } else if x != T::zero() {
                    ones = usize::MAX;
                    break;
                }
            }
            if ones != 1 {
                return Err(Error::contract("labels are not one-hot"));
            }
        }
    }
    Ok(())
}

/// Mean over batch and voxels of `−log softmax(logits)[true class]`.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, onehot: Var) -> Result<Var> {
    check_pair(g, logits, onehot, "cross_entropy")?;
    debug_check_one_hot(g.value(onehot))?;
    let s = g.shape(logits);
    let count = s[0] * s[2..].iter().product::<usize>();
    let ls = g.log_softmax_channels(logits)?;
    let picked = g.mul(ls, onehot)?;
    let total = g.sum_all(picked);
    Ok(g.mul_scalar(total, T::cast(-1.0 / count as f64)))
}

/// Generalized Dice loss with class weights `1/(Σ_v g_cv + eps)²`, per item then averaged.
pub fn generalized_dice_loss<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    onehot: Var,
    eps: f64,
) -> Result<Var> {
    check_pair(g, probs, onehot, "generalized_dice_loss")?;
    let shape = g.shape(probs).to_vec();
    let (b, c) = (shape[0], shape[1]);
    let v: usize = shape[2..].iter().product();
    let axes = spatial_axes(shape.len());

    let labels = g.value(onehot);
    let mut gsum = vec![T::zero(); b * c];
    for (i, s) in gsum.iter_mut().enumerate() {
        *s = labels.data()[i * v..(i + 1) * v].iter().copied().sum();
    }
    let eps_t = T::cast(eps);
    let weights: Vec<T> = gsum
        .iter()
        .map(|&s| {
            let d = s + eps_t;
            T::one() / (d * d)
        })
        .collect();
    let w = g.constant(Tensor::from_vec(&[b, c], weights)?);
    let gs = g.constant(Tensor::from_vec(&[b, c], gsum)?);

    let inter = g.mul(probs, onehot)?;
    let inter = g.sum(inter, &axes, false)?;
    let psum = g.sum(probs, &axes, false)?;
    let union = g.add(psum, gs)?;

    let wi = g.mul(inter, w)?;
    let num = g.sum(wi, &[1], false)?;
    let num = g.add_scalar(num, eps_t);
    let wu = g.mul(union, w)?;
    let den = g.sum(wu, &[1], false)?;
    let den = g.add_scalar(den, eps_t);
    let ratio = g.div(num, den)?;
    let mean = g.mean_all(ratio);
    let scaled = g.mul_scalar(mean, T::cast(-2.0));
    Ok(g.add_scalar(scaled, T::one()))
}

/// `CE(logits) + GDL(softmax(logits))` with unit weights.
pub fn segmentation_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    onehot: Var,
    eps: f64,
) -> Result<Var> {
    let ce = cross_entropy(g, logits, onehot)?;
    let probs = g.softmax_channels(logits)?;
    let gdl = generalized_dice_loss(g, probs, onehot, eps)?;
    g.add(ce, gdl)
}

/// `KL(q ‖ p)` for diagonal Gaussians, summed over latent dims and averaged over the batch.
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, q: &Gaussian, p: &Gaussian) -> Result<Var> {
    let shape = g.shape(q.mean).to_vec();
    for v in [q.logvar, p.mean, p.logvar] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                lhs: shape,
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    // ½[(lp − lq) + exp(lq − lp) + (μq − μp)²·exp(−lp) − 1]
    let dl = g.sub(p.logvar, q.logvar)?;
    let neg = g.mul_scalar(dl, -T::one());
    let ratio = g.exp(neg);
    let dm = g.sub(q.mean, p.mean)?;
    let dm2 = g.mul(dm, dm)?;
    let neg_lp = g.mul_scalar(p.logvar, -T::one());
    let inv_vp = g.exp(neg_lp);
    let quad = g.mul(dm2, inv_vp)?;
    let s = g.add(dl, ratio)?;
    let s = g.add(s, quad)?;
    let s = g.add_scalar(s, -T::one());
    let total = g.sum_all(s);
    Ok(g.mul_scalar(total, T::cast(0.5 / shape[0] as f64)))
}

/// `λ1·seg + λ2·kl` inside the graph.
pub fn total_loss<T: Real>(g: &mut Graph<T>, seg: Var, kl: Var, w: &LossWeights) -> Result<Var> {
    let a = g.mul_scalar(seg, T::cast(w.lambda1));
    let b = g.mul_scalar(kl, T::cast(w.lambda2));
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_defaults() {
        assert_eq!(LossWeights::default().combine(0.3, 0.02), 0.5);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Default::default()
        };
        assert_eq!(zero.combine(0.3, 0.02), 0.0);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_one_hot_rejected_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[1, 2, 2]).unwrap());
        let bad = g.constant(Tensor::full(&[1, 2, 2], 0.5).unwrap());
        assert!(matches!(
            cross_entropy(&mut g, logits, bad),
            Err(Error::Contract(_))
        ));
    }
}
