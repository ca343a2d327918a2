//! Spectral normalization by power iteration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::init::random_unit;
use crate::tensor::{Real, Tensor};

/// Lower bound applied to the singular-value estimate before dividing by it.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Persistent left singular vector estimate for one weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub iterations: usize,
}

/// Whether a normalization call advances the stored `u`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectralMode {
    /// Training: run the configured power iterations and keep the new `u`.
    Update,
    /// Inference and gradient checks: derive `v` from the stored `u`, leave it untouched.
    Frozen,
}

impl<T: Real> SpectralState<T> {
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        Self {
            u: random_unit(rows, rng),
            iterations: 1,
        }
    }
}

fn normalize<T: Real>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let n = n.max(T::cast(SIGMA_FLOOR));
    v.iter_mut().for_each(|x| *x = *x / n);
}

fn mat_t_vec<T: Real>(w: &[T], rows: usize, cols: usize, u: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for (r, &ur) in u.iter().enumerate().take(rows) {
        for (o, &x) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += x * ur;
        }
    }
    out
}

fn mat_vec<T: Real>(w: &[T], rows: usize, cols: usize, v: &[T]) -> Vec<T> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect()
}

/// Runs power iteration on `w` viewed as `[shape[0], rest]`, returning `(u, v)` and
/// updating `state.u` in [`SpectralMode::Update`].
fn power_iteration<T: Real>(
    w: &Tensor<T>,
    state: &mut SpectralState<T>,
    mode: SpectralMode,
) -> Result<(Vec<T>, Vec<T>)> {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    if state.u.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "spectral_normalize",
            lhs: w.shape().to_vec(),
            rhs: vec![state.u.len()],
        });
    }
    let mut u = state.u.clone();
    let mut v = mat_t_vec(w.data(), rows, cols, &u);
    normalize(&mut v);
    if mode == SpectralMode::Update {
        for it in 0..state.iterations.max(1) {
            if it > 0 {
                v = mat_t_vec(w.data(), rows, cols, &u);
                normalize(&mut v);
            }
            u = mat_vec(w.data(), rows, cols, &v);
            normalize(&mut u);
        }
        state.u.clone_from(&u);
    }
    Ok((u, v))
}

/// `σ̂ = uᵀ W v` and `W / σ̂` evaluated outside any graph.
pub fn spectral_normalize_tensor<T: Real>(
    w: &Tensor<T>,
    state: &mut SpectralState<T>,
    mode: SpectralMode,
) -> Result<(Tensor<T>, T)> {
    let (u, v) = power_iteration(w, state, mode)?;
    let rows = w.shape()[0];
    let wv = mat_vec(w.data(), rows, w.numel() / rows, &v);
    let sigma = u
        .iter()
        .zip(&wv)
        .map(|(&a, &b)| a * b)
        .sum::<T>()
        .max(T::cast(SIGMA_FLOOR));
    Ok((w.map(|x| x / sigma), sigma))
}

/// Graph version: `u` and `v` enter as constants, so gradients flow through `W` only.
pub fn spectral_normalize<T: Real>(
    g: &mut Graph<T>,
    w: Var,
    state: &mut SpectralState<T>,
    mode: SpectralMode,
) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    let (u, v) = power_iteration(g.value(w), state, mode)?;
    let rows = shape[0];
    let cols = v.len();
    let mat = g.reshape(w, &[rows, cols])?;
    let vc = g.constant(Tensor::from_vec(&[1, cols], v)?);
    let uc = g.constant(Tensor::from_vec(&[rows, 1], u)?);
    let wv = g.mul(mat, vc)?;
    let wv = g.sum(wv, &[1], true)?;
    let uwv = g.mul(wv, uc)?;
    let sigma = g.sum_all(uwv);
    let sigma = g.clamp(sigma, T::cast(SIGMA_FLOOR), T::infinity());
    let ones = vec![1; shape.len()];
    let sigma = g.reshape(sigma, &ones)?;
    g.div(w, sigma)
}
