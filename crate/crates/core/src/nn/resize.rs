//! Separable resampling of the three trailing axes with the align-corners
//! convention: output sample `j` of `m` reads input coordinate `j·(n−1)/(m−1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResizeMode {
    Trilinear,
    Nearest,
}

/// `(i0, i1, w)`: output = (1 − w)·x[i0] + w·x[i1].
type Taps = Vec<(usize, usize, f64)>;

fn axis_taps(n: usize, m: usize, mode: ResizeMode) -> Taps {
    (0..m)
        .map(|j| {
            let pos = if m == 1 || n == 1 {
                0.0
            } else {
                j as f64 * (n - 1) as f64 / (m - 1) as f64
            };
            match mode {
                ResizeMode::Nearest => {
                    let i = ((pos + 0.5).floor() as usize).min(n - 1);
                    (i, i, 0.0)
                }
                ResizeMode::Trilinear => {
                    let i0 = (pos.floor() as usize).min(n - 1);
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, pos - i0 as f64)
                }
            }
        })
        .collect()
}

fn split(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    let r = shape.len();
    if r < 3 {
        return Err(Error::contract(format!(
            "resize needs rank >= 3, got {shape:?}"
        )));
    }
    Ok((
        shape[..r - 3].iter().product(),
        [shape[r - 3], shape[r - 2], shape[r - 1]],
    ))
}

/// Resamples axis `axis` (0..3 of the trailing block) of a `[outer, d, h, w]` buffer.
fn resample_axis<V: Copy>(
    data: &[V],
    outer: usize,
    dims: [usize; 3],
    axis: usize,
    taps: &Taps,
    lerp: impl Fn(V, V, f64) -> V,
) -> Vec<V> {
    let n = dims[axis];
    let m = taps.len();
    let before: usize = dims[..axis].iter().product::<usize>() * outer;
    let after: usize = dims[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(before * m * after);
    for b in 0..before {
        let block = &data[b * n * after..(b + 1) * n * after];
        for &(i0, i1, w) in taps {
            let r0 = &block[i0 * after..(i0 + 1) * after];
            let r1 = &block[i1 * after..(i1 + 1) * after];
            out.extend(r0.iter().zip(r1).map(|(&a, &c)| lerp(a, c, w)));
        }
    }
    out
}

fn resample_axis_adjoint<T: Real>(
    grad: &[T],
    outer: usize,
    dims_in: [usize; 3],
    axis: usize,
    taps: &Taps,
) -> Vec<T> {
    let n = dims_in[axis];
    let m = taps.len();
    let before: usize = dims_in[..axis].iter().product::<usize>() * outer;
    let after: usize = dims_in[axis + 1..].iter().product();
    let mut out = vec![T::zero(); before * n * after];
    for b in 0..before {
        let gblock = &grad[b * m * after..(b + 1) * m * after];
        let oblock = &mut out[b * n * after..(b + 1) * n * after];
        for (j, &(i0, i1, w)) in taps.iter().enumerate() {
            let w = T::cast(w);
            let g = &gblock[j * after..(j + 1) * after];
            for (k, &gv) in g.iter().enumerate() {
                oblock[i0 * after + k] += gv * (T::one() - w);
                oblock[i1 * after + k] += gv * w;
            }
        }
    }
    out
}

/// Resamples the trailing `[D, H, W]` block of a flat buffer; values are copied,
/// never blended, in nearest mode so any `Copy` voxel type works.
pub fn resize_nearest<V: Copy>(data: &[V], dims: [usize; 3], target: [usize; 3]) -> Vec<V> {
    let outer = data.len() / (dims[0] * dims[1] * dims[2]);
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if cur_dims[axis] == target[axis] {
            continue;
        }
        let taps = axis_taps(cur_dims[axis], target[axis], ResizeMode::Nearest);
        cur = resample_axis(&cur, outer, cur_dims, axis, &taps, |a, _, _| a);
        cur_dims[axis] = target[axis];
    }
    cur
}

pub fn resize_forward<T: Real>(
    x: &Tensor<T>,
    target: [usize; 3],
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    if target.contains(&0) {
        return Err(Error::InvalidShape(target.to_vec()));
    }
    let (outer, dims) = split(x.shape())?;
    let mut cur = x.data().to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if cur_dims[axis] == target[axis] {
            continue;
        }
        let taps = axis_taps(cur_dims[axis], target[axis], mode);
        cur = resample_axis(&cur, outer, cur_dims, axis, &taps, |a, b, w| {
            if w == 0.0 {
                a
            } else {
                let w = T::cast(w);
                a * (T::one() - w) + b * w
            }
        });
        cur_dims[axis] = target[axis];
    }
    let r = x.ndim();
    let mut shape = x.shape().to_vec();
    shape[r - 3..].copy_from_slice(&target);
    Ok(Tensor::from_parts(shape, cur))
}

pub fn resize_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    mode: ResizeMode,
) -> Tensor<T> {
    let (outer, dims) = split(input_shape).expect("validated in forward");
    let (_, target) = split(grad_out.shape()).expect("validated in forward");
    // Forward went axis 0, 1, 2; undo in reverse.
    let mut stage_dims = [dims; 4];
    for axis in 0..3 {
        stage_dims[axis + 1] = stage_dims[axis];
        stage_dims[axis + 1][axis] = target[axis];
    }
    let mut g = grad_out.data().to_vec();
    for axis in (0..3).rev() {
        if dims[axis] == target[axis] {
            continue;
        }
        let taps = axis_taps(dims[axis], target[axis], mode);
        g = resample_axis_adjoint(&g, outer, stage_dims[axis], axis, &taps);
    }
    Tensor::from_parts(input_shape.to_vec(), g)
}
