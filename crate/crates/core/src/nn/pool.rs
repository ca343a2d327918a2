//! Non-overlapping average pooling over the three trailing axes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub(crate) fn pooled_shape(shape: &[usize], window: usize) -> Result<Vec<usize>> {
    let r = shape.len();
    if r < 3 || window == 0 || shape[r - 3..].iter().any(|&d| d % window != 0) {
        return Err(Error::ShapeMismatch {
            op: "avg_pool3d",
            lhs: shape.to_vec(),
            rhs: vec![window; 3],
        });
    }
    let mut out = shape.to_vec();
    for d in &mut out[r - 3..] {
        *d /= window;
    }
    Ok(out)
}

fn dims(shape: &[usize]) -> (usize, [usize; 3]) {
    let r = shape.len();
    let outer = shape[..r - 3].iter().product();
    (outer, [shape[r - 3], shape[r - 2], shape[r - 1]])
}

pub fn avg_pool3d_forward<T: Real>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let out_shape = pooled_shape(x.shape(), window)?;
    let (outer, n) = dims(x.shape());
    let m = n.map(|e| e / window);
    let scale = T::one() / T::cast((window * window * window) as f64);
    let (nvol, mvol) = (n[0] * n[1] * n[2], m[0] * m[1] * m[2]);
    let mut out = vec![T::zero(); outer * mvol];
    for c in 0..outer {
        let xs = &x.data()[c * nvol..(c + 1) * nvol];
        let os = &mut out[c * mvol..(c + 1) * mvol];
        for d in 0..n[0] {
            for h in 0..n[1] {
                let xrow = &xs[(d * n[1] + h) * n[2]..(d * n[1] + h + 1) * n[2]];
                let orow = &mut os[((d / window) * m[1] + h / window) * m[2]..][..m[2]];
                for (w, &v) in xrow.iter().enumerate() {
                    orow[w / window] += v;
                }
            }
        }
        for v in os.iter_mut() {
            *v *= scale;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn avg_pool3d_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    window: usize,
) -> Tensor<T> {
    let (outer, n) = dims(input_shape);
    let m = n.map(|e| e / window);
    let scale = T::one() / T::cast((window * window * window) as f64);
    let (nvol, mvol) = (n[0] * n[1] * n[2], m[0] * m[1] * m[2]);
    let mut dx = vec![T::zero(); outer * nvol];
    for c in 0..outer {
        let gs = &grad_out.data()[c * mvol..(c + 1) * mvol];
        let ds = &mut dx[c * nvol..(c + 1) * nvol];
        for d in 0..n[0] {
            for h in 0..n[1] {
                let grow = &gs[((d / window) * m[1] + h / window) * m[2]..][..m[2]];
                let drow = &mut ds[(d * n[1] + h) * n[2]..(d * n[1] + h + 1) * n[2]];
                for (w, v) in drow.iter_mut().enumerate() {
                    *v = grow[w / window] * scale;
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}
