//! Shifted-row matrix kernels.
//!
//! Every convolution flavour in this crate is lowered to a stride-1
//! correlation over a padded "linear" layout: row `k` of the right-hand
//! operand is the contiguous slice `src[rowoff[k]..rowoff[k] + l]`. The three
//! kernels below are the forward product and its two adjoints.

use crate::tensor::Real;

const NB: usize = 32;
const LANES: usize = 8;

/// `out[i*l + p] += Σ_k a[i*kn + k] · src[rowoff[k] + p]` for `i < m`, `p < l`.
pub(crate) fn gather_gemm<T: Real>(
    m: usize,
    a: &[T],
    rowoff: &[usize],
    src: &[T],
    l: usize,
    out: &mut [T],
) {
    let kn = rowoff.len();
    debug_assert_eq!(a.len(), m * kn);
    debug_assert!(out.len() >= m * l);
    if kn == 0 || l == 0 {
        return;
    }
    debug_assert!(rowoff.iter().all(|&o| o + l <= src.len()));
    let mut row = 0;
    while row < m {
        let rest = m - row;
        let mb = if rest >= 8 {
            gather_block::<T, 8>(row, a, rowoff, src, l, out);
            8
        } else if rest >= 4 {
            gather_block::<T, 4>(row, a, rowoff, src, l, out);
            4
        } else if rest >= 2 {
            gather_block::<T, 2>(row, a, rowoff, src, l, out);
            2
        } else {
            gather_block::<T, 1>(row, a, rowoff, src, l, out);
            1
        };
        row += mb;
    }
}

fn gather_block<T: Real, const MB: usize>(
    row0: usize,
    a: &[T],
    rowoff: &[usize],
    src: &[T],
    l: usize,
    out: &mut [T],
) {
    let kn = rowoff.len();
    // Pack the MB rows of `a` tap-major so each tap's weights sit together.
    let mut packed = vec![T::zero(); kn * MB];
    for r in 0..MB {
        let arow = &a[(row0 + r) * kn..(row0 + r + 1) * kn];
        for (k, &w) in arow.iter().enumerate() {
            packed[k * MB + r] = w;
        }
    }
    let full = l / NB * NB;
    let mut p0 = 0;
    while p0 < full {
        let mut acc = [[T::zero(); NB]; MB];
        for (w, &off) in packed.chunks_exact(MB).zip(rowoff) {
            let s: &[T; NB] = src[off + p0..off + p0 + NB].try_into().unwrap();
            for r in 0..MB {
                let wr = w[r];
                for c in 0..NB {
                    acc[r][c] = wr.mul_add(s[c], acc[r][c]);
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            let base = (row0 + r) * l + p0;
            let o: &mut [T; NB] = (&mut out[base..base + NB]).try_into().unwrap();
            for c in 0..NB {
                o[c] += acc_row[c];
            }
        }
        p0 += NB;
    }
    if full < l {
        let tail = l - full;
        let mut acc = [[T::zero(); NB]; MB];
        for (w, &off) in packed.chunks_exact(MB).zip(rowoff) {
            let s = &src[off + full..off + l];
            for r in 0..MB {
                let wr = w[r];
                for c in 0..tail {
                    acc[r][c] = wr.mul_add(s[c], acc[r][c]);
                }
            }
        }
        for (r, acc_row) in acc.iter().enumerate() {
            let base = (row0 + r) * l + full;
            for c in 0..tail {
                out[base + c] += acc_row[c];
            }
        }
    }
}

/// `da[i*kn + k] += Σ_p lin[i*l + p] · src[rowoff[k] + p]`.
#[allow(clippy::needless_range_loop)]
pub(crate) fn gather_gemm_wgrad<T: Real>(
    m: usize,
    lin: &[T],
    rowoff: &[usize],
    src: &[T],
    l: usize,
    da: &mut [T],
) {
    let kn = rowoff.len();
    debug_assert_eq!(da.len(), m * kn);
    if kn == 0 || l == 0 {
        return;
    }
    const CHUNK: usize = 512;
    const MB: usize = 4;
    const KB: usize = 4;
    let mut p0 = 0;
    while p0 < l {
        let pc = CHUNK.min(l - p0);
        let vec_end = pc / LANES * LANES;
        let mut i = 0;
        while i < m {
            let ib = MB.min(m - i);
            let mut k = 0;
            while k < kn {
                let kb = KB.min(kn - k);
                if ib == MB && kb == KB {
                    let mut acc = [[[T::zero(); LANES]; KB]; MB];
                    let mut q = 0;
                    while q < vec_end {
                        let mut lv = [[T::zero(); LANES]; MB];
                        for r in 0..MB {
                            let b = (i + r) * l + p0 + q;
                            lv[r].copy_from_slice(&lin[b..b + LANES]);
                        }
                        for t in 0..KB {
                            let b = rowoff[k + t] + p0 + q;
                            let sv: &[T; LANES] = src[b..b + LANES].try_into().unwrap();
                            for r in 0..MB {
                                for c in 0..LANES {
                                    acc[r][t][c] = lv[r][c].mul_add(sv[c], acc[r][t][c]);
                                }
                            }
                        }
                        q += LANES;
                    }
                    for r in 0..MB {
                        for t in 0..KB {
                            let mut s = acc[r][t].iter().copied().sum::<T>();
                            for qq in vec_end..pc {
                                s += lin[(i + r) * l + p0 + qq] * src[rowoff[k + t] + p0 + qq];
                            }
                            da[(i + r) * kn + k + t] += s;
                        }
                    }
                } else {
                    for r in 0..ib {
                        let lrow = &lin[(i + r) * l + p0..(i + r) * l + p0 + pc];
                        for t in 0..kb {
                            let off = rowoff[k + t] + p0;
                            let srow = &src[off..off + pc];
                            let s: T = lrow.iter().zip(srow).map(|(&x, &y)| x * y).sum();
                            da[(i + r) * kn + k + t] += s;
                        }
                    }
                }
                k += kb;
            }
            i += ib;
        }
        p0 += pc;
    }
}

/// `dsrc[rowoff[k] + p] += Σ_i a[i*kn + k] · lin[i*l + p]`.
pub(crate) fn scatter_gemm<T: Real>(
    m: usize,
    a: &[T],
    rowoff: &[usize],
    lin: &[T],
    l: usize,
    dsrc: &mut [T],
) {
    let kn = rowoff.len();
    debug_assert_eq!(a.len(), m * kn);
    if kn == 0 || l == 0 {
        return;
    }
    let mut row = 0;
    while row < m {
        let rest = m - row;
        let mb = if rest >= 8 {
            scatter_block::<T, 8>(row, a, rowoff, lin, l, dsrc);
            8
        } else if rest >= 4 {
            scatter_block::<T, 4>(row, a, rowoff, lin, l, dsrc);
            4
        } else if rest >= 2 {
            scatter_block::<T, 2>(row, a, rowoff, lin, l, dsrc);
            2
        } else {
            scatter_block::<T, 1>(row, a, rowoff, lin, l, dsrc);
            1
        };
        row += mb;
    }
}

#[allow(clippy::needless_range_loop)]
fn scatter_block<T: Real, const MB: usize>(
    row0: usize,
    a: &[T],
    rowoff: &[usize],
    lin: &[T],
    l: usize,
    dsrc: &mut [T],
) {
    const SB: usize = 16;
    let kn = rowoff.len();
    let mut packed = vec![T::zero(); kn * MB];
    for r in 0..MB {
        let arow = &a[(row0 + r) * kn..(row0 + r + 1) * kn];
        for (k, &w) in arow.iter().enumerate() {
            packed[k * MB + r] = w;
        }
    }
    let full = l / SB * SB;
    let mut p0 = 0;
    while p0 < full {
        let mut lv = [[T::zero(); SB]; MB];
        for r in 0..MB {
            let b = (row0 + r) * l + p0;
            lv[r].copy_from_slice(&lin[b..b + SB]);
        }
        for (w, &off) in packed.chunks_exact(MB).zip(rowoff) {
            let mut t = [T::zero(); SB];
            for r in 0..MB {
                let wr = w[r];
                for c in 0..SB {
                    t[c] = wr.mul_add(lv[r][c], t[c]);
                }
            }
            let d: &mut [T; SB] = (&mut dsrc[off + p0..off + p0 + SB]).try_into().unwrap();
            for c in 0..SB {
                d[c] += t[c];
            }
        }
        p0 += SB;
    }
    for p in full..l {
        for (w, &off) in packed.chunks_exact(MB).zip(rowoff) {
            let mut t = T::zero();
            for r in 0..MB {
                t = w[r].mul_add(lin[(row0 + r) * l + p], t);
            }
            dsrc[off + p] += t;
        }
    }
}
