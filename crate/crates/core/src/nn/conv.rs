//! 3D convolution and transposed convolution kernels.
//!
//! Strided convolutions are split into `stride³` polyphase components so that
//! every product becomes a stride-1 correlation handled by [`super::gemm`].
//! Transposed convolutions are evaluated per output phase the same way.

use serde::{Deserialize, Serialize};

use super::gemm::{gather_gemm, gather_gemm_wgrad, scatter_gemm};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a cubic-kernel 3D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
    pub bias: bool,
}

impl ConvSpec {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: false,
            bias: true,
        }
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            transposed: true,
            ..Self::conv(in_channels, out_channels, kernel, stride, padding)
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// `[out, in, k, k, k]` for convolutions, `[in, out, k, k, k]` for transposed ones.
    pub fn weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, k, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k, k]
        }
    }

    /// Spatial output extent for an input extent `n`, or `None` if it would be empty.
    pub fn output_extent(&self, n: usize) -> Option<usize> {
        let (k, s, p) = (
            self.kernel as isize,
            self.stride as isize,
            self.padding as isize,
        );
        let n = n as isize;
        let m = if self.transposed {
            (n - 1) * s - 2 * p + k
        } else {
            let span = n + 2 * p - k;
            if span < 0 {
                return None;
            }
            span / s + 1
        };
        (m >= 1).then_some(m as usize)
    }

    /// Number of input values feeding one output value.
    pub fn fan_in(&self) -> usize {
        let k = self.kernel;
        if self.transposed {
            let taps = k.div_ceil(self.stride);
            self.in_channels * taps * taps * taps
        } else {
            self.in_channels * k * k * k
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::contract(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn vol(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

pub(crate) fn check_conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Vec<usize>> {
    spec.validate()?;
    let xs = x.shape();
    if xs.len() != 5 || xs[1] != spec.in_channels {
        return Err(Error::ShapeMismatch {
            op: "conv3d input",
            lhs: xs.to_vec(),
            rhs: vec![0, spec.in_channels, 0, 0, 0],
        });
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv3d weight",
            lhs: w.shape().to_vec(),
            rhs: spec.weight_shape().to_vec(),
        });
    }
    match (b, spec.bias) {
        (Some(b), true) if b.shape() == [spec.out_channels] => {}
        (None, false) => {}
        (b, _) => {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                lhs: b.map(|b| b.shape().to_vec()).unwrap_or_default(),
                rhs: if spec.bias {
                    vec![spec.out_channels]
                } else {
                    vec![]
                },
            })
        }
    }
    let mut out = vec![xs[0], spec.out_channels];
    for &n in &xs[2..] {
        let m = spec.output_extent(n).ok_or_else(|| {
            Error::contract(format!("conv3d: spatial extent {n} too small for {spec:?}"))
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Linear layout: position `j` maps to `j[0]*st[0] + j[1]*st[1] + j[2]`.
#[derive(Clone, Copy, Debug)]
struct Lin {
    st: [usize; 2],
    cnt: [usize; 3],
}

impl Lin {
    fn len(&self) -> usize {
        (self.cnt[0] - 1) * self.st[0] + (self.cnt[1] - 1) * self.st[1] + self.cnt[2]
    }
}

/// Lowering of a regular (possibly strided) convolution for one input size.
struct ConvPlan {
    k: usize,
    s: usize,
    p: usize,
    n: [usize; 3],
    m: [usize; 3],
    pd: [usize; 3],
    cin: usize,
}

impl ConvPlan {
    fn new(spec: &ConvSpec, n: [usize; 3], m: [usize; 3]) -> Self {
        let s = spec.stride;
        let pd = n.map(|e| (e + 2 * spec.padding).div_ceil(s));
        Self {
            k: spec.kernel,
            s,
            p: spec.padding,
            n,
            m,
            pd,
            cin: spec.in_channels,
        }
    }

    fn pvol(&self) -> usize {
        vol(self.pd)
    }

    fn src_len(&self) -> usize {
        self.cin * self.s.pow(3) * self.pvol()
    }

    fn lin(&self) -> Lin {
        Lin {
            st: [self.pd[1] * self.pd[2], self.pd[2]],
            cnt: self.m,
        }
    }

    /// Runs pairing source slots (`a`) with the input voxels (`b`) that back them.
    fn slot_runs(&self) -> Vec<Run> {
        let s = self.s;
        let pvol = self.pvol();
        // Valid phase positions along one axis and the input index of the first.
        let span = |axis: usize, r: usize| -> Option<(usize, usize, usize)> {
            let x0 = |i: usize| (s * i + r) as isize - self.p as isize;
            let lo = (0..self.pd[axis]).find(|&i| x0(i) >= 0)?;
            let hi = (0..self.pd[axis])
                .rev()
                .find(|&i| x0(i) < self.n[axis] as isize)?;
            (hi >= lo).then(|| (lo, hi - lo + 1, x0(lo) as usize))
        };
        let mut runs = Vec::new();
        for rd in 0..s {
            let Some((d0, dn, xd0)) = span(0, rd) else {
                continue;
            };
            for rh in 0..s {
                let Some((h0, hn, xh0)) = span(1, rh) else {
                    continue;
                };
                for rw in 0..s {
                    let Some((w0, wn, xw0)) = span(2, rw) else {
                        continue;
                    };
                    let phase = (rd * s + rh) * s + rw;
                    for id in 0..dn {
                        for ih in 0..hn {
                            let a =
                                phase * pvol + ((d0 + id) * self.pd[1] + h0 + ih) * self.pd[2] + w0;
                            let b = ((xd0 + s * id) * self.n[1] + xh0 + s * ih) * self.n[2] + xw0;
                            runs.push(Run {
                                a,
                                b,
                                len: wn,
                                stride: s,
                            });
                        }
                    }
                }
            }
        }
        runs
    }

    /// Per-channel block sizes of the source layout and of the input.
    fn slot_blocks(&self) -> (usize, usize) {
        (self.s.pow(3) * self.pvol(), vol(self.n))
    }

    fn rowoffs(&self) -> Vec<usize> {
        let (k, s) = (self.k, self.s);
        let pvol = self.pvol();
        let mut offs = Vec::with_capacity(self.cin * k * k * k);
        for ci in 0..self.cin {
            for td in 0..k {
                for th in 0..k {
                    for tw in 0..k {
                        let phase = ((td % s) * s + th % s) * s + tw % s;
                        let base = (ci * s * s * s + phase) * pvol;
                        offs.push(
                            base + (td / s) * self.pd[1] * self.pd[2]
                                + (th / s) * self.pd[2]
                                + tw / s,
                        );
                    }
                }
            }
        }
        offs
    }
}

/// One output phase of a transposed convolution.
struct TPhase {
    r: [usize; 3],
    j0: [usize; 3],
    cnt: [usize; 3],
    q: [usize; 3],
}

struct TconvPlan {
    k: usize,
    s: usize,
    p: usize,
    n: [usize; 3],
    m: [usize; 3],
    qpad: usize,
    xd: [usize; 3],
    cin: usize,
    cout: usize,
    phases: Vec<TPhase>,
}

impl TconvPlan {
    fn new(spec: &ConvSpec, n: [usize; 3], m: [usize; 3]) -> Self {
        let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
        let qpad = k.div_ceil(s) - 1;
        let mut phases = Vec::new();
        let mut jmax_all = [0usize; 3];
        let axis = |a: usize, r: usize| -> Option<(usize, usize, usize)> {
            let q = if r < k { (k - r).div_ceil(s) } else { 0 };
            let lo = (p as isize - r as isize).max(0) as usize;
            let j0 = lo.div_ceil(s);
            let hi = m[a] as isize - 1 + p as isize - r as isize;
            if hi < 0 {
                return None;
            }
            let j1 = hi as usize / s;
            (q > 0 && j1 >= j0).then_some((j0, j1 - j0 + 1, q))
        };
        for rd in 0..s {
            for rh in 0..s {
                for rw in 0..s {
                    let r = [rd, rh, rw];
                    let (Some(a0), Some(a1), Some(a2)) = (axis(0, rd), axis(1, rh), axis(2, rw))
                    else {
                        continue;
                    };
                    let per = [a0, a1, a2];
                    for a in 0..3 {
                        jmax_all[a] = jmax_all[a].max(per[a].0 + per[a].1 - 1);
                    }
                    phases.push(TPhase {
                        r,
                        j0: per.map(|t| t.0),
                        cnt: per.map(|t| t.1),
                        q: per.map(|t| t.2),
                    });
                }
            }
        }
        let mut xd = [0; 3];
        for a in 0..3 {
            xd[a] = (n[a] + qpad).max(jmax_all[a] + qpad + 1);
        }
        Self {
            k,
            s,
            p,
            n,
            m,
            qpad,
            xd,
            cin: spec.in_channels,
            cout: spec.out_channels,
            phases,
        }
    }

    fn xvol(&self) -> usize {
        vol(self.xd)
    }

    fn src_len(&self) -> usize {
        self.cin * self.xvol()
    }

    /// Runs pairing padded source slots (`a`) with input voxels (`b`).
    fn slot_runs(&self) -> Vec<Run> {
        let qp = self.qpad;
        let mut runs = Vec::with_capacity(self.n[0] * self.n[1]);
        for d in 0..self.n[0] {
            for h in 0..self.n[1] {
                runs.push(Run {
                    a: ((d + qp) * self.xd[1] + h + qp) * self.xd[2] + qp,
                    b: (d * self.n[1] + h) * self.n[2],
                    len: self.n[2],
                    stride: 1,
                });
            }
        }
        runs
    }

    fn slot_blocks(&self) -> (usize, usize) {
        (self.xvol(), vol(self.n))
    }

    fn lin(&self, ph: &TPhase) -> Lin {
        Lin {
            st: [self.xd[1] * self.xd[2], self.xd[2]],
            cnt: ph.cnt,
        }
    }

    fn rows(&self, ph: &TPhase) -> usize {
        self.cin * ph.q[0] * ph.q[1] * ph.q[2]
    }

    fn rowoffs(&self, ph: &TPhase) -> Vec<usize> {
        let xvol = self.xvol();
        let mut offs = Vec::with_capacity(self.rows(ph));
        for ci in 0..self.cin {
            for qd in 0..ph.q[0] {
                for qh in 0..ph.q[1] {
                    for qw in 0..ph.q[2] {
                        let d = ph.j0[0] + self.qpad - qd;
                        let h = ph.j0[1] + self.qpad - qh;
                        let w = ph.j0[2] + self.qpad - qw;
                        offs.push(ci * xvol + (d * self.xd[1] + h) * self.xd[2] + w);
                    }
                }
            }
        }
        offs
    }

    /// Weight index in `[in, out, k, k, k]` for every (out-channel, row) of the phase matrix.
    fn weight_index(&self, ph: &TPhase, co: usize, row: usize) -> usize {
        let qq = ph.q[0] * ph.q[1] * ph.q[2];
        let ci = row / qq;
        let rem = row % qq;
        let qd = rem / (ph.q[1] * ph.q[2]);
        let qh = (rem / ph.q[2]) % ph.q[1];
        let qw = rem % ph.q[2];
        let k = self.k;
        let t = [
            ph.r[0] + self.s * qd,
            ph.r[1] + self.s * qh,
            ph.r[2] + self.s * qw,
        ];
        (((ci * self.cout + co) * k + t[0]) * k + t[1]) * k + t[2]
    }

    fn phase_matrix<T: Real>(&self, ph: &TPhase, w: &[T]) -> Vec<T> {
        let rows = self.rows(ph);
        let mut a = vec![T::zero(); self.cout * rows];
        for co in 0..self.cout {
            for row in 0..rows {
                a[co * rows + row] = w[self.weight_index(ph, co, row)];
            }
        }
        a
    }

    /// Runs pairing the phase's linear layout (`a`) with output voxels (`b`).
    fn out_runs(&self, ph: &TPhase) -> Vec<Run> {
        let lin = self.lin(ph);
        let o = |a: usize, j: usize| self.s * (ph.j0[a] + j) + ph.r[a] - self.p;
        let mut runs = Vec::with_capacity(ph.cnt[0] * ph.cnt[1]);
        for d in 0..ph.cnt[0] {
            for h in 0..ph.cnt[1] {
                runs.push(Run {
                    a: d * lin.st[0] + h * lin.st[1],
                    b: (o(0, d) * self.m[1] + o(1, h)) * self.m[2] + o(2, 0),
                    len: ph.cnt[2],
                    stride: self.s,
                });
            }
        }
        runs
    }
}

/// A row segment: `len` elements at `a + i` paired with `b + i·stride`.
#[derive(Clone, Copy, Debug)]
struct Run {
    a: usize,
    b: usize,
    len: usize,
    stride: usize,
}

/// `a[run] = b[run]` for every run, channel by channel.
fn gather_runs<T: Real>(
    runs: &[Run],
    channels: usize,
    a: &mut [T],
    ablock: usize,
    b: &[T],
    bblock: usize,
) {
    for c in 0..channels {
        let (ac, bc) = (
            &mut a[c * ablock..(c + 1) * ablock],
            &b[c * bblock..(c + 1) * bblock],
        );
        for r in runs {
            let dst = &mut ac[r.a..r.a + r.len];
            if r.stride == 1 {
                dst.copy_from_slice(&bc[r.b..r.b + r.len]);
            } else {
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = bc[r.b + i * r.stride];
                }
            }
        }
    }
}

/// `b[run] += a[run]` for every run, channel by channel.
fn scatter_add_runs<T: Real>(
    runs: &[Run],
    channels: usize,
    a: &[T],
    ablock: usize,
    b: &mut [T],
    bblock: usize,
) {
    for c in 0..channels {
        let (ac, bc) = (
            &a[c * ablock..(c + 1) * ablock],
            &mut b[c * bblock..(c + 1) * bblock],
        );
        for r in runs {
            let src = &ac[r.a..r.a + r.len];
            if r.stride == 1 {
                for (d, &v) in bc[r.b..r.b + r.len].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (i, &v) in src.iter().enumerate() {
                    bc[r.b + i * r.stride] += v;
                }
            }
        }
    }
}

/// Runs pairing a linear layout (`a`) with a dense `m`-shaped volume (`b`).
fn lin_runs(lin: Lin, m: [usize; 3]) -> Vec<Run> {
    let mut runs = Vec::with_capacity(lin.cnt[0] * lin.cnt[1]);
    for d in 0..lin.cnt[0] {
        for h in 0..lin.cnt[1] {
            runs.push(Run {
                a: d * lin.st[0] + h * lin.st[1],
                b: (d * m[1] + h) * m[2],
                len: lin.cnt[2],
                stride: 1,
            });
        }
    }
    runs
}

/// Forward convolution (regular or transposed) over a batch `[B, Cin, D, H, W]`.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let out_shape = check_conv_shapes(x, w, b, spec)?;
    let batch = out_shape[0];
    let n = spatial(x.shape());
    let m = spatial(&out_shape);
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (nvol, mvol) = (vol(n), vol(m));
    let mut out = vec![T::zero(); batch * cout * mvol];
    if let Some(b) = b {
        for item in out.chunks_exact_mut(cout * mvol) {
            for (co, chan) in item.chunks_exact_mut(mvol).enumerate() {
                chan.fill(b.data()[co]);
            }
        }
    }
    let xd = x.data();
    if !spec.transposed {
        let plan = ConvPlan::new(spec, n, m);
        let rowoff = plan.rowoffs();
        let lin = plan.lin();
        let l = lin.len();
        let (slots, (sblock, xblock)) = (plan.slot_runs(), plan.slot_blocks());
        let outs = lin_runs(lin, m);
        let mut src = vec![T::zero(); plan.src_len()];
        let mut buf = vec![T::zero(); cout * l];
        for bi in 0..batch {
            let xi = &xd[bi * cin * nvol..(bi + 1) * cin * nvol];
            gather_runs(&slots, cin, &mut src, sblock, xi, xblock);
            buf.fill(T::zero());
            gather_gemm(cout, w.data(), &rowoff, &src, l, &mut buf);
            let oi = &mut out[bi * cout * mvol..(bi + 1) * cout * mvol];
            scatter_add_runs(&outs, cout, &buf, l, oi, mvol);
        }
    } else {
        let plan = TconvPlan::new(spec, n, m);
        let (slots, (sblock, xblock)) = (plan.slot_runs(), plan.slot_blocks());
        let mut src = vec![T::zero(); plan.src_len()];
        let phases: Vec<_> = plan
            .phases
            .iter()
            .map(|ph| {
                let l = plan.lin(ph).len();
                (
                    plan.phase_matrix(ph, w.data()),
                    plan.rowoffs(ph),
                    l,
                    plan.out_runs(ph),
                )
            })
            .collect();
        let lmax = phases.iter().map(|p| p.2).max().unwrap_or(0);
        let mut buf = vec![T::zero(); cout * lmax];
        for bi in 0..batch {
            let xi = &xd[bi * cin * nvol..(bi + 1) * cin * nvol];
            gather_runs(&slots, cin, &mut src, sblock, xi, xblock);
            let oi = &mut out[bi * cout * mvol..(bi + 1) * cout * mvol];
            for (a, rowoff, l, runs) in &phases {
                let buf = &mut buf[..cout * l];
                buf.fill(T::zero());
                gather_gemm(cout, a, rowoff, &src, *l, buf);
                scatter_add_runs(runs, cout, buf, *l, oi, mvol);
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [need_x, need_w, need_b] = need;
    let batch = x.shape()[0];
    let n = spatial(x.shape());
    let m = spatial(grad_out.shape());
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let (nvol, mvol) = (vol(n), vol(m));
    let xd = x.data();
    let gd = grad_out.data();
    // The input gradient is the adjoint operator applied to `grad_out`, which
    // reuses the faster forward kernels whenever its output extent is exact.
    let adjoint = ConvSpec {
        in_channels: cout,
        out_channels: cin,
        transposed: !spec.transposed,
        bias: false,
        ..*spec
    };
    let fast_dx = need_x && (0..3).all(|a| adjoint.output_extent(m[a]) == Some(n[a]));
    let fast = if fast_dx {
        Some(conv3d_forward(grad_out, w, None, &adjoint)?.into_data())
    } else {
        None
    };
    let need_x = need_x && !fast_dx;
    let mut dx = need_x.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.numel()]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); cout];
        for item in gd.chunks_exact(cout * mvol) {
            for (co, chan) in item.chunks_exact(mvol).enumerate() {
                db[co] += chan.iter().copied().sum::<T>();
            }
        }
        db
    });

    if need_x || need_w {
        if !spec.transposed {
            let plan = ConvPlan::new(spec, n, m);
            let rowoff = plan.rowoffs();
            let lin = plan.lin();
            let l = lin.len();
            let (slots, (sblock, xblock)) = (plan.slot_runs(), plan.slot_blocks());
            let outs = lin_runs(lin, m);
            let mut src = vec![T::zero(); plan.src_len()];
            let mut dsrc = vec![T::zero(); plan.src_len()];
            let mut dlin = vec![T::zero(); cout * l];
            for bi in 0..batch {
                let gi = &gd[bi * cout * mvol..(bi + 1) * cout * mvol];
                gather_runs(&outs, cout, &mut dlin, l, gi, mvol);
                if let Some(dw) = dw.as_mut() {
                    let xi = &xd[bi * cin * nvol..(bi + 1) * cin * nvol];
                    gather_runs(&slots, cin, &mut src, sblock, xi, xblock);
                    gather_gemm_wgrad(cout, &dlin, &rowoff, &src, l, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    dsrc.fill(T::zero());
                    scatter_gemm(cout, w.data(), &rowoff, &dlin, l, &mut dsrc);
                    let dxi = &mut dx[bi * cin * nvol..(bi + 1) * cin * nvol];
                    scatter_add_runs(&slots, cin, &dsrc, sblock, dxi, xblock);
                }
            }
        } else {
            let plan = TconvPlan::new(spec, n, m);
            let (slots, (sblock, xblock)) = (plan.slot_runs(), plan.slot_blocks());
            let mut src = vec![T::zero(); plan.src_len()];
            let mut dsrc = vec![T::zero(); plan.src_len()];
            let phases: Vec<_> = plan
                .phases
                .iter()
                .map(|ph| {
                    let l = plan.lin(ph).len();
                    (
                        plan.phase_matrix(ph, w.data()),
                        plan.rowoffs(ph),
                        l,
                        plan.out_runs(ph),
                    )
                })
                .collect();
            let mut dmats: Vec<Vec<T>> =
                phases.iter().map(|p| vec![T::zero(); p.0.len()]).collect();
            let lmax = phases.iter().map(|p| p.2).max().unwrap_or(0);
            let mut dlin = vec![T::zero(); cout * lmax];
            for bi in 0..batch {
                let gi = &gd[bi * cout * mvol..(bi + 1) * cout * mvol];
                if need_w {
                    let xi = &xd[bi * cin * nvol..(bi + 1) * cin * nvol];
                    gather_runs(&slots, cin, &mut src, sblock, xi, xblock);
                }
                dsrc.fill(T::zero());
                for ((a, rowoff, l, runs), dm) in phases.iter().zip(dmats.iter_mut()) {
                    let dlin = &mut dlin[..cout * l];
                    // Positions outside the phase grid must read as zero.
                    dlin.fill(T::zero());
                    gather_runs(runs, cout, dlin, *l, gi, mvol);
                    if need_w {
                        gather_gemm_wgrad(cout, dlin, rowoff, &src, *l, dm);
                    }
                    if need_x {
                        scatter_gemm(cout, a, rowoff, dlin, *l, &mut dsrc);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dxi = &mut dx[bi * cin * nvol..(bi + 1) * cin * nvol];
                    scatter_add_runs(&slots, cin, &dsrc, sblock, dxi, xblock);
                }
            }
            if let Some(dw) = dw.as_mut() {
                for (ph, dm) in plan.phases.iter().zip(&dmats) {
                    let rows = plan.rows(ph);
                    for co in 0..cout {
                        for row in 0..rows {
                            dw[plan.weight_index(ph, co, row)] += dm[co * rows + row];
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: fast
            .or(dx)
            .map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![cout], d)),
    })
}
