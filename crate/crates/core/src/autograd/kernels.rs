//! Slice-level compute kernels. Every volume is stored channel-major,
//! C-order: `(C, H, W, D)` with the depth axis contiguous.

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, all operands given as
/// (slice, offset, row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize, usize),
    b: (&[f64], usize, usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, off: usize, rs: usize, cs: usize| {
        off + (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs
    };
    let (a_buf, a_off, rsa, csa) = a;
    let (b_buf, b_off, rsb, csb) = b;
    let (c_buf, c_off, rsc, csc) = c;
    if k > 0 {
        assert!(extent(m, k, a_off, rsa, csa) < a_buf.len(), "gemm: A out of bounds");
        assert!(extent(k, n, b_off, rsb, csb) < b_buf.len(), "gemm: B out of bounds");
    }
    assert!(extent(m, n, c_off, rsc, csc) < c_buf.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element the routine touches, and
    // `c` is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a_buf.as_ptr().add(a_off),
            rsa as isize,
            csa as isize,
            b_buf.as_ptr().add(b_off),
            rsb as isize,
            csb as isize,
            beta,
            c_buf.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Layout of a volume zero-padded by one voxel on every face.
struct Padded {
    dims: [usize; 3],
    len: usize,
    /// Flat stride of the first two padded axes.
    strides: [usize; 2],
    /// Largest absolute flat offset of a 3×3×3 neighbour.
    reach: usize,
}

impl Padded {
    fn new(dims: [usize; 3]) -> Self {
        let p = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
        let strides = [p[1] * p[2], p[2]];
        Self {
            dims,
            len: p[0] * p[1] * p[2],
            strides,
            reach: strides[0] + strides[1] + 1,
        }
    }

    fn interior(&self, i: usize, j: usize) -> usize {
        (i + 1) * self.strides[0] + (j + 1) * self.strides[1] + 1
    }

    fn pad(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let [h, w, d] = self.dims;
        let mut out = vec![0.0; channels * self.len];
        for c in 0..channels {
            for i in 0..h {
                for j in 0..w {
                    let src = ((c * h + i) * w + j) * d;
                    let dst = c * self.len + self.interior(i, j);
                    out[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
        }
        out
    }

    fn crop_into(&self, padded: &[f64], channels: usize, out: &mut [f64], accumulate: bool) {
        let [h, w, d] = self.dims;
        for c in 0..channels {
            for i in 0..h {
                for j in 0..w {
                    let dst = ((c * h + i) * w + j) * d;
                    let src = c * self.len + self.interior(i, j);
                    if accumulate {
                        for (o, v) in out[dst..dst + d].iter_mut().zip(&padded[src..src + d]) {
                            *o += v;
                        }
                    } else {
                        out[dst..dst + d].copy_from_slice(&padded[src..src + d]);
                    }
                }
            }
        }
    }

    /// Signed flat offsets of the 27 kernel taps in weight order.
    fn tap_offsets(&self) -> [isize; 27] {
        let mut offs = [0isize; 27];
        for (t, off) in offs.iter_mut().enumerate() {
            let (a, b, c) = (t / 9, (t / 3) % 3, t % 3);
            *off = (a as isize - 1) * self.strides[0] as isize
                + (b as isize - 1) * self.strides[1] as isize
                + (c as isize - 1);
        }
        offs
    }
}

/// Same-padded 3×3×3 convolution of one sample.
/// `x: (ci, h, w, d)`, `weight: (co, ci, 3, 3, 3)`, `out: (co, h, w, d)`.
pub(crate) fn conv3_forward(
    x: &[f64],
    ci: usize,
    dims: [usize; 3],
    weight: &[f64],
    bias: &[f64],
    co: usize,
    out: &mut [f64],
) {
    let pad = Padded::new(dims);
    let xp = pad.pad(x, ci);
    let mut yp = vec![0.0; co * pad.len];
    let span = pad.len - 2 * pad.reach;
    let q0 = pad.reach;
    for (t, off) in pad.tap_offsets().into_iter().enumerate() {
        let src = (q0 as isize + off) as usize;
        gemm(
            co,
            ci,
            span,
            (weight, t, ci * 27, 27),
            (&xp, src, pad.len, 1),
            1.0,
            (&mut yp, q0, pad.len, 1),
        );
    }
    pad.crop_into(&yp, co, out, false);
    let n = dims.iter().product::<usize>();
    for (c, &b) in bias.iter().enumerate() {
        out[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += b);
    }
}

/// Accumulating backward pass of [`conv3_forward`] for one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3_backward(
    x: &[f64],
    ci: usize,
    dims: [usize; 3],
    weight: &[f64],
    co: usize,
    grad_out: &[f64],
    grad_x: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let pad = Padded::new(dims);
    let n = dims.iter().product::<usize>();
    let span = pad.len - 2 * pad.reach;
    let q0 = pad.reach;
    let offsets = pad.tap_offsets();
    let gp = pad.pad(grad_out, co);

    if let Some(gb) = grad_bias {
        for (c, g) in gb.iter_mut().enumerate() {
            *g += grad_out[c * n..(c + 1) * n].iter().sum::<f64>();
        }
    }
    if let Some(gw) = grad_weight {
        let xp = pad.pad(x, ci);
        for (t, &off) in offsets.iter().enumerate() {
            let src = (q0 as isize + off) as usize;
            gemm(
                co,
                span,
                ci,
                (&gp, q0, pad.len, 1),
                (&xp, src, 1, pad.len),
                1.0,
                (gw, t, ci * 27, 27),
            );
        }
    }
    if let Some(gx) = grad_x {
        let mut gxp = vec![0.0; ci * pad.len];
        for (t, &off) in offsets.iter().enumerate() {
            let dst = (q0 as isize + off) as usize;
            gemm(
                ci,
                co,
                span,
                (weight, t, 27, ci * 27),
                (&gp, q0, pad.len, 1),
                1.0,
                (&mut gxp, dst, pad.len, 1),
            );
        }
        pad.crop_into(&gxp, ci, gx, true);
    }
}

/// Rearranges non-overlapping `scale`-sized blocks into rows:
/// `(c, h, w, d)` → `(c·sa·sb·sc, h/sa · w/sb · d/sc)`.
pub(crate) fn space_to_depth(x: &[f64], channels: usize, dims: [usize; 3], scale: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = dims;
    let [sa, sb, sc] = scale;
    let (h2, w2, d2) = (h / sa, w / sb, d / sc);
    let n2 = h2 * w2 * d2;
    let mut out = vec![0.0; channels * sa * sb * sc * n2];
    for c in 0..channels {
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let row = ((c * sa + i % sa) * sb + j % sb) * sc + k % sc;
                    let col = ((i / sa) * w2 + j / sb) * d2 + k / sc;
                    out[row * n2 + col] = x[((c * h + i) * w + j) * d + k];
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_depth`]; `dims` is the full-resolution shape.
pub(crate) fn depth_to_space(cols: &[f64], channels: usize, dims: [usize; 3], scale: [usize; 3]) -> Vec<f64> {
    let [h, w, d] = dims;
    let [sa, sb, sc] = scale;
    let (w2, d2) = (w / sb, d / sc);
    let n2 = (h / sa) * w2 * d2;
    let mut out = vec![0.0; channels * h * w * d];
    for c in 0..channels {
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let row = ((c * sa + i % sa) * sb + j % sb) * sc + k % sc;
                    let col = ((i / sa) * w2 + j / sb) * d2 + k / sc;
                    out[((c * h + i) * w + j) * d + k] = cols[row * n2 + col];
                }
            }
        }
    }
    out
}

/// Interpolation plan for upsampling one axis of length `n` by `scale`
/// (half-pixel centres, edge clamped): `(lo, hi, w_lo, w_hi)` per output.
pub(crate) fn linear_plan(n: usize, scale: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..n * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Applies a [`linear_plan`] along the middle axis of an
/// `(outer, n_in, inner)` array.
pub(crate) fn resample_axis(
    x: &[f64],
    outer: usize,
    n_in: usize,
    inner: usize,
    plan: &[(usize, usize, f64, f64)],
) -> Vec<f64> {
    let n_out = plan.len();
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        for (i, &(lo, hi, wl, wh)) in plan.iter().enumerate() {
            let dst = (o * n_out + i) * inner;
            let a = (o * n_in + lo) * inner;
            let b = (o * n_in + hi) * inner;
            for t in 0..inner {
                out[dst + t] = wl * x[a + t] + wh * x[b + t];
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`].
pub(crate) fn resample_axis_adjoint(
    g: &[f64],
    outer: usize,
    n_in: usize,
    inner: usize,
    plan: &[(usize, usize, f64, f64)],
) -> Vec<f64> {
    let n_out = plan.len();
    let mut out = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        for (i, &(lo, hi, wl, wh)) in plan.iter().enumerate() {
            let src = (o * n_out + i) * inner;
            let a = (o * n_in + lo) * inner;
            let b = (o * n_in + hi) * inner;
            for t in 0..inner {
                out[a + t] += wl * g[src + t];
                out[b + t] += wh * g[src + t];
            }
        }
    }
    out
}
