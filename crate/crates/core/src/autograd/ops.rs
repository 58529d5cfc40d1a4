//! Differentiable operations on batched volumes `(B, C, H, W, D)`.

use ndarray::{concatenate, s, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use super::kernels::{
    conv3_backward, conv3_forward, depth_to_space, gemm, linear_plan, resample_axis,
    resample_axis_adjoint, space_to_depth,
};
use super::{scalar_tensor, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Instance,
    Batch,
}

/// Statistics source for a normalization layer.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Compute mean and variance from the incoming batch.
    FromInput,
    /// Use fixed per-channel statistics (batch norm at inference).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

pub(crate) fn split5(shape: &[usize]) -> (usize, usize, [usize; 3]) {
    assert_eq!(shape.len(), 5, "expected a (B, C, H, W, D) tensor, got {shape:?}");
    (shape[0], shape[1], [shape[2], shape[3], shape[4]])
}

fn contiguous(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("kernel produced wrong element count")
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        let value = &*self.value() + &*other.value();
        self.tape.record(value, &[*self, *other], |g, need| {
            vec![need[0].then(|| g.clone()), need[1].then(|| g.clone())]
        })
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let value = &*self.value() * factor;
        self.tape
            .record(value, &[*self], move |g, _| vec![Some(g * factor)])
    }

    /// Scalar sum of all elements.
    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape();
        let value = scalar_tensor(self.value().sum());
        self.tape.record(value, &[*self], move |g, _| {
            vec![Some(Tensor::from_elem(IxDyn(&shape), g[IxDyn(&[])]))]
        })
    }

    /// Scalar `Σ self ⊙ weights` for a constant weight tensor.
    pub fn weighted_sum(&self, weights: &Tensor) -> Var<'t> {
        assert_eq!(self.shape(), weights.shape());
        let value = scalar_tensor((&*self.value() * weights).sum());
        let weights = weights.clone();
        self.tape.record(value, &[*self], move |g, _| {
            vec![Some(&weights * g[IxDyn(&[])])]
        })
    }

    /// Same-padded 3×3×3 convolution; `weight: (Co, Ci, 3, 3, 3)`, `bias: (Co)`.
    pub fn conv3(&self, weight: &Var<'t>, bias: &Var<'t>) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let (b, ci, dims) = split5(xv.shape());
        let co = wv.shape()[0];
        assert_eq!(wv.shape(), &[co, ci, 3, 3, 3], "conv3 weight shape");
        let n: usize = dims.iter().product();
        let x = contiguous(&xv);
        let w = contiguous(&wv);
        let bias_s = contiguous(&bv);
        let mut out = vec![0.0; b * co * n];
        for s in 0..b {
            conv3_forward(
                &x[s * ci * n..(s + 1) * ci * n],
                ci,
                dims,
                &w,
                &bias_s,
                co,
                &mut out[s * co * n..(s + 1) * co * n],
            );
        }
        let out_shape = [b, co, dims[0], dims[1], dims[2]];
        self.tape.record(
            from_vec(&out_shape, out),
            &[*self, *weight, *bias],
            move |g, need| {
                let x = contiguous(&xv);
                let w = contiguous(&wv);
                let g = contiguous(g);
                let mut gx = need[0].then(|| vec![0.0; b * ci * n]);
                let mut gw = need[1].then(|| vec![0.0; co * ci * 27]);
                let mut gb = need[2].then(|| vec![0.0; co]);
                for s in 0..b {
                    conv3_backward(
                        &x[s * ci * n..(s + 1) * ci * n],
                        ci,
                        dims,
                        &w,
                        co,
                        &g[s * co * n..(s + 1) * co * n],
                        gx.as_mut().map(|v| &mut v[s * ci * n..(s + 1) * ci * n]),
                        gw.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                }
                vec![
                    gx.map(|v| from_vec(&[b, ci, dims[0], dims[1], dims[2]], v)),
                    gw.map(|v| from_vec(&[co, ci, 3, 3, 3], v)),
                    gb.map(|v| from_vec(&[co], v)),
                ]
            },
        )
    }

    /// Convolution with kernel size equal to stride (non-overlapping blocks).
    /// `weight: (Co, Ci, sa, sb, sc)`. With `scale = [1, 1, 1]` this is a
    /// per-voxel channel mixer.
    pub fn patch_conv(&self, weight: &Var<'t>, bias: &Var<'t>, scale: [usize; 3]) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let (b, ci, dims) = split5(xv.shape());
        let co = wv.shape()[0];
        assert_eq!(
            wv.shape(),
            &[co, ci, scale[0], scale[1], scale[2]],
            "patch_conv weight shape"
        );
        assert!(
            (0..3).all(|a| dims[a] % scale[a] == 0),
            "patch_conv: {dims:?} not divisible by {scale:?}"
        );
        let small = [dims[0] / scale[0], dims[1] / scale[1], dims[2] / scale[2]];
        let n_in: usize = dims.iter().product();
        let n_out: usize = small.iter().product();
        let rows = ci * scale.iter().product::<usize>();
        let identity_scale = scale == [1, 1, 1];
        let x = contiguous(&xv);
        let w = contiguous(&wv);
        let bias_s = contiguous(&bv);
        let mut out = vec![0.0; b * co * n_out];
        for s in 0..b {
            let xs = &x[s * ci * n_in..(s + 1) * ci * n_in];
            let cols = if identity_scale { xs.to_vec() } else { space_to_depth(xs, ci, dims, scale) };
            let o = &mut out[s * co * n_out..(s + 1) * co * n_out];
            for (c, &bb) in bias_s.iter().enumerate() {
                o[c * n_out..(c + 1) * n_out].fill(bb);
            }
            gemm(co, rows, n_out, (&w, 0, rows, 1), (&cols, 0, n_out, 1), 1.0, (o, 0, n_out, 1));
        }
        let out_shape = [b, co, small[0], small[1], small[2]];
        self.tape.record(
            from_vec(&out_shape, out),
            &[*self, *weight, *bias],
            move |g, need| {
                let x = contiguous(&xv);
                let w = contiguous(&wv);
                let g = contiguous(g);
                let mut gx = need[0].then(|| vec![0.0; b * ci * n_in]);
                let mut gw = need[1].then(|| vec![0.0; co * rows]);
                let mut gb = need[2].then(|| vec![0.0; co]);
                for s in 0..b {
                    let gs = &g[s * co * n_out..(s + 1) * co * n_out];
                    if let Some(gw) = gw.as_mut() {
                        let xs = &x[s * ci * n_in..(s + 1) * ci * n_in];
                        let cols = if identity_scale { xs.to_vec() } else { space_to_depth(xs, ci, dims, scale) };
                        gemm(co, n_out, rows, (gs, 0, n_out, 1), (&cols, 0, 1, n_out), 1.0, (gw, 0, rows, 1));
                    }
                    if let Some(gb) = gb.as_mut() {
                        for (c, v) in gb.iter_mut().enumerate() {
                            *v += gs[c * n_out..(c + 1) * n_out].iter().sum::<f64>();
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut gcols = vec![0.0; rows * n_out];
                        gemm(rows, co, n_out, (&w, 0, 1, rows), (gs, 0, n_out, 1), 0.0, (&mut gcols, 0, n_out, 1));
                        let dst = &mut gx[s * ci * n_in..(s + 1) * ci * n_in];
                        if identity_scale {
                            dst.copy_from_slice(&gcols);
                        } else {
                            dst.copy_from_slice(&depth_to_space(&gcols, ci, dims, scale));
                        }
                    }
                }
                vec![
                    gx.map(|v| from_vec(&[b, ci, dims[0], dims[1], dims[2]], v)),
                    gw.map(|v| from_vec(&[co, ci, scale[0], scale[1], scale[2]], v)),
                    gb.map(|v| from_vec(&[co], v)),
                ]
            },
        )
    }

    /// Transposed convolution with kernel size equal to stride.
    /// `weight: (Ci, Co, sa, sb, sc)`; output spatial dims are `dims · scale`.
    pub fn patch_deconv(&self, weight: &Var<'t>, bias: &Var<'t>, scale: [usize; 3]) -> Var<'t> {
        let xv = self.value();
        let wv = weight.value();
        let bv = bias.value();
        let (b, ci, dims) = split5(xv.shape());
        let co = wv.shape()[1];
        assert_eq!(
            wv.shape(),
            &[ci, co, scale[0], scale[1], scale[2]],
            "patch_deconv weight shape"
        );
        let big = [dims[0] * scale[0], dims[1] * scale[1], dims[2] * scale[2]];
        let n_in: usize = dims.iter().product();
        let n_out: usize = big.iter().product();
        let vol = scale.iter().product::<usize>();
        let rows = co * vol;
        let x = contiguous(&xv);
        let w = contiguous(&wv);
        let bias_s = contiguous(&bv);
        let mut out = vec![0.0; b * co * n_out];
        for s in 0..b {
            let xs = &x[s * ci * n_in..(s + 1) * ci * n_in];
            let mut cols = vec![0.0; rows * n_in];
            gemm(rows, ci, n_in, (&w, 0, 1, rows), (xs, 0, n_in, 1), 0.0, (&mut cols, 0, n_in, 1));
            let mut full = depth_to_space(&cols, co, big, scale);
            for (c, &bb) in bias_s.iter().enumerate() {
                full[c * n_out..(c + 1) * n_out].iter_mut().for_each(|v| *v += bb);
            }
            out[s * co * n_out..(s + 1) * co * n_out].copy_from_slice(&full);
        }
        let out_shape = [b, co, big[0], big[1], big[2]];
        self.tape.record(
            from_vec(&out_shape, out),
            &[*self, *weight, *bias],
            move |g, need| {
                let x = contiguous(&xv);
                let w = contiguous(&wv);
                let g = contiguous(g);
                let mut gx = need[0].then(|| vec![0.0; b * ci * n_in]);
                let mut gw = need[1].then(|| vec![0.0; ci * rows]);
                let mut gb = need[2].then(|| vec![0.0; co]);
                for s in 0..b {
                    let gs = &g[s * co * n_out..(s + 1) * co * n_out];
                    let gcols = space_to_depth(gs, co, big, scale);
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[s * ci * n_in..(s + 1) * ci * n_in];
                        gemm(ci, rows, n_in, (&w, 0, rows, 1), (&gcols, 0, n_in, 1), 1.0, (dst, 0, n_in, 1));
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xs = &x[s * ci * n_in..(s + 1) * ci * n_in];
                        gemm(ci, n_in, rows, (xs, 0, n_in, 1), (&gcols, 0, 1, n_in), 1.0, (gw, 0, rows, 1));
                    }
                    if let Some(gb) = gb.as_mut() {
                        for (c, v) in gb.iter_mut().enumerate() {
                            *v += gs[c * n_out..(c + 1) * n_out].iter().sum::<f64>();
                        }
                    }
                }
                vec![
                    gx.map(|v| from_vec(&[b, ci, dims[0], dims[1], dims[2]], v)),
                    gw.map(|v| from_vec(&[ci, co, scale[0], scale[1], scale[2]], v)),
                    gb.map(|v| from_vec(&[co], v)),
                ]
            },
        )
    }

    /// Parameter-free trilinear upsampling by an integer factor per axis.
    pub fn upsample_trilinear(&self, scale: [usize; 3]) -> Var<'t> {
        let xv = self.value();
        let (b, c, dims) = split5(xv.shape());
        let big = [dims[0] * scale[0], dims[1] * scale[1], dims[2] * scale[2]];
        let plans: Vec<_> = (0..3).map(|a| linear_plan(dims[a], scale[a])).collect();
        // Axis a is resampled with the preceding axes already at full size.
        let layout = move |a: usize| {
            let mut cur = dims;
            cur[..a].copy_from_slice(&big[..a]);
            let outer = b * c * cur[..a].iter().product::<usize>();
            let inner = cur[a + 1..].iter().product::<usize>();
            (outer, cur[a], inner)
        };
        let mut data = contiguous(&xv).into_owned();
        for (a, plan) in plans.iter().enumerate() {
            let (outer, n_in, inner) = layout(a);
            data = resample_axis(&data, outer, n_in, inner, plan);
        }
        let out_shape = [b, c, big[0], big[1], big[2]];
        self.tape.record(from_vec(&out_shape, data), &[*self], move |g, _| {
            let mut gd = contiguous(g).into_owned();
            for a in (0..3).rev() {
                let (outer, n_in, inner) = layout(a);
                gd = resample_axis_adjoint(&gd, outer, n_in, inner, &plans[a]);
            }
            vec![Some(from_vec(&[b, c, dims[0], dims[1], dims[2]], gd))]
        })
    }

    /// Affine normalization. Returns the output and the per-channel batch
    /// mean and (biased) variance that were used, for running-stat updates.
    pub fn norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        kind: NormKind,
        stats: NormStats<'_>,
        eps: f64,
    ) -> (Var<'t>, Vec<f64>, Vec<f64>) {
        let xv = self.value();
        let (b, c, dims) = split5(xv.shape());
        let n: usize = dims.iter().product();
        let x = contiguous(&xv).into_owned();
        let gam = contiguous(&gamma.value()).into_owned();
        let bet = contiguous(&beta.value()).into_owned();
        assert_eq!(gam.len(), c);
        assert_eq!(bet.len(), c);

        // A group is the set of (sample, channel) segments sharing statistics.
        let groups: Vec<(usize, Vec<usize>)> = match kind {
            NormKind::Instance => (0..b)
                .flat_map(|s| (0..c).map(move |ch| (ch, vec![(s * c + ch) * n])))
                .collect(),
            NormKind::Batch => (0..c)
                .map(|ch| (ch, (0..b).map(|s| (s * c + ch) * n).collect()))
                .collect(),
        };
        let fixed = matches!(stats, NormStats::Fixed { .. });
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; groups.len()];
        let mut batch_mean = vec![0.0; c];
        let mut batch_var = vec![0.0; c];
        for (gi, (ch, segs)) in groups.iter().enumerate() {
            let m = (segs.len() * n) as f64;
            let (mean, var) = match stats {
                NormStats::Fixed { mean, var } => (mean[*ch], var[*ch]),
                NormStats::FromInput => {
                    let mean = segs.iter().map(|&o| x[o..o + n].iter().sum::<f64>()).sum::<f64>() / m;
                    let var = segs
                        .iter()
                        .map(|&o| x[o..o + n].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                        .sum::<f64>()
                        / m;
                    (mean, var)
                }
            };
            if kind == NormKind::Batch {
                batch_mean[*ch] = mean;
                batch_var[*ch] = var;
            } else {
                batch_mean[*ch] += mean / b as f64;
                batch_var[*ch] += var / b as f64;
            }
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for &o in segs {
                for t in o..o + n {
                    xhat[t] = (x[t] - mean) * is;
                }
            }
        }
        let mut out = vec![0.0; x.len()];
        for s in 0..b {
            for ch in 0..c {
                let o = (s * c + ch) * n;
                for t in o..o + n {
                    out[t] = gam[ch] * xhat[t] + bet[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let var = self.tape.record(
            from_vec(&shape, out),
            &[*self, *gamma, *beta],
            move |g, need| {
                let g = contiguous(g);
                let mut gx = need[0].then(|| vec![0.0; xhat.len()]);
                let mut ggam = vec![0.0; c];
                let mut gbet = vec![0.0; c];
                for (gi, (ch, segs)) in groups.iter().enumerate() {
                    let m = (segs.len() * n) as f64;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for &o in segs {
                        for t in o..o + n {
                            ggam[*ch] += g[t] * xhat[t];
                            gbet[*ch] += g[t];
                            let d = g[t] * gam[*ch];
                            sum_d += d;
                            sum_dx += d * xhat[t];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let is = inv_std[gi];
                        for &o in segs {
                            for t in o..o + n {
                                let d = g[t] * gam[*ch];
                                gx[t] = if fixed {
                                    d * is
                                } else {
                                    is / m * (m * d - sum_d - xhat[t] * sum_dx)
                                };
                            }
                        }
                    }
                }
                vec![
                    gx.map(|v| from_vec(&shape, v)),
                    need[1].then(|| from_vec(&[c], ggam)),
                    need[2].then(|| from_vec(&[c], gbet)),
                ]
            },
        );
        (var, batch_mean, batch_var)
    }

    pub fn relu(&self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let xv = self.value();
        let value = xv.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.tape.record(value, &[*self], move |g, _| {
            let mut out = g.clone();
            ndarray::Zip::from(&mut out)
                .and(&*xv)
                .for_each(|o, &x| {
                    if x <= 0.0 {
                        *o *= slope;
                    }
                });
            vec![Some(out)]
        })
    }

    /// Concatenates two batched volumes along the channel axis.
    pub fn concat_channels(&self, other: &Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let ca = a.shape()[1];
        let value = concatenate(Axis(1), &[a.view(), b.view()]).expect("concat: spatial shape mismatch");
        self.tape.record(value, &[*self, *other], move |g, need| {
            vec![
                need[0].then(|| g.slice(s![.., ..ca, .., .., ..]).to_owned().into_dyn()),
                need[1].then(|| g.slice(s![.., ca.., .., .., ..]).to_owned().into_dyn()),
            ]
        })
    }

    /// Per-voxel softmax over the channel axis of `logits / tau`.
    pub fn softmax_channels(&self, tau: f64) -> Var<'t> {
        let lv = self.value();
        let (b, k, dims) = split5(lv.shape());
        let n: usize = dims.iter().product();
        let p = softmax_slice(&contiguous(&lv), b, k, n, tau);
        let shape = lv.shape().to_vec();
        let probs = from_vec(&shape, p.clone());
        self.tape.record(probs, &[*self], move |g, _| {
            let g = contiguous(g);
            let mut out = vec![0.0; p.len()];
            for s in 0..b {
                let base = s * k * n;
                for v in 0..n {
                    let mut dot = 0.0;
                    for c in 0..k {
                        let i = base + c * n + v;
                        dot += g[i] * p[i];
                    }
                    for c in 0..k {
                        let i = base + c * n + v;
                        out[i] = p[i] * (g[i] - dot) / tau;
                    }
                }
            }
            vec![Some(from_vec(&shape, out))]
        })
    }
}

/// Max-stabilized softmax of `x / tau` over `k` channels of `n` voxels for
/// each of `b` samples.
pub(crate) fn softmax_slice(x: &[f64], b: usize, k: usize, n: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..b {
        let base = s * k * n;
        for v in 0..n {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(x[base + c * n + v]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = ((x[base + c * n + v] - max) / tau).exp();
                out[base + c * n + v] = e;
                z += e;
            }
            for c in 0..k {
                out[base + c * n + v] /= z;
            }
        }
    }
    out
}
