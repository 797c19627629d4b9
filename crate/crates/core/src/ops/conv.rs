//! 3D convolution and transposed convolution with exact backward passes.
//!
//! Both layers reduce to three slab kernels over a "small" grid (the conv
//! output, or the deconv input) and a "big" grid related by
//! `big = small * stride + k - pad`:
//!
//! * `gather`: small-grid destination, summing over the big grid (conv forward,
//!   deconv input gradient);
//! * `scatter`: big-grid destination, summing over the small grid (conv input
//!   gradient, deconv forward);
//! * `weight_grad`: per channel pair, correlation of the two grids.
//!
//! Every destination voxel accumulates in the same order: source channel, then
//! kernel offsets in `(z, y, x)` scan order. Work is split across destination
//! `(n, c, z)` slabs, each written by exactly one worker, so results are
//! bitwise independent of the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// 3x3x3, stride 1, pad 1: preserves spatial extent.
    pub fn same3(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 3, 1, 1)
    }

    /// 1x1x1 projection.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    /// 4x4x4, stride 2, pad 1 transposed convolution: doubles spatial extent.
    pub fn up2(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 4, 2, 1)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(invalid_arg!("degenerate convolution {:?}", self));
        }
        Ok(())
    }

    /// `[out, in, k, k, k]`
    pub fn conv_weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        [self.out_channels, self.in_channels, k, k, k]
    }

    /// `[in, out, k, k, k]`
    pub fn deconv_weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        [self.in_channels, self.out_channels, k, k, k]
    }

    /// Output extent of a convolution along one axis; `None` when the
    /// arithmetic does not produce a positive integer.
    pub fn conv_extent(&self, input: usize) -> Option<usize> {
        let span = (input + 2 * self.pad).checked_sub(self.kernel)?;
        if span % self.stride != 0 {
            return None;
        }
        Some(span / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn deconv_extent(&self, input: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        let full = (input - 1) * self.stride + self.kernel;
        full.checked_sub(2 * self.pad).filter(|&e| e > 0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    big: [usize; 3],
    small: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn big_plane(&self) -> usize {
        self.big.iter().product()
    }

    fn small_plane(&self) -> usize {
        self.small.iter().product()
    }
}

/// Range of small-grid indices `s` with `0 <= s * stride + kk - pad < big_ext`.
#[inline]
fn valid_range(kk: usize, big_ext: usize, small_ext: usize, stride: usize, pad: usize) -> (usize, usize) {
    let off = kk as isize - pad as isize;
    let stride = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + stride - 1) / stride };
    let top = big_ext as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / stride + 1).min(small_ext as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// `dst[zs, ys, xs] = sum_src sum_k w[k] * src[zs*s+kz-p, ys*s+ky-p, xs*s+kx-p]`
/// for one small-grid slab `zs`.
fn gather_slab<T: Scalar>(
    dst: &mut [T],
    zs: usize,
    src: &[T],
    src_channels: usize,
    weights: &dyn Fn(usize) -> usize,
    w: &[T],
    g: &Geometry,
) {
    let [bd, bh, bw] = g.big;
    let [_, sh, sw] = g.small;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let bplane = g.big_plane();
    dst.fill(T::zero());
    for sc in 0..src_channels {
        let wk = &w[weights(sc)..weights(sc) + k * k * k];
        let plane = &src[sc * bplane..(sc + 1) * bplane];
        for kz in 0..k {
            let zb = (zs * s + kz) as isize - p as isize;
            if zb < 0 || zb >= bd as isize {
                continue;
            }
            let zb = zb as usize;
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, bh, sh, s, p);
                for kx in 0..k {
                    let wv = wk[(kz * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, bw, sw, s, p);
                    if x0 >= x1 {
                        continue;
                    }
                    for ys in y0..y1 {
                        let yb = ys * s + ky - p;
                        let srow = &plane[(zb * bh + yb) * bw..(zb * bh + yb + 1) * bw];
                        let drow = &mut dst[ys * sw..(ys + 1) * sw];
                        if s == 1 {
                            let shift = kx as isize - p as isize;
                            let xb0 = (x0 as isize + shift) as usize;
                            let n = x1 - x0;
                            for (d, &v) in drow[x0..x1].iter_mut().zip(&srow[xb0..xb0 + n]) {
                                *d += wv * v;
                            }
                        } else {
                            for xs in x0..x1 {
                                drow[xs] += wv * srow[xs * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dst[zb, yb, xb] += sum_src sum_k w[k] * src[zs, ys, xs]` where
/// `b = s * stride + k - pad`, for one big-grid slab `zb`.
fn scatter_slab<T: Scalar>(
    dst: &mut [T],
    zb: usize,
    src: &[T],
    src_channels: usize,
    weights: &dyn Fn(usize) -> usize,
    w: &[T],
    g: &Geometry,
) {
    let [_, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let splane = g.small_plane();
    dst.fill(T::zero());
    for sc in 0..src_channels {
        let wk = &w[weights(sc)..weights(sc) + k * k * k];
        let plane = &src[sc * splane..(sc + 1) * splane];
        for kz in 0..k {
            let num = zb as isize + p as isize - kz as isize;
            if num < 0 || num % s as isize != 0 {
                continue;
            }
            let zsrc = (num / s as isize) as usize;
            if zsrc >= sd {
                continue;
            }
            for ky in 0..k {
                let (y0, y1) = valid_range(ky, bh, sh, s, p);
                for kx in 0..k {
                    let wv = wk[(kz * k + ky) * k + kx];
                    let (x0, x1) = valid_range(kx, bw, sw, s, p);
                    if x0 >= x1 {
                        continue;
                    }
                    for ys in y0..y1 {
                        let yb = ys * s + ky - p;
                        let srow = &plane[(zsrc * sh + ys) * sw..(zsrc * sh + ys + 1) * sw];
                        let drow = &mut dst[yb * bw..(yb + 1) * bw];
                        if s == 1 {
                            let shift = kx as isize - p as isize;
                            let xb0 = (x0 as isize + shift) as usize;
                            let n = x1 - x0;
                            for (d, &v) in drow[xb0..xb0 + n].iter_mut().zip(&srow[x0..x1]) {
                                *d += wv * v;
                            }
                        } else {
                            for xs in x0..x1 {
                                drow[xs * s + kx - p] += wv * srow[xs];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[cs][cb][k] = sum_n sum_small small[n, cs, i] * big[n, cb, i*stride + k - pad]`.
fn weight_grad<T: Scalar>(
    small: &[T],
    small_channels: usize,
    big: &[T],
    big_channels: usize,
    batch: usize,
    g: &Geometry,
) -> Vec<Vec<T>> {
    let [bd, bh, bw] = g.big;
    let [sd, sh, sw] = g.small;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let (splane, bplane) = (g.small_plane(), g.big_plane());
    let pairs: Vec<(usize, usize)> = (0..small_channels)
        .flat_map(|cs| (0..big_channels).map(move |cb| (cs, cb)))
        .collect();
    pairs
        .par_iter()
        .map(|&(cs, cb)| {
            let mut acc = vec![T::zero(); k * k * k];
            for n in 0..batch {
                let sp = &small[(n * small_channels + cs) * splane..][..splane];
                let bp = &big[(n * big_channels + cb) * bplane..][..bplane];
                for kz in 0..k {
                    let (z0, z1) = valid_range(kz, bd, sd, s, p);
                    for ky in 0..k {
                        let (y0, y1) = valid_range(ky, bh, sh, s, p);
                        for kx in 0..k {
                            let (x0, x1) = valid_range(kx, bw, sw, s, p);
                            let a = &mut acc[(kz * k + ky) * k + kx];
                            for zs in z0..z1 {
                                let zb = zs * s + kz - p;
                                for ys in y0..y1 {
                                    let yb = ys * s + ky - p;
                                    let srow = &sp[(zs * sh + ys) * sw..][..sw];
                                    let brow = &bp[(zb * bh + yb) * bw..][..bw];
                                    for xs in x0..x1 {
                                        *a += srow[xs] * brow[xs * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            acc
        })
        .collect()
}

fn run_slabs<T: Scalar>(
    batch: usize,
    dst_channels: usize,
    dst_grid: [usize; 3],
    body: impl Fn(usize, usize, usize, &mut [T]) + Sync + Send,
) -> Vec<T> {
    let [d, h, w] = dst_grid;
    let slab = h * w;
    let mut out = vec![T::zero(); batch * dst_channels * d * slab];
    out.par_chunks_mut(slab.max(1)).enumerate().for_each(|(idx, chunk)| {
        let z = idx % d;
        let c = (idx / d) % dst_channels;
        let n = idx / (d * dst_channels);
        body(n, c, z, chunk);
    });
    out
}

fn check_weights<T>(w: &Tensor<T>, b: &Tensor<T>, shape: [usize; 5], out_channels: usize) -> Result<()> {
    if w.shape() != shape {
        return Err(shape_err!("weight shape {:?}, expected {:?}", w.shape(), shape));
    }
    if b.shape() != [out_channels] {
        return Err(shape_err!("bias shape {:?}, expected [{}]", b.shape(), out_channels));
    }
    Ok(())
}

fn conv_geometry(x: [usize; 5], spec: &ConvSpec) -> Result<Geometry> {
    let [_, c, d, h, w] = x;
    spec.validate()?;
    if c != spec.in_channels {
        return Err(shape_err!("input has {c} channels, conv expects {}", spec.in_channels));
    }
    let ext = |e: usize| {
        spec.conv_extent(e)
            .ok_or_else(|| shape_err!("conv of extent {e} with {:?} has no integral output extent", spec))
    };
    Ok(Geometry {
        big: [d, h, w],
        small: [ext(d)?, ext(h)?, ext(w)?],
        k: spec.kernel,
        stride: spec.stride,
        pad: spec.pad,
    })
}

fn deconv_geometry(x: [usize; 5], spec: &ConvSpec) -> Result<Geometry> {
    let [_, c, d, h, w] = x;
    spec.validate()?;
    if c != spec.in_channels {
        return Err(shape_err!("input has {c} channels, deconv expects {}", spec.in_channels));
    }
    let ext = |e: usize| {
        spec.deconv_extent(e)
            .ok_or_else(|| shape_err!("deconv of extent {e} with {:?} has empty output", spec))
    };
    let g = Geometry {
        big: [ext(d)?, ext(h)?, ext(w)?],
        small: [d, h, w],
        k: spec.kernel,
        stride: spec.stride,
        pad: spec.pad,
    };
    Ok(g)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Cross-correlation with bias: `y[co] = b[co] + sum_ci sum_k w[co, ci, k] x[ci, o*s + k - p]`.
pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let dims = x.dims5()?;
    let g = conv_geometry(dims, spec)?;
    check_weights(w, b, spec.conv_weight_shape(), spec.out_channels)?;
    let (n, ci, co) = (dims[0], spec.in_channels, spec.out_channels);
    let k3 = spec.kernel_volume();
    let bplane = g.big_plane();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let out = run_slabs(n, co, g.small, |bn, c, z, slab: &mut [T]| {
        let src = &xd[bn * ci * bplane..(bn + 1) * ci * bplane];
        let sel = |sc: usize| (c * ci + sc) * k3;
        gather_slab(slab, z, src, ci, &sel, wd, &g);
        let bias = bd[c];
        slab.iter_mut().for_each(|v| *v += bias);
    });
    let [sd, sh, sw] = g.small;
    Tensor::from_vec(&[n, co, sd, sh, sw], out)
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let dims = x.dims5()?;
    let g = conv_geometry(dims, spec)?;
    let (n, ci, co) = (dims[0], spec.in_channels, spec.out_channels);
    let [sd, sh, sw] = g.small;
    dy.expect_shape(&[n, co, sd, sh, sw])?;
    if w.shape() != spec.conv_weight_shape() {
        return Err(shape_err!("weight shape {:?}", w.shape()));
    }
    let k3 = spec.kernel_volume();
    let splane = g.small_plane();
    let (wd, dyd) = (w.data(), dy.data());

    let input = if need_input {
        let dx = run_slabs(n, ci, g.big, |bn, c, z, slab: &mut [T]| {
            let src = &dyd[bn * co * splane..(bn + 1) * co * splane];
            let sel = |sc: usize| (sc * ci + c) * k3;
            scatter_slab(slab, z, src, co, &sel, wd, &g);
        });
        Some(Tensor::from_vec(x.shape(), dx)?)
    } else {
        None
    };

    let pairs = weight_grad(dyd, co, x.data(), ci, n, &g);
    let weight = Tensor::from_vec(&spec.conv_weight_shape(), pairs.concat())?;
    let bias = channel_sums(dy)?;
    Ok(ConvGrads { input, weight, bias })
}

/// Transposed convolution: `y[co, i*s + k - p] += w[ci, co, k] x[ci, i]`, plus bias.
pub fn deconv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let dims = x.dims5()?;
    let g = deconv_geometry(dims, spec)?;
    check_weights(w, b, spec.deconv_weight_shape(), spec.out_channels)?;
    let (n, ci, co) = (dims[0], spec.in_channels, spec.out_channels);
    let k3 = spec.kernel_volume();
    let splane = g.small_plane();
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let out = run_slabs(n, co, g.big, |bn, c, z, slab: &mut [T]| {
        let src = &xd[bn * ci * splane..(bn + 1) * ci * splane];
        let sel = |sc: usize| (sc * co + c) * k3;
        scatter_slab(slab, z, src, ci, &sel, wd, &g);
        let bias = bd[c];
        slab.iter_mut().for_each(|v| *v += bias);
    });
    let [bd_, bh, bw] = g.big;
    Tensor::from_vec(&[n, co, bd_, bh, bw], out)
}

pub fn deconv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let dims = x.dims5()?;
    let g = deconv_geometry(dims, spec)?;
    let (n, ci, co) = (dims[0], spec.in_channels, spec.out_channels);
    let [bd, bh, bw] = g.big;
    dy.expect_shape(&[n, co, bd, bh, bw])?;
    if w.shape() != spec.deconv_weight_shape() {
        return Err(shape_err!("weight shape {:?}", w.shape()));
    }
    let k3 = spec.kernel_volume();
    let bplane = g.big_plane();
    let (wd, dyd) = (w.data(), dy.data());

    let input = if need_input {
        let dx = run_slabs(n, ci, g.small, |bn, c, z, slab: &mut [T]| {
            let src = &dyd[bn * co * bplane..(bn + 1) * co * bplane];
            let sel = |sc: usize| (c * co + sc) * k3;
            gather_slab(slab, z, src, co, &sel, wd, &g);
        });
        Some(Tensor::from_vec(x.shape(), dx)?)
    } else {
        None
    };

    let pairs = weight_grad(x.data(), ci, dyd, co, n, &g);
    let weight = Tensor::from_vec(&spec.deconv_weight_shape(), pairs.concat())?;
    let bias = channel_sums(dy)?;
    Ok(ConvGrads { input, weight, bias })
}

/// Per-channel sum over batch and space of a rank-5 tensor.
pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ..] = t.dims5()?;
    let plane = t.plane_len();
    let d = t.data();
    let sums = (0..c)
        .map(|ch| {
            let mut acc = T::zero();
            for bn in 0..n {
                for &v in &d[(bn * c + ch) * plane..][..plane] {
                    acc += v;
                }
            }
            acc
        })
        .collect();
    Tensor::from_vec(&[c], sums)
}
