use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the previous running statistic at each training step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and (biased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// Saved activations for the training-mode backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

/// Per-channel mean and population variance over batch and space,
/// accumulated in f64 in a fixed order.
fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, ..] = x.dims5()?;
    let plane = x.plane_len();
    let count = (n * plane) as f64;
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0;
            for b in 0..n {
                for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                    sum += v.as_f64();
                }
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                    let d = v.as_f64() - mean;
                    sq += d * d;
                }
            }
            (mean, sq / count)
        })
        .collect();
    Ok(stats.into_iter().unzip())
}

pub fn batchnorm3d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut RunningStats<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
    let [_, c, ..] = x.dims5()?;
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", &state.mean),
        ("running var", &state.var),
    ] {
        if t.shape() != [c] {
            return Err(shape_err!("batch norm {name} has shape {:?} for {c} channels", t.shape()));
        }
    }
    let plane = x.plane_len();
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let (m, v) = batch_stats(x)?;
            for ch in 0..c {
                let rm = &mut state.mean.data_mut()[ch];
                *rm = T::of(BN_MOMENTUM * rm.as_f64() + (1.0 - BN_MOMENTUM) * m[ch]);
                let rv = &mut state.var.data_mut()[ch];
                *rv = T::of(BN_MOMENTUM * rv.as_f64() + (1.0 - BN_MOMENTUM) * v[ch]);
            }
            (m.into_iter().map(T::of).collect(), v.into_iter().map(T::of).collect())
        }
        Mode::Eval => (state.mean.data().to_vec(), state.var.data().to_vec()),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
        .collect();

    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    xhat.data_mut()
        .par_chunks_mut(plane)
        .zip(y.data_mut().par_chunks_mut(plane))
        .enumerate()
        .for_each(|(pc, (hp, yp))| {
            let ch = pc % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let xp = &x.data()[pc * plane..(pc + 1) * plane];
            for ((h, o), &v) in hp.iter_mut().zip(yp.iter_mut()).zip(xp) {
                *h = (v - m) * s;
                *o = g * *h + b;
            }
        });
    let cache = match mode {
        Mode::Train => Some(BnCache { xhat, inv_std }),
        Mode::Eval => None,
    };
    Ok((y, cache))
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Training-mode backward pass:
/// `dx = inv_std / M * (M * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`.
pub fn batchnorm3d_backward<T: Scalar>(dy: &Tensor<T>, gamma: &Tensor<T>, cache: &BnCache<T>) -> Result<BnGrads<T>> {
    dy.expect_shape(cache.xhat.shape())?;
    let [n, c, ..] = dy.dims5()?;
    let plane = dy.plane_len();
    let count = T::of((n * plane) as f64);
    let xh = cache.xhat.data();
    let dyd = dy.data();
    let sums: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let (mut sdy, mut sdyx) = (T::zero(), T::zero());
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for (&g, &h) in dyd[off..off + plane].iter().zip(&xh[off..off + plane]) {
                    sdy += g;
                    sdyx += g * h;
                }
            }
            (sdy, sdyx)
        })
        .collect();
    let mut dx = Tensor::zeros(dy.shape());
    dx.data_mut().par_chunks_mut(plane).enumerate().for_each(|(pc, dp)| {
        let ch = pc % c;
        let (sdy, sdyx) = sums[ch];
        let g = gamma.data()[ch];
        let scale = g * cache.inv_std[ch] / count;
        let off = pc * plane;
        for ((d, &gy), &h) in dp.iter_mut().zip(&dyd[off..off + plane]).zip(&xh[off..off + plane]) {
            *d = scale * (count * gy - sdy - h * sdyx);
        }
    });
    let gamma_g = Tensor::from_vec(&[c], sums.iter().map(|s| s.1).collect())?;
    let beta_g = Tensor::from_vec(&[c], sums.iter().map(|s| s.0).collect())?;
    Ok(BnGrads {
        input: dx,
        gamma: gamma_g,
        beta: beta_g,
    })
}
