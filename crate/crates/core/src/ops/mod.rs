//! Layer kernels. Every forward map has an exact backward counterpart.

mod batchnorm;
mod conv;
mod pool;

pub use batchnorm::{batchnorm3d, batchnorm3d_backward, BnCache, BnGrads, Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use conv::{conv3d, conv3d_backward, deconv3d, deconv3d_backward, ConvGrads, ConvSpec};
pub use pool::{maxpool3d, maxpool3d_backward, PoolIndices};

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape(x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Elementwise sum. Its backward pass hands the upstream gradient to both
/// operands unchanged.
pub fn residual_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err!("residual sum of {:?} and {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

/// Voxel-wise softmax cross-entropy over the channel axis, averaged over all
/// voxels of the batch. The mean differs from a plain sum over voxels by the
/// constant factor `1 / (batch * voxels)`.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / N`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    let [n, c, ..] = logits.dims5()?;
    let plane = logits.plane_len();
    if labels.len() != n * plane {
        return Err(shape_err!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(shape_err!("label {bad} outside 0..{c}"));
    }
    let total = (n * plane) as f64;
    let inv = T::of(1.0 / total);
    let ld = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    let mut loss = 0.0f64;
    let mut probs = vec![T::zero(); c];
    for b in 0..n {
        for v in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + v;
            let label = labels[b * plane + v] as usize;
            let mut max = ld[at(0)];
            let mut arg = 0;
            for ch in 1..c {
                if ld[at(ch)] > max {
                    max = ld[at(ch)];
                    arg = ch;
                }
            }
            let mut rest = T::zero();
            for ch in 0..c {
                let e = (ld[at(ch)] - max).exp();
                probs[ch] = e;
                if ch != arg {
                    rest += e;
                }
            }
            let denom = T::one() + rest;
            // log(sum exp) - logit[label] = log1p(rest) + max - logit[label]
            loss += (rest.ln_1p() + max - ld[at(label)]).as_f64();
            for ch in 0..c {
                let p = probs[ch] / denom;
                let target = if ch == label { T::one() } else { T::zero() };
                gd[at(ch)] = (p - target) * inv;
            }
        }
    }
    Ok((loss / total, grad))
}

/// Softmax probability of channel 1 for two-class logits.
pub fn foreground_probability<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = logits.dims5()?;
    if c != 2 {
        return Err(shape_err!("expected two-class logits, got {c} channels"));
    }
    let plane = d * h * w;
    let ld = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let (bg, fg) = (&ld[(2 * b) * plane..][..plane], &ld[(2 * b + 1) * plane..][..plane]);
        out.extend(bg.iter().zip(fg).map(|(&l0, &l1)| T::one() / (T::one() + (l0 - l1).exp())));
    }
    Tensor::from_vec(&[n, 1, d, h, w], out)
}
