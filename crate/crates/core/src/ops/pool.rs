use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat in-plane input offsets of the selected maxima, one per output voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl PoolIndices {
    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

/// 2x2x2 max pooling with stride 2. Ties keep the first block element in
/// `(z, y, x)` scan order.
pub fn maxpool3d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, d, h, w] = x.dims5()?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("max pooling needs even spatial extents, got {:?}", [d, h, w]));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let (iplane, oplane) = (d * h * w, od * oh * ow);
    let mut out = vec![T::zero(); n * c * oplane];
    let mut arg = vec![0u32; n * c * oplane];
    out.par_chunks_mut(oplane)
        .zip(arg.par_chunks_mut(oplane))
        .enumerate()
        .for_each(|(pc, (op, ap))| {
            let ip = &x.data()[pc * iplane..(pc + 1) * iplane];
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        let mut first = true;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                    let v = ip[idx];
                                    if first || v > best {
                                        best = v;
                                        best_idx = idx;
                                        first = false;
                                    }
                                }
                            }
                        }
                        let o = (z * oh + y) * ow + xo;
                        op[o] = best;
                        ap[o] = best_idx as u32;
                    }
                }
            }
        });
    let pooled = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
    Ok((
        pooled,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax: arg,
        },
    ))
}

/// Routes each output gradient to its recorded argmax position.
pub fn maxpool3d_backward<T: Scalar>(dy: &Tensor<T>, idx: &PoolIndices) -> Result<Tensor<T>> {
    if dy.len() != idx.argmax.len() {
        return Err(shape_err!("pool gradient has {} values, indices {}", dy.len(), idx.argmax.len()));
    }
    let iplane: usize = idx.input_shape[2..].iter().product();
    let oplane = dy.plane_len();
    let mut dx = Tensor::zeros(&idx.input_shape);
    dx.data_mut()
        .par_chunks_mut(iplane)
        .enumerate()
        .for_each(|(pc, plane)| {
            let g = &dy.data()[pc * oplane..(pc + 1) * oplane];
            let a = &idx.argmax[pc * oplane..(pc + 1) * oplane];
            for (&gi, &ai) in g.iter().zip(a) {
                plane[ai as usize] += gi;
            }
        });
    Ok(dx)
}
