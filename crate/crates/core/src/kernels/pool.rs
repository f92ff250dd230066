//! 3-D max pooling with an explicit argmax map for the backward pass.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor5;

fn pooled_extent(in_extent: usize, window: usize, stride: usize) -> Result<usize> {
    if in_extent < window {
        return Err(Error::Geometry(format!(
            "pool window {window} exceeds input extent {in_extent}"
        )));
    }
    Ok((in_extent - window) / stride + 1)
}

/// Max over each window plus the flat input index of every winner.
/// Ties go to the first (lowest flat index) occurrence.
pub fn maxpool3d(
    x: &Tensor5,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<(Tensor5, Vec<u64>)> {
    let (n, c, d, h, w) = x.dims();
    let (wd, wh, ww) = window;
    let (sd, sh, sw) = stride;
    if wd < 1 || wh < 1 || ww < 1 || sd < 1 || sh < 1 || sw < 1 {
        return Err(Error::Geometry(format!(
            "pool window {window:?} and stride {stride:?} must be >= 1"
        )));
    }
    let od = pooled_extent(d, wd, sd)?;
    let oh = pooled_extent(h, wh, sh)?;
    let ow = pooled_extent(w, ww, sw)?;
    let out_vol = od * oh * ow;
    let x_data = x.data();
    let mut argmax = vec![0u64; n * c * out_vol];
    // One (sample, channel) output volume per closure invocation.
    parallel::for_each_chunk_mut(&mut argmax, out_vol, |block, arg_vol| {
        let in_base = block * d * h * w;
        let mut j = 0;
        for od_i in 0..od {
            for oh_i in 0..oh {
                for ow_i in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kd in 0..wd {
                        let id = od_i * sd + kd;
                        for kh in 0..wh {
                            let ih = oh_i * sh + kh;
                            let row = in_base + (id * h + ih) * w + ow_i * sw;
                            for kw in 0..ww {
                                let v = x_data[row + kw];
                                if v > best {
                                    best = v;
                                    best_idx = row + kw;
                                }
                            }
                        }
                    }
                    arg_vol[j] = best_idx as u64;
                    j += 1;
                }
            }
        }
    });
    let y_data: Vec<f32> = argmax.iter().map(|&i| x_data[i as usize]).collect();
    let y = Tensor5::from_vec(n, c, od, oh, ow, y_data)?;
    Ok((y, argmax))
}

/// Routes each upstream gradient to its recorded argmax position; overlapping
/// windows accumulate, everything else stays zero.
pub fn maxpool3d_backward(
    argmax: &[u64],
    grad_y: &Tensor5,
    in_shape: (usize, usize, usize, usize, usize),
) -> Result<Tensor5> {
    if argmax.len() != grad_y.numel() {
        return Err(Error::Corrupt(format!(
            "argmax map has {} entries for {} output values",
            argmax.len(),
            grad_y.numel()
        )));
    }
    let (n, c, d, h, w) = in_shape;
    let numel = n * c * d * h * w;
    let mut acc = vec![0.0f64; numel];
    for (&idx, &g) in argmax.iter().zip(grad_y.data()) {
        let idx = idx as usize;
        if idx >= numel {
            return Err(Error::Corrupt(format!(
                "argmax entry {idx} outside input of {numel} elements"
            )));
        }
        acc[idx] += g as f64;
    }
    Tensor5::from_vec(n, c, d, h, w, acc.into_iter().map(|v| v as f32).collect())
}
