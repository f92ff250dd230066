//! Transposed convolution (gather form) and its gradients.

use super::DeconvWeights;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Tensor5;

fn check_shapes(
    x: &Tensor5,
    w: &DeconvWeights,
    stride: (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    let (_, c, d, h, wd) = x.dims();
    let (w_in, w_out, kd, kh, kw) = w.w.dims();
    if c != w_in {
        return Err(Error::Shape(format!(
            "input has {c} channels but deconv weights expect {w_in}"
        )));
    }
    if w.bias.len() != w_out {
        return Err(Error::Shape(format!(
            "deconv bias has {} entries for {w_out} output channels",
            w.bias.len()
        )));
    }
    let (sd, sh, sw) = stride;
    if sd < 1 || sh < 1 || sw < 1 {
        return Err(Error::Geometry(format!("stride {stride:?} must be >= 1")));
    }
    // Transposed-conv output extent; with kernel == stride this is in·stride.
    Ok(((d - 1) * sd + kd, (h - 1) * sh + kh, (wd - 1) * sw + kw))
}

/// Adjoint of a strided, unpadded convolution with the same weight array.
/// y[n][oc][z] = bias[oc] + Σ x[n][ic][i]·w[ic][oc][k] over all (i, k) with
/// i·stride + k == z, per axis.
pub fn deconv3d_forward(
    x: &Tensor5,
    w: &DeconvWeights,
    stride: (usize, usize, usize),
) -> Result<Tensor5> {
    let (od, oh, ow) = check_shapes(x, w, stride)?;
    let (n, in_c, d, h, wd) = x.dims();
    let (_, out_c, kd, kh, kw) = w.w.dims();
    let (sd, sh, sw) = stride;
    let out_vol = od * oh * ow;
    let x_data = x.data();
    let w_data = w.w.data();
    let mut y = Tensor5::zeros(n, out_c, od, oh, ow);
    // Contributions to output coordinate z come from (i, k) pairs with
    // z == i·s + k; enumerate k and keep pairs whose i is integral and in range.
    let taps = |z: usize, k: usize, s: usize, in_ext: usize| -> Option<usize> {
        if z < k || (z - k) % s != 0 {
            return None;
        }
        let i = (z - k) / s;
        (i < in_ext).then_some(i)
    };
    parallel::for_each_chunk_mut(y.data_mut(), out_vol, |block, out_vol_data| {
        let s = block / out_c;
        let oc = block % out_c;
        let mut j = 0;
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut acc = w.bias[oc] as f64;
                    for kd_i in 0..kd {
                        let Some(iz) = taps(z, kd_i, sd, d) else { continue };
                        for kh_i in 0..kh {
                            let Some(iy) = taps(yy, kh_i, sh, h) else { continue };
                            for kw_i in 0..kw {
                                let Some(ix) = taps(xx, kw_i, sw, wd) else { continue };
                                for ic in 0..in_c {
                                    let xv = x_data
                                        [(((s * in_c + ic) * d + iz) * h + iy) * wd + ix];
                                    let wv = w_data
                                        [(((ic * out_c + oc) * kd + kd_i) * kh + kh_i) * kw + kw_i];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                    }
                    out_vol_data[j] = acc as f32;
                    j += 1;
                }
            }
        }
        debug_assert_eq!(j, out_vol_data.len());
    });
    Ok(y)
}

/// Gradients of Σ(deconv(x) ⊙ grad_y) for input, weights and bias.
/// The input gradient is the strided convolution of grad_y with the same
/// weights (the adjoint relation read in the other direction).
pub fn deconv3d_backward(
    x: &Tensor5,
    w: &DeconvWeights,
    stride: (usize, usize, usize),
    grad_y: &Tensor5,
) -> Result<(Tensor5, DeconvWeights)> {
    let (od, oh, ow) = check_shapes(x, w, stride)?;
    let (n, in_c, d, h, wd) = x.dims();
    let (_, out_c, kd, kh, kw) = w.w.dims();
    let want = (n, out_c, od, oh, ow);
    if grad_y.dims() != want {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?} but forward output is {want:?}",
            grad_y.dims()
        )));
    }
    let (sd, sh, sw) = stride;
    let gy_data = grad_y.data();
    let x_data = x.data();
    let w_data = w.w.data();
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;

    let mut grad_x = Tensor5::zeros(n, in_c, d, h, wd);
    parallel::for_each_chunk_mut(grad_x.data_mut(), in_vol, |block, gx_vol| {
        let s = block / in_c;
        let ic = block % in_c;
        let mut j = 0;
        for iz in 0..d {
            for iy in 0..h {
                for ix in 0..wd {
                    let mut acc = 0.0f64;
                    for oc in 0..out_c {
                        let gy_base = (s * out_c + oc) * out_vol;
                        for kd_i in 0..kd {
                            let z = iz * sd + kd_i;
                            for kh_i in 0..kh {
                                let yy = iy * sh + kh_i;
                                let gy_row = gy_base + (z * oh + yy) * ow + ix * sw;
                                let w_row =
                                    (((ic * out_c + oc) * kd + kd_i) * kh + kh_i) * kw;
                                for kw_i in 0..kw {
                                    acc += gy_data[gy_row + kw_i] as f64
                                        * w_data[w_row + kw_i] as f64;
                                }
                            }
                        }
                    }
                    gx_vol[j] = acc as f32;
                    j += 1;
                }
            }
        }
    });

    let k_vol = kd * kh * kw;
    let mut grad_w = Tensor5::zeros(in_c, out_c, kd, kh, kw);
    parallel::for_each_chunk_mut(grad_w.data_mut(), out_c * k_vol, |ic, gw_block| {
        let mut acc = vec![0.0f64; out_c * k_vol];
        for s in 0..n {
            let x_vol = &x_data[(s * in_c + ic) * in_vol..][..in_vol];
            for oc in 0..out_c {
                let gy_vol = &gy_data[(s * out_c + oc) * out_vol..][..out_vol];
                for kd_i in 0..kd {
                    for kh_i in 0..kh {
                        for kw_i in 0..kw {
                            let mut dot = 0.0f64;
                            for iz in 0..d {
                                let z = iz * sd + kd_i;
                                for iy in 0..h {
                                    let yy = iy * sh + kh_i;
                                    let x_row = &x_vol[(iz * h + iy) * wd..][..wd];
                                    let gy_row = (z * oh + yy) * ow + kw_i;
                                    for (ix, &xv) in x_row.iter().enumerate() {
                                        dot += xv as f64
                                            * gy_vol[gy_row + ix * sw] as f64;
                                    }
                                }
                            }
                            acc[(oc * kd + kd_i) * kh * kw + kh_i * kw + kw_i] += dot;
                        }
                    }
                }
            }
        }
        for (o, &a) in gw_block.iter_mut().zip(&acc) {
            *o = a as f32;
        }
    });

    let grad_bias = {
        let mut b = vec![0.0f64; out_c];
        for s in 0..n {
            for (oc, bv) in b.iter_mut().enumerate() {
                let base = (s * out_c + oc) * out_vol;
                *bv += gy_data[base..base + out_vol].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        b.into_iter().map(|v| v as f32).collect()
    };
    Ok((grad_x, DeconvWeights::new(grad_w, grad_bias)))
}
