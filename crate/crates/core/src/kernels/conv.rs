//! 3-D convolution forward/backward with three interchangeable engines.

use super::{ConvEngine, ConvWeights};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{col2im_3d, gemm, gemm_abt, im2col_fill, ConvGeometry, Mat, Tensor5};

/// Output indices `o` for which `o·stride + k_off - pad` lands inside
/// `[0, in_extent)`, as a half-open range clipped to `out_extent`.
#[inline]
pub(crate) fn valid_out_range(
    out_extent: usize,
    stride: usize,
    k_off: usize,
    pad: usize,
    in_extent: usize,
) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let limit = in_extent + pad;
    if limit <= k_off {
        return (0, 0);
    }
    let hi = (limit - 1 - k_off) / stride + 1;
    (lo.min(out_extent), hi.min(out_extent))
}

fn check_forward_shapes(x: &Tensor5, w: &ConvWeights, g: &ConvGeometry) -> Result<(usize, usize, usize)> {
    let (_, c, d, h, wd) = x.dims();
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels but geometry expects {}",
            g.in_channels
        )));
    }
    w.validate_for(g)?;
    g.out_extent((d, h, wd))
}

/// y[n][o] = bias[o] + Σ_{c,kd,kh,kw} x[n][c][od·sd−pd+kd][..][..] · w[o][c][kd][kh][kw],
/// out-of-range reads contributing zero.
pub fn conv3d_forward(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    engine: ConvEngine,
) -> Result<Tensor5> {
    let out_ext = check_forward_shapes(x, w, g)?;
    match engine {
        ConvEngine::GemmLowering => forward_gemm(x, w, g, out_ext),
        ConvEngine::SliceDecomposed => forward_slice(x, w, g, out_ext),
        ConvEngine::NaiveReference => forward_naive(x, w, g, out_ext),
    }
}

fn forward_gemm(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    (od, oh, ow): (usize, usize, usize),
) -> Result<Tensor5> {
    let (n, _, _, _, _) = x.dims();
    let out_c = g.out_channels;
    let patch = g.patch_len();
    let nvox = od * oh * ow;
    // The (o, c, kd, kh, kw) weight layout read row-major is exactly the
    // out_c × patch matrix whose column order matches im2col rows.
    let w_mat = Mat::from_vec(out_c, patch, w.w.data().to_vec())?;
    let mut y = Tensor5::zeros(n, out_c, od, oh, ow);
    let mut cols = Mat::zeros(patch, nvox);
    let mut acc = Mat::zeros(out_c, nvox);
    for s in 0..n {
        for (o, row) in acc.data_mut().chunks_exact_mut(nvox).enumerate() {
            row.fill(w.bias[o]);
        }
        im2col_fill(x, s, g, (od, oh, ow), &mut cols);
        acc = gemm(&w_mat, &cols, acc)?;
        y.data_mut()[s * out_c * nvox..(s + 1) * out_c * nvox].copy_from_slice(acc.data());
    }
    Ok(y)
}

fn forward_slice(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    (od, oh, ow): (usize, usize, usize),
) -> Result<Tensor5> {
    let (n, in_c, d, h, wd) = x.dims();
    let out_c = g.out_channels;
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let mut y = Tensor5::zeros(n, out_c, od, oh, ow);
    let x_data = x.data();
    let w_t = &w.w;
    let in_plane = h * wd;
    let out_plane = oh * ow;
    // Each (sample, out-channel) volume is owned by one closure invocation.
    parallel::for_each_chunk_mut(y.data_mut(), od * out_plane, |block, out_vol| {
        let s = block / out_c;
        let oc = block % out_c;
        let mut acc = vec![0.0f64; out_plane];
        for od_i in 0..od {
            acc.fill(w.bias[oc] as f64);
            for kd_i in 0..kd {
                let id = (od_i * sd + kd_i) as isize - pd as isize;
                if id < 0 || id as usize >= d {
                    continue;
                }
                let id = id as usize;
                for ic in 0..in_c {
                    let x_plane =
                        &x_data[((s * in_c + ic) * d + id) * in_plane..][..in_plane];
                    let k_base = w_t.index_of(oc, ic, kd_i, 0, 0);
                    let k_slice = &w_t.data()[k_base..k_base + kh * kw];
                    conv2d_acc(x_plane, h, wd, k_slice, kh, kw, (sh, sw), (ph, pw), (oh, ow), &mut acc);
                }
            }
            for (o, &a) in out_vol[od_i * out_plane..(od_i + 1) * out_plane]
                .iter_mut()
                .zip(&acc)
            {
                *o = a as f32;
            }
        }
    });
    Ok(y)
}

/// One 2-D correlation of an input plane with a kernel slice, accumulated
/// into `acc` (f64, oh × ow).
#[allow(clippy::too_many_arguments)]
fn conv2d_acc(
    x_plane: &[f32],
    h: usize,
    w: usize,
    kernel: &[f32],
    kh: usize,
    kw: usize,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
    acc: &mut [f64],
) {
    for kh_i in 0..kh {
        let (h_lo, h_hi) = valid_out_range(oh, sh, kh_i, ph, h);
        for kw_i in 0..kw {
            let kv = kernel[kh_i * kw + kw_i] as f64;
            let (w_lo, w_hi) = valid_out_range(ow, sw, kw_i, pw, w);
            for oh_i in h_lo..h_hi {
                let ih = oh_i * sh + kh_i - ph;
                let x_row = &x_plane[ih * w..(ih + 1) * w];
                let acc_row = &mut acc[oh_i * ow..(oh_i + 1) * ow];
                for (ow_i, a) in acc_row[w_lo..w_hi].iter_mut().enumerate() {
                    let iw = (w_lo + ow_i) * sw + kw_i - pw;
                    *a += kv * x_row[iw] as f64;
                }
            }
        }
    }
}

fn forward_naive(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    (od, oh, ow): (usize, usize, usize),
) -> Result<Tensor5> {
    let (n, in_c, d, h, wd) = x.dims();
    let out_c = g.out_channels;
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let mut y = Tensor5::zeros(n, out_c, od, oh, ow);
    for s in 0..n {
        for oc in 0..out_c {
            for od_i in 0..od {
                for oh_i in 0..oh {
                    for ow_i in 0..ow {
                        let mut sum = w.bias[oc] as f64;
                        for ic in 0..in_c {
                            for kd_i in 0..kd {
                                let id = (od_i * sd + kd_i) as isize - pd as isize;
                                if id < 0 || id as usize >= d {
                                    continue;
                                }
                                for kh_i in 0..kh {
                                    let ih = (oh_i * sh + kh_i) as isize - ph as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    for kw_i in 0..kw {
                                        let iw = (ow_i * sw + kw_i) as isize - pw as isize;
                                        if iw < 0 || iw as usize >= wd {
                                            continue;
                                        }
                                        sum += x.at(s, ic, id as usize, ih as usize, iw as usize)
                                            as f64
                                            * w.w.at(oc, ic, kd_i, kh_i, kw_i) as f64;
                                    }
                                }
                            }
                        }
                        *y.at_mut(s, oc, od_i, oh_i, ow_i) = sum as f32;
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Exact gradients of Σ(y ⊙ grad_y) with respect to the input, weights and
/// bias; the bias gradient is the per-channel sum of grad_y.
pub fn conv3d_backward(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    grad_y: &Tensor5,
    engine: ConvEngine,
) -> Result<(Tensor5, ConvWeights)> {
    let (od, oh, ow) = check_forward_shapes(x, w, g)?;
    let (n, _, _, _, _) = x.dims();
    let want = (n, g.out_channels, od, oh, ow);
    if grad_y.dims() != want {
        return Err(Error::Shape(format!(
            "upstream gradient is {:?} but forward output is {want:?}",
            grad_y.dims()
        )));
    }
    let grad_bias = bias_gradient(grad_y);
    let (grad_x, grad_w) = match engine {
        ConvEngine::GemmLowering => backward_gemm(x, w, g, grad_y, (od, oh, ow))?,
        ConvEngine::SliceDecomposed => backward_slice(x, w, g, grad_y, (od, oh, ow))?,
        ConvEngine::NaiveReference => backward_naive(x, w, g, grad_y, (od, oh, ow))?,
    };
    Ok((grad_x, ConvWeights::new(grad_w, grad_bias)))
}

fn bias_gradient(grad_y: &Tensor5) -> Vec<f32> {
    let (n, c, d, h, w) = grad_y.dims();
    let vol = d * h * w;
    let data = grad_y.data();
    parallel::map_range(c, |ch| {
        let mut s = 0.0f64;
        for smp in 0..n {
            let base = (smp * c + ch) * vol;
            s += data[base..base + vol].iter().map(|&v| v as f64).sum::<f64>();
        }
        s as f32
    })
}

fn backward_gemm(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    grad_y: &Tensor5,
    (od, oh, ow): (usize, usize, usize),
) -> Result<(Tensor5, Tensor5)> {
    let (n, in_c, d, h, wd) = x.dims();
    let out_c = g.out_channels;
    let patch = g.patch_len();
    let nvox = od * oh * ow;
    let w_mat = Mat::from_vec(out_c, patch, w.w.data().to_vec())?;
    let mut w_t = Mat::zeros(patch, out_c);
    for r in 0..out_c {
        for c in 0..patch {
            *w_t.at_mut(c, r) = w_mat.at(r, c);
        }
    }
    let mut grad_w_mat = Mat::zeros(out_c, patch);
    let mut grad_x = Tensor5::zeros(n, in_c, d, h, wd);
    let mut cols = Mat::zeros(patch, nvox);
    let mut grad_cols = Mat::zeros(patch, nvox);
    let ivol = in_c * d * h * wd;
    for s in 0..n {
        let gy_mat = Mat::from_vec(
            out_c,
            nvox,
            grad_y.data()[s * out_c * nvox..(s + 1) * out_c * nvox].to_vec(),
        )?;
        im2col_fill(x, s, g, (od, oh, ow), &mut cols);
        grad_w_mat = gemm_abt(&gy_mat, &cols, grad_w_mat)?;
        grad_cols.data_mut().fill(0.0);
        grad_cols = gemm(&w_t, &gy_mat, grad_cols)?;
        let gx_s = col2im_3d(&grad_cols, g, (1, in_c, d, h, wd))?;
        grad_x.data_mut()[s * ivol..(s + 1) * ivol].copy_from_slice(gx_s.data());
    }
    let (kd, kh, kw) = g.kernel;
    let grad_w = Tensor5::from_vec(out_c, in_c, kd, kh, kw, grad_w_mat.data().to_vec())?;
    Ok((grad_x, grad_w))
}

fn backward_slice(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    grad_y: &Tensor5,
    (od, oh, ow): (usize, usize, usize),
) -> Result<(Tensor5, Tensor5)> {
    let (n, in_c, d, h, wd) = x.dims();
    let out_c = g.out_channels;
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let k_vol = kd * kh * kw;
    let ivol = d * h * wd;
    let out_plane = oh * ow;
    let gy_data = grad_y.data();
    let x_data = x.data();

    // grad_x: each (sample, in-channel) volume is an independent gather.
    let mut grad_x = Tensor5::zeros(n, in_c, d, h, wd);
    parallel::for_each_chunk_mut(grad_x.data_mut(), ivol, |block, gx_vol| {
        let s = block / in_c;
        let ic = block % in_c;
        let mut acc = vec![0.0f64; ivol];
        for oc in 0..out_c {
            let gy_vol = &gy_data[(s * out_c + oc) * od * out_plane..][..od * out_plane];
            let k_base = w.w.index_of(oc, ic, 0, 0, 0);
            let k_block = &w.w.data()[k_base..k_base + k_vol];
            for kd_i in 0..kd {
                let (d_lo, d_hi) = valid_out_range(od, sd, kd_i, pd, d);
                for kh_i in 0..kh {
                    let (h_lo, h_hi) = valid_out_range(oh, sh, kh_i, ph, h);
                    for kw_i in 0..kw {
                        let kv = k_block[(kd_i * kh + kh_i) * kw + kw_i] as f64;
                        let (w_lo, w_hi) = valid_out_range(ow, sw, kw_i, pw, wd);
                        for od_i in d_lo..d_hi {
                            let id = od_i * sd + kd_i - pd;
                            for oh_i in h_lo..h_hi {
                                let ih = oh_i * sh + kh_i - ph;
                                let gy_row = &gy_vol[(od_i * oh + oh_i) * ow..][w_lo..w_hi];
                                let acc_base = (id * h + ih) * wd + kw_i;
                                for (j, &gv) in gy_row.iter().enumerate() {
                                    let iw = (w_lo + j) * sw + acc_base - pw;
                                    acc[iw] += kv * gv as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        for (o, &a) in gx_vol.iter_mut().zip(&acc) {
            *o = a as f32;
        }
    });

    // grad_w: each out-channel block of the weight tensor is independent.
    let mut grad_w = Tensor5::zeros(out_c, in_c, kd, kh, kw);
    parallel::for_each_chunk_mut(grad_w.data_mut(), in_c * k_vol, |oc, gw_block| {
        let mut acc = vec![0.0f64; in_c * k_vol];
        for s in 0..n {
            let gy_vol = &gy_data[(s * out_c + oc) * od * out_plane..][..od * out_plane];
            for ic in 0..in_c {
                let x_vol = &x_data[(s * in_c + ic) * ivol..][..ivol];
                for kd_i in 0..kd {
                    let (d_lo, d_hi) = valid_out_range(od, sd, kd_i, pd, d);
                    for kh_i in 0..kh {
                        let (h_lo, h_hi) = valid_out_range(oh, sh, kh_i, ph, h);
                        for kw_i in 0..kw {
                            let (w_lo, w_hi) = valid_out_range(ow, sw, kw_i, pw, wd);
                            let mut dot = 0.0f64;
                            for od_i in d_lo..d_hi {
                                let id = od_i * sd + kd_i - pd;
                                for oh_i in h_lo..h_hi {
                                    let ih = oh_i * sh + kh_i - ph;
                                    let gy_row = &gy_vol[(od_i * oh + oh_i) * ow..][w_lo..w_hi];
                                    let x_row = &x_vol[(id * h + ih) * wd..][..wd];
                                    for (j, &gv) in gy_row.iter().enumerate() {
                                        let iw = (w_lo + j) * sw + kw_i - pw;
                                        dot += gv as f64 * x_row[iw] as f64;
                                    }
                                }
                            }
                            acc[(ic * kd + kd_i) * kh * kw + kh_i * kw + kw_i] += dot;
                        }
                    }
                }
            }
        }
        for (o, &a) in gw_block.iter_mut().zip(&acc) {
            *o = a as f32;
        }
    });
    Ok((grad_x, grad_w))
}

fn backward_naive(
    x: &Tensor5,
    w: &ConvWeights,
    g: &ConvGeometry,
    grad_y: &Tensor5,
    (od, oh, ow): (usize, usize, usize),
) -> Result<(Tensor5, Tensor5)> {
    let (n, in_c, d, h, wd) = x.dims();
    let out_c = g.out_channels;
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let mut gx = vec![0.0f64; x.numel()];
    let mut gw = vec![0.0f64; out_c * in_c * kd * kh * kw];
    for s in 0..n {
        for oc in 0..out_c {
            for od_i in 0..od {
                for oh_i in 0..oh {
                    for ow_i in 0..ow {
                        let gv = grad_y.at(s, oc, od_i, oh_i, ow_i) as f64;
                        for ic in 0..in_c {
                            for kd_i in 0..kd {
                                let id = (od_i * sd + kd_i) as isize - pd as isize;
                                if id < 0 || id as usize >= d {
                                    continue;
                                }
                                for kh_i in 0..kh {
                                    let ih = (oh_i * sh + kh_i) as isize - ph as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    for kw_i in 0..kw {
                                        let iw = (ow_i * sw + kw_i) as isize - pw as isize;
                                        if iw < 0 || iw as usize >= wd {
                                            continue;
                                        }
                                        let xi = x.index_of(
                                            s,
                                            ic,
                                            id as usize,
                                            ih as usize,
                                            iw as usize,
                                        );
                                        let wi =
                                            w.w.index_of(oc, ic, kd_i, kh_i, kw_i);
                                        gx[xi] += gv * w.w.data()[wi] as f64;
                                        gw[wi] += gv * x.data()[xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let grad_x =
        Tensor5::from_vec(n, in_c, d, h, wd, gx.into_iter().map(|v| v as f32).collect())?;
    let grad_w = Tensor5::from_vec(
        out_c,
        in_c,
        kd,
        kh,
        kw,
        gw.into_iter().map(|v| v as f32).collect(),
    )?;
    Ok((grad_x, grad_w))
}
