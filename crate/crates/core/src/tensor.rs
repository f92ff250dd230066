//! Dense 5-D tensors, matrices, convolution geometry and the im2col/col2im
//! lowering used by the GEMM convolution engine.
//!
//! Layout is fixed globally: row-major with the last axis fastest. Storage is
//! f32; dot products and voxel reductions accumulate in f64 and round once,
//! which keeps comparisons against reference implementations tight.

use crate::error::{Error, Result};
use crate::parallel;

/// Dense (n, c, d, h, w) tensor, row-major, w fastest-varying.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor5 {
    /// Zero-filled tensor. All extents must be positive.
    pub fn zeros(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        assert!(
            n >= 1 && c >= 1 && d >= 1 && h >= 1 && w >= 1,
            "tensor extents must be >= 1, got ({n},{c},{d},{h},{w})"
        );
        Tensor5 { n, c, d, h, w, data: vec![0.0; n * c * d * h * w] }
    }

    /// Wraps an existing buffer; the length must match the shape product.
    pub fn from_vec(
        n: usize,
        c: usize,
        d: usize,
        h: usize,
        w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if n < 1 || c < 1 || d < 1 || h < 1 || w < 1 {
            return Err(Error::Shape(format!(
                "tensor extents must be >= 1, got ({n},{c},{d},{h},{w})"
            )));
        }
        let want = n * c * d * h * w;
        if data.len() != want {
            return Err(Error::Shape(format!(
                "buffer holds {} values but shape ({n},{c},{d},{h},{w}) needs {want}",
                data.len()
            )));
        }
        Ok(Tensor5 { n, c, d, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        (self.n, self.c, self.d, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat index of element (n, c, d, h, w).
    #[inline]
    pub fn index_of(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
        ((((n * self.c + c) * self.d + d) * self.h + h) * self.w) + w
    }

    /// Inverse of [`index_of`](Self::index_of).
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize, usize, usize) {
        let w = idx % self.w;
        let rest = idx / self.w;
        let h = rest % self.h;
        let rest = rest / self.h;
        let d = rest % self.d;
        let rest = rest / self.d;
        let c = rest % self.c;
        let n = rest / self.c;
        (n, c, d, h, w)
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.index_of(n, c, d, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, d: usize, h: usize, w: usize) -> &mut f32 {
        let i = self.index_of(n, c, d, h, w);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies one sample out as an n == 1 tensor.
    pub fn sample(&self, n: usize) -> Tensor5 {
        assert!(n < self.n, "sample {n} out of range (n = {})", self.n);
        let stride = self.c * self.d * self.h * self.w;
        let data = self.data[n * stride..(n + 1) * stride].to_vec();
        Tensor5 { n: 1, c: self.c, d: self.d, h: self.h, w: self.w, data }
    }

    /// Same buffer reinterpreted with a new shape of equal volume.
    pub fn reshaped(self, n: usize, c: usize, d: usize, h: usize, w: usize) -> Result<Tensor5> {
        Tensor5::from_vec(n, c, d, h, w, self.data)
    }
}

/// Dense row-major matrix of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer holds {} values but matrix is {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f32 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// Geometry of a 3-D convolution: channel counts, kernel, stride, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl ConvGeometry {
    /// Cubic kernel/stride/pad shorthand.
    pub fn cubic(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel: (k, k, k),
            stride: (s, s, s),
            pad: (p, p, p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (kd, kh, kw) = self.kernel;
        let (sd, sh, sw) = self.stride;
        if self.in_channels < 1 || self.out_channels < 1 {
            return Err(Error::Geometry(format!(
                "channel counts must be >= 1, got in {} out {}",
                self.in_channels, self.out_channels
            )));
        }
        if kd < 1 || kh < 1 || kw < 1 || sd < 1 || sh < 1 || sw < 1 {
            return Err(Error::Geometry(format!(
                "kernel and stride components must be >= 1, got kernel {:?} stride {:?}",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Output extent of one axis: floor((in + 2·pad − kernel)/stride) + 1.
    fn axis_extent(in_extent: usize, k: usize, s: usize, p: usize) -> Result<usize> {
        let padded = in_extent + 2 * p;
        if padded < k {
            return Err(Error::Geometry(format!(
                "kernel {k} exceeds padded extent {padded} (input {in_extent}, pad {p})"
            )));
        }
        Ok((padded - k) / s + 1)
    }

    /// Output spatial extents for the given input extents; errors if any axis collapses.
    pub fn out_extent(&self, in_extent: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let od = Self::axis_extent(in_extent.0, self.kernel.0, self.stride.0, self.pad.0)?;
        let oh = Self::axis_extent(in_extent.1, self.kernel.1, self.stride.1, self.pad.1)?;
        let ow = Self::axis_extent(in_extent.2, self.kernel.2, self.stride.2, self.pad.2)?;
        Ok((od, oh, ow))
    }

    /// Rows of the im2col matrix: in_channels · kd · kh · kw.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2
    }
}

/// Default GEMM tile edge; callers can override through [`gemm_with_tile`].
pub const GEMM_TILE: usize = 64;

/// `acc + a·b` with f64 accumulation, blocked by [`GEMM_TILE`].
/// Consumes and returns the accumulator to reuse its buffer.
pub fn gemm(a: &Mat, b: &Mat, acc: Mat) -> Result<Mat> {
    gemm_with_tile(a, b, acc, GEMM_TILE)
}

/// Blocked GEMM with an explicit tile edge (rows, cols and depth all use it).
///
/// Parallelism is over disjoint row blocks of the output; the k loop order is
/// fixed, so results are bit-identical at any thread count.
pub fn gemm_with_tile(a: &Mat, b: &Mat, mut acc: Mat, tile: usize) -> Result<Mat> {
    assert!(tile >= 1, "tile must be >= 1");
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "gemm inner dimensions differ: a is {}x{}, b is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if acc.rows != a.rows || acc.cols != b.cols {
        return Err(Error::Shape(format!(
            "gemm accumulator is {}x{} but product is {}x{}",
            acc.rows, acc.cols, a.rows, b.cols
        )));
    }
    let (k, n) = (a.cols, b.cols);
    let a_data = &a.data;
    let b_data = &b.data;
    parallel::for_each_chunk_mut(&mut acc.data, tile * n, |block, out_rows| {
        let r0 = block * tile;
        let r_len = out_rows.len() / n;
        let mut tile_acc = vec![0.0f64; tile * tile];
        for c0 in (0..n).step_by(tile) {
            let c_len = (n - c0).min(tile);
            for (i, out_row) in out_rows.chunks_exact(n).enumerate() {
                let t = &mut tile_acc[i * c_len..(i + 1) * c_len];
                for (tv, &ov) in t.iter_mut().zip(&out_row[c0..c0 + c_len]) {
                    *tv = ov as f64;
                }
            }
            for k0 in (0..k).step_by(tile) {
                let k_len = (k - k0).min(tile);
                for i in 0..r_len {
                    let a_row = &a_data[(r0 + i) * k + k0..(r0 + i) * k + k0 + k_len];
                    let t = &mut tile_acc[i * c_len..(i + 1) * c_len];
                    for (kk, &aik) in a_row.iter().enumerate() {
                        let aik = aik as f64;
                        let b_row = &b_data[(k0 + kk) * n + c0..(k0 + kk) * n + c0 + c_len];
                        for (tv, &bv) in t.iter_mut().zip(b_row) {
                            *tv += aik * bv as f64;
                        }
                    }
                }
            }
            for (i, out_row) in out_rows.chunks_exact_mut(n).enumerate() {
                let t = &tile_acc[i * c_len..(i + 1) * c_len];
                for (ov, &tv) in out_row[c0..c0 + c_len].iter_mut().zip(t) {
                    *ov = tv as f32;
                }
            }
        }
    });
    Ok(acc)
}

/// `acc + a·bᵀ` with the same f64 accumulation discipline as [`gemm`].
/// Both operands are walked along contiguous rows, so no transpose copy is
/// materialized; used for weight gradients where `b` is a large patch matrix.
pub(crate) fn gemm_abt(a: &Mat, b: &Mat, mut acc: Mat) -> Result<Mat> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "gemm_abt inner dimensions differ: a is {}x{}, b-transpose is {}x{}",
            a.rows, a.cols, b.cols, b.rows
        )));
    }
    if acc.rows != a.rows || acc.cols != b.rows {
        return Err(Error::Shape(format!(
            "gemm_abt accumulator is {}x{} but product is {}x{}",
            acc.rows, acc.cols, a.rows, b.rows
        )));
    }
    let (k, n) = (a.cols, b.rows);
    let a_data = &a.data;
    let b_data = &b.data;
    parallel::for_each_chunk_mut(&mut acc.data, n, |i, out_row| {
        let a_row = &a_data[i * k..(i + 1) * k];
        for (j, ov) in out_row.iter_mut().enumerate() {
            let b_row = &b_data[j * k..(j + 1) * k];
            let mut s = *ov as f64;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av as f64 * bv as f64;
            }
            *ov = s as f32;
        }
    });
    Ok(acc)
}

/// Receptive-field patches of a single-sample tensor as matrix columns.
///
/// Row order is channel-major, then kd, kh, kw; column j is output voxel j in
/// row-major (od, oh, ow) order. Padded reads contribute 0.
pub fn im2col_3d(x: &Tensor5, g: &ConvGeometry) -> Result<Mat> {
    let (n, c, d, h, w) = x.dims();
    if n != 1 {
        return Err(Error::Shape(format!("im2col expects a single sample, got n = {n}")));
    }
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels but geometry expects {}",
            g.in_channels
        )));
    }
    let (od, oh, ow) = g.out_extent((d, h, w))?;
    let mut cols = Mat::zeros(g.patch_len(), od * oh * ow);
    im2col_fill(x, 0, g, (od, oh, ow), &mut cols);
    Ok(cols)
}

/// Fills `cols` with the patches of sample `sample` of `x`.
/// Shapes must already be consistent; used by the conv engine to reuse buffers.
pub(crate) fn im2col_fill(
    x: &Tensor5,
    sample: usize,
    g: &ConvGeometry,
    out_extent: (usize, usize, usize),
    cols: &mut Mat,
) {
    let (_, c, d, h, w) = x.dims();
    debug_assert_eq!(cols.rows, g.patch_len());
    let (od, oh, ow) = out_extent;
    debug_assert_eq!(cols.cols, od * oh * ow);
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let sample_base = sample * c * d * h * w;
    let x_data = x.data();
    let n_cols = cols.cols;
    // Each matrix row is one (channel, kernel offset) and is written by exactly
    // one closure invocation, so the parallel split is over disjoint memory.
    parallel::for_each_chunk_mut(&mut cols.data, n_cols, |row, out| {
        let kw_i = row % kw;
        let rest = row / kw;
        let kh_i = rest % kh;
        let rest = rest / kh;
        let kd_i = rest % kd;
        let ch = rest / kd;
        let ch_base = sample_base + ch * d * h * w;
        let mut j = 0;
        for od_i in 0..od {
            let id = (od_i * sd + kd_i) as isize - pd as isize;
            for oh_i in 0..oh {
                let ih = (oh_i * sh + kh_i) as isize - ph as isize;
                let plane_ok = id >= 0 && (id as usize) < d && ih >= 0 && (ih as usize) < h;
                let row_base = ch_base + (id.max(0) as usize * h + ih.max(0) as usize) * w;
                for ow_i in 0..ow {
                    let iw = (ow_i * sw + kw_i) as isize - pw as isize;
                    out[j] = if plane_ok && iw >= 0 && (iw as usize) < w {
                        x_data[row_base + iw as usize]
                    } else {
                        0.0
                    };
                    j += 1;
                }
            }
        }
    });
}

/// Adjoint of [`im2col_3d`]: scatters column entries back onto the input grid,
/// summing overlaps and discarding padding contributions.
pub fn col2im_3d(
    cols: &Mat,
    g: &ConvGeometry,
    in_shape: (usize, usize, usize, usize, usize),
) -> Result<Tensor5> {
    let (n, c, d, h, w) = in_shape;
    if n != 1 {
        return Err(Error::Shape(format!("col2im expects a single sample, got n = {n}")));
    }
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "target has {c} channels but geometry expects {}",
            g.in_channels
        )));
    }
    let (od, oh, ow) = g.out_extent((d, h, w))?;
    if cols.rows != g.patch_len() || cols.cols != od * oh * ow {
        return Err(Error::Shape(format!(
            "column matrix is {}x{} but geometry implies {}x{}",
            cols.rows,
            cols.cols,
            g.patch_len(),
            od * oh * ow
        )));
    }
    let mut out = Tensor5::zeros(1, c, d, h, w);
    let (kd, kh, kw) = g.kernel;
    let (sd, sh, sw) = g.stride;
    let (pd, ph, pw) = g.pad;
    let plane = d * h * w;
    let k_vol = kd * kh * kw;
    // Channels own disjoint output planes; accumulate each in f64, round once.
    parallel::for_each_chunk_mut(out.data_mut(), plane, |ch, out_plane| {
        let mut acc = vec![0.0f64; plane];
        for k_off in 0..k_vol {
            let kw_i = k_off % kw;
            let kh_i = (k_off / kw) % kh;
            let kd_i = k_off / (kw * kh);
            let row = cols.row(ch * k_vol + k_off);
            let mut j = 0;
            for od_i in 0..od {
                let id = (od_i * sd + kd_i) as isize - pd as isize;
                for oh_i in 0..oh {
                    let ih = (oh_i * sh + kh_i) as isize - ph as isize;
                    let plane_ok = id >= 0 && (id as usize) < d && ih >= 0 && (ih as usize) < h;
                    let row_base = (id.max(0) as usize * h + ih.max(0) as usize) * w;
                    for ow_i in 0..ow {
                        let iw = (ow_i * sw + kw_i) as isize - pw as isize;
                        if plane_ok && iw >= 0 && (iw as usize) < w {
                            acc[row_base + iw as usize] += row[j] as f64;
                        }
                        j += 1;
                    }
                }
            }
        }
        for (o, &a) in out_plane.iter_mut().zip(&acc) {
            *o = a as f32;
        }
    });
    Ok(out)
}
