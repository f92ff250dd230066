//! Isotropic resampling by trilinear interpolation.

use super::CtVolume;
use crate::error::{Error, Result};
use crate::parallel;

/// Resamples to cubic voxels of side `target_mm`. Output extent per axis is
/// `round(extent · spacing / target)` (at least 1); the world origin is kept,
/// so output voxel v samples the input at world `origin + v·target`. Reads
/// outside the input grid clamp to the nearest edge sample.
pub fn resample_isotropic(v: &CtVolume, target_mm: f32) -> Result<CtVolume> {
    if target_mm <= 0.0 || !target_mm.is_finite() {
        return Err(Error::Config(format!("non-positive sampling distance {target_mm}")));
    }
    let (dd, hh, ww) = v.dims();
    let [sz, sy, sx] = v.spacing_mm();
    let out_extent = |extent: usize, spacing: f32| -> usize {
        ((extent as f64 * spacing as f64 / target_mm as f64).round() as usize).max(1)
    };
    let (od, oh, ow) = (out_extent(dd, sz), out_extent(hh, sy), out_extent(ww, sx));

    // Per output index along one axis: clamped (floor, ceil, fraction).
    let axis_taps = |out_n: usize, in_n: usize, spacing: f32| -> Vec<(usize, usize, f32)> {
        (0..out_n)
            .map(|o| {
                let f = (o as f64 * target_mm as f64 / spacing as f64)
                    .clamp(0.0, (in_n - 1) as f64);
                let i0 = f.floor() as usize;
                let i1 = (i0 + 1).min(in_n - 1);
                (i0, i1, (f - i0 as f64) as f32)
            })
            .collect()
    };
    let tz = axis_taps(od, dd, sz);
    let ty = axis_taps(oh, hh, sy);
    let tx = axis_taps(ow, ww, sx);

    let src = v.voxels();
    let mut voxels = vec![0f32; od * oh * ow];
    parallel::for_each_chunk_mut(&mut voxels, oh * ow, |oz, plane| {
        let (z0, z1, wz) = tz[oz];
        for oy in 0..oh {
            let (y0, y1, wy) = ty[oy];
            let row = &mut plane[oy * ow..(oy + 1) * ow];
            for (ox, out) in row.iter_mut().enumerate() {
                let (x0, x1, wx) = tx[ox];
                let fetch = |z: usize, y: usize, x: usize| src[(z * hh + y) * ww + x];
                let c00 = fetch(z0, y0, x0) + wx * (fetch(z0, y0, x1) - fetch(z0, y0, x0));
                let c01 = fetch(z0, y1, x0) + wx * (fetch(z0, y1, x1) - fetch(z0, y1, x0));
                let c10 = fetch(z1, y0, x0) + wx * (fetch(z1, y0, x1) - fetch(z1, y0, x0));
                let c11 = fetch(z1, y1, x0) + wx * (fetch(z1, y1, x1) - fetch(z1, y1, x0));
                let c0 = c00 + wy * (c01 - c00);
                let c1 = c10 + wy * (c11 - c10);
                *out = c0 + wz * (c1 - c0);
            }
        }
    });

    CtVolume::new(
        (od, oh, ow),
        [target_mm; 3],
        v.origin_mm(),
        voxels,
    )
}
