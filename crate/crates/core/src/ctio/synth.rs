//! Synthetic CT generator: lung-like noise background with embedded
//! spherical nodules, plus ground-truth annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CtVolume, NoduleAnnotation};
use crate::error::{Error, Result};

/// Low-frequency background intensity band, HU.
const BACKGROUND_HU: (f32, f32) = (-900.0, -700.0);
/// Additive white voxel noise amplitude, HU.
const VOXEL_NOISE_HU: f32 = 25.0;
/// Background lattice stride: one random value per this many voxels.
const COARSE_STRIDE: usize = 16;
/// Nodule diameters are log-uniform over this range, mm.
const DIAMETER_RANGE_MM: (f32, f32) = (4.0, 30.0);
/// Nodule intensity band, HU.
const NODULE_HU: (f32, f32) = (-100.0, 100.0);
/// Minimum clearance between sphere surfaces and to the volume border, mm.
const CLEARANCE_MM: f32 = 2.0;
/// Placement attempts per nodule before giving up.
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Geometry of one generated volume.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub side_mm: f32,
    pub spacing_mm: f32,
    pub n_nodules: usize,
    pub series_id: String,
}

impl SynthParams {
    pub fn new(side_mm: f32, spacing_mm: f32, n_nodules: usize, series_id: &str) -> Self {
        Self { side_mm, spacing_mm, n_nodules, series_id: series_id.to_string() }
    }
}

/// Generates a cubic volume of smooth background noise with `n_nodules`
/// non-overlapping soft-edged spheres, byte-reproducible per seed.
/// Annotations carry world-mm centers and diameters.
pub fn generate_synthetic_volume(
    seed: u64,
    params: &SynthParams,
) -> Result<(CtVolume, Vec<NoduleAnnotation>)> {
    if params.side_mm <= 0.0 || params.spacing_mm <= 0.0 {
        return Err(Error::Config(format!(
            "side {} mm / spacing {} mm must be positive",
            params.side_mm, params.spacing_mm
        )));
    }
    let ext = ((params.side_mm / params.spacing_mm).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Coarse random lattice, trilinearly upsampled, gives the low-frequency
    // parenchyma-like field; per-voxel noise is layered on top.
    let lat_n = ext / COARSE_STRIDE + 2;
    let lattice: Vec<f32> = (0..lat_n * lat_n * lat_n)
        .map(|_| rng.gen_range(BACKGROUND_HU.0..BACKGROUND_HU.1))
        .collect();
    let lat_at = |z: usize, y: usize, x: usize| lattice[(z * lat_n + y) * lat_n + x];
    let mut voxels = vec![0f32; ext * ext * ext];
    let mut idx = 0;
    for z in 0..ext {
        let (z0, wz) = (z / COARSE_STRIDE, (z % COARSE_STRIDE) as f32 / COARSE_STRIDE as f32);
        for y in 0..ext {
            let (y0, wy) = (y / COARSE_STRIDE, (y % COARSE_STRIDE) as f32 / COARSE_STRIDE as f32);
            for x in 0..ext {
                let (x0, wx) =
                    (x / COARSE_STRIDE, (x % COARSE_STRIDE) as f32 / COARSE_STRIDE as f32);
                let c00 = lat_at(z0, y0, x0) + wx * (lat_at(z0, y0, x0 + 1) - lat_at(z0, y0, x0));
                let c01 =
                    lat_at(z0, y0 + 1, x0) + wx * (lat_at(z0, y0 + 1, x0 + 1) - lat_at(z0, y0 + 1, x0));
                let c10 =
                    lat_at(z0 + 1, y0, x0) + wx * (lat_at(z0 + 1, y0, x0 + 1) - lat_at(z0 + 1, y0, x0));
                let c11 = lat_at(z0 + 1, y0 + 1, x0)
                    + wx * (lat_at(z0 + 1, y0 + 1, x0 + 1) - lat_at(z0 + 1, y0 + 1, x0));
                let c0 = c00 + wy * (c01 - c00);
                let c1 = c10 + wy * (c11 - c10);
                let base = c0 + wz * (c1 - c0);
                voxels[idx] = base + rng.gen_range(-VOXEL_NOISE_HU..VOXEL_NOISE_HU);
                idx += 1;
            }
        }
    }

    // Rejection-sample sphere placements: inside the border clearance and
    // clear of every previously accepted sphere.
    let side = params.side_mm;
    let (ln_lo, ln_hi) = (DIAMETER_RANGE_MM.0.ln(), DIAMETER_RANGE_MM.1.ln());
    let mut placed: Vec<([f32; 3], f32)> = Vec::with_capacity(params.n_nodules);
    for ni in 0..params.n_nodules {
        let mut accepted = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let d = rng.gen_range(ln_lo..ln_hi).exp();
            let margin = d / 2.0 + CLEARANCE_MM;
            if 2.0 * margin >= side {
                continue;
            }
            let mut c = [0f32; 3];
            for v in &mut c {
                *v = rng.gen_range(margin..side - margin);
            }
            let clear = placed.iter().all(|&(pc, pd)| {
                let dist2: f32 = (0..3).map(|ax| (c[ax] - pc[ax]).powi(2)).sum();
                dist2.sqrt() > (d + pd) / 2.0 + CLEARANCE_MM
            });
            if clear {
                accepted = Some((c, d));
                break;
            }
        }
        let Some((c, d)) = accepted else {
            return Err(Error::Generation(format!(
                "could not place nodule {} of {} after {MAX_PLACEMENT_ATTEMPTS} attempts \
                 (side {side} mm)",
                ni + 1,
                params.n_nodules
            )));
        };
        placed.push((c, d));
    }

    let mut annotations = Vec::with_capacity(placed.len());
    let sp = params.spacing_mm;
    for &(c, d) in &placed {
        let intensity = rng.gen_range(NODULE_HU.0..NODULE_HU.1);
        let radius = d / 2.0;
        // Soft one-voxel edge: full intensity inside r ≤ R − sp/2, background
        // outside r ≥ R + sp/2, linear in between.
        let bounds = |ax: usize| -> (usize, usize) {
            let lo = ((c[ax] - radius) / sp - 1.0).floor().max(0.0) as usize;
            let hi = (((c[ax] + radius) / sp + 1.0).ceil() as usize).min(ext - 1);
            (lo, hi)
        };
        let (z_lo, z_hi) = bounds(0);
        let (y_lo, y_hi) = bounds(1);
        let (x_lo, x_hi) = bounds(2);
        for z in z_lo..=z_hi {
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let r = ((z as f32 * sp - c[0]).powi(2)
                        + (y as f32 * sp - c[1]).powi(2)
                        + (x as f32 * sp - c[2]).powi(2))
                    .sqrt();
                    let w = (0.5 + (radius - r) / sp).clamp(0.0, 1.0);
                    if w > 0.0 {
                        let cell = &mut voxels[(z * ext + y) * ext + x];
                        *cell = *cell * (1.0 - w) + intensity * w;
                    }
                }
            }
        }
        annotations.push(NoduleAnnotation {
            series_id: params.series_id.clone(),
            center_mm: c,
            diameter_mm: d,
        });
    }

    let volume = CtVolume::new((ext, ext, ext), [sp; 3], [0.0; 3], voxels)?;
    Ok((volume, annotations))
}
