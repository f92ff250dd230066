//! CT volume handling: the in-memory volume type, coordinate transforms,
//! intensity normalization, crop extraction, training-crop sampling, and the
//! synthetic dataset generator.
//!
//! All 3-vectors here are ordered (z, y, x) to match the (d, h, w) storage
//! layout; only the annotation CSV swaps to its conventional (X, Y, Z)
//! columns.

mod format;
mod resample;
mod synth;

pub use format::{read_annotations, read_nvol, write_annotations, write_nvol};
pub use resample::resample_isotropic;
pub use synth::{generate_synthetic_volume, SynthParams};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// Hounsfield window mapped onto [0, 1] by [`normalize_intensity`].
pub const HU_WINDOW: (f32, f32) = (-1000.0, 400.0);

/// A scalar CT volume with world geometry: `world = origin + voxel ⊙ spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    dims: (usize, usize, usize),
    spacing_mm: [f32; 3],
    origin_mm: [f32; 3],
    voxels: Vec<f32>,
}

impl CtVolume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing_mm: [f32; 3],
        origin_mm: [f32; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        if spacing_mm.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Geometry(format!("non-positive spacing {spacing_mm:?}")));
        }
        let count = dims.0 * dims.1 * dims.2;
        if count == 0 || voxels.len() != count {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims:?} (need {count})",
                voxels.len()
            )));
        }
        Ok(Self { dims, spacing_mm, origin_mm, voxels })
    }

    pub fn filled(
        dims: (usize, usize, usize),
        spacing_mm: [f32; 3],
        origin_mm: [f32; 3],
        value: f32,
    ) -> Result<Self> {
        let count = dims.0 * dims.1 * dims.2;
        Self::new(dims, spacing_mm, origin_mm, vec![value; count])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f32; 3] {
        self.origin_mm
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        debug_assert!(z < self.dims.0 && y < self.dims.1 && x < self.dims.2);
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(z, y, x)]
    }

    pub fn world_to_voxel(&self, p_mm: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0; 3];
        for ax in 0..3 {
            out[ax] = (p_mm[ax] - self.origin_mm[ax]) / self.spacing_mm[ax];
        }
        out
    }

    pub fn voxel_to_world(&self, p_vox: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0; 3];
        for ax in 0..3 {
            out[ax] = self.origin_mm[ax] + p_vox[ax] * self.spacing_mm[ax];
        }
        out
    }

    /// The common spacing if the volume is isotropic (within 1e-6 relative).
    pub fn isotropic_spacing(&self) -> Option<f32> {
        let [a, b, c] = self.spacing_mm;
        let rel = |p: f32, q: f32| (p - q).abs() / p.max(q);
        (rel(a, b) < 1e-6 && rel(a, c) < 1e-6).then_some(a)
    }
}

/// A nodule in world millimeters. `center_mm` is (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct NoduleAnnotation {
    pub series_id: String,
    pub center_mm: [f32; 3],
    pub diameter_mm: f32,
}

/// A nodule expressed in a volume's (or crop's) voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelNodule {
    pub center_vox: [f32; 3],
    pub diameter_vox: f32,
}

/// Converts annotations to voxel coordinates. Requires isotropic spacing so a
/// single voxel diameter is meaningful.
pub fn annotations_to_voxel(
    v: &CtVolume,
    annotations: &[NoduleAnnotation],
) -> Result<Vec<VoxelNodule>> {
    let spacing = v.isotropic_spacing().ok_or_else(|| {
        Error::Geometry(format!(
            "voxel-space nodules need isotropic spacing, volume has {:?}",
            v.spacing_mm()
        ))
    })?;
    Ok(annotations
        .iter()
        .map(|a| VoxelNodule {
            center_vox: v.world_to_voxel(a.center_mm),
            diameter_vox: a.diameter_mm / spacing,
        })
        .collect())
}

/// Clips to the [−1000, 400] HU window and maps it affinely onto [0, 1].
pub fn normalize_intensity(v: &CtVolume) -> CtVolume {
    let (lo, hi) = HU_WINDOW;
    let scale = 1.0 / (hi - lo);
    let mut out = v.clone();
    for x in out.voxels_mut() {
        *x = (x.clamp(lo, hi) - lo) * scale;
    }
    out
}

/// Placement of one cubic crop: side length and the volume-voxel center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub side: usize,
    pub center_vox: [f32; 3],
}

impl CropSpec {
    /// First included voxel per axis: round(center − side/2).
    pub fn start(&self) -> [i64; 3] {
        let half = self.side as f32 / 2.0;
        [
            (self.center_vox[0] - half).round() as i64,
            (self.center_vox[1] - half).round() as i64,
            (self.center_vox[2] - half).round() as i64,
        ]
    }
}

/// Copies the crop region into a (1, 1, m, m, m) tensor, padding outside
/// reads with 0 (air after normalization), and re-expresses the given
/// volume-voxel nodules in crop-local coordinates, dropping any whose center
/// falls outside the crop.
pub fn extract_crop(
    v: &CtVolume,
    spec: &CropSpec,
    nodules: &[VoxelNodule],
) -> (Tensor5, Vec<VoxelNodule>) {
    let m = spec.side;
    let start = spec.start();
    let (dd, hh, ww) = v.dims();
    let mut out = Tensor5::zeros(1, 1, m, m, m);
    {
        let data = out.data_mut();
        for qz in 0..m {
            let z = start[0] + qz as i64;
            if z < 0 || z >= dd as i64 {
                continue;
            }
            for qy in 0..m {
                let y = start[1] + qy as i64;
                if y < 0 || y >= hh as i64 {
                    continue;
                }
                let x0 = start[2].clamp(0, ww as i64);
                let x1 = (start[2] + m as i64).clamp(0, ww as i64);
                if x0 >= x1 {
                    continue;
                }
                let src = v.index(z as usize, y as usize, x0 as usize);
                let dst = (qz * m + qy) * m + (x0 - start[2]) as usize;
                let run = (x1 - x0) as usize;
                data[dst..dst + run].copy_from_slice(&v.voxels()[src..src + run]);
            }
        }
    }
    let local: Vec<VoxelNodule> = nodules
        .iter()
        .filter_map(|n| {
            let mut c = [0.0f32; 3];
            for ax in 0..3 {
                c[ax] = n.center_vox[ax] - start[ax] as f32;
                if c[ax] < 0.0 || c[ax] >= m as f32 {
                    return None;
                }
            }
            Some(VoxelNodule { center_vox: c, diameter_vox: n.diameter_vox })
        })
        .collect();
    (out, local)
}

/// Stacks single-sample crops into one (n, 1, m, m, m) batch.
pub fn stack_crops(crops: &[Tensor5]) -> Result<Tensor5> {
    let first = crops
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty crop list".into()))?;
    let (_, c, d, h, w) = first.dims();
    let mut out = Tensor5::zeros(crops.len(), c, d, h, w);
    let stride = c * d * h * w;
    for (i, crop) in crops.iter().enumerate() {
        if crop.dims() != (1, c, d, h, w) {
            return Err(Error::Shape(format!(
                "crop {i} has dims {:?}, expected (1, {c}, {d}, {h}, {w})",
                crop.dims()
            )));
        }
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(crop.data());
    }
    Ok(out)
}

/// How training crops are placed.
#[derive(Debug, Clone, Copy)]
pub struct CropPolicy {
    pub side: usize,
    /// Probability of centering on a random annotated nodule.
    pub nodule_fraction: f64,
    /// Maximum per-axis jitter around the nodule center, in voxels.
    pub jitter_vox: f32,
}

impl CropPolicy {
    pub fn new(side: usize) -> Self {
        Self { side, nodule_fraction: 0.7, jitter_vox: side as f32 / 4.0 }
    }
}

/// Draws `count` crop placements: nodule-centered with jitter with
/// probability `nodule_fraction` (when any nodules exist), otherwise uniform
/// over centers that keep the crop inside the volume where possible.
pub fn sample_training_crops<R: Rng>(
    v: &CtVolume,
    nodules: &[VoxelNodule],
    policy: &CropPolicy,
    count: usize,
    rng: &mut R,
) -> Vec<CropSpec> {
    let (dd, hh, ww) = v.dims();
    let extents = [dd as f32, hh as f32, ww as f32];
    let half = policy.side as f32 / 2.0;
    (0..count)
        .map(|_| {
            let on_nodule = !nodules.is_empty() && rng.gen_bool(policy.nodule_fraction);
            let mut center = [0.0f32; 3];
            if on_nodule {
                let n = &nodules[rng.gen_range(0..nodules.len())];
                for ax in 0..3 {
                    let jitter = if policy.jitter_vox > 0.0 {
                        rng.gen_range(-policy.jitter_vox..=policy.jitter_vox)
                    } else {
                        0.0
                    };
                    center[ax] = n.center_vox[ax] + jitter;
                }
            } else {
                for ax in 0..3 {
                    let (lo, hi) = (half, extents[ax] - half);
                    center[ax] = if lo < hi { rng.gen_range(lo..hi) } else { extents[ax] / 2.0 };
                }
            }
            CropSpec { side: policy.side, center_vox: center }
        })
        .collect()
}
