//! Anchor definition, target assignment, and the multi-task proposal loss.
//!
//! Every head-grid cell carries one box per anchor diameter, centered at the
//! cell center. Assignment labels each (cell, anchor) positive, negative, or
//! ignore by cube IoU against the ground-truth nodules; the loss combines
//! binary cross entropy on mined classification targets with smooth-L1 on the
//! positive boxes' offsets.

use crate::error::{Error, Result};
use crate::net::{HeadOutput, HEAD_VALUES};

/// Input-voxel distance between adjacent head-grid cells.
pub const HEAD_STRIDE_VOX: usize = 4;

/// IoU at or above which an anchor is a positive example.
pub const IOU_POSITIVE: f64 = 0.5;
/// IoU strictly below which an anchor is a negative example; the band in
/// between is ignored.
pub const IOU_NEGATIVE: f64 = 0.02;

/// Anchor cube diameters, in voxels at the working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    diameters_vox: Vec<f32>,
}

impl AnchorSpec {
    pub fn new(diameters_vox: Vec<f32>) -> Result<Self> {
        if diameters_vox.is_empty() {
            return Err(Error::Config("anchor list is empty".into()));
        }
        if diameters_vox.iter().any(|&d| !d.is_finite() || d <= 0.0) {
            return Err(Error::Config(format!(
                "anchor diameters must be positive and finite, got {diameters_vox:?}"
            )));
        }
        Ok(Self { diameters_vox })
    }

    /// Converts millimeter diameters to voxels at the given isotropic spacing.
    pub fn from_mm(diameters_mm: &[f32], spacing_mm: f32) -> Result<Self> {
        if spacing_mm <= 0.0 || !spacing_mm.is_finite() {
            return Err(Error::Config(format!("non-positive spacing {spacing_mm}")));
        }
        Self::new(diameters_mm.iter().map(|&d| d / spacing_mm).collect())
    }

    pub fn count(&self) -> usize {
        self.diameters_vox.len()
    }

    pub fn diameter(&self, a: usize) -> f32 {
        self.diameters_vox[a]
    }

    pub fn diameters(&self) -> &[f32] {
        &self.diameters_vox
    }

    /// Center coordinate (any axis) of grid cell index `i`, in input voxels.
    pub fn cell_center(i: usize) -> f32 {
        (i as f32 + 0.5) * HEAD_STRIDE_VOX as f32
    }
}

/// Per-(cell, anchor) assignment outcome. Positive entries carry the offset
/// target (vz, vy, vx, vd).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive([f32; 4]),
    Negative,
    Ignore,
}

/// Dense labels for one crop: `side³ · anchors` entries, cell-major then
/// anchor, matching the head layout.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    side: usize,
    anchors: usize,
    labels: Vec<AnchorLabel>,
}

impl TargetAssignment {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn labels(&self) -> &[AnchorLabel] {
        &self.labels
    }

    /// Flat index of (cell i,j,k, anchor a) in the label vector.
    pub fn index_of(&self, i: usize, j: usize, k: usize, a: usize) -> usize {
        ((i * self.side + j) * self.side + k) * self.anchors + a
    }

    pub fn label(&self, i: usize, j: usize, k: usize, a: usize) -> AnchorLabel {
        self.labels[self.index_of(i, j, k, a)]
    }

    /// (positives, negatives, ignored) counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for l in &self.labels {
            match l {
                AnchorLabel::Positive(_) => c.0 += 1,
                AnchorLabel::Negative => c.1 += 1,
                AnchorLabel::Ignore => c.2 += 1,
            }
        }
        c
    }
}

/// Intersection-over-union of two axis-aligned cubes given by center and side.
pub(crate) fn cube_iou(ca: [f64; 3], da: f64, cb: [f64; 3], db: f64) -> f64 {
    let mut inter = 1.0;
    for ax in 0..3 {
        let lo = (ca[ax] - da / 2.0).max(cb[ax] - db / 2.0);
        let hi = (ca[ax] + da / 2.0).min(cb[ax] + db / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = da * da * da + db * db * db - inter;
    inter / union
}

fn offset_target(anchor_c: [f64; 3], anchor_d: f64, nodule_c: [f64; 3], nodule_d: f64) -> [f32; 4] {
    [
        ((nodule_c[0] - anchor_c[0]) / anchor_d) as f32,
        ((nodule_c[1] - anchor_c[1]) / anchor_d) as f32,
        ((nodule_c[2] - anchor_c[2]) / anchor_d) as f32,
        (nodule_d / anchor_d).ln() as f32,
    ]
}

/// Labels every (cell, anchor) of a `grid_side³` head against the crop-local
/// nodules, given as (center voxel (z,y,x), diameter voxels). IoU ≥ 0.5 is
/// positive, IoU < 0.02 negative, in between ignored; in addition each
/// nodule's single highest-IoU anchor is forced positive so no ground truth
/// goes unclaimed.
pub fn assign_targets(
    nodules: &[([f32; 3], f32)],
    anchors: &AnchorSpec,
    grid_side: usize,
) -> Result<TargetAssignment> {
    if grid_side == 0 {
        return Err(Error::Config("grid side must be positive".into()));
    }
    if let Some((c, d)) = nodules.iter().find(|(_, d)| *d <= 0.0 || !d.is_finite()) {
        return Err(Error::Config(format!(
            "nodule at {c:?} has non-positive diameter {d}"
        )));
    }
    let na = anchors.count();
    let cells = grid_side * grid_side * grid_side;
    let mut labels = vec![AnchorLabel::Negative; cells * na];
    // Best anchor per nodule for the forced-match pass.
    let mut best: Vec<(f64, usize)> = vec![(-1.0, 0); nodules.len()];

    let mut flat = 0usize;
    for i in 0..grid_side {
        for j in 0..grid_side {
            for k in 0..grid_side {
                let cell = [
                    AnchorSpec::cell_center(i) as f64,
                    AnchorSpec::cell_center(j) as f64,
                    AnchorSpec::cell_center(k) as f64,
                ];
                for a in 0..na {
                    let d_a = anchors.diameter(a) as f64;
                    let mut top = 0.0f64;
                    let mut top_n = None;
                    for (ni, &(nc, nd)) in nodules.iter().enumerate() {
                        let nc = [nc[0] as f64, nc[1] as f64, nc[2] as f64];
                        let iou = cube_iou(cell, d_a, nc, nd as f64);
                        if iou > top {
                            top = iou;
                            top_n = Some((ni, nc, nd as f64));
                        }
                        if iou > best[ni].0 {
                            best[ni] = (iou, flat);
                        }
                    }
                    labels[flat] = match top_n {
                        Some((_, nc, nd)) if top >= IOU_POSITIVE => {
                            AnchorLabel::Positive(offset_target(cell, d_a, nc, nd))
                        }
                        _ if top < IOU_NEGATIVE => AnchorLabel::Negative,
                        _ => AnchorLabel::Ignore,
                    };
                    flat += 1;
                }
            }
        }
    }

    for (ni, &(iou, flat)) in best.iter().enumerate() {
        if iou < 0.0 {
            continue; // zero IoU everywhere keeps the initial (0, 0) sentinel out
        }
        let cell_idx = flat / na;
        let a = flat % na;
        let k = cell_idx % grid_side;
        let j = (cell_idx / grid_side) % grid_side;
        let i = cell_idx / (grid_side * grid_side);
        let cell = [
            AnchorSpec::cell_center(i) as f64,
            AnchorSpec::cell_center(j) as f64,
            AnchorSpec::cell_center(k) as f64,
        ];
        let (nc, nd) = nodules[ni];
        let nc = [nc[0] as f64, nc[1] as f64, nc[2] as f64];
        labels[flat] = AnchorLabel::Positive(offset_target(
            cell,
            anchors.diameter(a) as f64,
            nc,
            nd as f64,
        ));
    }
    Ok(TargetAssignment { side: grid_side, anchors: na, labels })
}

/// Smooth-L1: 0.5x² inside |x| < 1, |x| − 0.5 outside. C¹ everywhere.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`]: x clamped to [−1, 1].
pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Binary cross entropy on a logit, in the overflow-free formulation.
/// Returns (loss, d loss / d logit).
pub fn bce_loss(logit: f64, g: f64) -> (f64, f64) {
    debug_assert!(g == 0.0 || g == 1.0);
    let loss = logit.max(0.0) - logit * g + (-logit.abs()).exp().ln_1p();
    let sigmoid = 1.0 / (1.0 + (-logit).exp());
    (loss, sigmoid - g)
}

/// The classification set chosen by hard-negative mining: per sample, the
/// flat (cell, anchor) indices whose BCE terms enter the loss. Freezing a
/// selection lets finite-difference probes see a locally smooth function.
#[derive(Debug, Clone)]
pub struct MiningSelection {
    per_sample: Vec<Vec<usize>>,
}

impl MiningSelection {
    pub fn per_sample(&self) -> &[Vec<usize>] {
        &self.per_sample
    }

    pub fn total(&self) -> usize {
        self.per_sample.iter().map(Vec::len).sum()
    }
}

/// Loss values and the exact gradient with respect to the head tensor.
#[derive(Debug)]
pub struct LossOutput {
    pub total: f64,
    pub cls: f64,
    pub loc: f64,
    pub head_grad: HeadOutput,
}

fn check_loss_shapes(head: &HeadOutput, tas: &[TargetAssignment]) -> Result<()> {
    let (n, side, anchors) = head.dims();
    if tas.len() != n {
        return Err(Error::Shape(format!(
            "{} assignments for a batch of {n}",
            tas.len()
        )));
    }
    for ta in tas {
        if ta.side != side || ta.anchors != anchors {
            return Err(Error::Shape(format!(
                "assignment grid {}³×{} does not match head {side}³×{anchors}",
                ta.side, ta.anchors
            )));
        }
    }
    Ok(())
}

/// Per-sample flat anchor id → head data offset of its value block.
fn value_base(head: &HeadOutput, sample: usize, flat: usize) -> usize {
    let (_, side, anchors) = head.dims();
    (sample * side * side * side * anchors + flat) * HEAD_VALUES
}

/// Chooses the classification set: all positives plus the
/// `max(2·N_pos, 1)` negatives with the highest current BCE loss, per crop.
pub fn select_hard_negatives(
    head: &HeadOutput,
    tas: &[TargetAssignment],
) -> Result<MiningSelection> {
    check_loss_shapes(head, tas)?;
    let mut per_sample = Vec::with_capacity(tas.len());
    for (s, ta) in tas.iter().enumerate() {
        let mut chosen = Vec::new();
        let mut negatives: Vec<(f64, usize)> = Vec::new();
        for (flat, label) in ta.labels.iter().enumerate() {
            let logit = head.data()[value_base(head, s, flat)] as f64;
            match label {
                AnchorLabel::Positive(_) => chosen.push(flat),
                AnchorLabel::Negative => negatives.push((bce_loss(logit, 0.0).0, flat)),
                AnchorLabel::Ignore => {}
            }
        }
        let n_neg = (2 * chosen.len()).max(1).min(negatives.len());
        negatives.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        chosen.extend(negatives[..n_neg].iter().map(|&(_, flat)| flat));
        per_sample.push(chosen);
    }
    Ok(MiningSelection { per_sample })
}

/// Multi-task loss for a frozen classification set. The classification term
/// is the mean BCE over the set; the localization term is the mean over
/// positive anchors of the summed smooth-L1 of the four offsets; the total is
/// their unweighted sum.
pub fn multitask_loss_with_selection(
    head: &HeadOutput,
    tas: &[TargetAssignment],
    selection: &MiningSelection,
) -> Result<LossOutput> {
    check_loss_shapes(head, tas)?;
    if selection.per_sample.len() != tas.len() {
        return Err(Error::Shape(format!(
            "selection covers {} samples, batch has {}",
            selection.per_sample.len(),
            tas.len()
        )));
    }
    let (n, side, anchors) = head.dims();
    let mut grad = HeadOutput::zeros(n, side, anchors);

    let n_cls: usize = selection.total();
    let n_pos: usize = tas
        .iter()
        .map(|ta| ta.labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count())
        .sum();

    let mut cls_sum = 0.0f64;
    for (s, (ta, chosen)) in tas.iter().zip(&selection.per_sample).enumerate() {
        for &flat in chosen {
            let g = match ta.labels[flat] {
                AnchorLabel::Positive(_) => 1.0,
                _ => 0.0,
            };
            let base = value_base(head, s, flat);
            let (loss, dz) = bce_loss(head.data()[base] as f64, g);
            cls_sum += loss;
            grad.data_mut()[base] += (dz / n_cls as f64) as f32;
        }
    }
    let cls = if n_cls == 0 { 0.0 } else { cls_sum / n_cls as f64 };

    let mut loc_sum = 0.0f64;
    if n_pos > 0 {
        for (s, ta) in tas.iter().enumerate() {
            for (flat, label) in ta.labels.iter().enumerate() {
                let AnchorLabel::Positive(v) = label else { continue };
                let base = value_base(head, s, flat);
                for c in 0..4 {
                    let diff = head.data()[base + 1 + c] as f64 - v[c] as f64;
                    loc_sum += smooth_l1(diff);
                    grad.data_mut()[base + 1 + c] +=
                        (smooth_l1_grad(diff) / n_pos as f64) as f32;
                }
            }
        }
    }
    let loc = if n_pos == 0 { 0.0 } else { loc_sum / n_pos as f64 };

    Ok(LossOutput { total: cls + loc, cls, loc, head_grad: grad })
}

/// Mines the classification set from the current head, then evaluates the
/// loss on it. Convenience wrapper over the two-step form.
pub fn multitask_loss(head: &HeadOutput, tas: &[TargetAssignment]) -> Result<LossOutput> {
    let selection = select_hard_negatives(head, tas)?;
    multitask_loss_with_selection(head, tas, &selection)
}
