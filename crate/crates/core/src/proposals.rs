//! From head tensors to scored world-space candidates, and from candidates to
//! FROC curves.

use std::io::{Read, Write};

use crate::ctio::{CropSpec, CtVolume, NoduleAnnotation};
use crate::error::{Error, Result};
use crate::net::HeadOutput;
use crate::objective::{cube_iou, AnchorSpec};

/// FP/scan operating points averaged into the FROC mean score.
pub const OPERATING_POINTS: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// One scored detection in world millimeters. `center_mm` is (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub series_id: String,
    pub center_mm: [f32; 3],
    pub diameter_mm: f32,
    pub probability: f32,
}

impl Candidate {
    pub fn new(
        series_id: String,
        center_mm: [f32; 3],
        diameter_mm: f32,
        probability: f32,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) || !probability.is_finite() {
            return Err(Error::Degenerate(format!("probability {probability} outside [0, 1]")));
        }
        if diameter_mm <= 0.0 || !diameter_mm.is_finite() {
            return Err(Error::Degenerate(format!("non-positive diameter {diameter_mm}")));
        }
        Ok(Self { series_id, center_mm, diameter_mm, probability })
    }
}

/// Maps crop-local voxel coordinates to world millimeters.
#[derive(Debug, Clone, Copy)]
pub struct CropFrame {
    origin_mm: [f32; 3],
    spacing_mm: f32,
    start_vox: [f32; 3],
}

impl CropFrame {
    /// Frame of `spec` within `v`, which must be isotropic.
    pub fn new(v: &CtVolume, spec: &CropSpec) -> Result<Self> {
        let spacing = v.isotropic_spacing().ok_or_else(|| {
            Error::Geometry(format!(
                "crop decoding needs isotropic spacing, volume has {:?}",
                v.spacing_mm()
            ))
        })?;
        let start = spec.start();
        Ok(Self {
            origin_mm: v.origin_mm(),
            spacing_mm: spacing,
            start_vox: [start[0] as f32, start[1] as f32, start[2] as f32],
        })
    }

    /// Identity frame: world == crop voxels. Convenient in tests.
    pub fn identity() -> Self {
        Self { origin_mm: [0.0; 3], spacing_mm: 1.0, start_vox: [0.0; 3] }
    }

    pub fn to_world(&self, local_vox: [f32; 3]) -> [f32; 3] {
        let mut out = [0.0; 3];
        for ax in 0..3 {
            out[ax] = self.origin_mm[ax] + (self.start_vox[ax] + local_vox[ax]) * self.spacing_mm;
        }
        out
    }

    pub fn spacing_mm(&self) -> f32 {
        self.spacing_mm
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Inverts the anchor offset encoding for one head sample: every
/// (cell, anchor) whose score reaches `score_threshold` becomes a candidate at
/// `anchor_center + t·anchor_d` with diameter `anchor_d·exp(t_d)`, mapped
/// through `frame` into world millimeters.
pub fn decode_proposals(
    head: &HeadOutput,
    sample: usize,
    anchors: &AnchorSpec,
    frame: &CropFrame,
    score_threshold: f32,
    series_id: &str,
) -> Result<Vec<Candidate>> {
    let (n, side, na) = head.dims();
    if sample >= n {
        return Err(Error::Shape(format!("sample {sample} out of batch {n}")));
    }
    if na != anchors.count() {
        return Err(Error::Shape(format!(
            "head carries {na} anchors, spec has {}",
            anchors.count()
        )));
    }
    let mut out = Vec::new();
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                for a in 0..na {
                    let logit = head.at(sample, i, j, k, a, 0);
                    let p = sigmoid(logit as f64) as f32;
                    if p.is_nan() || p < score_threshold {
                        continue;
                    }
                    let d_a = anchors.diameter(a);
                    let cell =
                        [AnchorSpec::cell_center(i), AnchorSpec::cell_center(j), AnchorSpec::cell_center(k)];
                    let mut local = [0f32; 3];
                    for (ax, l) in local.iter_mut().enumerate() {
                        let t = head.at(sample, i, j, k, a, 1 + ax);
                        *l = cell[ax] + t * d_a;
                    }
                    let t_d = head.at(sample, i, j, k, a, 4);
                    let diameter_mm = d_a * t_d.exp() * frame.spacing_mm();
                    let center_mm = frame.to_world(local);
                    // Barely-trained heads can emit regressions whose exp
                    // underflows or overflows; such cells carry no usable
                    // geometry and yield no proposal rather than failing
                    // the whole decode.
                    if diameter_mm <= 0.0
                        || !diameter_mm.is_finite()
                        || center_mm.iter().any(|c| !c.is_finite())
                    {
                        continue;
                    }
                    out.push(Candidate::new(series_id.to_string(), center_mm, diameter_mm, p)?);
                }
            }
        }
    }
    Ok(out)
}

fn candidate_iou(a: &Candidate, b: &Candidate) -> f64 {
    cube_iou(
        [a.center_mm[0] as f64, a.center_mm[1] as f64, a.center_mm[2] as f64],
        a.diameter_mm as f64,
        [b.center_mm[0] as f64, b.center_mm[1] as f64, b.center_mm[2] as f64],
        b.diameter_mm as f64,
    )
}

/// Greedy non-maximum suppression on cube IoU, highest probability first.
/// Candidates from different scans never suppress each other.
pub fn nms_3d(mut candidates: Vec<Candidate>, iou_threshold: f64) -> Vec<Candidate> {
    candidates.sort_by(|a, b| b.probability.total_cmp(&a.probability));
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        let suppressed = kept.iter().any(|k| {
            k.series_id == c.series_id && candidate_iou(k, &c) > iou_threshold
        });
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

/// The hit criterion: candidate center strictly inside the nodule radius.
pub fn is_hit(c: &Candidate, n: &NoduleAnnotation) -> bool {
    let d2: f64 = (0..3)
        .map(|ax| (c.center_mm[ax] as f64 - n.center_mm[ax] as f64).powi(2))
        .sum();
    d2.sqrt() < n.diameter_mm as f64 / 2.0
}

/// An FROC curve: operating points swept over candidate probabilities, plus
/// the mean sensitivity over the standard FP/scan points.
#[derive(Debug, Clone)]
pub struct FrocCurve {
    /// (false positives per scan, sensitivity), in sweep order (threshold
    /// descending, so FP/scan non-decreasing).
    pub points: Vec<(f64, f64)>,
    pub mean_score: f64,
}

impl FrocCurve {
    /// Sensitivity at an FP/scan level by linear interpolation; flat at 0
    /// from the origin, flat at the final sensitivity beyond the last point.
    pub fn sensitivity_at(&self, fps: f64) -> f64 {
        // Collapse to the best sensitivity per distinct FP level, keeping
        // monotone non-decreasing pairs; anchor at the origin.
        let mut steps: Vec<(f64, f64)> = vec![(0.0, 0.0)];
        for &(f, s) in &self.points {
            match steps.last_mut() {
                Some(last) if (last.0 - f).abs() < 1e-12 => last.1 = last.1.max(s),
                _ => steps.push((f, s)),
            }
        }
        if fps >= steps.last().unwrap().0 {
            return steps.last().unwrap().1;
        }
        let hi = steps.partition_point(|&(f, _)| f <= fps);
        let (f0, s0) = steps[hi - 1];
        let (f1, s1) = steps[hi];
        s0 + (s1 - s0) * (fps - f0) / (f1 - f0)
    }
}

/// Sweeps all probability thresholds over the candidate set. A candidate
/// counts as a true positive if it hits at least one not-yet-hit nodule of
/// its scan, as nothing if it only re-hits already-found nodules, and as a
/// false positive otherwise.
pub fn froc(
    candidates: &[Candidate],
    annotations: &[NoduleAnnotation],
    n_scans: usize,
) -> Result<FrocCurve> {
    if n_scans == 0 || annotations.is_empty() {
        return Err(Error::Degenerate(format!(
            "FROC needs scans and nodules, got {n_scans} scans / {} nodules",
            annotations.len()
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].probability.total_cmp(&candidates[a].probability));

    let mut hit = vec![false; annotations.len()];
    let mut hits = 0usize;
    let mut fps = 0usize;
    let mut points = Vec::new();
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a point: the curve is a
        // function of the threshold, not of within-tie ordering.
        let p = candidates[order[i]].probability;
        while i < order.len() && candidates[order[i]].probability == p {
            let c = &candidates[order[i]];
            let mut any_hit = false;
            for (ni, a) in annotations.iter().enumerate() {
                if a.series_id == c.series_id && is_hit(c, a) {
                    any_hit = true;
                    if !hit[ni] {
                        hit[ni] = true;
                        hits += 1;
                    }
                }
            }
            if !any_hit {
                fps += 1;
            }
            i += 1;
        }
        points.push((fps as f64 / n_scans as f64, hits as f64 / annotations.len() as f64));
    }

    let mut curve = FrocCurve { points, mean_score: 0.0 };
    curve.mean_score = OPERATING_POINTS
        .iter()
        .map(|&q| curve.sensitivity_at(q))
        .sum::<f64>()
        / OPERATING_POINTS.len() as f64;
    Ok(curve)
}

/// Writes candidates with the conventional header
/// `seriesuid,coordX,coordY,coordZ,diameter_mm,probability`.
pub fn write_candidates<W: Write>(candidates: &[Candidate], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability"])?;
    for c in candidates {
        out.write_record([
            c.series_id.as_str(),
            &c.center_mm[2].to_string(),
            &c.center_mm[1].to_string(),
            &c.center_mm[0].to_string(),
            &c.diameter_mm.to_string(),
            &c.probability.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_candidates<R: Read>(r: R) -> Result<Vec<Candidate>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    let expected = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "probability"];
    if headers.iter().ne(expected) {
        return Err(Error::Format(format!(
            "candidate header {headers:?}, expected {expected:?}"
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f32> {
            record[i]
                .trim()
                .parse::<f32>()
                .map_err(|e| Error::Format(format!("candidate field {:?}: {e}", &record[i])))
        };
        out.push(Candidate::new(
            record[0].to_string(),
            [field(3)?, field(2)?, field(1)?],
            field(4)?,
            field(5)?,
        )?);
    }
    Ok(out)
}

/// Writes an FROC curve as `fps_per_scan,sensitivity` rows followed by a
/// `mean_score` line.
pub fn write_froc<W: Write>(curve: &FrocCurve, mut w: W) -> Result<()> {
    writeln!(w, "fps_per_scan,sensitivity")?;
    for &(f, s) in &curve.points {
        writeln!(w, "{f},{s}")?;
    }
    writeln!(w, "# mean_score,{}", curve.mean_score)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{assign_targets, AnchorLabel};

    fn cand(series: &str, center: [f32; 3], d: f32, p: f32) -> Candidate {
        Candidate::new(series.into(), center, d, p).unwrap()
    }

    fn ann(series: &str, center: [f32; 3], d: f32) -> NoduleAnnotation {
        NoduleAnnotation { series_id: series.into(), center_mm: center, diameter_mm: d }
    }

    #[test]
    fn candidate_validation() {
        assert!(Candidate::new("s".into(), [0.0; 3], 5.0, 1.5).is_err());
        assert!(Candidate::new("s".into(), [0.0; 3], -1.0, 0.5).is_err());
    }

    #[test]
    fn zero_offsets_decode_to_the_anchor_cube() {
        let anchors = AnchorSpec::new(vec![8.0]).unwrap();
        let mut head = HeadOutput::zeros(1, 2, 1);
        head.data_mut()[0] = 3.0; // cell (0,0,0) scores high, offsets zero
        let cands =
            decode_proposals(&head, 0, &anchors, &CropFrame::identity(), 0.6, "s").unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].center_mm, [2.0, 2.0, 2.0]);
        assert_eq!(cands[0].diameter_mm, 8.0);
    }

    #[test]
    fn log_offset_doubles_the_diameter() {
        let anchors = AnchorSpec::new(vec![8.0]).unwrap();
        let mut head = HeadOutput::zeros(1, 1, 1);
        head.data_mut()[0] = 3.0;
        head.data_mut()[4] = std::f32::consts::LN_2;
        let cands =
            decode_proposals(&head, 0, &anchors, &CropFrame::identity(), 0.6, "s").unwrap();
        assert!((cands[0].diameter_mm - 16.0).abs() < 1e-4);
    }

    #[test]
    fn degenerate_regressions_yield_no_proposal_instead_of_an_error() {
        let anchors = AnchorSpec::new(vec![8.0]).unwrap();
        let mut head = HeadOutput::zeros(1, 2, 1);
        *head.at_mut(0, 0, 0, 0, 0, 0) = 3.0;
        *head.at_mut(0, 0, 0, 0, 0, 4) = -120.0; // exp underflows: diameter 0
        *head.at_mut(0, 0, 0, 1, 0, 0) = 3.0; // this cell stays well-formed
        let cands =
            decode_proposals(&head, 0, &anchors, &CropFrame::identity(), 0.6, "s").unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].center_mm, [2.0, 2.0, 6.0]);
    }

    #[test]
    fn encode_then_decode_recovers_the_nodule() {
        let anchors = AnchorSpec::new(vec![6.0, 14.0]).unwrap();
        let nodules = [([9.5f32, 13.25, 6.75], 7.4f32)];
        let ta = assign_targets(&nodules, &anchors, 4).unwrap();
        let mut head = HeadOutput::zeros(1, 4, 2);
        let mut n_pos = 0;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    for a in 0..2 {
                        if let AnchorLabel::Positive(v) = ta.label(i, j, k, a) {
                            *head.at_mut(0, i, j, k, a, 0) = 20.0;
                            for (c, &vc) in v.iter().enumerate() {
                                *head.at_mut(0, i, j, k, a, 1 + c) = vc;
                            }
                            n_pos += 1;
                        }
                    }
                }
            }
        }
        assert!(n_pos >= 1);
        let cands =
            decode_proposals(&head, 0, &anchors, &CropFrame::identity(), 0.6, "s").unwrap();
        assert_eq!(cands.len(), n_pos);
        for c in cands {
            for ax in 0..3 {
                assert!((c.center_mm[ax] - nodules[0].0[ax]).abs() < 1e-4);
            }
            assert!((c.diameter_mm - nodules[0].1).abs() / nodules[0].1 < 1e-4);
        }
    }

    #[test]
    fn decode_maps_through_the_crop_frame() {
        let v = CtVolume::filled((32, 32, 32), [2.0; 3], [-10.0, 0.0, 4.0], 0.0).unwrap();
        let spec = CropSpec { side: 8, center_vox: [10.0, 10.0, 10.0] };
        let frame = CropFrame::new(&v, &spec).unwrap();
        let anchors = AnchorSpec::new(vec![4.0]).unwrap();
        let mut head = HeadOutput::zeros(1, 2, 1);
        head.data_mut()[0] = 5.0;
        let cands = decode_proposals(&head, 0, &anchors, &frame, 0.6, "s").unwrap();
        // Local (2,2,2) + start (6,6,6) = volume voxel (8,8,8), times 2 mm.
        assert_eq!(cands[0].center_mm, [-10.0 + 16.0, 16.0, 4.0 + 16.0]);
        assert_eq!(cands[0].diameter_mm, 8.0);
    }

    #[test]
    fn nms_single_candidate_unchanged() {
        let c = cand("s", [1.0, 2.0, 3.0], 5.0, 0.7);
        let kept = nms_3d(vec![c.clone()], 0.1);
        assert_eq!(kept, vec![c]);
    }

    #[test]
    fn nms_keeps_the_higher_probability_duplicate() {
        let a = cand("s", [5.0, 5.0, 5.0], 6.0, 0.9);
        let b = cand("s", [5.0, 5.0, 5.0], 6.0, 0.4);
        let kept = nms_3d(vec![b, a.clone()], 0.1);
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn nms_is_scan_local() {
        let a = cand("s1", [5.0, 5.0, 5.0], 6.0, 0.9);
        let b = cand("s2", [5.0, 5.0, 5.0], 6.0, 0.4);
        assert_eq!(nms_3d(vec![a, b], 0.1).len(), 2);
    }

    #[test]
    fn nms_matches_brute_force_on_random_boxes() {
        // Oracle: repeatedly take the highest-probability remaining box and
        // erase everything it overlaps.
        let mut boxes = Vec::new();
        let mut state = 88172645463325252u64;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f32 / (1u64 << 53) as f32
        };
        for _ in 0..20 {
            boxes.push(cand(
                "s",
                [next() * 30.0, next() * 30.0, next() * 30.0],
                4.0 + next() * 10.0,
                next(),
            ));
        }
        let mut expected: Vec<Candidate> = Vec::new();
        let mut rest = boxes.clone();
        while !rest.is_empty() {
            let best = rest
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.probability.total_cmp(&b.1.probability))
                .map(|(i, _)| i)
                .unwrap();
            let top = rest.swap_remove(best);
            rest.retain(|c| candidate_iou(&top, c) <= 0.1);
            expected.push(top);
        }
        expected.sort_by(|a, b| b.probability.total_cmp(&a.probability));
        assert_eq!(nms_3d(boxes, 0.1), expected);
    }

    #[test]
    fn hit_criterion_is_strict() {
        let n = ann("s", [0.0, 0.0, 0.0], 4.0);
        assert!(is_hit(&cand("s", [1.0, 0.0, 0.0], 1.0, 0.5), &n));
        assert!(!is_hit(&cand("s", [2.0, 0.0, 0.0], 1.0, 0.5), &n));
        assert!(is_hit(&cand("s", [0.0, 0.0, 0.0], 1.0, 0.5), &n));
    }

    #[test]
    fn froc_rejects_degenerate_inputs() {
        assert!(froc(&[], &[], 1).is_err());
        assert!(froc(&[], &[ann("s", [0.0; 3], 4.0)], 0).is_err());
    }

    #[test]
    fn single_perfect_candidate_scores_one() {
        let n = ann("s", [10.0, 10.0, 10.0], 6.0);
        let c = cand("s", [10.0, 10.0, 10.0], 6.0, 0.9);
        let curve = froc(&[c], &[n], 1).unwrap();
        assert_eq!(curve.points, vec![(0.0, 1.0)]);
        assert_eq!(curve.mean_score, 1.0);
    }

    #[test]
    fn no_candidates_means_zero_sensitivity() {
        let n = ann("s", [10.0, 10.0, 10.0], 6.0);
        let curve = froc(&[], &[n], 1).unwrap();
        assert!(curve.points.is_empty());
        assert_eq!(curve.mean_score, 0.0);
        assert_eq!(curve.sensitivity_at(1.0), 0.0);
    }

    #[test]
    fn duplicate_hits_are_neither_tp_nor_fp() {
        let n = ann("s", [10.0, 10.0, 10.0], 6.0);
        let c1 = cand("s", [10.0, 10.0, 10.0], 6.0, 0.9);
        let c2 = cand("s", [10.5, 10.0, 10.0], 6.0, 0.7);
        let curve = froc(&[c1, c2], &[n], 1).unwrap();
        assert_eq!(curve.points, vec![(0.0, 1.0), (0.0, 1.0)]);
    }

    #[test]
    fn cross_scan_candidates_do_not_match() {
        let n = ann("s1", [10.0, 10.0, 10.0], 6.0);
        let c = cand("s2", [10.0, 10.0, 10.0], 6.0, 0.9);
        let curve = froc(&[c], &[n], 2).unwrap();
        assert_eq!(curve.points, vec![(0.5, 0.0)]);
    }

    #[test]
    fn scaling_probabilities_preserves_the_curve() {
        let anns = vec![ann("a", [10.0; 3], 6.0), ann("b", [40.0; 3], 8.0)];
        let cands = vec![
            cand("a", [10.0; 3], 6.0, 0.9),
            cand("a", [30.0; 3], 6.0, 0.8),
            cand("b", [40.5; 3], 8.0, 0.6),
            cand("b", [90.0; 3], 8.0, 0.3),
        ];
        let base = froc(&cands, &anns, 2).unwrap();
        let scaled: Vec<Candidate> = cands
            .iter()
            .cloned()
            .map(|mut c| {
                c.probability *= 0.5;
                c
            })
            .collect();
        let again = froc(&scaled, &anns, 2).unwrap();
        assert_eq!(base.points, again.points);
        assert_eq!(base.mean_score, again.mean_score);
    }

    #[test]
    fn sensitivity_interpolates_between_points() {
        let curve = FrocCurve { points: vec![(0.0, 0.5), (2.0, 1.0)], mean_score: 0.0 };
        assert_eq!(curve.sensitivity_at(0.0), 0.5);
        assert_eq!(curve.sensitivity_at(1.0), 0.75);
        assert_eq!(curve.sensitivity_at(2.0), 1.0);
        assert_eq!(curve.sensitivity_at(8.0), 1.0);
        // Below the first recorded point the curve falls toward the origin.
        let late = FrocCurve { points: vec![(4.0, 0.8)], mean_score: 0.0 };
        assert_eq!(late.sensitivity_at(1.0), 0.2);
    }

    #[test]
    fn candidate_csv_round_trip() {
        let cands = vec![
            cand("v0", [1.5, -2.0, 3.25], 7.5, 0.625),
            cand("v1", [0.0, 0.0, 0.0], 4.0, 1.0),
        ];
        let mut buf = Vec::new();
        write_candidates(&cands, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("seriesuid,coordX,coordY,coordZ,diameter_mm,probability\n"));
        assert!(text.contains("v0,3.25,-2,1.5,7.5,0.625"));
        assert_eq!(read_candidates(buf.as_slice()).unwrap(), cands);
    }
}
