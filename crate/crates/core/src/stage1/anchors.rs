//! Cubic anchor lattice over the feature map, plus training-label assignment.

use crate::error::{Error, Result};
use crate::stage1::boxes::{encode_box, iou_3d, BBox3D};

/// Anchors enumerated scale-major, then z, y, x over feature cells. An
/// anchor's flat index is `scale_idx * Fz*Fy*Fx + z * Fy*Fx + y * Fx + x`,
/// matching the channel layout of the proposal head outputs.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: Vec<BBox3D>,
    pub feature_stride: usize,
    /// Cube edge lengths in voxels, one anchor per scale per cell.
    pub scales: Vec<f32>,
    /// Patch voxel dims (z, y, x) the lattice covers.
    pub patch_dims: [usize; 3],
}

impl AnchorSet {
    pub fn feature_dims(&self) -> [usize; 3] {
        [
            self.patch_dims[0] / self.feature_stride,
            self.patch_dims[1] / self.feature_stride,
            self.patch_dims[2] / self.feature_stride,
        ]
    }
}

/// Centers sit at (i + 0.5) * stride per feature cell; one cubic anchor per
/// scale per cell.
pub fn generate_anchors(
    patch_dims: [usize; 3],
    feature_stride: usize,
    scales: &[f32],
) -> Result<AnchorSet> {
    if feature_stride == 0 {
        return Err(Error::Config("feature stride must be >= 1".into()));
    }
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config(format!(
            "anchor scales must be positive and non-empty, got {scales:?}"
        )));
    }
    for (axis, &d) in patch_dims.iter().enumerate() {
        if d == 0 || d % feature_stride != 0 {
            return Err(Error::Config(format!(
                "patch dim {d} (axis {axis}) is not divisible by stride {feature_stride}"
            )));
        }
    }
    let f = [
        patch_dims[0] / feature_stride,
        patch_dims[1] / feature_stride,
        patch_dims[2] / feature_stride,
    ];
    let mut anchors = Vec::with_capacity(scales.len() * f[0] * f[1] * f[2]);
    for &scale in scales {
        for z in 0..f[0] {
            for y in 0..f[1] {
                for x in 0..f[2] {
                    let center = [
                        (z as f32 + 0.5) * feature_stride as f32,
                        (y as f32 + 0.5) * feature_stride as f32,
                        (x as f32 + 0.5) * feature_stride as f32,
                    ];
                    anchors.push(BBox3D::cube(center, scale));
                }
            }
        }
    }
    Ok(AnchorSet {
        anchors,
        feature_stride,
        scales: scales.to_vec(),
        patch_dims,
    })
}

/// Training label for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Assignment of anchors to ground-truth boxes for one training patch.
#[derive(Debug, Clone)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for each positive anchor (encoded deltas to its
    /// best-overlapping ground-truth box); None elsewhere.
    pub targets: Vec<Option<[f32; 6]>>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

/// IoU >= pos_iou -> positive (deltas to the best-overlapping gt);
/// IoU <= neg_iou -> negative; otherwise ignore. Additionally the
/// highest-IoU anchor of each gt (among anchors with IoU > 0) is positive
/// regardless of threshold, so no gt goes unsupervised.
pub fn assign_anchor_labels(
    anchor_set: &AnchorSet,
    gt_boxes: &[BBox3D],
    pos_iou: f32,
    neg_iou: f32,
) -> Result<AnchorAssignment> {
    if anchor_set.anchors.is_empty() {
        return Err(Error::Config("anchor set is empty".into()));
    }
    if !(pos_iou > neg_iou) {
        return Err(Error::Config(format!(
            "pos_iou {pos_iou} must be greater than neg_iou {neg_iou}"
        )));
    }
    let anchors = &anchor_set.anchors;
    let n = anchors.len();

    // Best gt per anchor and best anchor per gt in one IoU sweep.
    let mut best_gt: Vec<(f32, usize)> = vec![(0.0, usize::MAX); n];
    let mut best_anchor: Vec<(f32, usize)> = vec![(0.0, usize::MAX); gt_boxes.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        for (gi, gt) in gt_boxes.iter().enumerate() {
            let iou = iou_3d(anchor, gt);
            if iou > best_gt[ai].0 {
                best_gt[ai] = (iou, gi);
            }
            if iou > best_anchor[gi].0 {
                best_anchor[gi] = (iou, ai);
            }
        }
    }

    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut targets: Vec<Option<[f32; 6]>> = vec![None; n];
    for ai in 0..n {
        let (iou, gi) = best_gt[ai];
        if iou >= pos_iou && gi != usize::MAX {
            labels[ai] = AnchorLabel::Positive;
            targets[ai] = Some(encode_box(&gt_boxes[gi], &anchors[ai]));
        } else if iou <= neg_iou {
            labels[ai] = AnchorLabel::Negative;
        }
    }
    // Force the best anchor of each gt positive.
    for (gi, &(iou, ai)) in best_anchor.iter().enumerate() {
        if iou > 0.0 && ai != usize::MAX {
            labels[ai] = AnchorLabel::Positive;
            targets[ai] = Some(encode_box(&gt_boxes[gi], &anchors[ai]));
        }
    }

    let positive = (0..n).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let negative = (0..n).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    Ok(AnchorAssignment {
        labels,
        targets,
        positive,
        negative,
    })
}
