//! Stage 1: anchor-based candidate discovery over 3-D patches.

mod anchors;
mod boxes;
mod model;
mod propose;

pub use anchors::{
    assign_anchor_labels, generate_anchors, AnchorAssignment, AnchorLabel, AnchorSet,
};
pub use boxes::{
    clip_box, decode_box, deltas_per_anchor, encode_box, iou_3d, nms_3d, BBox3D, Proposal,
};
pub use model::{
    rpn_forward, rpn_loss_and_grads, BackboneStage, NamedGrads, RpnCache, RpnLossReport, RpnModel,
};
pub use propose::{propose, ProposalConfig};

use crate::error::Result;
use crate::froc::Annotation;
use crate::io::Volume;

/// Ground-truth boxes for one patch: annotation spheres become axis-aligned
/// boxes (edge = diameter in voxels per axis) in patch-local voxel
/// coordinates. Annotations whose center falls outside the patch are
/// dropped.
pub fn gt_boxes_for_patch(
    volume: &Volume,
    annotations: &[Annotation],
    patch_offset: [usize; 3],
    patch_size: usize,
) -> Result<Vec<BBox3D>> {
    let mut boxes = Vec::new();
    for ann in annotations {
        let v = volume.world_to_voxel(ann.center_world)?;
        let local = [
            (v[0] - patch_offset[0] as f64) as f32,
            (v[1] - patch_offset[1] as f64) as f32,
            (v[2] - patch_offset[2] as f64) as f32,
        ];
        if local.iter().any(|&c| c < 0.0 || c >= patch_size as f32) {
            continue;
        }
        let size = [
            (ann.diameter_mm / volume.spacing[0]) as f32,
            (ann.diameter_mm / volume.spacing[1]) as f32,
            (ann.diameter_mm / volume.spacing[2]) as f32,
        ];
        boxes.push(BBox3D::new(local, size));
    }
    Ok(boxes)
}
