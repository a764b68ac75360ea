//! End-to-end candidate discovery on a whole volume: tile into patches, run
//! the proposal network, decode and suppress boxes, map survivors to world
//! coordinates.

use crate::error::Result;
use crate::froc::Candidate;
use crate::io::{tile_patches, Volume};
use crate::stage1::anchors::generate_anchors;
use crate::stage1::boxes::{clip_box, decode_box, deltas_per_anchor, nms_3d, Proposal};
use crate::stage1::model::{rpn_forward, RpnModel};

/// Inference-time knobs for candidate discovery.
#[derive(Debug, Clone)]
pub struct ProposalConfig {
    /// Cubic patch edge fed to the network.
    pub patch_size: usize,
    /// Overlap between neighboring patches (voxels).
    pub overlap: usize,
    /// Keep this many top-scoring boxes per patch before NMS.
    pub pre_nms_top_k: usize,
    /// Per-patch and cross-patch suppression threshold.
    pub nms_iou: f32,
    /// Boxes surviving NMS per patch.
    pub per_patch_keep: usize,
    /// Candidate cap per scan after global NMS.
    pub max_candidates: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            patch_size: 96,
            overlap: 32,
            pre_nms_top_k: 512,
            nms_iou: 0.1,
            per_patch_keep: 100,
            max_candidates: 200,
        }
    }
}

/// Run stage 1 over the (already normalized) volume, returning candidates
/// sorted by descending objectness, world coordinates, clipped inside the
/// volume. Deterministic for identical (volume, model, config).
pub fn propose(
    volume: &Volume,
    scan_id: &str,
    model: &RpnModel,
    config: &ProposalConfig,
) -> Result<Vec<Candidate>> {
    let patch_dims = [config.patch_size; 3];
    let anchor_set = generate_anchors(patch_dims, model.feature_stride(), &model.anchor_scales)?;
    let bounds = [config.patch_size as f32; 3];

    let patches = tile_patches(volume, config.patch_size, config.overlap)?;
    let mut merged: Vec<Proposal> = Vec::new();
    for (patch, offset) in &patches {
        let (objectness, deltas) = rpn_forward(patch, model)?;
        let scores = objectness.data();
        let per_anchor = deltas_per_anchor(&deltas, model.num_scales())?;

        // Top-k by score, ties toward the lower anchor index.
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(config.pre_nms_top_k);

        let proposals: Vec<Proposal> = order
            .iter()
            .map(|&i| Proposal {
                bbox: clip_box(&decode_box(&anchor_set.anchors[i], &per_anchor[i]), bounds),
                objectness: scores[i],
            })
            .collect();
        let kept = nms_3d(&proposals, config.nms_iou, config.per_patch_keep);

        merged.extend(kept.into_iter().map(|mut p| {
            for axis in 0..3 {
                p.bbox.center[axis] += offset[axis] as f32;
            }
            p
        }));
    }

    let survivors = nms_3d(&merged, config.nms_iou, config.max_candidates);
    survivors
        .iter()
        .map(|p| {
            let voxel = [
                (p.bbox.center[0] as f64).clamp(0.0, (volume.dims[0] - 1) as f64),
                (p.bbox.center[1] as f64).clamp(0.0, (volume.dims[1] - 1) as f64),
                (p.bbox.center[2] as f64).clamp(0.0, (volume.dims[2] - 1) as f64),
            ];
            let world = volume.voxel_to_world(voxel)?;
            Ok(Candidate {
                scan_id: scan_id.to_string(),
                center_world: world,
                probability: p.objectness as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn flat_volume(dims: [usize; 3]) -> Volume {
        Volume::new(
            dims,
            [0.7; 3],
            [-10.0, -20.0, -30.0],
            vec![0.2; dims[0] * dims[1] * dims[2]],
        )
        .unwrap()
    }

    fn small_config() -> ProposalConfig {
        ProposalConfig {
            patch_size: 16,
            overlap: 4,
            pre_nms_top_k: 64,
            nms_iou: 0.1,
            per_patch_keep: 16,
            max_candidates: 20,
            ..ProposalConfig::default()
        }
    }

    #[test]
    fn zero_model_scores_half_and_caps_output() {
        let mut model = RpnModel::init(&[2, 2], 2, &[4.0], 1).unwrap();
        model.head_obj.weights = Tensor::zeros(model.head_obj.weights.shape()).unwrap();
        model.head_obj.bias = Tensor::zeros(model.head_obj.bias.shape()).unwrap();
        let volume = flat_volume([16, 16, 16]);
        let cands = propose(&volume, "s", &model, &small_config()).unwrap();
        assert!(!cands.is_empty());
        assert!(cands.len() <= 20);
        assert!(cands.iter().all(|c| (c.probability - 0.5).abs() < 1e-6));
    }

    #[test]
    fn candidates_inside_volume_bounds() {
        let model = RpnModel::init(&[2, 2], 2, &[4.0, 6.0], 2).unwrap();
        let volume = flat_volume([20, 16, 24]);
        let cands = propose(&volume, "s", &model, &small_config()).unwrap();
        for c in &cands {
            assert!(volume.contains_world(c.center_world), "{:?}", c.center_world);
        }
    }

    #[test]
    fn propose_is_deterministic() {
        let model = RpnModel::init(&[2, 2], 2, &[4.0], 3).unwrap();
        let volume = flat_volume([16, 16, 16]);
        let a = propose(&volume, "s", &model, &small_config()).unwrap();
        let b = propose(&volume, "s", &model, &small_config()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.center_world, y.center_world);
            assert_eq!(x.probability, y.probability);
        }
    }

    #[test]
    fn output_sorted_by_descending_probability() {
        let model = RpnModel::init(&[2, 2], 2, &[4.0, 6.0], 4).unwrap();
        let volume = flat_volume([24, 24, 24]);
        let cands = propose(&volume, "s", &model, &small_config()).unwrap();
        for w in cands.windows(2) {
            assert!(w[0].probability >= w[1].probability);
        }
    }
}
