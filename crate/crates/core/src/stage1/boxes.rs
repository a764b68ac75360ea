//! Axis-aligned 3-D boxes: IoU, anchor encoding/decoding, and greedy NMS.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box, center (z, y, x) + size (d, h, w), voxel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox3D {
    pub center: [f32; 3],
    pub size: [f32; 3],
}

impl BBox3D {
    pub fn new(center: [f32; 3], size: [f32; 3]) -> Self {
        BBox3D { center, size }
    }

    pub fn cube(center: [f32; 3], edge: f32) -> Self {
        BBox3D {
            center,
            size: [edge, edge, edge],
        }
    }

    pub fn volume(&self) -> f32 {
        self.size[0] * self.size[1] * self.size[2]
    }

    #[inline]
    pub fn lo(&self, axis: usize) -> f32 {
        self.center[axis] - self.size[axis] / 2.0
    }

    #[inline]
    pub fn hi(&self, axis: usize) -> f32 {
        self.center[axis] + self.size[axis] / 2.0
    }
}

/// Intersection volume over union volume, in [0, 1].
pub fn iou_3d(a: &BBox3D, b: &BBox3D) -> f32 {
    let mut inter = 1.0f32;
    for axis in 0..3 {
        let lo = a.lo(axis).max(b.lo(axis));
        let hi = a.hi(axis).min(b.hi(axis));
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Encode a ground-truth box relative to an anchor:
/// (center delta / anchor size, ln(size ratio)).
pub fn encode_box(gt: &BBox3D, anchor: &BBox3D) -> [f32; 6] {
    [
        (gt.center[0] - anchor.center[0]) / anchor.size[0],
        (gt.center[1] - anchor.center[1]) / anchor.size[1],
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
    ]
}

/// Invert `encode_box`: center = anchor.center + delta * anchor.size,
/// size = anchor.size * exp(log delta).
pub fn decode_box(anchor: &BBox3D, delta: &[f32; 6]) -> BBox3D {
    BBox3D {
        center: [
            anchor.center[0] + delta[0] * anchor.size[0],
            anchor.center[1] + delta[1] * anchor.size[1],
            anchor.center[2] + delta[2] * anchor.size[2],
        ],
        size: [
            anchor.size[0] * delta[3].exp(),
            anchor.size[1] * delta[4].exp(),
            anchor.size[2] * delta[5].exp(),
        ],
    }
}

/// Clip a box to [0, bound] per axis, keeping a tiny positive size fully
/// inside the bounds even when the box lay entirely outside.
pub fn clip_box(b: &BBox3D, bounds: [f32; 3]) -> BBox3D {
    let mut center = [0.0f32; 3];
    let mut size = [0.0f32; 3];
    for axis in 0..3 {
        let lo = b.lo(axis).clamp(0.0, bounds[axis]);
        let hi = b.hi(axis).clamp(0.0, bounds[axis]);
        size[axis] = (hi - lo).max(1e-3);
        let half = size[axis] / 2.0;
        center[axis] = ((hi + lo) / 2.0).clamp(half, (bounds[axis] - half).max(half));
    }
    BBox3D { center, size }
}

/// Scored box prior to suppression.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub bbox: BBox3D,
    pub objectness: f32,
}

/// Greedy non-maximum suppression: walk proposals by descending objectness
/// (ties: lowest input index), keep a proposal unless it overlaps an already
/// kept one with IoU strictly above `iou_threshold`. Returns at most
/// `max_keep`, ordered by descending objectness.
pub fn nms_3d(proposals: &[Proposal], iou_threshold: f32, max_keep: usize) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .objectness
            .partial_cmp(&proposals[a].objectness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for &idx in &order {
        if kept.len() >= max_keep {
            break;
        }
        let p = &proposals[idx];
        let suppressed = kept
            .iter()
            .any(|k| iou_3d(&k.bbox, &p.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*p);
        }
    }
    kept
}

/// Flatten a deltas tensor (A*6, F, F, F) into per-anchor 6-vectors aligned
/// with the scale-major anchor enumeration.
pub fn deltas_per_anchor(deltas: &Tensor, num_scales: usize) -> Result<Vec<[f32; 6]>> {
    let s = deltas.shape();
    if s.len() != 4 || s[0] != num_scales * 6 {
        return Err(Error::ShapeMismatch(format!(
            "deltas shape {s:?} does not match {num_scales} anchor scales"
        )));
    }
    let cells = s[1] * s[2] * s[3];
    let data = deltas.data();
    let mut out = Vec::with_capacity(num_scales * cells);
    for a in 0..num_scales {
        for cell in 0..cells {
            let mut d = [0.0f32; 6];
            for (c, dc) in d.iter_mut().enumerate() {
                *dc = data[(a * 6 + c) * cells + cell];
            }
            out.push(d);
        }
    }
    Ok(out)
}
