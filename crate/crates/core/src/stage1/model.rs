//! Proposal network: a VGG-style volumetric backbone feeding a sliding
//! 3x3x3 head with two sibling 1x1x1 convolutions, one scoring objectness
//! per anchor and one regressing box deltas.
//!
//! The backbone is a sequence of [conv3 -> relu -> conv3 -> relu ->
//! maxpool(2,2)] stages; each stage halves the spatial resolution, so the
//! proposal head consumes the feature layer at stride 2^stages.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{
    conv3d_backward, conv3d_forward, maxpool3d_backward, maxpool3d_forward, relu_backward,
    relu_inplace, sigmoid, Conv3dParams,
};
use crate::loss::{focal_loss_batch, smooth_l1, FocalLossConfig};
use crate::rng::derive_seed;
use crate::stage1::anchors::AnchorAssignment;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BackboneStage {
    pub conv1: Conv3dParams,
    pub conv2: Conv3dParams,
}

/// Full stage-1 model: backbone stages plus the three head convolutions.
/// Anchor geometry travels with the weights so a checkpoint is
/// self-describing.
#[derive(Debug, Clone)]
pub struct RpnModel {
    pub stages: Vec<BackboneStage>,
    pub head_conv: Conv3dParams,
    pub head_obj: Conv3dParams,
    pub head_reg: Conv3dParams,
    pub anchor_scales: Vec<f32>,
}

impl RpnModel {
    /// `channels[i]` is the width of backbone stage i; the feature stride is
    /// 2^channels.len().
    pub fn init(
        channels: &[usize],
        head_channels: usize,
        anchor_scales: &[f32],
        seed: u64,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if anchor_scales.is_empty() {
            return Err(Error::Config("need at least one anchor scale".into()));
        }
        let mut stages = Vec::with_capacity(channels.len());
        let mut c_in = 1;
        let mut stream = 0u64;
        let mut next_seed = || {
            stream += 1;
            derive_seed(seed, stream)
        };
        for &c in channels {
            stages.push(BackboneStage {
                conv1: Conv3dParams::init(c, c_in, 3, 1, 1, next_seed())?,
                conv2: Conv3dParams::init(c, c, 3, 1, 1, next_seed())?,
            });
            c_in = c;
        }
        let a = anchor_scales.len();
        Ok(RpnModel {
            stages,
            head_conv: Conv3dParams::init(head_channels, c_in, 3, 1, 1, next_seed())?,
            head_obj: Conv3dParams::init(a, head_channels, 1, 1, 0, next_seed())?,
            head_reg: Conv3dParams::init(6 * a, head_channels, 1, 1, 0, next_seed())?,
            anchor_scales: anchor_scales.to_vec(),
        })
    }

    pub fn feature_stride(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn num_scales(&self) -> usize {
        self.anchor_scales.len()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            f(&format!("stage{i}.conv1.weights"), &s.conv1.weights);
            f(&format!("stage{i}.conv1.bias"), &s.conv1.bias);
            f(&format!("stage{i}.conv2.weights"), &s.conv2.weights);
            f(&format!("stage{i}.conv2.bias"), &s.conv2.bias);
        }
        f("head.conv.weights", &self.head_conv.weights);
        f("head.conv.bias", &self.head_conv.bias);
        f("head.obj.weights", &self.head_obj.weights);
        f("head.obj.bias", &self.head_obj.bias);
        f("head.reg.weights", &self.head_reg.weights);
        f("head.reg.bias", &self.head_reg.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("stage{i}.conv1.weights"), &mut s.conv1.weights);
            f(&format!("stage{i}.conv1.bias"), &mut s.conv1.bias);
            f(&format!("stage{i}.conv2.weights"), &mut s.conv2.weights);
            f(&format!("stage{i}.conv2.bias"), &mut s.conv2.bias);
        }
        f("head.conv.weights", &mut self.head_conv.weights);
        f("head.conv.bias", &mut self.head_conv.bias);
        f("head.obj.weights", &mut self.head_obj.weights);
        f("head.obj.bias", &mut self.head_obj.bias);
        f("head.reg.weights", &mut self.head_reg.weights);
        f("head.reg.bias", &mut self.head_reg.bias);
    }

    /// Named tensors for checkpointing, anchor geometry included.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut named = Vec::new();
        self.visit_params(&mut |name, t| named.push((name.to_string(), t.clone())));
        named.push((
            "meta.anchor_scales".to_string(),
            Tensor::from_vec(&[self.anchor_scales.len()], self.anchor_scales.clone())
                .expect("scales tensor"),
        ));
        named
    }

    pub fn from_named(named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            named
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
        };
        let scales_t = get("meta.anchor_scales")?;
        let anchor_scales = scales_t.data().to_vec();

        let mut stages = Vec::new();
        let mut i = 0;
        while named.contains_key(&format!("stage{i}.conv1.weights")) {
            stages.push(BackboneStage {
                conv1: Conv3dParams::new(
                    get(&format!("stage{i}.conv1.weights"))?,
                    get(&format!("stage{i}.conv1.bias"))?,
                    1,
                    1,
                )?,
                conv2: Conv3dParams::new(
                    get(&format!("stage{i}.conv2.weights"))?,
                    get(&format!("stage{i}.conv2.bias"))?,
                    1,
                    1,
                )?,
            });
            i += 1;
        }
        if stages.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no backbone stages".into()));
        }
        let head_conv = Conv3dParams::new(get("head.conv.weights")?, get("head.conv.bias")?, 1, 1)?;
        let head_obj = Conv3dParams::new(get("head.obj.weights")?, get("head.obj.bias")?, 1, 0)?;
        let head_reg = Conv3dParams::new(get("head.reg.weights")?, get("head.reg.bias")?, 1, 0)?;
        if head_obj.c_out() != anchor_scales.len() || head_reg.c_out() != 6 * anchor_scales.len() {
            return Err(Error::Checkpoint(format!(
                "head channels ({}, {}) inconsistent with {} anchor scales",
                head_obj.c_out(),
                head_reg.c_out(),
                anchor_scales.len()
            )));
        }
        Ok(RpnModel {
            stages,
            head_conv,
            head_obj,
            head_reg,
            anchor_scales,
        })
    }
}

struct StageCache {
    /// Post-relu output of conv1.
    act1: Tensor,
    /// Post-relu output of conv2 (pool input).
    act2: Tensor,
    pooled: Tensor,
    argmax: Vec<usize>,
}

/// Activations retained for the backward pass.
pub struct RpnCache {
    stage_caches: Vec<StageCache>,
    /// Post-relu head feature map.
    head_act: Tensor,
    pub obj_logits: Tensor,
    pub deltas: Tensor,
}

/// Per-parameter gradients keyed by the `visit_params` names.
pub type NamedGrads = BTreeMap<String, Tensor>;

impl RpnModel {
    pub fn forward_cached(&self, patch: &Tensor) -> Result<RpnCache> {
        let shape = patch.shape();
        if shape.len() != 5 || shape[0] != 1 || shape[1] != 1 {
            return Err(Error::InvalidShape(format!(
                "rpn patch must be (1, 1, D, H, W), got {shape:?}"
            )));
        }
        let stride = self.feature_stride();
        for &d in &shape[2..] {
            if d % stride != 0 {
                return Err(Error::InvalidShape(format!(
                    "patch dims {shape:?} must be divisible by feature stride {stride}"
                )));
            }
        }
        let mut stage_caches: Vec<StageCache> = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let mut act1 = {
                let input: &Tensor = if i == 0 {
                    patch
                } else {
                    &stage_caches[i - 1].pooled
                };
                conv3d_forward(input, &stage.conv1)?
            };
            relu_inplace(&mut act1);
            let mut act2 = conv3d_forward(&act1, &stage.conv2)?;
            relu_inplace(&mut act2);
            let (pooled, argmax) = maxpool3d_forward(&act2, 2, 2)?;
            stage_caches.push(StageCache {
                act1,
                act2,
                pooled,
                argmax,
            });
        }
        let head_in: &Tensor = match stage_caches.last() {
            Some(sc) => &sc.pooled,
            None => patch,
        };
        let mut head_act = conv3d_forward(head_in, &self.head_conv)?;
        relu_inplace(&mut head_act);
        let obj_logits = conv3d_forward(&head_act, &self.head_obj)?;
        let deltas = conv3d_forward(&head_act, &self.head_reg)?;
        Ok(RpnCache {
            stage_caches,
            head_act,
            obj_logits,
            deltas,
        })
    }

    /// Backpropagate gradients of the head outputs down to the patch.
    /// Returns per-parameter gradients and the gradient w.r.t. the patch.
    pub fn backward(
        &self,
        patch: &Tensor,
        cache: &RpnCache,
        d_obj_logits: &Tensor,
        d_deltas: &Tensor,
    ) -> Result<(NamedGrads, Tensor)> {
        let mut grads = NamedGrads::new();
        let g_obj = conv3d_backward(&cache.head_act, &self.head_obj, d_obj_logits)?;
        grads.insert("head.obj.weights".into(), g_obj.weights);
        grads.insert("head.obj.bias".into(), g_obj.bias);
        let g_reg = conv3d_backward(&cache.head_act, &self.head_reg, d_deltas)?;
        grads.insert("head.reg.weights".into(), g_reg.weights);
        grads.insert("head.reg.bias".into(), g_reg.bias);

        let mut d_head = g_obj.input;
        for (a, b) in d_head.data_mut().iter_mut().zip(g_reg.input.data()) {
            *a += b;
        }
        let d_head = relu_backward(&cache.head_act, &d_head)?;
        let last_in: &Tensor = match self.stages.len() {
            0 => patch,
            n => &cache.stage_caches[n - 1].pooled,
        };
        let g_hc = conv3d_backward(last_in, &self.head_conv, &d_head)?;
        grads.insert("head.conv.weights".into(), g_hc.weights);
        grads.insert("head.conv.bias".into(), g_hc.bias);

        let mut d_x = g_hc.input;
        for i in (0..self.stages.len()).rev() {
            let sc = &cache.stage_caches[i];
            let stage = &self.stages[i];
            let d_act2 = maxpool3d_backward(sc.act2.shape(), &sc.argmax, &d_x)?;
            let d_act2 = relu_backward(&sc.act2, &d_act2)?;
            let g2 = conv3d_backward(&sc.act1, &stage.conv2, &d_act2)?;
            grads.insert(format!("stage{i}.conv2.weights"), g2.weights);
            grads.insert(format!("stage{i}.conv2.bias"), g2.bias);
            let d_act1 = relu_backward(&sc.act1, &g2.input)?;
            let stage_in: &Tensor = if i == 0 {
                patch
            } else {
                &cache.stage_caches[i - 1].pooled
            };
            let g1 = conv3d_backward(stage_in, &stage.conv1, &d_act1)?;
            grads.insert(format!("stage{i}.conv1.weights"), g1.weights);
            grads.insert(format!("stage{i}.conv1.bias"), g1.bias);
            d_x = g1.input;
        }
        Ok((grads, d_x))
    }
}

/// Inference-facing forward: objectness (A, F, F, F) after sigmoid, and raw
/// deltas (6A, F, F, F), batch dimension squeezed away.
pub fn rpn_forward(patch: &Tensor, model: &RpnModel) -> Result<(Tensor, Tensor)> {
    let cache = model.forward_cached(patch)?;
    let os = cache.obj_logits.shape();
    let objectness = sigmoid(&cache.obj_logits).reshaped(&[os[1], os[2], os[3], os[4]])?;
    let ds = cache.deltas.shape();
    let deltas = cache.deltas.reshaped(&[ds[1], ds[2], ds[3], ds[4]])?;
    Ok((objectness, deltas))
}

/// Objectness + box-regression loss on one training patch, with gradients.
///
/// Classification: focal loss over all positive anchors plus hard negatives
/// sampled at `neg_ratio`:1 (highest-logit negatives first). Regression:
/// smooth-L1 between predicted and encoded target deltas on positive anchors.
/// The two terms are summed 1:1.
pub struct RpnLossReport {
    pub total: f32,
    pub classification: f32,
    pub regression: f32,
}

pub fn rpn_loss_and_grads(
    model: &RpnModel,
    patch: &Tensor,
    assignment: &AnchorAssignment,
    focal: &FocalLossConfig,
    neg_ratio: usize,
    smooth_l1_beta: f32,
) -> Result<(RpnLossReport, NamedGrads, Tensor)> {
    let cache = model.forward_cached(patch)?;
    let logits = cache.obj_logits.data();
    let n_anchors = logits.len();
    if assignment.labels.len() != n_anchors {
        return Err(Error::ShapeMismatch(format!(
            "assignment covers {} anchors, head emits {n_anchors}",
            assignment.labels.len()
        )));
    }

    // Hard-negative sampling: highest-logit negatives, neg_ratio per positive.
    let mut negatives = assignment.negative.clone();
    negatives.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let n_pos = assignment.positive.len();
    let n_neg = neg_ratio.saturating_mul(n_pos.max(1)).min(negatives.len());
    let sampled_neg = &negatives[..n_neg];

    // Focal loss over sampled anchors; g = p for positives, 1 - p otherwise.
    let mut g_values = Vec::with_capacity(n_pos + n_neg);
    let mut sampled: Vec<(usize, bool)> = Vec::with_capacity(n_pos + n_neg);
    for &i in &assignment.positive {
        let p = crate::layers::sigmoid_scalar(logits[i]);
        g_values.push(p);
        sampled.push((i, true));
    }
    for &i in sampled_neg {
        let p = crate::layers::sigmoid_scalar(logits[i]);
        g_values.push(1.0 - p);
        sampled.push((i, false));
    }
    let (loss_cls, dmean_dg) = focal_loss_batch(&g_values, focal);

    let mut d_obj = Tensor::zeros(cache.obj_logits.shape())?;
    {
        let d = d_obj.data_mut();
        for ((&(idx, is_pos), &dg), &g_as_p_or_q) in
            sampled.iter().zip(&dmean_dg).zip(&g_values)
        {
            // dg/dlogit = +/- p(1-p); express p(1-p) from g either way since
            // p(1-p) == g(1-g) when g is p or 1-p.
            let sig_grad = g_as_p_or_q * (1.0 - g_as_p_or_q);
            let sign = if is_pos { 1.0 } else { -1.0 };
            d[idx] += dg * sign * sig_grad;
        }
    }

    // Smooth-L1 on the deltas of positive anchors, mean over 6 * n_pos terms.
    let deltas = cache.deltas.data();
    let cells = n_anchors / model.num_scales();
    let mut d_deltas = Tensor::zeros(cache.deltas.shape())?;
    let mut loss_reg = 0.0f32;
    if n_pos > 0 {
        let inv = 1.0 / (6 * n_pos) as f32;
        let dd = d_deltas.data_mut();
        for &i in &assignment.positive {
            let target = assignment.targets[i].ok_or_else(|| {
                Error::Numeric("positive anchor without regression target".into())
            })?;
            let scale_idx = i / cells;
            let cell = i % cells;
            for (c, &t) in target.iter().enumerate() {
                let flat = (scale_idx * 6 + c) * cells + cell;
                let (l, dl) = smooth_l1(deltas[flat], t, smooth_l1_beta)?;
                loss_reg += l * inv;
                dd[flat] = dl * inv;
            }
        }
    }

    let total = loss_cls + loss_reg;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite rpn loss {total}")));
    }
    let (grads, d_patch) = model.backward(patch, &cache, &d_obj, &d_deltas)?;
    Ok((
        RpnLossReport {
            total,
            classification: loss_cls,
            regression: loss_reg,
        },
        grads,
        d_patch,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage1::anchors::{assign_anchor_labels, generate_anchors};
    use crate::stage1::boxes::BBox3D;
    use crate::tensor::{gradient_check, CheckedOp};

    fn tiny_model(seed: u64) -> RpnModel {
        RpnModel::init(&[2, 4], 4, &[4.0, 6.0], seed).unwrap()
    }

    #[test]
    fn zero_weight_head_scores_half() {
        let mut model = tiny_model(1);
        model.head_obj.weights = Tensor::zeros(model.head_obj.weights.shape()).unwrap();
        model.head_obj.bias = Tensor::zeros(model.head_obj.bias.shape()).unwrap();
        let patch = Tensor::rand(&[1, 1, 16, 16, 16], 2, 1.0).unwrap();
        let (obj, _) = rpn_forward(&patch, &model).unwrap();
        assert!(obj.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn output_shapes_follow_stride_and_scales() {
        let model = RpnModel::init(&[2, 3], 4, &[4.0, 6.0, 8.0], 3).unwrap();
        assert_eq!(model.feature_stride(), 4);
        let patch = Tensor::zeros(&[1, 1, 32, 32, 32]).unwrap();
        let (obj, deltas) = rpn_forward(&patch, &model).unwrap();
        assert_eq!(obj.shape(), &[3, 8, 8, 8]);
        assert_eq!(deltas.shape(), &[18, 8, 8, 8]);
    }

    #[test]
    fn wrong_patch_shape_rejected() {
        let model = tiny_model(4);
        let patch = Tensor::zeros(&[1, 1, 15, 16, 16]).unwrap();
        assert!(model.forward_cached(&patch).is_err());
        let patch = Tensor::zeros(&[1, 2, 16, 16, 16]).unwrap();
        assert!(model.forward_cached(&patch).is_err());
    }

    #[test]
    fn named_round_trip_preserves_forward() {
        let model = tiny_model(5);
        let named: BTreeMap<String, Tensor> = model.to_named().into_iter().collect();
        let rebuilt = RpnModel::from_named(&named).unwrap();
        let patch = Tensor::rand(&[1, 1, 16, 16, 16], 6, 1.0).unwrap();
        let (a, da) = rpn_forward(&patch, &model).unwrap();
        let (b, db) = rpn_forward(&patch, &rebuilt).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(da.data(), db.data());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        // Focal-loss-on-objectness + smooth-L1 through the whole model on a
        // 16^3 toy patch, gradient w.r.t. the patch itself.
        let model = tiny_model(7);
        let anchors = generate_anchors([16, 16, 16], 4, &model.anchor_scales).unwrap();
        let gt = vec![BBox3D::cube([8.0, 8.0, 8.0], 5.0)];
        let assignment = assign_anchor_labels(&anchors, &gt, 0.3, 0.02).unwrap();
        let focal = FocalLossConfig::default();

        let m1 = model.clone();
        let a1 = assignment.clone();
        let f1 = focal;
        let m2 = model.clone();
        let a2 = assignment.clone();
        let op = CheckedOp {
            name: "rpn/loss-wrt-patch".into(),
            forward: Box::new(move |patch| {
                let (report, _, _) = rpn_loss_and_grads(&m1, patch, &a1, &f1, 3, 1.0)?;
                Tensor::from_vec(&[1], vec![report.total])
            }),
            backward: Box::new(move |patch| {
                let (_, _, d_patch) = rpn_loss_and_grads(&m2, patch, &a2, &focal, 3, 1.0)?;
                Ok(d_patch)
            }),
            input: Tensor::rand(&[1, 1, 16, 16, 16], 8, 0.5).unwrap(),
        };
        let err = gradient_check(&op, 1e-2).unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(9);
        let patch = Tensor::rand(&[1, 1, 16, 16, 16], 10, 1.0).unwrap();
        let (a, _) = rpn_forward(&patch, &model).unwrap();
        let (b, _) = rpn_forward(&patch, &model).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
