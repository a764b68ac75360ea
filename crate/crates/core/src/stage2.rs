//! Stage 2: dual-path residual classifier over candidate crops.
//!
//! Path A stacks residual blocks (shortcut connections), path B is a plain
//! conv stack of matching widths; the two feature maps are concatenated,
//! globally average-pooled and fed to a single-logit linear head. Candidates
//! scoring below the decision threshold are discarded.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::froc::Candidate;
use crate::io::Volume;
use crate::layers::{
    conv3d_backward, conv3d_forward, linear_backward, linear_forward, maxpool3d_backward,
    maxpool3d_forward, relu_backward, relu_inplace, residual_block_backward,
    residual_block_forward_cached, sigmoid_scalar, Conv3dParams, ResidualBlockParams,
    ResidualCache,
};
use crate::loss::{focal_loss, FocalLossConfig};
use crate::rng::derive_seed;
use crate::stage1::NamedGrads;
use crate::tensor::Tensor;

/// Dual-path classifier parameters. Both paths map a (1, 1, S, S, S) crop to
/// equal-size feature maps (c2 channels at S/4 resolution).
#[derive(Debug, Clone)]
pub struct DualPathModel {
    // Path A: residual stack.
    pub a_stem: Conv3dParams,
    pub a_res1: ResidualBlockParams,
    pub a_lift: Conv3dParams,
    pub a_res2: ResidualBlockParams,
    // Path B: plain stack.
    pub b_conv1: Conv3dParams,
    pub b_conv2: Conv3dParams,
    pub b_conv3: Conv3dParams,
    pub b_conv4: Conv3dParams,
    // Fusion: concat -> global average pool -> linear -> logit.
    pub fc_weights: Tensor,
    pub fc_bias: Tensor,
    pub crop_size: usize,
}

impl DualPathModel {
    pub fn init(crop_size: usize, c1: usize, c2: usize, seed: u64) -> Result<Self> {
        if crop_size % 4 != 0 || crop_size < 8 {
            return Err(Error::Config(format!(
                "crop size must be a multiple of 4 and >= 8, got {crop_size}"
            )));
        }
        let mut stream = 0u64;
        let mut next = || {
            stream += 1;
            derive_seed(seed, stream)
        };
        let fused = 2 * c2;
        Ok(DualPathModel {
            a_stem: Conv3dParams::init(c1, 1, 3, 1, 1, next())?,
            a_res1: ResidualBlockParams::init(c1, 3, next(), next())?,
            a_lift: Conv3dParams::init(c2, c1, 3, 1, 1, next())?,
            a_res2: ResidualBlockParams::init(c2, 3, next(), next())?,
            b_conv1: Conv3dParams::init(c1, 1, 3, 1, 1, next())?,
            b_conv2: Conv3dParams::init(c1, c1, 3, 1, 1, next())?,
            b_conv3: Conv3dParams::init(c2, c1, 3, 1, 1, next())?,
            b_conv4: Conv3dParams::init(c2, c2, 3, 1, 1, next())?,
            fc_weights: Tensor::rand(&[fused, 1], next(), 1.0 / (fused as f32).sqrt())?,
            fc_bias: Tensor::zeros(&[1])?,
            crop_size,
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("a.stem.weights", &self.a_stem.weights);
        f("a.stem.bias", &self.a_stem.bias);
        f("a.res1.conv1.weights", &self.a_res1.conv1.weights);
        f("a.res1.conv1.bias", &self.a_res1.conv1.bias);
        f("a.res1.conv2.weights", &self.a_res1.conv2.weights);
        f("a.res1.conv2.bias", &self.a_res1.conv2.bias);
        f("a.lift.weights", &self.a_lift.weights);
        f("a.lift.bias", &self.a_lift.bias);
        f("a.res2.conv1.weights", &self.a_res2.conv1.weights);
        f("a.res2.conv1.bias", &self.a_res2.conv1.bias);
        f("a.res2.conv2.weights", &self.a_res2.conv2.weights);
        f("a.res2.conv2.bias", &self.a_res2.conv2.bias);
        f("b.conv1.weights", &self.b_conv1.weights);
        f("b.conv1.bias", &self.b_conv1.bias);
        f("b.conv2.weights", &self.b_conv2.weights);
        f("b.conv2.bias", &self.b_conv2.bias);
        f("b.conv3.weights", &self.b_conv3.weights);
        f("b.conv3.bias", &self.b_conv3.bias);
        f("b.conv4.weights", &self.b_conv4.weights);
        f("b.conv4.bias", &self.b_conv4.bias);
        f("fc.weights", &self.fc_weights);
        f("fc.bias", &self.fc_bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("a.stem.weights", &mut self.a_stem.weights);
        f("a.stem.bias", &mut self.a_stem.bias);
        f("a.res1.conv1.weights", &mut self.a_res1.conv1.weights);
        f("a.res1.conv1.bias", &mut self.a_res1.conv1.bias);
        f("a.res1.conv2.weights", &mut self.a_res1.conv2.weights);
        f("a.res1.conv2.bias", &mut self.a_res1.conv2.bias);
        f("a.lift.weights", &mut self.a_lift.weights);
        f("a.lift.bias", &mut self.a_lift.bias);
        f("a.res2.conv1.weights", &mut self.a_res2.conv1.weights);
        f("a.res2.conv1.bias", &mut self.a_res2.conv1.bias);
        f("a.res2.conv2.weights", &mut self.a_res2.conv2.weights);
        f("a.res2.conv2.bias", &mut self.a_res2.conv2.bias);
        f("b.conv1.weights", &mut self.b_conv1.weights);
        f("b.conv1.bias", &mut self.b_conv1.bias);
        f("b.conv2.weights", &mut self.b_conv2.weights);
        f("b.conv2.bias", &mut self.b_conv2.bias);
        f("b.conv3.weights", &mut self.b_conv3.weights);
        f("b.conv3.bias", &mut self.b_conv3.bias);
        f("b.conv4.weights", &mut self.b_conv4.weights);
        f("b.conv4.bias", &mut self.b_conv4.bias);
        f("fc.weights", &mut self.fc_weights);
        f("fc.bias", &mut self.fc_bias);
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut named = Vec::new();
        self.visit_params(&mut |name, t| named.push((name.to_string(), t.clone())));
        named.push((
            "meta.crop_size".to_string(),
            Tensor::from_vec(&[1], vec![self.crop_size as f32]).expect("meta tensor"),
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
        let conv = |w: &str, b: &str, pad: usize| -> Result<Conv3dParams> {
            Conv3dParams::new(get(w)?, get(b)?, 1, pad)
        };
        let crop_size = get("meta.crop_size")?.data()[0] as usize;
        let model = DualPathModel {
            a_stem: conv("a.stem.weights", "a.stem.bias", 1)?,
            a_res1: ResidualBlockParams::new(
                conv("a.res1.conv1.weights", "a.res1.conv1.bias", 1)?,
                conv("a.res1.conv2.weights", "a.res1.conv2.bias", 1)?,
            )?,
            a_lift: conv("a.lift.weights", "a.lift.bias", 1)?,
            a_res2: ResidualBlockParams::new(
                conv("a.res2.conv1.weights", "a.res2.conv1.bias", 1)?,
                conv("a.res2.conv2.weights", "a.res2.conv2.bias", 1)?,
            )?,
            b_conv1: conv("b.conv1.weights", "b.conv1.bias", 1)?,
            b_conv2: conv("b.conv2.weights", "b.conv2.bias", 1)?,
            b_conv3: conv("b.conv3.weights", "b.conv3.bias", 1)?,
            b_conv4: conv("b.conv4.weights", "b.conv4.bias", 1)?,
            fc_weights: get("fc.weights")?,
            fc_bias: get("fc.bias")?,
            crop_size,
        };
        if crop_size % 4 != 0 || crop_size < 8 {
            return Err(Error::Checkpoint(format!(
                "checkpoint crop size {crop_size} is invalid"
            )));
        }
        Ok(model)
    }
}

struct PathACache {
    stem: Tensor,
    res1_out: Tensor,
    res1: ResidualCache,
    pool1: Tensor,
    pool1_argmax: Vec<usize>,
    lift: Tensor,
    res2_out: Tensor,
    res2: ResidualCache,
    out: Tensor,
    out_argmax: Vec<usize>,
}

struct PathBCache {
    act1: Tensor,
    act2: Tensor,
    pool1: Tensor,
    pool1_argmax: Vec<usize>,
    act3: Tensor,
    act4: Tensor,
    out: Tensor,
    out_argmax: Vec<usize>,
}

pub struct FprCache {
    a: PathACache,
    b: PathBCache,
    /// Per-channel global average of the concatenated features, shape (1, 2*c2).
    fused: Tensor,
    pub logit: f32,
}

impl DualPathModel {
    fn check_patch(&self, patch: &Tensor) -> Result<()> {
        let s = self.crop_size;
        if patch.shape() != [1, 1, s, s, s] {
            return Err(Error::InvalidShape(format!(
                "stage-2 patch must be (1, 1, {s}, {s}, {s}), got {:?}",
                patch.shape()
            )));
        }
        Ok(())
    }

    pub fn forward_cached(&self, patch: &Tensor) -> Result<FprCache> {
        self.check_patch(patch)?;
        // Path A
        let mut stem = conv3d_forward(patch, &self.a_stem)?;
        relu_inplace(&mut stem);
        let (res1_out, res1) = residual_block_forward_cached(&stem, &self.a_res1)?;
        let (pool1, pool1_argmax) = maxpool3d_forward(&res1_out, 2, 2)?;
        let mut lift = conv3d_forward(&pool1, &self.a_lift)?;
        relu_inplace(&mut lift);
        let (res2_out, res2) = residual_block_forward_cached(&lift, &self.a_res2)?;
        let (a_out, out_argmax) = maxpool3d_forward(&res2_out, 2, 2)?;
        let a = PathACache {
            stem,
            res1_out,
            res1,
            pool1,
            pool1_argmax,
            lift,
            res2_out,
            res2,
            out: a_out,
            out_argmax,
        };

        // Path B
        let mut act1 = conv3d_forward(patch, &self.b_conv1)?;
        relu_inplace(&mut act1);
        let mut act2 = conv3d_forward(&act1, &self.b_conv2)?;
        relu_inplace(&mut act2);
        let (pool1_b, pool1_argmax_b) = maxpool3d_forward(&act2, 2, 2)?;
        let mut act3 = conv3d_forward(&pool1_b, &self.b_conv3)?;
        relu_inplace(&mut act3);
        let mut act4 = conv3d_forward(&act3, &self.b_conv4)?;
        relu_inplace(&mut act4);
        let (b_out, out_argmax_b) = maxpool3d_forward(&act4, 2, 2)?;
        let b = PathBCache {
            act1,
            act2,
            pool1: pool1_b,
            pool1_argmax: pool1_argmax_b,
            act3,
            act4,
            out: b_out,
            out_argmax: out_argmax_b,
        };

        // Fusion: global average pool per channel over both paths' maps.
        let ca = a.out.shape()[1];
        let cb = b.out.shape()[1];
        let cells = a.out.len() / ca;
        debug_assert_eq!(cells, b.out.len() / cb);
        let mut fused = Tensor::zeros(&[1, ca + cb])?;
        for (c, slot) in fused.data_mut().iter_mut().enumerate().take(ca) {
            let s: f32 = a.out.data()[c * cells..][..cells].iter().sum();
            *slot = s / cells as f32;
        }
        for c in 0..cb {
            let s: f32 = b.out.data()[c * cells..][..cells].iter().sum();
            fused.data_mut()[ca + c] = s / cells as f32;
        }
        let logit_t = linear_forward(&fused, &self.fc_weights, &self.fc_bias)?;
        Ok(FprCache {
            a,
            b,
            fused,
            logit: logit_t.data()[0],
        })
    }

    /// Backward from dL/dlogit. Returns named parameter grads and dL/dpatch.
    pub fn backward(
        &self,
        patch: &Tensor,
        cache: &FprCache,
        d_logit: f32,
    ) -> Result<(NamedGrads, Tensor)> {
        let mut grads = NamedGrads::new();
        let d_logit_t = Tensor::from_vec(&[1, 1], vec![d_logit])?;
        let fc = linear_backward(&cache.fused, &self.fc_weights, &d_logit_t)?;
        grads.insert("fc.weights".into(), fc.weights);
        grads.insert("fc.bias".into(), fc.bias);

        let ca = cache.a.out.shape()[1];
        let cb = cache.b.out.shape()[1];
        let cells = cache.a.out.len() / ca;
        let inv = 1.0 / cells as f32;

        // Spread the pooled gradient uniformly back over each channel map.
        let mut d_a_out = Tensor::zeros(cache.a.out.shape())?;
        for c in 0..ca {
            let g = fc.input.data()[c] * inv;
            d_a_out.data_mut()[c * cells..][..cells]
                .iter_mut()
                .for_each(|v| *v = g);
        }
        let mut d_b_out = Tensor::zeros(cache.b.out.shape())?;
        for c in 0..cb {
            let g = fc.input.data()[ca + c] * inv;
            d_b_out.data_mut()[c * cells..][..cells]
                .iter_mut()
                .for_each(|v| *v = g);
        }

        // Path A backward.
        let d_res2_out =
            maxpool3d_backward(cache.a.res2_out.shape(), &cache.a.out_argmax, &d_a_out)?;
        let ga2 = residual_block_backward(&cache.a.lift, &self.a_res2, &cache.a.res2, &d_res2_out)?;
        grads.insert("a.res2.conv1.weights".into(), ga2.conv1_weights);
        grads.insert("a.res2.conv1.bias".into(), ga2.conv1_bias);
        grads.insert("a.res2.conv2.weights".into(), ga2.conv2_weights);
        grads.insert("a.res2.conv2.bias".into(), ga2.conv2_bias);
        let d_lift = relu_backward(&cache.a.lift, &ga2.input)?;
        let g_lift = conv3d_backward(&cache.a.pool1, &self.a_lift, &d_lift)?;
        grads.insert("a.lift.weights".into(), g_lift.weights);
        grads.insert("a.lift.bias".into(), g_lift.bias);
        let d_res1_out =
            maxpool3d_backward(cache.a.res1_out.shape(), &cache.a.pool1_argmax, &g_lift.input)?;
        let ga1 = residual_block_backward(&cache.a.stem, &self.a_res1, &cache.a.res1, &d_res1_out)?;
        grads.insert("a.res1.conv1.weights".into(), ga1.conv1_weights);
        grads.insert("a.res1.conv1.bias".into(), ga1.conv1_bias);
        grads.insert("a.res1.conv2.weights".into(), ga1.conv2_weights);
        grads.insert("a.res1.conv2.bias".into(), ga1.conv2_bias);
        let d_stem = relu_backward(&cache.a.stem, &ga1.input)?;
        let g_stem = conv3d_backward(patch, &self.a_stem, &d_stem)?;
        grads.insert("a.stem.weights".into(), g_stem.weights);
        grads.insert("a.stem.bias".into(), g_stem.bias);

        // Path B backward.
        let d_act4 = maxpool3d_backward(cache.b.act4.shape(), &cache.b.out_argmax, &d_b_out)?;
        let d_act4 = relu_backward(&cache.b.act4, &d_act4)?;
        let g4 = conv3d_backward(&cache.b.act3, &self.b_conv4, &d_act4)?;
        grads.insert("b.conv4.weights".into(), g4.weights);
        grads.insert("b.conv4.bias".into(), g4.bias);
        let d_act3 = relu_backward(&cache.b.act3, &g4.input)?;
        let g3 = conv3d_backward(&cache.b.pool1, &self.b_conv3, &d_act3)?;
        grads.insert("b.conv3.weights".into(), g3.weights);
        grads.insert("b.conv3.bias".into(), g3.bias);
        let d_act2 = maxpool3d_backward(cache.b.act2.shape(), &cache.b.pool1_argmax, &g3.input)?;
        let d_act2 = relu_backward(&cache.b.act2, &d_act2)?;
        let g2 = conv3d_backward(&cache.b.act1, &self.b_conv2, &d_act2)?;
        grads.insert("b.conv2.weights".into(), g2.weights);
        grads.insert("b.conv2.bias".into(), g2.bias);
        let d_act1 = relu_backward(&cache.b.act1, &g2.input)?;
        let g1 = conv3d_backward(patch, &self.b_conv1, &d_act1)?;
        grads.insert("b.conv1.weights".into(), g1.weights);
        grads.insert("b.conv1.bias".into(), g1.bias);

        let mut d_patch = g_stem.input;
        for (a, b) in d_patch.data_mut().iter_mut().zip(g1.input.data()) {
            *a += b;
        }
        Ok((grads, d_patch))
    }
}

/// Classifier probability for one crop.
pub fn fpr_forward(patch: &Tensor, model: &DualPathModel) -> Result<f32> {
    let cache = model.forward_cached(patch)?;
    Ok(sigmoid_scalar(cache.logit))
}

/// Focal loss of one labeled crop, with parameter gradients and dL/dpatch.
pub fn fpr_loss_and_grads(
    model: &DualPathModel,
    patch: &Tensor,
    is_nodule: bool,
    focal: &FocalLossConfig,
) -> Result<(f32, NamedGrads, Tensor)> {
    let cache = model.forward_cached(patch)?;
    let p = sigmoid_scalar(cache.logit);
    let g = if is_nodule { p } else { 1.0 - p };
    let (loss, dloss_dg) = focal_loss(g, focal);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite stage-2 loss {loss}")));
    }
    let sign = if is_nodule { 1.0 } else { -1.0 };
    let d_logit = dloss_dg * sign * g * (1.0 - g);
    let (grads, d_patch) = model.backward(patch, &cache, d_logit)?;
    Ok((loss, grads, d_patch))
}

/// Crop a (1, 1, S, S, S) patch centered at the voxel nearest to
/// `center_world`; voxels outside the volume take the normalized background
/// fill value 0.
pub fn extract_candidate_patch(
    volume: &Volume,
    center_world: [f64; 3],
    crop_size: usize,
) -> Result<Tensor> {
    if !volume.contains_world(center_world) {
        return Err(Error::Input(format!(
            "crop center {center_world:?} lies outside the volume"
        )));
    }
    let v = volume.world_to_voxel(center_world)?;
    let half = crop_size as i64 / 2;
    let start = [
        v[0].round() as i64 - half,
        v[1].round() as i64 - half,
        v[2].round() as i64 - half,
    ];
    let mut t = Tensor::zeros(&[1, 1, crop_size, crop_size, crop_size])?;
    let [d, h, w] = volume.dims;
    let data = t.data_mut();
    for pz in 0..crop_size {
        let z = start[0] + pz as i64;
        if z < 0 || z >= d as i64 {
            continue;
        }
        for py in 0..crop_size {
            let y = start[1] + py as i64;
            if y < 0 || y >= h as i64 {
                continue;
            }
            for px in 0..crop_size {
                let x = start[2] + px as i64;
                if x < 0 || x >= w as i64 {
                    continue;
                }
                data[(pz * crop_size + py) * crop_size + px] =
                    volume.data[((z as usize) * h + y as usize) * w + x as usize];
            }
        }
    }
    Ok(t)
}

/// Rescore candidates with the classifier and drop those below `threshold`.
/// Survivors carry the stage-2 probability, ordered by descending
/// probability (ties keep input order).
pub fn reject_false_positives(
    candidates: &[Candidate],
    volume: &Volume,
    model: &DualPathModel,
    threshold: f64,
) -> Result<Vec<Candidate>> {
    let mut kept: Vec<Candidate> = Vec::new();
    for c in candidates {
        let patch = extract_candidate_patch(volume, c.center_world, model.crop_size)?;
        let p = fpr_forward(&patch, model)? as f64;
        if p >= threshold {
            kept.push(Candidate {
                scan_id: c.scan_id.clone(),
                center_world: c.center_world,
                probability: p,
            });
        }
    }
    kept.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, CheckedOp};

    fn small_model(seed: u64) -> DualPathModel {
        DualPathModel::init(16, 2, 4, seed).unwrap()
    }

    fn uniform_volume(dims: [usize; 3], value: f32) -> Volume {
        Volume::new(
            dims,
            [1.0; 3],
            [0.0; 3],
            vec![value; dims[0] * dims[1] * dims[2]],
        )
        .unwrap()
    }

    #[test]
    fn zero_classifier_scores_half() {
        let mut model = small_model(1);
        model.fc_weights = Tensor::zeros(model.fc_weights.shape()).unwrap();
        model.fc_bias = Tensor::zeros(&[1]).unwrap();
        let patch = Tensor::rand(&[1, 1, 16, 16, 16], 2, 1.0).unwrap();
        assert_eq!(fpr_forward(&patch, &model).unwrap(), 0.5);
    }

    #[test]
    fn probability_in_unit_interval() {
        let model = small_model(3);
        for seed in 0..5 {
            let patch = Tensor::rand(&[1, 1, 16, 16, 16], seed, 2.0).unwrap();
            let p = fpr_forward(&patch, &model).unwrap();
            assert!(p > 0.0 && p < 1.0, "p = {p}");
        }
    }

    #[test]
    fn malformed_patch_rejected() {
        let model = small_model(4);
        let patch = Tensor::zeros(&[1, 1, 8, 8, 8]).unwrap();
        assert!(fpr_forward(&patch, &model).is_err());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let model = small_model(5);
        let focal = FocalLossConfig::default();
        let m1 = model.clone();
        let m2 = model.clone();
        let f = focal;
        let op = CheckedOp {
            name: "fpr/loss-wrt-patch".into(),
            forward: Box::new(move |patch| {
                let (loss, _, _) = fpr_loss_and_grads(&m1, patch, true, &f)?;
                Tensor::from_vec(&[1], vec![loss])
            }),
            backward: Box::new(move |patch| {
                let (_, _, d_patch) = fpr_loss_and_grads(&m2, patch, true, &focal)?;
                Ok(d_patch)
            }),
            input: Tensor::rand(&[1, 1, 16, 16, 16], 6, 0.5).unwrap(),
        };
        let err = gradient_check(&op, 1e-2).unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn crop_at_center_of_constant_volume() {
        let vol = uniform_volume([48, 48, 48], 0.7);
        let center = vol.voxel_to_world([23.5, 23.5, 23.5]).unwrap();
        let patch = extract_candidate_patch(&vol, center, 32).unwrap();
        assert!(patch.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn crop_at_corner_mostly_fill() {
        let vol = uniform_volume([48, 48, 48], 1.0);
        let corner = vol.voxel_to_world([0.0, 0.0, 0.0]).unwrap();
        let patch = extract_candidate_patch(&vol, corner, 32).unwrap();
        let filled = patch.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(filled, 16 * 16 * 16);
    }

    #[test]
    fn crop_outside_volume_rejected() {
        let vol = uniform_volume([16, 16, 16], 0.0);
        assert!(extract_candidate_patch(&vol, [1000.0, 0.0, 0.0], 32).is_err());
    }

    #[test]
    fn crop_center_agrees_with_world_to_voxel() {
        let vol = Volume::new(
            [32, 32, 32],
            [2.0, 0.5, 0.5],
            [-10.0, 5.0, -3.0],
            (0..32 * 32 * 32).map(|i| i as f32).collect(),
        )
        .unwrap();
        let voxel = [10.0, 20.0, 8.0];
        let world = vol.voxel_to_world(voxel).unwrap();
        let patch = extract_candidate_patch(&vol, world, 8).unwrap();
        // The crop's center voxel (4,4,4 in an 8-cube starting at c-4) must
        // equal the volume voxel nearest the world point.
        let expect = vol.at(10, 20, 8);
        assert_eq!(patch.data()[(4 * 8 + 4) * 8 + 4], expect);
    }

    fn mk_candidates(vol: &Volume, n: usize) -> Vec<Candidate> {
        (0..n)
            .map(|i| Candidate {
                scan_id: "s".into(),
                center_world: vol
                    .voxel_to_world([8.0 + i as f64, 8.0, 8.0])
                    .unwrap(),
                probability: 0.5,
            })
            .collect()
    }

    #[test]
    fn threshold_zero_keeps_all_threshold_one_drops_all() {
        let vol = uniform_volume([32, 32, 32], 0.3);
        let model = small_model(7);
        let cands = mk_candidates(&vol, 4);
        let all = reject_false_positives(&cands, &vol, &model, 0.0).unwrap();
        assert_eq!(all.len(), 4);
        // Rescored probabilities are attached.
        for c in &all {
            assert!(c.probability > 0.0 && c.probability < 1.0);
        }
        let none = reject_false_positives(&cands, &vol, &model, 1.0).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn filter_is_monotone_and_idempotent() {
        let vol = uniform_volume([32, 32, 32], 0.4);
        let model = small_model(8);
        let cands = mk_candidates(&vol, 6);
        let lo = reject_false_positives(&cands, &vol, &model, 0.3).unwrap();
        let hi = reject_false_positives(&cands, &vol, &model, 0.7).unwrap();
        assert!(hi.len() <= lo.len());
        // Idempotent: re-filtering the survivors at the same threshold keeps them.
        let again = reject_false_positives(&lo, &vol, &model, 0.3).unwrap();
        assert_eq!(again.len(), lo.len());
        for (x, y) in lo.iter().zip(&again) {
            assert_eq!(x.probability, y.probability);
        }
    }
}
