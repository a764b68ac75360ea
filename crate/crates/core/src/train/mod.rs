//! Mini-batch SGD training for both stages, with deterministic shuffling,
//! gradient clipping and checkpoint persistence.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, load_fpr, load_rpn, save_checkpoint, save_fpr, save_rpn, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, STAGE_TAG_FPR, STAGE_TAG_RPN,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::froc::Annotation;
use crate::io::Volume;
use crate::loss::FocalLossConfig;
use crate::rng::{derive_seed, Rng};
use crate::stage1::{
    assign_anchor_labels, generate_anchors, gt_boxes_for_patch, propose, rpn_loss_and_grads,
    AnchorAssignment, NamedGrads, ProposalConfig, RpnModel,
};
use crate::stage2::{extract_candidate_patch, fpr_loss_and_grads, DualPathModel};
use crate::tensor::Tensor;

/// Gradient L2 norms above this are rescaled before each step; small-batch
/// volumetric training throws occasional spikes.
pub const GRAD_CLIP_NORM: f32 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 4,
            epochs: 10,
            seed: 42,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One momentum-SGD update: v <- mu * v - lr * g; p <- p + v.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    learning_rate: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch(format!(
            "sgd buffers disagree: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
    Ok(())
}

/// Anything trainable: models expose their parameters by stable name.
pub trait ParamModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

impl ParamModel for RpnModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        RpnModel::visit_params(self, f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        RpnModel::visit_params_mut(self, f)
    }
}

impl ParamModel for DualPathModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        DualPathModel::visit_params(self, f)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        DualPathModel::visit_params_mut(self, f)
    }
}

/// Momentum state per named parameter.
pub struct SgdOptimizer {
    learning_rate: f32,
    momentum: f32,
    velocities: BTreeMap<String, Vec<f32>>,
}

impl SgdOptimizer {
    pub fn new(config: &OptimizerConfig) -> Self {
        SgdOptimizer {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            velocities: BTreeMap::new(),
        }
    }

    /// Accumulate `grads / scale` into the models' grad buffers.
    pub fn accumulate(model: &mut dyn ParamModel, grads: &NamedGrads, scale: f32) -> Result<()> {
        let mut err = None;
        model.visit_params_mut(&mut |name, param| {
            if err.is_some() {
                return;
            }
            if let Some(g) = grads.get(name) {
                let scaled: Vec<f32> = g.data().iter().map(|&v| v * scale).collect();
                if let Err(e) = param.accumulate_grad(&scaled) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Clip the global gradient L2 norm to `max_norm`, then update every
    /// parameter from its grad buffer and zero the buffers.
    pub fn step(&mut self, model: &mut dyn ParamModel, max_norm: f32) -> Result<()> {
        let mut sq_norm = 0.0f64;
        model.visit_params(&mut |_, param| {
            if let Some(g) = param.grad() {
                sq_norm += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        });
        let norm = sq_norm.sqrt() as f32;
        let scale = if norm > max_norm { max_norm / norm } else { 1.0 };

        let lr = self.learning_rate;
        let mu = self.momentum;
        let velocities = &mut self.velocities;
        let mut err = None;
        model.visit_params_mut(&mut |name, param| {
            if err.is_some() {
                return;
            }
            let n = param.len();
            let Some(grad) = param.grad().map(|g| g.to_vec()) else {
                return;
            };
            let velocity = velocities
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let scaled: Vec<f32> = grad.iter().map(|&g| g * scale).collect();
            if let Err(e) = sgd_step(param.data_mut(), &scaled, velocity, lr, mu) {
                err = Some(e);
            } else {
                param.zero_grad();
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// One `epoch,batch,loss` record; the CLI serializes these as CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("epoch,batch,loss\n");
    for r in log {
        s.push_str(&format!("{},{},{:.6}\n", r.epoch, r.batch, r.loss));
    }
    s
}

/// Mean loss of the first and last epoch in the log.
pub fn epoch_mean_losses(log: &[LossRecord]) -> Option<(f32, f32)> {
    let first_epoch = log.first()?.epoch;
    let last_epoch = log.last()?.epoch;
    let mean = |e: usize| {
        let vals: Vec<f32> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
        vals.iter().sum::<f32>() / vals.len() as f32
    };
    Some((mean(first_epoch), mean(last_epoch)))
}

/// One proposal-network training sample: a patch and its anchor assignment.
pub struct RpnSample {
    pub patch: Tensor,
    pub assignment: AnchorAssignment,
}

/// Hyperparameters tying the proposal network to its training targets.
#[derive(Debug, Clone)]
pub struct RpnTrainSpec {
    pub patch_size: usize,
    pub overlap: usize,
    pub anchor_scales: Vec<f32>,
    pub pos_iou: f32,
    pub neg_iou: f32,
    pub neg_ratio: usize,
    pub smooth_l1_beta: f32,
}

impl Default for RpnTrainSpec {
    fn default() -> Self {
        RpnTrainSpec {
            patch_size: 96,
            overlap: 32,
            anchor_scales: vec![6.0, 10.0, 16.0],
            pos_iou: 0.3,
            neg_iou: 0.02,
            neg_ratio: 3,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Slice scans into patches and precompute anchor labels for each.
pub fn build_rpn_samples(
    scans: &[(Volume, Vec<Annotation>)],
    feature_stride: usize,
    spec: &RpnTrainSpec,
) -> Result<Vec<RpnSample>> {
    let anchor_set = generate_anchors([spec.patch_size; 3], feature_stride, &spec.anchor_scales)?;
    let mut samples = Vec::new();
    for (volume, annotations) in scans {
        for (patch, offset) in tile(volume, spec)? {
            let gt = gt_boxes_for_patch(volume, annotations, offset, spec.patch_size)?;
            let assignment = assign_anchor_labels(&anchor_set, &gt, spec.pos_iou, spec.neg_iou)?;
            samples.push(RpnSample { patch, assignment });
        }
    }
    Ok(samples)
}

fn tile(volume: &Volume, spec: &RpnTrainSpec) -> Result<Vec<(Tensor, [usize; 3])>> {
    crate::io::tile_patches(volume, spec.patch_size, spec.overlap)
}

/// Train the proposal network. Deterministic per (samples, config): epoch
/// shuffles derive from the seed, batches average gradients, global norm is
/// clipped at [`GRAD_CLIP_NORM`]. A non-finite loss aborts with a divergence
/// error naming the epoch and batch.
pub fn train_stage1(
    samples: &[RpnSample],
    model: &mut RpnModel,
    opt: &OptimizerConfig,
    focal: &FocalLossConfig,
    spec: &RpnTrainSpec,
) -> Result<Vec<LossRecord>> {
    opt.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("stage-1 training set is empty".into()));
    }
    let mut optimizer = SgdOptimizer::new(opt);
    let mut log = Vec::new();
    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        Rng::from_seed(derive_seed(opt.seed, epoch as u64)).shuffle(&mut order);
        for (batch_idx, batch) in order.chunks(opt.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f32;
            for &i in batch {
                let s = &samples[i];
                let (report, grads, _) = rpn_loss_and_grads(
                    model,
                    &s.patch,
                    &s.assignment,
                    focal,
                    spec.neg_ratio,
                    spec.smooth_l1_beta,
                )
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Diverged(format!(
                        "epoch {epoch} batch {batch_idx}: {msg}"
                    )),
                    other => other,
                })?;
                batch_loss += report.total * scale;
                SgdOptimizer::accumulate(model, &grads, scale)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {batch_idx}: loss {batch_loss}"
                )));
            }
            optimizer.step(model, GRAD_CLIP_NORM)?;
            log.push(LossRecord {
                epoch,
                batch: batch_idx,
                loss: batch_loss,
            });
        }
    }
    Ok(log)
}

/// Labeled crop set for the stage-2 classifier.
pub struct FprSample {
    pub crop: Tensor,
    pub is_nodule: bool,
}

/// Assemble the stage-2 training set the two-step protocol implies: run the
/// trained proposal network over the training scans, label each candidate by
/// the hit criterion (distance < annotation radius), crop hit candidates and
/// annotation centers as positives and non-hitting candidates as negatives.
/// Negatives keep the highest stage-1 scores (hard negatives) at
/// `neg_ratio`:1; the whole set is capped at `max_crops`.
pub fn build_fpr_training_set(
    scans: &[(Volume, Vec<Annotation>)],
    rpn: &RpnModel,
    proposal_config: &ProposalConfig,
    crop_size: usize,
    neg_ratio: usize,
    max_crops: usize,
) -> Result<Vec<FprSample>> {
    let mut positives: Vec<Tensor> = Vec::new();
    let mut negatives: Vec<(f64, Tensor)> = Vec::new();
    for (scan_idx, (volume, annotations)) in scans.iter().enumerate() {
        let scan_id = format!("train_{scan_idx:04}");
        let candidates = propose(volume, &scan_id, rpn, proposal_config)?;
        for c in &candidates {
            let hit = annotations.iter().any(|a| {
                let dz = c.center_world[0] - a.center_world[0];
                let dy = c.center_world[1] - a.center_world[1];
                let dx = c.center_world[2] - a.center_world[2];
                (dz * dz + dy * dy + dx * dx).sqrt() < a.diameter_mm / 2.0
            });
            let crop = extract_candidate_patch(volume, c.center_world, crop_size)?;
            if hit {
                positives.push(crop);
            } else {
                negatives.push((c.probability, crop));
            }
        }
        for a in annotations {
            positives.push(extract_candidate_patch(volume, a.center_world, crop_size)?);
        }
    }

    // Hard negatives first.
    negatives.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let n_pos = positives.len().min(max_crops / 2).max(1.min(positives.len()));
    positives.truncate(n_pos);
    let n_neg = (neg_ratio * n_pos.max(1))
        .min(negatives.len())
        .min(max_crops.saturating_sub(n_pos));
    let mut samples: Vec<FprSample> = Vec::with_capacity(n_pos + n_neg);
    for crop in positives {
        samples.push(FprSample {
            crop,
            is_nodule: true,
        });
    }
    for (_, crop) in negatives.into_iter().take(n_neg) {
        samples.push(FprSample {
            crop,
            is_nodule: false,
        });
    }
    Ok(samples)
}

/// Train the stage-2 classifier on labeled crops. Both classes must be
/// present. Contracts mirror [`train_stage1`].
pub fn train_stage2(
    samples: &[FprSample],
    model: &mut DualPathModel,
    opt: &OptimizerConfig,
    focal: &FocalLossConfig,
) -> Result<Vec<LossRecord>> {
    opt.validate()?;
    let n_pos = samples.iter().filter(|s| s.is_nodule).count();
    if n_pos == 0 || n_pos == samples.len() {
        return Err(Error::Config(format!(
            "stage-2 training needs both classes, got {n_pos} positives of {}",
            samples.len()
        )));
    }
    let mut optimizer = SgdOptimizer::new(opt);
    let mut log = Vec::new();
    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        Rng::from_seed(derive_seed(opt.seed, epoch as u64)).shuffle(&mut order);
        for (batch_idx, batch) in order.chunks(opt.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f32;
            for &i in batch {
                let s = &samples[i];
                let (loss, grads, _) = fpr_loss_and_grads(model, &s.crop, s.is_nodule, focal)
                    .map_err(|e| match e {
                        Error::Numeric(msg) => Error::Diverged(format!(
                            "epoch {epoch} batch {batch_idx}: {msg}"
                        )),
                        other => other,
                    })?;
                batch_loss += loss * scale;
                SgdOptimizer::accumulate(model, &grads, scale)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} batch {batch_idx}: loss {batch_loss}"
                )));
            }
            optimizer.step(model, GRAD_CLIP_NORM)?;
            log.push(LossRecord {
                epoch,
                batch: batch_idx,
                loss: batch_loss,
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut p = vec![1.0f32, -2.0];
        let mut v = vec![0.0f32; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_single_step_hand_value() {
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-7);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        // v2 = 0.9 * (-0.1) - 0.1 = -0.19; p = -0.1 - 0.19 = -0.29
        assert!((p[0] + 0.29).abs() < 1e-6, "p = {}", p[0]);
    }

    #[test]
    fn sgd_shape_mismatch_rejected() {
        let mut p = vec![0.0f32];
        let mut v = vec![0.0f32; 2];
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn optimizer_config_validation() {
        let mut c = OptimizerConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::default();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn epoch_mean_losses_picks_first_and_last() {
        let log = vec![
            LossRecord { epoch: 0, batch: 0, loss: 2.0 },
            LossRecord { epoch: 0, batch: 1, loss: 4.0 },
            LossRecord { epoch: 2, batch: 0, loss: 1.0 },
        ];
        let (first, last) = epoch_mean_losses(&log).unwrap();
        assert_eq!(first, 3.0);
        assert_eq!(last, 1.0);
    }

    #[test]
    fn loss_csv_format() {
        let log = vec![LossRecord { epoch: 0, batch: 3, loss: 0.5 }];
        assert_eq!(loss_log_csv(&log), "epoch,batch,loss\n0,3,0.500000\n");
    }
}
