//! Training objectives and the ranking metric: focal loss, smooth-L1 box
//! regression loss, and average precision.

use crate::error::{Error, Result};

/// Focal loss weights: `loss = -eta * (1 - g)^zeta * ln(g)` where `g` is the
/// probability assigned to the true class. `zeta` focuses training on hard
/// samples; `eta` is a global weight.
#[derive(Debug, Clone, Copy)]
pub struct FocalLossConfig {
    pub eta: f32,
    pub zeta: f32,
    /// g is clamped to [floor, 1 - floor] before evaluation so ln never
    /// sees zero.
    pub probability_floor: f32,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            eta: 1.0,
            zeta: 2.0,
            probability_floor: 1e-7,
        }
    }
}

impl FocalLossConfig {
    pub fn new(eta: f32, zeta: f32, probability_floor: f32) -> Result<Self> {
        if eta < 0.0 || zeta < 0.0 {
            return Err(Error::Config(format!(
                "focal loss eta and zeta must be >= 0, got eta={eta} zeta={zeta}"
            )));
        }
        if !(probability_floor > 0.0 && probability_floor < 0.5) {
            return Err(Error::Config(format!(
                "probability floor must lie in (0, 0.5), got {probability_floor}"
            )));
        }
        Ok(FocalLossConfig {
            eta,
            zeta,
            probability_floor,
        })
    }
}

/// Single-sample focal loss and its derivative with respect to `g_t`,
/// both evaluated at the clamped probability.
pub fn focal_loss(g_t: f32, config: &FocalLossConfig) -> (f32, f32) {
    let g = g_t
        .max(config.probability_floor)
        .min(1.0 - config.probability_floor);
    let one_minus = 1.0 - g;
    let ln_g = g.ln();
    let loss = -config.eta * one_minus.powf(config.zeta) * ln_g;
    // d/dg [ -eta (1-g)^zeta ln g ]
    //   = eta * zeta * (1-g)^(zeta-1) * ln g  -  eta * (1-g)^zeta / g
    let mut dloss = -config.eta * one_minus.powf(config.zeta) / g;
    if config.zeta != 0.0 {
        dloss += config.eta * config.zeta * one_minus.powf(config.zeta - 1.0) * ln_g;
    }
    (loss, dloss)
}

/// Mean focal loss over a batch plus the per-sample derivative of the mean.
pub fn focal_loss_batch(g: &[f32], config: &FocalLossConfig) -> (f32, Vec<f32>) {
    if g.is_empty() {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / g.len() as f32;
    let mut total = 0.0f32;
    let grads = g
        .iter()
        .map(|&gt| {
            let (l, d) = focal_loss(gt, config);
            total += l;
            d * inv
        })
        .collect();
    (total * inv, grads)
}

/// Smooth-L1 (Huber) loss on a scalar residual `pred - target`:
/// quadratic inside |d| < beta, linear outside, C1 at the joint.
pub fn smooth_l1(pred: f32, target: f32, beta: f32) -> Result<(f32, f32)> {
    if beta <= 0.0 {
        return Err(Error::Config(format!("smooth_l1 beta must be > 0, got {beta}")));
    }
    let d = pred - target;
    if d.abs() < beta {
        Ok((0.5 * d * d / beta, d / beta))
    } else {
        Ok((d.abs() - 0.5 * beta, d.signum()))
    }
}

/// Average precision of a binary ranking: sort by descending score (ties by
/// original index), integrate precision over recall at each positive rank.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> Result<f32> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let delta_recall = 1.0 / total_pos as f64;
    let mut tp = 0usize;
    let mut ap = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] {
            tp += 1;
            let precision = tp as f64 / (rank + 1) as f64;
            ap += precision * delta_recall;
        }
    }
    Ok(ap as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_classified_sample_has_near_zero_loss() {
        let cfg = FocalLossConfig::default();
        let (loss, _) = focal_loss(1.0, &cfg);
        assert!(loss >= 0.0 && loss < 1e-5, "loss {loss}");
    }

    #[test]
    fn zeta_zero_degenerates_to_cross_entropy() {
        let cfg = FocalLossConfig::new(1.0, 0.0, 1e-7).unwrap();
        let (loss, dloss) = focal_loss(0.5, &cfg);
        assert!((loss - 0.693147).abs() < 1e-5);
        assert!((dloss - (-2.0)).abs() < 1e-5);
    }

    #[test]
    fn hand_evaluated_focusing_case() {
        // eta=1, zeta=2, g=0.9: (0.1)^2 * -ln(0.9) = 0.01 * 0.1053605
        let cfg = FocalLossConfig::new(1.0, 2.0, 1e-7).unwrap();
        let (loss, _) = focal_loss(0.9, &cfg);
        assert!((loss - 0.001053605).abs() < 1e-7, "loss {loss}");
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(FocalLossConfig::new(-1.0, 2.0, 1e-7).is_err());
        assert!(FocalLossConfig::new(1.0, -0.5, 1e-7).is_err());
        assert!(FocalLossConfig::new(1.0, 1.0, 0.6).is_err());
    }

    #[test]
    fn focal_nonnegative_and_monotone_decreasing() {
        let cfg = FocalLossConfig::default();
        let mut prev = f32::INFINITY;
        for i in 1..100 {
            let g = i as f32 / 100.0;
            let (loss, dloss) = focal_loss(g, &cfg);
            assert!(loss >= 0.0);
            assert!(loss <= prev, "not monotone at g={g}");
            assert!(dloss <= 0.0, "derivative positive at g={g}");
            prev = loss;
        }
    }

    #[test]
    fn focal_derivative_matches_central_differences() {
        // f64 reference of the same loss keeps the finite-difference oracle
        // free of f32 rounding and truncation artifacts.
        fn reference(g: f64, eta: f64, zeta: f64) -> f64 {
            -eta * (1.0 - g).powf(zeta) * g.ln()
        }
        for &(eta, zeta) in &[(1.0f32, 0.0f32), (1.0, 2.0), (0.25, 1.0), (2.0, 4.0)] {
            let cfg = FocalLossConfig::new(eta, zeta, 1e-7).unwrap();
            for i in 1..19 {
                let g = 0.05 * i as f32;
                let (_, analytic) = focal_loss(g, &cfg);
                let eps = 1e-6f64;
                let numeric = ((reference(g as f64 + eps, eta as f64, zeta as f64)
                    - reference(g as f64 - eps, eta as f64, zeta as f64))
                    / (2.0 * eps)) as f32;
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel < 1e-4, "eta={eta} zeta={zeta} g={g}: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn focal_batch_is_mean() {
        let cfg = FocalLossConfig::default();
        let g = [0.2f32, 0.5, 0.9];
        let (mean, grads) = focal_loss_batch(&g, &cfg);
        let expect: f32 = g.iter().map(|&x| focal_loss(x, &cfg).0).sum::<f32>() / 3.0;
        assert!((mean - expect).abs() < 1e-7);
        assert_eq!(grads.len(), 3);
    }

    #[test]
    fn smooth_l1_hand_values() {
        assert_eq!(smooth_l1(3.0, 3.0, 1.0).unwrap().0, 0.0);
        let (loss, _) = smooth_l1(0.5, 0.0, 1.0).unwrap();
        assert!((loss - 0.125).abs() < 1e-7);
        let (loss, grad) = smooth_l1(2.0, 0.0, 1.0).unwrap();
        assert!((loss - 1.5).abs() < 1e-7);
        assert_eq!(grad, 1.0);
    }

    #[test]
    fn smooth_l1_continuous_at_joint() {
        let beta = 0.75f32;
        for sign in [-1.0f32, 1.0] {
            let below = smooth_l1(sign * (beta - 1e-4), 0.0, beta).unwrap();
            let above = smooth_l1(sign * (beta + 1e-4), 0.0, beta).unwrap();
            assert!((below.0 - above.0).abs() < 1e-3);
            assert!((below.1 - above.1).abs() < 1e-3);
        }
    }

    #[test]
    fn smooth_l1_rejects_bad_beta() {
        assert!(smooth_l1(1.0, 0.0, 0.0).is_err());
        assert!(smooth_l1(1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn ap_perfect_ranking() {
        let scores = [0.9f32, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        assert!((average_precision(&scores, &labels).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn ap_hand_case() {
        let scores = [0.9f32, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 0.833333).abs() < 1e-5, "ap {ap}");
    }

    #[test]
    fn ap_all_positive() {
        let scores = [0.3f32, 0.9, 0.1];
        let labels = [true, true, true];
        assert!((average_precision(&scores, &labels).unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn ap_no_positives_is_undefined() {
        assert!(matches!(
            average_precision(&[0.5], &[false]),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
