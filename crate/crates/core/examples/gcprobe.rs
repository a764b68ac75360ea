use pnd_core::loss::FocalLossConfig;
use pnd_core::stage1::{assign_anchor_labels, generate_anchors, rpn_loss_and_grads, BBox3D, RpnModel};
use pnd_core::stage2::{fpr_loss_and_grads, DualPathModel};
use pnd_core::tensor::{gradient_check, CheckedOp, Tensor};
use pnd_core::train::ParamModel;

fn positivize<M: ParamModel>(m: &mut M, gain: f32) {
    m.visit_params_mut(&mut |name, t| {
        if name.ends_with("weights") {
            t.data_mut().iter_mut().for_each(|v| *v = v.abs() * gain);
        } else if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v += 0.05);
        }
    });
}

fn main() {
    let focal = FocalLossConfig::default();
    let eps = 1e-2f32;
    for gain in [0.3f32, 0.4, 0.5] {
        let mut model = RpnModel::init(&[2, 4], 4, &[4.0, 6.0], 7).unwrap();
        positivize(&mut model, gain);
        let anchors = generate_anchors([16, 16, 16], 4, &model.anchor_scales).unwrap();
        let gt = vec![BBox3D::cube([8.0, 8.0, 8.0], 5.0)];
        let assignment = assign_anchor_labels(&anchors, &gt, 0.3, 0.02).unwrap();
        let mut patch = Tensor::rand(&[1, 1, 16, 16, 16], 8, 0.25).unwrap();
        patch.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let cache = model.forward_cached(&patch).unwrap();
        let lmax = cache.obj_logits.data().iter().cloned().fold(0.0f32, f32::max);
        let lmin = cache.obj_logits.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let (m1, a1) = (model.clone(), assignment.clone());
        let (m2, a2) = (model.clone(), assignment.clone());
        let op = CheckedOp {
            name: "rpn".into(),
            forward: Box::new(move |p| { let (r, _, _) = rpn_loss_and_grads(&m1, p, &a1, &focal, usize::MAX, 1.0)?; Tensor::from_vec(&[1], vec![r.total]) }),
            backward: Box::new(move |p| { let (_, _, d) = rpn_loss_and_grads(&m2, p, &a2, &focal, usize::MAX, 1.0)?; Ok(d) }),
            input: patch.clone(),
        };
        let err = gradient_check(&op, eps).unwrap();
        println!("rpn gain={gain}: logits [{lmin:.2}, {lmax:.2}] maxrel={err:.3e}");
    }
    for gain in [0.25f32, 0.3, 0.35] {
        let mut model = DualPathModel::init(16, 2, 4, 5).unwrap();
        positivize(&mut model, gain);
        let mut patch = Tensor::rand(&[1, 1, 16, 16, 16], 6, 0.25).unwrap();
        patch.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let cache = model.forward_cached(&patch).unwrap();
        let (m1, m2) = (model.clone(), model.clone());
        let op = CheckedOp {
            name: "fpr".into(),
            forward: Box::new(move |p| { let (l, _, _) = fpr_loss_and_grads(&m1, p, true, &focal)?; Tensor::from_vec(&[1], vec![l]) }),
            backward: Box::new(move |p| { let (_, _, d) = fpr_loss_and_grads(&m2, p, true, &focal)?; Ok(d) }),
            input: patch.clone(),
        };
        let err = gradient_check(&op, eps).unwrap();
        println!("fpr gain={gain}: logit {:.3} maxrel={err:.3e}", cache.logit);
    }
}
