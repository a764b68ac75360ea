//! Elementwise activations, the affine layer and row softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    out
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
}

/// dL/dx given the relu *output* and dL/dy. Valid because y > 0 iff x > 0.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("relu backward shapes differ".into()));
    }
    let mut grad = grad_out.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(grad)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    // Branch on sign so the exponential never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    out
}

/// dL/dx given the sigmoid *output* and dL/dy.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("sigmoid backward shapes differ".into()));
    }
    let mut grad = grad_out.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        *g *= y * (1.0 - y);
    }
    Ok(grad)
}

/// Affine map: input (N, F) x weights (F, G) + bias (G) -> (N, G).
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    let ws = weights.shape();
    if is.len() != 2 || ws.len() != 2 {
        return Err(Error::InvalidShape(
            "linear expects 2-D input and weights".into(),
        ));
    }
    let (n, f, g) = (is[0], is[1], ws[1]);
    if ws[0] != f || bias.shape() != [g] {
        return Err(Error::ShapeMismatch(format!(
            "linear shapes: input {is:?}, weights {ws:?}, bias {:?}",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, g])?;
    let x = input.data();
    let w = weights.data();
    let od = out.data_mut();
    for i in 0..n {
        let row = &mut od[i * g..][..g];
        row.copy_from_slice(bias.data());
        for j in 0..f {
            let xv = x[i * f + j];
            let wr = &w[j * g..][..g];
            for (o, wv) in row.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<LinearGrads> {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = weights.shape()[1];
    if grad_out.shape() != [n, g] {
        return Err(Error::ShapeMismatch(format!(
            "linear grad_out shape {:?}, expected [{n}, {g}]",
            grad_out.shape()
        )));
    }
    let mut gi = Tensor::zeros(&[n, f])?;
    let mut gw = Tensor::zeros(&[f, g])?;
    let mut gb = Tensor::zeros(&[g])?;
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();

    for i in 0..n {
        let go_row = &go[i * g..][..g];
        for j in 0..f {
            let wr = &w[j * g..][..g];
            let mut acc = 0.0f32;
            for (a, b) in go_row.iter().zip(wr) {
                acc += a * b;
            }
            gi.data_mut()[i * f + j] = acc;
        }
        for j in 0..f {
            let xv = x[i * f + j];
            let gw_row = &mut gw.data_mut()[j * g..][..g];
            for (gwv, gov) in gw_row.iter_mut().zip(go_row) {
                *gwv += xv * gov;
            }
        }
        for (gbv, gov) in gb.data_mut().iter_mut().zip(go_row) {
            *gbv += gov;
        }
    }
    Ok(LinearGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

/// Row-wise softmax with max subtraction: input (N, K) -> (N, K), rows sum to 1.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    if is.len() != 2 {
        return Err(Error::InvalidShape("softmax expects (N, K) input".into()));
    }
    let (n, k) = (is[0], is[1]);
    let mut out = input.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * k..][..k];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// dL/dx given the softmax *output* y and dL/dy:
/// grad = y * (grad_out - sum(grad_out * y)) per row.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch("softmax backward shapes differ".into()));
    }
    let (n, k) = (output.shape()[0], output.shape()[1]);
    let mut grad = Tensor::zeros(&[n, k])?;
    for i in 0..n {
        let y = &output.data()[i * k..][..k];
        let go = &grad_out.data()[i * k..][..k];
        let dot: f32 = y.iter().zip(go).map(|(a, b)| a * b).sum();
        let g = &mut grad.data_mut()[i * k..][..k];
        for j in 0..k {
            g[j] = y[j] * (go[j] - dot);
        }
    }
    Ok(grad)
}
