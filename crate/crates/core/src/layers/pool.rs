//! 3-D max pooling with argmax routing for the backward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max pool over cubic windows. Returns the pooled tensor and, per output
/// element, the flat index into the input that held the maximum. Ties break
/// toward the lowest flat index so the backward routing is deterministic.
pub fn maxpool3d_forward(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let is = input.shape();
    if is.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "maxpool input must be 5-D, got {is:?}"
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config("pool window and stride must be >= 1".into()));
    }
    let (n, c, d, h, w) = (is[0], is[1], is[2], is[3], is[4]);
    if d < window || h < window || w < window {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims ({d},{h},{w}) smaller than pool window {window}"
        )));
    }
    let d_out = (d - window) / stride + 1;
    let h_out = (h - window) / stride + 1;
    let w_out = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, d_out, h_out, w_out])?;
    let mut argmax = vec![0usize; out.len()];
    let data = input.data();
    let out_data = out.data_mut();

    let mut oi = 0;
    for nc in 0..n * c {
        let base = nc * d * h * w;
        for zo in 0..d_out {
            for yo in 0..h_out {
                for xo in 0..w_out {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kz in 0..window {
                        for ky in 0..window {
                            let row =
                                base + ((zo * stride + kz) * h + yo * stride + ky) * w + xo * stride;
                            for kx in 0..window {
                                let v = data[row + kx];
                                if v > best {
                                    best = v;
                                    best_idx = row + kx;
                                }
                            }
                        }
                    }
                    out_data[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Route `grad_out` back to the recorded argmax positions; zero elsewhere.
pub fn maxpool3d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch(format!(
            "argmax has {} entries, grad_out has {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&idx, &go) in argmax.iter().zip(grad_out.data()) {
        g[idx] += go;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_pools_to_constant() {
        let input = Tensor::new(&[1, 1, 4, 4, 4], 3.25).unwrap();
        let (out, _) = maxpool3d_forward(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn single_window_takes_max_and_routes_grad() {
        let input =
            Tensor::from_vec(&[1, 1, 2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let (out, argmax) = maxpool3d_forward(&input, 2, 2).unwrap();
        assert_eq!(out.data(), &[8.0]);
        assert_eq!(argmax, vec![7]);

        let go = Tensor::new(&[1, 1, 1, 1, 1], 1.0).unwrap();
        let grad = maxpool3d_backward(&[1, 1, 2, 2, 2], &argmax, &go).unwrap();
        assert_eq!(grad.data(), &[0., 0., 0., 0., 0., 0., 0., 1.]);
    }

    #[test]
    fn tie_breaks_to_lowest_flat_index() {
        let input = Tensor::new(&[1, 1, 2, 2, 2], 1.0).unwrap();
        let (_, argmax) = maxpool3d_forward(&input, 2, 2).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn idempotent_on_own_output_for_constant_windows() {
        // window == stride and input constant per window: pooling the pooled
        // output with window 1 reproduces it.
        let mut input = Tensor::zeros(&[1, 1, 4, 4, 4]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    input.data_mut()[(z * 4 + y) * 4 + x] =
                        ((z / 2) * 4 + (y / 2) * 2 + (x / 2)) as f32;
                }
            }
        }
        let (once, _) = maxpool3d_forward(&input, 2, 2).unwrap();
        let (twice, _) = maxpool3d_forward(&once, 1, 1).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn undersized_input_rejected() {
        let input = Tensor::zeros(&[1, 1, 1, 4, 4]).unwrap();
        assert!(maxpool3d_forward(&input, 2, 2).is_err());
    }
}
