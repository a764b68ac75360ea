//! 3-D convolution (cross-correlation) with explicit backward.
//!
//! Input layout (N, C_in, D, H, W), weights (C_out, C_in, k, k, k), cubic
//! kernels, zero padding. The stride-1 path runs contiguous row kernels so
//! the compiler can vectorize; general strides fall back to scalar loops.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Convolution parameters: weights (C_out, C_in, k, k, k), bias (C_out).
#[derive(Debug, Clone)]
pub struct Conv3dParams {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let ws = weights.shape();
        if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::InvalidShape(format!(
                "conv weights must be (C_out, C_in, k, k, k), got {ws:?}"
            )));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?} does not match C_out {}",
                bias.shape(),
                ws[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        Ok(Conv3dParams {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero bias.
    pub fn init(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k * k) as f32;
        let scale = 1.0 / fan_in.sqrt();
        Conv3dParams::new(
            Tensor::rand(&[c_out, c_in, k, k, k], seed, scale)?,
            Tensor::zeros(&[c_out])?,
            stride,
            padding,
        )
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }
}

/// Gradients of a convolution with respect to its input and parameters.
pub struct Conv3dGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

struct ConvDims {
    n: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    s: usize,
    p: usize,
    d: usize,
    h: usize,
    w: usize,
    d_out: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(input: &Tensor, params: &Conv3dParams) -> Result<ConvDims> {
    let is = input.shape();
    if is.len() != 5 {
        return Err(Error::InvalidShape(format!(
            "conv input must be 5-D (N, C, D, H, W), got {is:?}"
        )));
    }
    let (n, c_in, d, h, w) = (is[0], is[1], is[2], is[3], is[4]);
    if c_in != params.c_in() {
        return Err(Error::ShapeMismatch(format!(
            "input has {c_in} channels, weights expect {}",
            params.c_in()
        )));
    }
    let k = params.kernel();
    let (s, p) = (params.stride, params.padding);
    for (name, dim) in [("depth", d), ("height", h), ("width", w)] {
        if dim + 2 * p < k {
            return Err(Error::ShapeMismatch(format!(
                "{name} {dim} with padding {p} is smaller than kernel {k}"
            )));
        }
    }
    Ok(ConvDims {
        n,
        c_in,
        c_out: params.c_out(),
        k,
        s,
        p,
        d,
        h,
        w,
        d_out: (d + 2 * p - k) / s + 1,
        h_out: (h + 2 * p - k) / s + 1,
        w_out: (w + 2 * p - k) / s + 1,
    })
}

pub fn conv3d_output_shape(input_shape: &[usize], params: &Conv3dParams) -> Result<Vec<usize>> {
    let probe = Tensor::zeros(input_shape)?;
    let dm = conv_dims(&probe, params)?;
    Ok(vec![dm.n, dm.c_out, dm.d_out, dm.h_out, dm.w_out])
}

pub fn conv3d_forward(input: &Tensor, params: &Conv3dParams) -> Result<Tensor> {
    let dm = conv_dims(input, params)?;
    let mut out = Tensor::zeros(&[dm.n, dm.c_out, dm.d_out, dm.h_out, dm.w_out])?;
    let plane = dm.h_out * dm.w_out;
    let in_data = input.data();
    let wts = params.weights.data();
    let bias = params.bias.data();
    let (k, s, p) = (dm.k, dm.s, dm.p);

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pidx, out_plane)| {
            let n = pidx / (dm.c_out * dm.d_out);
            let co = (pidx / dm.d_out) % dm.c_out;
            let zo = pidx % dm.d_out;
            out_plane.iter_mut().for_each(|v| *v = bias[co]);
            for ci in 0..dm.c_in {
                let in_ch = &in_data[((n * dm.c_in) + ci) * dm.d * dm.h * dm.w..][..dm.d * dm.h * dm.w];
                for kz in 0..k {
                    let zi = (zo * s + kz) as isize - p as isize;
                    if zi < 0 || zi >= dm.d as isize {
                        continue;
                    }
                    let in_slab = &in_ch[zi as usize * dm.h * dm.w..][..dm.h * dm.w];
                    let w_base = (((co * dm.c_in) + ci) * k + kz) * k * k;
                    for yo in 0..dm.h_out {
                        let out_row = &mut out_plane[yo * dm.w_out..][..dm.w_out];
                        for ky in 0..k {
                            let yi = (yo * s + ky) as isize - p as isize;
                            if yi < 0 || yi >= dm.h as isize {
                                continue;
                            }
                            let in_row = &in_slab[yi as usize * dm.w..][..dm.w];
                            let w_row = &wts[w_base + ky * k..][..k];
                            if s == 1 {
                                for (kx, &wv) in w_row.iter().enumerate() {
                                    let xo_lo = p.saturating_sub(kx);
                                    let xo_hi = (dm.w + p).saturating_sub(kx).min(dm.w_out);
                                    if xo_lo >= xo_hi {
                                        continue;
                                    }
                                    let src = &in_row[xo_lo + kx - p..xo_hi + kx - p];
                                    let dst = &mut out_row[xo_lo..xo_hi];
                                    for (o, i) in dst.iter_mut().zip(src) {
                                        *o += wv * *i;
                                    }
                                }
                            } else {
                                for (xo, o) in out_row.iter_mut().enumerate() {
                                    for (kx, &wv) in w_row.iter().enumerate() {
                                        let xi = (xo * s + kx) as isize - p as isize;
                                        if xi >= 0 && xi < dm.w as isize {
                                            *o += wv * in_row[xi as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn conv3d_backward(
    input: &Tensor,
    params: &Conv3dParams,
    grad_out: &Tensor,
) -> Result<Conv3dGrads> {
    let dm = conv_dims(input, params)?;
    let expect = [dm.n, dm.c_out, dm.d_out, dm.h_out, dm.w_out];
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch(format!(
            "grad_out shape {:?}, expected {expect:?}",
            grad_out.shape()
        )));
    }

    let grad_input = conv3d_grad_input(&dm, params, grad_out)?;
    let (grad_weights, grad_bias) = conv3d_grad_params(&dm, input, grad_out)?;
    Ok(Conv3dGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

fn conv3d_grad_input(dm: &ConvDims, params: &Conv3dParams, grad_out: &Tensor) -> Result<Tensor> {
    let mut grad_input = Tensor::zeros(&[dm.n, dm.c_in, dm.d, dm.h, dm.w])?;
    let go = grad_out.data();
    let wts = params.weights.data();
    let plane = dm.h * dm.w;
    let (k, s, p) = (dm.k, dm.s, dm.p);

    grad_input
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pidx, gi_plane)| {
            let n = pidx / (dm.c_in * dm.d);
            let ci = (pidx / dm.d) % dm.c_in;
            let zi = pidx % dm.d;
            for co in 0..dm.c_out {
                let go_ch =
                    &go[((n * dm.c_out) + co) * dm.d_out * dm.h_out * dm.w_out..][..dm.d_out * dm.h_out * dm.w_out];
                for kz in 0..k {
                    // zo * s + kz - p == zi
                    let znum = zi as isize + p as isize - kz as isize;
                    if znum < 0 || znum % s as isize != 0 {
                        continue;
                    }
                    let zo = (znum / s as isize) as usize;
                    if zo >= dm.d_out {
                        continue;
                    }
                    let go_slab = &go_ch[zo * dm.h_out * dm.w_out..][..dm.h_out * dm.w_out];
                    let w_base = (((co * dm.c_in) + ci) * k + kz) * k * k;
                    for yi in 0..dm.h {
                        let gi_row = &mut gi_plane[yi * dm.w..][..dm.w];
                        for ky in 0..k {
                            let ynum = yi as isize + p as isize - ky as isize;
                            if ynum < 0 || ynum % s as isize != 0 {
                                continue;
                            }
                            let yo = (ynum / s as isize) as usize;
                            if yo >= dm.h_out {
                                continue;
                            }
                            let go_row = &go_slab[yo * dm.w_out..][..dm.w_out];
                            let w_row = &wts[w_base + ky * k..][..k];
                            if s == 1 {
                                for (kx, &wv) in w_row.iter().enumerate() {
                                    // xo = xi + p - kx in [0, w_out)
                                    let xi_lo = kx.saturating_sub(p);
                                    let xi_hi = (dm.w_out + kx).saturating_sub(p).min(dm.w);
                                    if xi_lo >= xi_hi {
                                        continue;
                                    }
                                    let src = &go_row[xi_lo + p - kx..xi_hi + p - kx];
                                    let dst = &mut gi_row[xi_lo..xi_hi];
                                    for (g, o) in dst.iter_mut().zip(src) {
                                        *g += wv * *o;
                                    }
                                }
                            } else {
                                for (xi, g) in gi_row.iter_mut().enumerate() {
                                    for (kx, &wv) in w_row.iter().enumerate() {
                                        let xnum = xi as isize + p as isize - kx as isize;
                                        if xnum < 0 || xnum % s as isize != 0 {
                                            continue;
                                        }
                                        let xo = (xnum / s as isize) as usize;
                                        if xo < dm.w_out {
                                            *g += wv * go_row[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(grad_input)
}

fn conv3d_grad_params(dm: &ConvDims, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut grad_weights = Tensor::zeros(&[dm.c_out, dm.c_in, dm.k, dm.k, dm.k])?;
    let mut grad_bias = Tensor::zeros(&[dm.c_out])?;
    let in_data = input.data();
    let go = grad_out.data();
    let (k, s, p) = (dm.k, dm.s, dm.p);
    let w_per_co = dm.c_in * k * k * k;
    let gb = grad_bias.data_mut();

    grad_weights
        .data_mut()
        .par_chunks_mut(w_per_co)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gw_co, gb_co))| {
            for n in 0..dm.n {
                let go_ch =
                    &go[((n * dm.c_out) + co) * dm.d_out * dm.h_out * dm.w_out..][..dm.d_out * dm.h_out * dm.w_out];
                *gb_co += go_ch.iter().sum::<f32>();
                for ci in 0..dm.c_in {
                    let in_ch = &in_data[((n * dm.c_in) + ci) * dm.d * dm.h * dm.w..][..dm.d * dm.h * dm.w];
                    for kz in 0..k {
                        for zo in 0..dm.d_out {
                            let zi = (zo * s + kz) as isize - p as isize;
                            if zi < 0 || zi >= dm.d as isize {
                                continue;
                            }
                            let in_slab = &in_ch[zi as usize * dm.h * dm.w..][..dm.h * dm.w];
                            let go_slab = &go_ch[zo * dm.h_out * dm.w_out..][..dm.h_out * dm.w_out];
                            let gw_base = (ci * k + kz) * k * k;
                            for ky in 0..k {
                                for yo in 0..dm.h_out {
                                    let yi = (yo * s + ky) as isize - p as isize;
                                    if yi < 0 || yi >= dm.h as isize {
                                        continue;
                                    }
                                    let in_row = &in_slab[yi as usize * dm.w..][..dm.w];
                                    let go_row = &go_slab[yo * dm.w_out..][..dm.w_out];
                                    for kx in 0..k {
                                        let mut acc = 0.0f32;
                                        if s == 1 {
                                            let xo_lo = p.saturating_sub(kx);
                                            let xo_hi =
                                                (dm.w + p).saturating_sub(kx).min(dm.w_out);
                                            if xo_lo < xo_hi {
                                                let a = &go_row[xo_lo..xo_hi];
                                                let b = &in_row[xo_lo + kx - p..xo_hi + kx - p];
                                                for (x, y) in a.iter().zip(b) {
                                                    acc += x * y;
                                                }
                                            }
                                        } else {
                                            for xo in 0..dm.w_out {
                                                let xi = (xo * s + kx) as isize - p as isize;
                                                if xi >= 0 && xi < dm.w as isize {
                                                    acc += go_row[xo] * in_row[xi as usize];
                                                }
                                            }
                                        }
                                        gw_co[gw_base + ky * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok((grad_weights, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, CheckedOp};

    fn identity_1x1(c: usize) -> Conv3dParams {
        let mut w = Tensor::zeros(&[c, c, 1, 1, 1]).unwrap();
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        Conv3dParams::new(w, Tensor::zeros(&[c]).unwrap(), 1, 0).unwrap()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let input = Tensor::rand(&[1, 2, 3, 4, 5], 17, 1.0).unwrap();
        let out = conv3d_forward(&input, &identity_1x1(2)).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn ones_kernel_counts_taps() {
        // All-ones 3x3x3 kernel over a constant-1 volume: interior voxels see
        // all 27 taps, corner voxels only 8.
        let input = Tensor::new(&[1, 1, 5, 5, 5], 1.0).unwrap();
        let params = Conv3dParams::new(
            Tensor::new(&[1, 1, 3, 3, 3], 1.0).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
            1,
            1,
        )
        .unwrap();
        let out = conv3d_forward(&input, &params).unwrap();
        assert_eq!(out.shape(), &[1, 1, 5, 5, 5]);
        let at = |z: usize, y: usize, x: usize| out.data()[(z * 5 + y) * 5 + x];
        assert_eq!(at(2, 2, 2), 27.0);
        assert_eq!(at(0, 0, 0), 8.0);
        assert_eq!(at(0, 0, 4), 8.0);
        assert_eq!(at(0, 2, 2), 18.0);
    }

    #[test]
    fn output_shape_formula() {
        let params = Conv3dParams::init(3, 1, 3, 1, 0, 1).unwrap();
        let shape = conv3d_output_shape(&[1, 1, 4, 4, 4], &params).unwrap();
        assert_eq!(shape, vec![1, 3, 2, 2, 2]);

        let strided = Conv3dParams::init(2, 1, 3, 2, 1, 2).unwrap();
        let shape = conv3d_output_shape(&[2, 1, 7, 9, 11], &strided).unwrap();
        assert_eq!(shape, vec![2, 2, 4, 5, 6]);
    }

    #[test]
    fn undersized_input_rejected() {
        let params = Conv3dParams::init(1, 1, 3, 1, 0, 1).unwrap();
        let input = Tensor::zeros(&[1, 1, 2, 4, 4]).unwrap();
        assert!(matches!(
            conv3d_forward(&input, &params),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let params = Conv3dParams::init(1, 2, 3, 1, 1, 1).unwrap();
        let input = Tensor::zeros(&[1, 1, 4, 4, 4]).unwrap();
        assert!(matches!(
            conv3d_forward(&input, &params),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let input = Tensor::rand(&[1, 2, 4, 4, 4], 3, 1.0).unwrap();
        let params = Conv3dParams::init(3, 2, 3, 1, 1, 4).unwrap();
        let go = Tensor::zeros(&[1, 3, 4, 4, 4]).unwrap();
        let grads = conv3d_backward(&input, &params, &go).unwrap();
        assert!(grads.input.data().iter().all(|&x| x == 0.0));
        assert!(grads.weights.data().iter().all(|&x| x == 0.0));
        assert!(grads.bias.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_backward_passes_grad_through() {
        let input = Tensor::rand(&[1, 1, 3, 3, 3], 5, 1.0).unwrap();
        let go = Tensor::rand(&[1, 1, 3, 3, 3], 6, 1.0).unwrap();
        let grads = conv3d_backward(&input, &identity_1x1(1), &go).unwrap();
        assert_eq!(grads.input.data(), go.data());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let params = Conv3dParams::init(2, 2, 3, 1, 1, 7).unwrap();
        let input = Tensor::rand(&[1, 2, 4, 4, 4], 8, 1.0).unwrap();

        // d(sum of outputs)/d(input)
        let p = params.clone();
        let op = CheckedOp {
            name: "conv3d/input".into(),
            forward: Box::new(move |x| conv3d_forward(x, &p)),
            backward: Box::new({
                let p = params.clone();
                move |x| {
                    let out_shape = conv3d_output_shape(x.shape(), &p)?;
                    let ones = Tensor::new(&out_shape, 1.0)?;
                    Ok(conv3d_backward(x, &p, &ones)?.input)
                }
            }),
            input: input.clone(),
        };
        assert!(gradient_check(&op, 1e-2).unwrap() < 1e-3);

        // d(sum of outputs)/d(weights)
        let base = params.clone();
        let x = input.clone();
        let op = CheckedOp {
            name: "conv3d/weights".into(),
            forward: Box::new({
                let base = base.clone();
                let x = x.clone();
                move |w| {
                    let p = Conv3dParams::new(w.clone(), base.bias.clone(), 1, 1)?;
                    conv3d_forward(&x, &p)
                }
            }),
            backward: Box::new({
                let base = base.clone();
                let x = x.clone();
                move |w| {
                    let p = Conv3dParams::new(w.clone(), base.bias.clone(), 1, 1)?;
                    let out_shape = conv3d_output_shape(x.shape(), &p)?;
                    let ones = Tensor::new(&out_shape, 1.0)?;
                    Ok(conv3d_backward(&x, &p, &ones)?.weights)
                }
            }),
            input: params.weights.clone(),
        };
        assert!(gradient_check(&op, 1e-2).unwrap() < 1e-3);
    }

    #[test]
    fn strided_gradient_matches_central_differences() {
        let params = Conv3dParams::init(2, 1, 3, 2, 1, 9).unwrap();
        let input = Tensor::rand(&[1, 1, 5, 5, 5], 10, 1.0).unwrap();
        let p = params.clone();
        let p2 = params.clone();
        let op = CheckedOp {
            name: "conv3d/strided-input".into(),
            forward: Box::new(move |x| conv3d_forward(x, &p)),
            backward: Box::new(move |x| {
                let out_shape = conv3d_output_shape(x.shape(), &p2)?;
                let ones = Tensor::new(&out_shape, 1.0)?;
                Ok(conv3d_backward(x, &p2, &ones)?.input)
            }),
            input,
        };
        assert!(gradient_check(&op, 1e-2).unwrap() < 1e-3);
    }

    #[test]
    fn linearity_with_zero_bias() {
        let params = Conv3dParams::init(2, 1, 3, 1, 1, 11).unwrap();
        let x = Tensor::rand(&[1, 1, 4, 4, 4], 12, 1.0).unwrap();
        let mut ax = x.clone();
        ax.data_mut().iter_mut().for_each(|v| *v *= 2.5);
        let y1 = conv3d_forward(&ax, &params).unwrap();
        let y2 = conv3d_forward(&x, &params).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            let rel = (a - 2.5 * b).abs() / a.abs().max(1e-5);
            assert!(rel < 1e-5, "linearity violated: {a} vs {}", 2.5 * b);
        }
    }
}
