//! Dense n-dimensional f32 tensor and the finite-difference gradient harness.
//!
//! Layout convention across the crate: row-major flat storage, dimension
//! order (batch, channels, depth, height, width) for 5-D tensors. Every
//! operation is a pure function of its inputs; the only mutation is the
//! optimizer's explicit in-place update.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense f32 tensor with an optional gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape(format!(
                "zero dimension in shape {shape:?}"
            )));
        }
        n = n.checked_mul(d).ok_or_else(|| {
            Error::InvalidShape(format!("shape {shape:?} overflows element count"))
        })?;
    }
    Ok(n)
}

impl Tensor {
    /// Tensor filled with a constant. Every dimension must be >= 1.
    pub fn new(shape: &[usize], fill: f32) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; n],
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, 0.0)
    }

    /// Entries drawn i.i.d. from uniform(-scale, +scale) using xoshiro256**
    /// seeded with `seed`. Identical (shape, seed, scale) give bit-identical
    /// tensors.
    pub fn rand(shape: &[usize], seed: u64, scale: f32) -> Result<Tensor> {
        let n = check_shape(shape)?;
        let mut rng = Rng::from_seed(seed);
        let data = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Element-wise `grad += delta`.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient length {} vs tensor length {}",
                delta.len(),
                self.data.len()
            )));
        }
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Reinterpret the flat data under a new shape of the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elems) to {shape:?} ({n} elems)",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f32> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A forward map together with the analytic gradient of the scalar loss
/// `L(x) = sum(forward(x))` with respect to `x`. The gradient harness
/// compares that analytic gradient against central differences.
pub struct CheckedOp<'a> {
    /// Human-readable name, reported by the `gradcheck` command.
    pub name: String,
    /// Forward map.
    pub forward: Box<dyn Fn(&Tensor) -> Result<Tensor> + Sync + 'a>,
    /// dL/dx for L = sum(forward(x)).
    pub backward: Box<dyn Fn(&Tensor) -> Result<Tensor> + Sync + 'a>,
    /// Point at which the check runs.
    pub input: Tensor,
}

fn sum_outputs(t: &Tensor) -> Result<f64> {
    let mut acc = 0.0f64;
    for &v in t.data() {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite forward output".into()));
        }
        acc += v as f64;
    }
    Ok(acc)
}

/// Compare analytic gradients against central differences
/// `(f(x+eps) - f(x-eps)) / 2 eps` and return the maximum relative error
/// `|a - n| / max(|a|, |n|, 1e-8)` over all entries of the input.
pub fn gradient_check(op: &CheckedOp, epsilon: f32) -> Result<f32> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
    }
    let analytic = (op.backward)(&op.input)?;
    if analytic.len() != op.input.len() {
        return Err(Error::ShapeMismatch(format!(
            "analytic gradient has {} entries, input has {}",
            analytic.len(),
            op.input.len()
        )));
    }
    let mut max_rel = 0.0f32;
    let mut x = op.input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + epsilon;
        let plus = sum_outputs(&(op.forward)(&x)?)?;
        x.data_mut()[i] = orig - epsilon;
        let minus = sum_outputs(&(op.forward)(&x)?)?;
        x.data_mut()[i] = orig;
        let numeric = ((plus - minus) / (2.0 * epsilon as f64)) as f32;
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
