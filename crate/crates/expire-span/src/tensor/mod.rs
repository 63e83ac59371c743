//! Dense f64 tensor value type plus the recording tape that implements
//! reverse-mode differentiation over it.
//!
//! Everything is 64-bit and row-major. There is no broadcasting beyond the
//! explicit ops the tape provides; shapes are checked at op boundaries.

pub mod gradcheck;
pub mod tape;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense n-dimensional value with optional gradient accumulation.
///
/// `data` is row-major; `grad`, when allocated, always matches `data` in
/// length. Parameters keep `requires_grad = true` so tapes bind them as
/// differentiable leaves.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = true;
        t
    }

    /// Glorot-uniform initialized parameter for a [fan_in, fan_out] matrix.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut data = vec![0.0; fan_in * fan_out];
        rng.fill_uniform(&mut data, -bound, bound);
        Tensor::param(vec![fan_in, fan_out], data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Accumulate a gradient contribution, allocating lazily.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_is_lazy_and_accumulates() {
        let mut t = Tensor::param(vec![3], vec![1.0, 2.0, 3.0]);
        assert!(t.grad.is_none());
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad.as_ref().unwrap(), &vec![1.5, 1.5, 1.5]);
    }

    #[test]
    #[should_panic]
    fn shape_must_match_data() {
        let _ = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }
}
