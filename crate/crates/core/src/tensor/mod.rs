//! Dense 64-bit tensors, the operation graph used for reverse-mode
//! differentiation, and the `CBT1` binary tensor file format.
//!
//! A [`Tensor`] is an immutable row-major value array with an optional
//! gradient slot. All differentiable operations live on [`Graph`], which
//! records every executed operation whose inputs carry gradients and
//! replays the record in reverse on [`Graph::backward`].

mod graph;
pub mod io;

pub use graph::Graph;
pub(crate) use graph::pool_bin;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Dense n-dimensional array of `f64` values with optional gradient tracking.
///
/// Cloning is cheap (shared storage). Values are immutable after creation;
/// only the gradient slot accumulates, and only for tensors created with
/// [`Tensor::param`]-style tracking. Parameter data is updated in place by
/// the optimizer through a crate-private path.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                requires_grad,
                grad: Mutex::new(None),
            }),
        })
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::build(shape, data, false)
    }

    /// Trainable tensor; its gradient slot starts at zero.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self::build(shape, data, true)?;
        t.zero_grad();
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![0.0; n], false).expect("zeros: consistent by construction")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(shape, vec![value; n], false).expect("filled: consistent by construction")
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self::build(vec![], vec![value], false).expect("scalar: consistent by construction")
    }

    /// Op output: gradient materializes lazily during backward.
    pub(crate) fn result_of(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Self::build(shape, data, requires_grad).expect("op output shape consistent")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the value array.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.read().unwrap().clone()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "scalar_value on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.read().unwrap()[0])
    }

    /// Copy of the accumulated gradient, if any has been recorded.
    /// Parameters start with an all-zero gradient.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Reset the gradient slot to zeros (parameters) or clear it.
    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.lock().unwrap();
        if self.inner.requires_grad {
            *g = Some(vec![0.0; self.numel()]);
        } else {
            *g = None;
        }
    }

    pub(crate) fn read(&self) -> std::sync::RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read().unwrap()
    }

    /// In-place update of the value array; optimizer and checkpoint loading only.
    pub(crate) fn overwrite_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut d = self.inner.data.write().unwrap();
        f(&mut d);
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert!(self.inner.requires_grad);
        debug_assert_eq!(delta.len(), self.numel());
        let mut g = self.inner.grad.lock().unwrap();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Flat index into a rank-3 tensor stored as `[channel][row][col]`.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        let (h, w) = (self.shape()[1], self.shape()[2]);
        (c * h + y) * w + x
    }

    pub fn value_at(&self, flat: usize) -> f64 {
        self.inner.data.read().unwrap()[flat]
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

/// Binary h×w mask. Values are strictly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![1; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Dimension(format!(
                "mask data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Validation(
                "mask values must be 0 or 1".to_string(),
            ));
        }
        Ok(Mask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.w + x] = v;
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// The mask as a 1×h×w tensor of 0.0/1.0 values.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(vec![1, self.h, self.w], data).expect("mask shape consistent")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_rejected() {
        assert!(matches!(
            Tensor::from_vec(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::from_vec(vec![2, 0], vec![]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn param_starts_with_zero_grad() {
        let p = Tensor::param(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(p.grad(), Some(vec![0.0; 4]));
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), None);
    }

    #[test]
    fn grad_accumulates_additively() {
        let p = Tensor::param(vec![3], vec![0.0; 3]).unwrap();
        p.accumulate_grad(&[1.0, 2.0, 3.0]);
        p.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(p.grad(), Some(vec![1.5, 2.5, 3.5]));
        p.zero_grad();
        assert_eq!(p.grad(), Some(vec![0.0; 3]));
    }

    #[test]
    fn scalar_value_requires_single_element() {
        assert!(Tensor::scalar(4.5).scalar_value().unwrap() == 4.5);
        let t = Tensor::zeros(vec![2]);
        assert!(matches!(t.scalar_value(), Err(Error::Usage(_))));
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(matches!(
            Mask::from_vec(1, 2, vec![0, 2]),
            Err(Error::Validation(_))
        ));
        let m = Mask::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(m.count_ones(), 2);
    }
}
