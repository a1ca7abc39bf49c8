//! Named-tensor views used by the optimizer, gradient checker and checkpoint.

use crate::numerics::{Matrix, Scalar, Vector};

/// Read-only view of one learnable tensor.
#[derive(Debug)]
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

/// A collection of learnable tensors with a stable, named traversal order.
///
/// `tensors` and `tensors_mut` must visit the same tensors in the same order.
pub trait ParamSet<T: Scalar> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn squared_norm(&self) -> T {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|&v| v * v)
            .sum()
    }

    fn scale_all(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= alpha;
            }
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = T::zero();
            }
        }
    }

    /// `self += other`, tensor by tensor. Both sides must share one layout.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.len(), s.data.len());
            for (a, &b) in dst.iter_mut().zip(s.data) {
                *a += b;
            }
        }
    }
}

pub(crate) fn mat<'a, T: Scalar>(name: String, m: &'a Matrix<T>) -> NamedTensor<'a, T> {
    NamedTensor {
        name,
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice(),
    }
}

pub(crate) fn vec<'a, T: Scalar>(name: String, v: &'a Vector<T>) -> NamedTensor<'a, T> {
    NamedTensor {
        name,
        shape: vec![v.len()],
        data: v,
    }
}
