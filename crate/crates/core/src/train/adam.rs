use crate::error::{check_dim, JrlError, Result};
use crate::numerics::Scalar;
use crate::tensor::ParamSet;

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update of `params` in place. Fails before touching anything if a gradient is non-finite.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.tensors();
        check_dim("adam tensor count", self.first.len(), g.len())?;
        for (t, m) in g.iter().zip(&self.first) {
            check_dim("adam tensor size", m.len(), t.data.len())?;
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(JrlError::NonFinite(format!("gradient of {}", t.name)));
            }
        }
        let targets = params.tensors_mut();
        check_dim("adam parameter count", self.first.len(), targets.len())?;
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let bc1 = one - T::lit(self.beta1.powi(self.step as i32));
        let bc2 = one - T::lit(self.beta2.powi(self.step as i32));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.epsilon);
        for (((p, g), m), v) in targets
            .into_iter()
            .zip(&g)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            check_dim("adam parameter size", m.len(), p.len())?;
            for j in 0..p.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar, P: ParamSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().to_f64_lossy().sqrt();
    if norm > max_norm {
        grads.scale_all(T::lit(max_norm / norm));
    }
    norm
}
