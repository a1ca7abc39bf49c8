//! Recurrent attribute attention over the encoder's per-region states.
//!
//! The scorer is a one-hidden-layer network on `[h_dec ; h_enc_i]`:
//! `α_i = v_aᵀ tanh(W_a [h_dec ; h_enc_i] + b_a)`, `w = softmax(α)` and the
//! step context is `z_t = Σ_i w_i h_enc_i`. The encoder half of `W_a` does not
//! depend on the decode step, so [`AttentionKeys`] caches `W_a[:, d..] h_enc_i`
//! once per image.

use crate::error::{check_dim, JrlError, Result};
use crate::numerics::{softmax, Matrix, Scalar, SeededRng, Vector};
use crate::tensor::{self, NamedTensor, ParamSet};

/// The encoder's summary vectors `h_1 … h_m`, top region first.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutputs<T> {
    pub states: Vec<Vector<T>>,
}

impl<T: Scalar> EncoderOutputs<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&Vector<T>> {
        self.states.last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `A × 2d`; columns `0..d` multiply the decoder state, `d..2d` the region state.
    pub w_a: Matrix<T>,
    pub b_a: Vector<T>,
    pub v_a: Vector<T>,
}

/// Encoder-side projections `W_a[:, d..2d] · h_enc_i`, one per region.
#[derive(Clone, Debug)]
pub struct AttentionKeys<T> {
    proj: Vec<Vector<T>>,
}

/// Forward cache for one attention step.
#[derive(Clone, Debug)]
pub struct AttentionTape<T> {
    h_dec: Vector<T>,
    hidden: Vec<Vector<T>>,
    weights: Vector<T>,
}

impl<T: Scalar> AttentionTape<T> {
    pub fn weights(&self) -> &Vector<T> {
        &self.weights
    }
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(hidden_size: usize, width: usize) -> Self {
        AttentionParams {
            w_a: Matrix::zeros(width, 2 * hidden_size),
            b_a: Vector::zeros(width),
            v_a: Vector::zeros(width),
        }
    }

    pub fn init_random(mut self, rng: &mut SeededRng) -> Self {
        let r = T::one() / T::lit(self.hidden_size() as f64).sqrt();
        self.w_a = rng.uniform_matrix(self.w_a.rows(), self.w_a.cols(), r);
        self.v_a = rng.uniform_vector(self.v_a.len(), r);
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden_size(), self.width())
    }

    pub fn hidden_size(&self) -> usize {
        self.w_a.cols() / 2
    }

    pub fn width(&self) -> usize {
        self.w_a.rows()
    }

    pub fn keys(&self, outputs: &EncoderOutputs<T>) -> Result<AttentionKeys<T>> {
        let d = self.hidden_size();
        let mut proj = Vec::with_capacity(outputs.len());
        for h in &outputs.states {
            check_dim("attention region state", d, h.len())?;
            let mut p = Vector::zeros(self.width());
            self.w_a.gemv_cols_acc(d, h, &mut p);
            proj.push(p);
        }
        Ok(AttentionKeys { proj })
    }

    /// One attention step against precomputed keys.
    pub fn attend_keyed(
        &self,
        h_dec: &[T],
        outputs: &EncoderOutputs<T>,
        keys: &AttentionKeys<T>,
    ) -> Result<(Vector<T>, AttentionTape<T>)> {
        let d = self.hidden_size();
        if outputs.is_empty() {
            return Err(JrlError::Empty("encoder outputs"));
        }
        check_dim("attention decoder state", d, h_dec.len())?;
        check_dim("attention keys", outputs.len(), keys.proj.len())?;

        let mut query = self.b_a.clone();
        self.w_a.gemv_cols_acc(0, h_dec, &mut query);

        let mut hidden = Vec::with_capacity(outputs.len());
        let mut scores = Vec::with_capacity(outputs.len());
        for key in &keys.proj {
            let u = Vector::from_fn(query.len(), |a| (query[a] + key[a]).tanh());
            scores.push(self.v_a.dot(&u));
            hidden.push(u);
        }
        let weights = softmax(&scores);

        let mut z = Vector::zeros(d);
        for (w, h) in weights.iter().zip(&outputs.states) {
            check_dim("attention region state", d, h.len())?;
            z.axpy(*w, h);
        }
        Ok((
            z,
            AttentionTape {
                h_dec: Vector::from(h_dec.to_vec()),
                hidden,
                weights,
            },
        ))
    }

    /// Backward through one step. Parameter gradients for `W_a[:, 0..d]`, `b_a`
    /// and `v_a` are added into `grads`; region-state gradients into `grad_states`;
    /// gradients on the cached keys into `grad_keys` (see [`Self::keys_backward`]).
    /// Returns the gradient on the decoder state.
    pub fn backward_keyed(
        &self,
        tape: AttentionTape<T>,
        outputs: &EncoderOutputs<T>,
        grad_z: &[T],
        grads: &mut AttentionParams<T>,
        grad_states: &mut [Vector<T>],
        grad_keys: &mut [Vector<T>],
    ) -> Result<Vector<T>> {
        let d = self.hidden_size();
        let m = outputs.len();
        if tape.weights.len() != m || tape.h_dec.len() != d || grad_states.len() != m || grad_keys.len() != m {
            return Err(JrlError::TapeMismatch("attention tape does not match encoder outputs".into()));
        }
        check_dim("attention grad_z", d, grad_z.len())?;

        // Through z = Σ w_i h_i.
        let mut grad_w = Vec::with_capacity(m);
        for (i, h) in outputs.states.iter().enumerate() {
            grad_w.push(h.dot(grad_z));
            grad_states[i].axpy(tape.weights[i], grad_z);
        }
        // Softmax Jacobian: dα_i = w_i (dw_i − Σ_j w_j dw_j).
        let mean: T = tape.weights.iter().zip(&grad_w).map(|(&w, &g)| w * g).sum();

        let width = self.width();
        let mut grad_query = Vector::zeros(width);
        for i in 0..m {
            let d_alpha = tape.weights[i] * (grad_w[i] - mean);
            let u = &tape.hidden[i];
            grads.v_a.axpy(d_alpha, u);
            for a in 0..width {
                let dpre = d_alpha * self.v_a[a] * (T::one() - u[a] * u[a]);
                grad_query[a] += dpre;
                grad_keys[i][a] += dpre;
            }
        }
        grads.b_a.add_assign(&grad_query);
        grads.w_a.rank1_cols_acc(0, &grad_query, &tape.h_dec);
        let mut grad_h_dec = Vector::zeros(d);
        self.w_a.gemv_t_cols_acc(0, &grad_query, &mut grad_h_dec);
        Ok(grad_h_dec)
    }

    /// Pushes accumulated key gradients into `W_a[:, d..2d]` and the region states.
    pub fn keys_backward(
        &self,
        outputs: &EncoderOutputs<T>,
        grad_keys: &[Vector<T>],
        grads: &mut AttentionParams<T>,
        grad_states: &mut [Vector<T>],
    ) -> Result<()> {
        let d = self.hidden_size();
        check_dim("attention key gradients", outputs.len(), grad_keys.len())?;
        for (i, (h, gk)) in outputs.states.iter().zip(grad_keys).enumerate() {
            grads.w_a.rank1_cols_acc(d, gk, h);
            self.w_a.gemv_t_cols_acc(d, gk, &mut grad_states[i]);
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for AttentionParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        vec![
            tensor::mat("attention.W_a".into(), &self.w_a),
            tensor::vec("attention.b_a".into(), &self.b_a),
            tensor::vec("attention.v_a".into(), &self.v_a),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.w_a.as_mut_slice(), &mut self.b_a, &mut self.v_a]
    }
}

/// One attention step: returns `(z_t, w_t, tape)`.
pub fn attend<T: Scalar>(
    p: &AttentionParams<T>,
    h_de_prev: &[T],
    outputs: &EncoderOutputs<T>,
) -> Result<(Vector<T>, Vector<T>, AttentionTape<T>)> {
    let keys = p.keys(outputs)?;
    let (z, tape) = p.attend_keyed(h_de_prev, outputs, &keys)?;
    Ok((z, tape.weights.clone(), tape))
}

/// Returns `(param_grads, grad_h_de_prev, grad_H)`.
#[allow(clippy::type_complexity)]
pub fn attend_backward<T: Scalar>(
    p: &AttentionParams<T>,
    tape: AttentionTape<T>,
    outputs: &EncoderOutputs<T>,
    grad_z: &[T],
) -> Result<(AttentionParams<T>, Vector<T>, Vec<Vector<T>>)> {
    let d = p.hidden_size();
    let m = outputs.len();
    let mut grads = p.zeros_like();
    let mut grad_states = vec![Vector::zeros(d); m];
    let mut grad_keys = vec![Vector::zeros(p.width()); m];
    let gh = p.backward_keyed(tape, outputs, grad_z, &mut grads, &mut grad_states, &mut grad_keys)?;
    p.keys_backward(outputs, &grad_keys, &mut grads, &mut grad_states)?;
    Ok((grads, gh, grad_states))
}
