//! LSTM cells for the region encoder and the attribute decoder.
//!
//! Both cells share one implementation. A gate's pre-activation is
//! `Σ_k W_k·u_k + W_h·h_prev + b`, where the encoder has a single input block
//! (the region feature `x`) and the decoder has two (the context `z` and the
//! embedding of the previous prediction `y`). Every gate keeps its own
//! matrices so checkpoints store `W_fx`, `W_ih`, ... individually.

use crate::error::{check_dim, JrlError, Result};
use crate::numerics::{ensure_finite, sigmoid_scalar, Matrix, Scalar, SeededRng, Vector};
use crate::tensor::{self, NamedTensor, ParamSet};

/// Gate order used throughout: forget, input, output, modulation.
pub const GATE_NAMES: [char; 4] = ['f', 'i', 'o', 'g'];

const FORGET: usize = 0;
const INPUT: usize = 1;
const OUTPUT: usize = 2;
const MODULATION: usize = 3;

/// Index of the context input block of a decoder cell.
pub const DECODER_Z: usize = 0;
/// Index of the previous-prediction embedding block of a decoder cell.
pub const DECODER_Y: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Encoder,
    Decoder,
}

impl CellKind {
    fn input_tags(self) -> &'static [char] {
        match self {
            CellKind::Encoder => &['x'],
            CellKind::Decoder => &['z', 'y'],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T> {
    pub inputs: Vec<Matrix<T>>,
    pub hidden: Matrix<T>,
    pub bias: Vector<T>,
}

/// Parameters (or gradients) of one LSTM cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<T> {
    kind: CellKind,
    hidden_size: usize,
    input_sizes: Vec<usize>,
    pub gates: [Gate<T>; 4],
}

/// Encoder cell: `W_{f,i,o,g}x` (d × D_region), `W_{f,i,o,g}h` (d × d), biases.
pub type EncoderCellParams<T> = LstmCell<T>;
/// Decoder cell: `W_*z` (d × d), `W_*h` (d × d), `W_*y` (d × E), biases.
pub type DecoderCellParams<T> = LstmCell<T>;

#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub h: Vector<T>,
    pub c: Vector<T>,
}

impl<T: Scalar> CellState<T> {
    pub fn zeros(d: usize) -> Self {
        CellState {
            h: Vector::zeros(d),
            c: Vector::zeros(d),
        }
    }
}

/// Activations cached by one forward step for its backward pass.
#[derive(Clone, Debug)]
pub struct StepTape<T> {
    kind: CellKind,
    inputs: Vec<Vector<T>>,
    h_prev: Vector<T>,
    c_prev: Vector<T>,
    acts: [Vector<T>; 4],
    tanh_c: Vector<T>,
}

impl<T: Scalar> StepTape<T> {
    pub fn gate(&self, gate: usize) -> &[T] {
        &self.acts[gate]
    }
}

/// Gradients with respect to one step's non-parameter inputs.
#[derive(Clone, Debug)]
pub struct StepGrads<T> {
    pub h_prev: Vector<T>,
    pub c_prev: Vector<T>,
    pub inputs: Vec<Vector<T>>,
}

impl<T: Scalar> LstmCell<T> {
    fn zeros_with(kind: CellKind, hidden_size: usize, input_sizes: Vec<usize>) -> Self {
        let gate = || Gate {
            inputs: input_sizes
                .iter()
                .map(|&n| Matrix::zeros(hidden_size, n))
                .collect(),
            hidden: Matrix::zeros(hidden_size, hidden_size),
            bias: Vector::zeros(hidden_size),
        };
        LstmCell {
            kind,
            hidden_size,
            input_sizes: input_sizes.clone(),
            gates: [gate(), gate(), gate(), gate()],
        }
    }

    pub fn encoder_zeros(hidden_size: usize, region_dim: usize) -> Self {
        Self::zeros_with(CellKind::Encoder, hidden_size, vec![region_dim])
    }

    pub fn decoder_zeros(hidden_size: usize, embed_dim: usize) -> Self {
        Self::zeros_with(CellKind::Decoder, hidden_size, vec![hidden_size, embed_dim])
    }

    /// Uniform `[-1/√d, 1/√d]` weights, zero biases except a forget bias of one.
    pub fn init_random(mut self, rng: &mut SeededRng) -> Self {
        let r = T::one() / T::lit(self.hidden_size as f64).sqrt();
        for (gi, gate) in self.gates.iter_mut().enumerate() {
            for w in gate.inputs.iter_mut() {
                *w = rng.uniform_matrix(w.rows(), w.cols(), r);
            }
            gate.hidden = rng.uniform_matrix(self.hidden_size, self.hidden_size, r);
            gate.bias = if gi == FORGET {
                Vector::filled(self.hidden_size, T::one())
            } else {
                Vector::zeros(self.hidden_size)
            };
        }
        self
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros_with(self.kind, self.hidden_size, self.input_sizes.clone())
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn input_sizes(&self) -> &[usize] {
        &self.input_sizes
    }

    /// One forward step. `inputs` must match the cell's input blocks in order.
    pub fn step(&self, prev: &CellState<T>, inputs: &[&[T]]) -> Result<(CellState<T>, StepTape<T>)> {
        let d = self.hidden_size;
        check_dim("cell input blocks", self.input_sizes.len(), inputs.len())?;
        check_dim("cell h_prev", d, prev.h.len())?;
        check_dim("cell c_prev", d, prev.c.len())?;
        for (&n, u) in self.input_sizes.iter().zip(inputs) {
            check_dim("cell input", n, u.len())?;
            ensure_finite("cell input", u)?;
        }
        ensure_finite("cell h_prev", &prev.h)?;
        ensure_finite("cell c_prev", &prev.c)?;

        let mut acts: [Vector<T>; 4] = Default::default();
        for (gi, gate) in self.gates.iter().enumerate() {
            let mut pre = gate.bias.clone();
            for (w, u) in gate.inputs.iter().zip(inputs) {
                w.gemv_acc(u, &mut pre);
            }
            gate.hidden.gemv_acc(&prev.h, &mut pre);
            for p in pre.iter_mut() {
                *p = if gi == MODULATION {
                    p.tanh()
                } else {
                    sigmoid_scalar(*p)
                };
            }
            acts[gi] = pre;
        }

        let mut c = Vector::zeros(d);
        let mut h = Vector::zeros(d);
        let mut tanh_c = Vector::zeros(d);
        for j in 0..d {
            c[j] = acts[FORGET][j] * prev.c[j] + acts[INPUT][j] * acts[MODULATION][j];
            tanh_c[j] = c[j].tanh();
            h[j] = acts[OUTPUT][j] * tanh_c[j];
        }

        let tape = StepTape {
            kind: self.kind,
            inputs: inputs.iter().map(|u| Vector::from(u.to_vec())).collect(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            acts,
            tanh_c,
        };
        Ok((CellState { h, c }, tape))
    }

    /// Backward through one step. Parameter gradients are added into `grads`.
    pub fn backward(
        &self,
        tape: StepTape<T>,
        grad_h: &[T],
        grad_c: &[T],
        grads: &mut LstmCell<T>,
    ) -> Result<StepGrads<T>> {
        let d = self.hidden_size;
        if tape.kind != self.kind
            || tape.h_prev.len() != d
            || tape.inputs.len() != self.input_sizes.len()
            || tape
                .inputs
                .iter()
                .zip(&self.input_sizes)
                .any(|(u, &n)| u.len() != n)
        {
            return Err(JrlError::TapeMismatch(format!(
                "{:?} cell tape does not match parameters",
                self.kind
            )));
        }
        if grads.kind != self.kind || grads.hidden_size != d || grads.input_sizes != self.input_sizes {
            return Err(JrlError::TapeMismatch("gradient buffer layout".into()));
        }
        check_dim("cell grad_h", d, grad_h.len())?;
        check_dim("cell grad_c", d, grad_c.len())?;

        let [f, i, o, g] = &tape.acts;
        let mut pre_grads: [Vector<T>; 4] = Default::default();
        for pg in pre_grads.iter_mut() {
            *pg = Vector::zeros(d);
        }
        let mut c_prev = Vector::zeros(d);
        let one = T::one();
        for j in 0..d {
            let tc = tape.tanh_c[j];
            let d_o = grad_h[j] * tc;
            let dc = grad_c[j] + grad_h[j] * o[j] * (one - tc * tc);
            let d_f = dc * tape.c_prev[j];
            let d_i = dc * g[j];
            let d_g = dc * i[j];
            c_prev[j] = dc * f[j];
            pre_grads[FORGET][j] = d_f * f[j] * (one - f[j]);
            pre_grads[INPUT][j] = d_i * i[j] * (one - i[j]);
            pre_grads[OUTPUT][j] = d_o * o[j] * (one - o[j]);
            pre_grads[MODULATION][j] = d_g * (one - g[j] * g[j]);
        }

        let mut h_prev = Vector::zeros(d);
        let mut input_grads: Vec<Vector<T>> =
            self.input_sizes.iter().map(|&n| Vector::zeros(n)).collect();
        for gi in 0..4 {
            let da = &pre_grads[gi];
            let gate = &self.gates[gi];
            let ggate = &mut grads.gates[gi];
            for (k, u) in tape.inputs.iter().enumerate() {
                ggate.inputs[k].rank1_acc(da, u);
                gate.inputs[k].gemv_t_acc(da, &mut input_grads[k]);
            }
            ggate.hidden.rank1_acc(da, &tape.h_prev);
            gate.hidden.gemv_t_acc(da, &mut h_prev);
            ggate.bias.add_assign(da);
        }

        Ok(StepGrads {
            h_prev,
            c_prev,
            inputs: input_grads,
        })
    }

    pub(crate) fn named_tensors<'a>(&'a self, prefix: &str) -> Vec<NamedTensor<'a, T>> {
        let tags = self.kind.input_tags();
        let mut out = Vec::with_capacity(16);
        for (gi, gate) in self.gates.iter().enumerate() {
            let gname = GATE_NAMES[gi];
            for (k, w) in gate.inputs.iter().enumerate() {
                out.push(tensor::mat(format!("{prefix}.W_{gname}{}", tags[k]), w));
            }
            out.push(tensor::mat(format!("{prefix}.W_{gname}h"), &gate.hidden));
            out.push(tensor::vec(format!("{prefix}.b_{gname}"), &gate.bias));
        }
        out
    }

    pub(crate) fn tensors_mut_vec(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(16);
        for gate in self.gates.iter_mut() {
            for w in gate.inputs.iter_mut() {
                out.push(w.as_mut_slice());
            }
            out.push(gate.hidden.as_mut_slice());
            out.push(&mut gate.bias);
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for LstmCell<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let prefix = match self.kind {
            CellKind::Encoder => "encoder",
            CellKind::Decoder => "decoder",
        };
        self.named_tensors(prefix)
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut_vec()
    }
}

/// Encoder step: reads one region feature `x`.
pub fn encoder_step<T: Scalar>(
    p: &EncoderCellParams<T>,
    prev: &CellState<T>,
    x: &[T],
) -> Result<(CellState<T>, StepTape<T>)> {
    if p.kind != CellKind::Encoder {
        return Err(JrlError::InvalidConfig("encoder_step needs an encoder cell".into()));
    }
    p.step(prev, &[x])
}

/// Decoder step: conditioned on the context `z` and the previous prediction's embedding.
pub fn decoder_step<T: Scalar>(
    p: &DecoderCellParams<T>,
    prev: &CellState<T>,
    z: &[T],
    y_prev_embed: &[T],
) -> Result<(CellState<T>, StepTape<T>)> {
    if p.kind != CellKind::Decoder {
        return Err(JrlError::InvalidConfig("decoder_step needs a decoder cell".into()));
    }
    p.step(prev, &[z, y_prev_embed])
}

/// Returns `(param_grads, grad_h_prev, grad_c_prev, grad_x)`.
#[allow(clippy::type_complexity)]
pub fn encoder_backward<T: Scalar>(
    p: &EncoderCellParams<T>,
    tape: StepTape<T>,
    grad_h: &[T],
    grad_c: &[T],
) -> Result<(EncoderCellParams<T>, Vector<T>, Vector<T>, Vector<T>)> {
    let mut grads = p.zeros_like();
    let mut sg = p.backward(tape, grad_h, grad_c, &mut grads)?;
    let gx = sg.inputs.pop().expect("encoder has one input block");
    Ok((grads, sg.h_prev, sg.c_prev, gx))
}

/// Returns `(param_grads, grad_h_prev, grad_c_prev, grad_z, grad_y_prev)`.
#[allow(clippy::type_complexity)]
pub fn decoder_backward<T: Scalar>(
    p: &DecoderCellParams<T>,
    tape: StepTape<T>,
    grad_h: &[T],
    grad_c: &[T],
) -> Result<(DecoderCellParams<T>, Vector<T>, Vector<T>, Vector<T>, Vector<T>)> {
    let mut grads = p.zeros_like();
    let mut sg = p.backward(tape, grad_h, grad_c, &mut grads)?;
    let gy = sg.inputs.pop().expect("decoder y block");
    let gz = sg.inputs.pop().expect("decoder z block");
    Ok((grads, sg.h_prev, sg.c_prev, gz, gy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_zero_state() {
        let p = LstmCell::<f64>::encoder_zeros(3, 2);
        let (s, _) = encoder_step(&p, &CellState::zeros(3), &[4.0, -7.0]).unwrap();
        assert_eq!(s.h.to_vec(), vec![0.0; 3]);
        assert_eq!(s.c.to_vec(), vec![0.0; 3]);

        let p = LstmCell::<f64>::decoder_zeros(3, 2);
        let (s, _) = decoder_step(&p, &CellState::zeros(3), &[1.0, 2.0, 3.0], &[5.0, 6.0]).unwrap();
        assert_eq!(s.h.to_vec(), vec![0.0; 3]);
        assert_eq!(s.c.to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn scalar_forget_bias_case() {
        // f = σ(10), i = o = 0.5, g = 0: c = σ(10)·1, h = 0.5·tanh(c)
        let mut p = LstmCell::<f64>::encoder_zeros(1, 1);
        p.gates[FORGET].bias[0] = 10.0;
        let prev = CellState {
            h: Vector::zeros(1),
            c: Vector::from(vec![1.0]),
        };
        let (s, _) = encoder_step(&p, &prev, &[0.3]).unwrap();
        let f = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((s.c[0] - f).abs() < 1e-15);
        assert!((s.c[0] - 0.999955).abs() < 1e-6);
        assert!((s.h[0] - 0.5 * f.tanh()).abs() < 1e-15);
        // The quoted 0.38077 is rounded; the exact value is 0.380788.
        assert!((s.h[0] - 0.38077).abs() < 5e-5);
    }

    #[test]
    fn nan_input_is_rejected() {
        let p = LstmCell::<f64>::encoder_zeros(2, 2).init_random(&mut SeededRng::new(1));
        let err = encoder_step(&p, &CellState::zeros(2), &[f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, JrlError::NonFinite(_)));
    }

    #[test]
    fn y_path_only_ignores_z() {
        let mut rng = SeededRng::new(5);
        let mut p = LstmCell::<f64>::decoder_zeros(3, 2);
        p.gates[FORGET].inputs[DECODER_Y] = rng.uniform_matrix(3, 2, 1.0);
        let prev = CellState {
            h: Vector::from(vec![0.1, -0.2, 0.3]),
            c: Vector::from(vec![0.5, 0.4, -0.3]),
        };
        let y = [0.7, -0.9];
        let (a, _) = decoder_step(&p, &prev, &[1.0, 2.0, 3.0], &y).unwrap();
        let (b, _) = decoder_step(&p, &prev, &[-4.0, 0.0, 9.0], &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gradient_is_zero_everywhere() {
        let mut rng = SeededRng::new(2);
        let p = LstmCell::<f64>::decoder_zeros(3, 2).init_random(&mut rng);
        let prev = CellState {
            h: rng.uniform_vector(3, 0.5),
            c: rng.uniform_vector(3, 0.5),
        };
        let (_, tape) = decoder_step(&p, &prev, &[0.1, 0.2, 0.3], &[0.4, 0.5]).unwrap();
        let (g, gh, gc, gz, gy) = decoder_backward(&p, tape, &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
        for v in [gh, gc, gz, gy] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn grad_z_vanishes_without_z_weights() {
        let mut rng = SeededRng::new(3);
        let mut p = LstmCell::<f64>::decoder_zeros(3, 2).init_random(&mut rng);
        for gate in p.gates.iter_mut() {
            gate.inputs[DECODER_Z] = Matrix::zeros(3, 3);
        }
        let (_, tape) = decoder_step(&p, &CellState::zeros(3), &[0.1, 0.2, 0.3], &[0.4, 0.5]).unwrap();
        let (_, _, _, gz, _) = decoder_backward(&p, tape, &[1.0, -1.0, 0.5], &[0.2, 0.0, 0.1]).unwrap();
        assert!(gz.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tape_from_other_cell_is_rejected() {
        let mut rng = SeededRng::new(4);
        let enc = LstmCell::<f64>::encoder_zeros(3, 2).init_random(&mut rng);
        let dec = LstmCell::<f64>::decoder_zeros(3, 2).init_random(&mut rng);
        let (_, tape) = encoder_step(&enc, &CellState::zeros(3), &[0.1, 0.2]).unwrap();
        let mut grads = dec.zeros_like();
        let err = dec.backward(tape, &[0.0; 3], &[0.0; 3], &mut grads).unwrap_err();
        assert!(matches!(err, JrlError::TapeMismatch(_)));
    }

    #[test]
    fn tensor_names_follow_gate_symbols() {
        let p = LstmCell::<f64>::decoder_zeros(2, 1);
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(&names[..4], &["decoder.W_fz", "decoder.W_fy", "decoder.W_fh", "decoder.b_f"]);
        assert_eq!(names.len(), 16);
        let mut q = p.clone();
        assert_eq!(q.tensors_mut().len(), 16);
    }
}
