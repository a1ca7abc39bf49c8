//! The full encoder-decoder network: region encoder, similarity-context
//! fusion, attention decoder, attribute embedding and prediction head.
//!
//! Decoding runs with `(h_0, c_0) = (z*, 0)`. Step `t` feeds the embedding of
//! token `t-1` (the zero vector at `t = 1`) and, as context, either the
//! attention read-out over the query image's encoder states or the fixed
//! `z = h_m`. The head scores `n_attr + 1` classes, the last one being stop.

mod checkpoint;
mod pool;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pool::ExemplarCache;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKeys, AttentionParams, AttentionTape, EncoderOutputs};
use crate::cell::{CellState, LstmCell, StepTape, DECODER_Y, DECODER_Z};
use crate::context::{max_fuse, max_fuse_backward, FuseTape};
use crate::data::AttributeSequence;
use crate::error::{check_dim, JrlError, Result};
use crate::numerics::{log_sum_exp, softmax, Matrix, Scalar, SeededRng, Vector};
use crate::tensor::{self, NamedTensor, ParamSet};

fn default_true() -> bool {
    true
}

/// Architecture and regularization settings of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden size `d` of both LSTMs.
    pub hidden_size: usize,
    /// Regions per image `m`.
    pub regions: usize,
    pub region_dim: usize,
    pub n_attr: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
    /// Exemplars fused into the decoder's initial state.
    pub context_k: usize,
    pub attention: bool,
    pub context: bool,
    /// When false the encoder LSTM is replaced by a learned linear projection
    /// of each region, and `z` is the mean projected region.
    #[serde(default = "default_true")]
    pub encoder: bool,
    pub dropout: f64,
}

impl ModelConfig {
    /// Defaults: `E = min(d, 128)`, `A = d`, `k = 2`, attention and context on, dropout 0.5.
    pub fn new(hidden_size: usize, regions: usize, region_dim: usize, n_attr: usize) -> Self {
        ModelConfig {
            hidden_size,
            regions,
            region_dim,
            n_attr,
            embed_dim: hidden_size.min(128),
            attention_dim: hidden_size,
            context_k: 2,
            attention: true,
            context: true,
            encoder: true,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("regions", self.regions),
            ("region_dim", self.region_dim),
            ("n_attr", self.n_attr),
            ("embed_dim", self.embed_dim),
            ("attention_dim", self.attention_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(JrlError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(JrlError::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Exemplars actually used: zero when context is disabled.
    pub fn effective_k(&self) -> usize {
        if self.context {
            self.context_k
        } else {
            0
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n_attr + 1
    }

    pub fn stop_token(&self) -> usize {
        self.n_attr
    }
}

/// Region encoder: the LSTM, or the projection used by the encoder-free ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum RegionEncoder<T> {
    Lstm(LstmCell<T>),
    Projection { w: Matrix<T>, b: Vector<T> },
}

/// Every learnable tensor of the network. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct JrlParams<T> {
    pub encoder: RegionEncoder<T>,
    pub decoder: LstmCell<T>,
    pub attention: AttentionParams<T>,
    /// `(n_attr + 1) × E`: one row per attribute plus the stop token.
    pub embedding: Matrix<T>,
    pub head_w: Matrix<T>,
    pub head_b: Vector<T>,
}

pub type JrlGrads<T> = JrlParams<T>;

impl<T: Scalar> JrlParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.hidden_size;
        let c = config.num_classes();
        let encoder = if config.encoder {
            RegionEncoder::Lstm(LstmCell::encoder_zeros(d, config.region_dim))
        } else {
            RegionEncoder::Projection {
                w: Matrix::zeros(d, config.region_dim),
                b: Vector::zeros(d),
            }
        };
        JrlParams {
            encoder,
            decoder: LstmCell::decoder_zeros(d, config.embed_dim),
            attention: AttentionParams::zeros(d, config.attention_dim),
            embedding: Matrix::zeros(c, config.embed_dim),
            head_w: Matrix::zeros(c, d),
            head_b: Vector::zeros(c),
        }
    }

    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = config.hidden_size;
        let r = T::one() / T::lit(d as f64).sqrt();
        let c = config.num_classes();
        let encoder = if config.encoder {
            RegionEncoder::Lstm(LstmCell::encoder_zeros(d, config.region_dim).init_random(rng))
        } else {
            let rp = T::one() / T::lit(config.region_dim as f64).sqrt();
            RegionEncoder::Projection {
                w: rng.uniform_matrix(d, config.region_dim, rp),
                b: Vector::zeros(d),
            }
        };
        let decoder = LstmCell::decoder_zeros(d, config.embed_dim).init_random(rng);
        let attention = AttentionParams::zeros(d, config.attention_dim).init_random(rng);
        JrlParams {
            encoder,
            decoder,
            attention,
            embedding: rng.uniform_matrix(c, config.embed_dim, r),
            head_w: rng.uniform_matrix(c, d, r),
            head_b: Vector::zeros(c),
        }
    }

    pub fn zeros_like(&self) -> Self {
        JrlParams {
            encoder: match &self.encoder {
                RegionEncoder::Lstm(cell) => RegionEncoder::Lstm(cell.zeros_like()),
                RegionEncoder::Projection { w, b } => RegionEncoder::Projection {
                    w: Matrix::zeros(w.rows(), w.cols()),
                    b: Vector::zeros(b.len()),
                },
            },
            decoder: self.decoder.zeros_like(),
            attention: self.attention.zeros_like(),
            embedding: Matrix::zeros(self.embedding.rows(), self.embedding.cols()),
            head_w: Matrix::zeros(self.head_w.rows(), self.head_w.cols()),
            head_b: Vector::zeros(self.head_b.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar> ParamSet<T> for JrlParams<T> {
    fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let mut out = match &self.encoder {
            RegionEncoder::Lstm(cell) => cell.named_tensors("encoder"),
            RegionEncoder::Projection { w, b } => vec![
                tensor::mat("projection.W_p".into(), w),
                tensor::vec("projection.b_p".into(), b),
            ],
        };
        out.extend(self.decoder.named_tensors("decoder"));
        out.extend(self.attention.tensors());
        out.push(tensor::mat("embedding.E".into(), &self.embedding));
        out.push(tensor::mat("head.W_y".into(), &self.head_w));
        out.push(tensor::vec("head.b_y".into(), &self.head_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = match &mut self.encoder {
            RegionEncoder::Lstm(cell) => cell.tensors_mut_vec(),
            RegionEncoder::Projection { w, b } => vec![w.as_mut_slice(), &mut b[..]],
        };
        out.extend(self.decoder.tensors_mut_vec());
        out.extend(self.attention.tensors_mut());
        out.push(self.embedding.as_mut_slice());
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b[..]);
        out
    }
}

#[derive(Clone, Debug)]
enum EncodeTape<T> {
    Lstm(Vec<StepTape<T>>),
    Projection(Vec<Vector<T>>),
}

/// Encoder read-out for one image: `H = (h_1 … h_m)` and the context vector `z`.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub outputs: EncoderOutputs<T>,
    pub context: Vector<T>,
    tape: EncodeTape<T>,
}

#[derive(Clone, Debug)]
struct DecodeStep<T> {
    cell: StepTape<T>,
    attention: Option<AttentionTape<T>>,
    prev_token: Option<usize>,
    head_input: Vector<T>,
    dropout_mask: Option<Vector<T>>,
}

/// Teacher-forced decoder pass.
#[derive(Clone, Debug)]
pub struct DecodeTrace<T> {
    pub logits: Vec<Vector<T>>,
    /// Cross-entropy at each step.
    pub step_losses: Vec<T>,
    /// Mean of `step_losses`.
    pub loss: T,
    pub targets: Vec<usize>,
    steps: Vec<DecodeStep<T>>,
    keys: Option<AttentionKeys<T>>,
}

impl<T: Scalar> DecodeTrace<T> {
    /// Gradient of the mean cross-entropy with respect to each step's logits.
    pub fn loss_grads(&self) -> Vec<Vector<T>> {
        let scale = T::one() / T::lit(self.logits.len() as f64);
        self.logits
            .iter()
            .zip(&self.targets)
            .map(|(l, &t)| {
                let mut g = softmax(l);
                g[t] -= T::one();
                g.scale(scale);
                g
            })
            .collect()
    }
}

/// Everything `backward_full` needs from one training forward pass.
#[derive(Clone, Debug)]
pub struct TrainTrace<T> {
    pub encoded: Encoded<T>,
    pub fused: Vector<T>,
    fuse: FuseTape,
    pub decode: DecodeTrace<T>,
}

impl<T: Scalar> TrainTrace<T> {
    pub fn loss(&self) -> T {
        self.decode.loss
    }
}

/// Greedy decoding result with the attention weights of every step.
#[derive(Clone, Debug)]
pub struct GreedyTrace<T> {
    pub sequence: AttributeSequence,
    /// Emitted token per step, stop included.
    pub tokens: Vec<usize>,
    /// One weight vector over regions per step; empty when attention is off.
    pub attention: Vec<Vector<T>>,
}

/// A configured network.
#[derive(Clone, Debug, PartialEq)]
pub struct JrlModel<T> {
    pub config: ModelConfig,
    pub params: JrlParams<T>,
}

impl<T: Scalar> JrlModel<T> {
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let params = JrlParams::init(&config, rng);
        Ok(JrlModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: JrlParams<T>) -> Result<Self> {
        config.validate()?;
        let expected = JrlParams::<T>::zeros(&config);
        let want = expected.tensors();
        let got = params.tensors();
        if want.len() != got.len() {
            return Err(JrlError::InvalidConfig("parameter layout does not match configuration".into()));
        }
        for (w, g) in want.iter().zip(&got) {
            if w.name != g.name || w.shape != g.shape {
                return Err(JrlError::CheckpointShape {
                    name: g.name.clone(),
                    expected: w.shape.clone(),
                    found: g.shape.clone(),
                });
            }
        }
        Ok(JrlModel { config, params })
    }

    /// Runs the region encoder from a zero state.
    pub fn encode(&self, regions: &[Vector<T>]) -> Result<Encoded<T>> {
        let cfg = &self.config;
        check_dim("region count", cfg.regions, regions.len())?;
        for r in regions {
            check_dim("region feature", cfg.region_dim, r.len())?;
        }
        match &self.params.encoder {
            RegionEncoder::Lstm(cell) => {
                let mut state = CellState::zeros(cfg.hidden_size);
                let mut states = Vec::with_capacity(regions.len());
                let mut tapes = Vec::with_capacity(regions.len());
                for x in regions {
                    let (next, tape) = cell.step(&state, &[x])?;
                    states.push(next.h.clone());
                    tapes.push(tape);
                    state = next;
                }
                let context = state.h;
                Ok(Encoded {
                    outputs: EncoderOutputs { states },
                    context,
                    tape: EncodeTape::Lstm(tapes),
                })
            }
            RegionEncoder::Projection { w, b } => {
                let mut states = Vec::with_capacity(regions.len());
                let mut context = Vector::zeros(cfg.hidden_size);
                let inv_m = T::one() / T::lit(regions.len() as f64);
                for x in regions {
                    crate::numerics::ensure_finite("region feature", x)?;
                    let mut h = b.clone();
                    w.gemv_acc(x, &mut h);
                    context.axpy(inv_m, &h);
                    states.push(h);
                }
                Ok(Encoded {
                    outputs: EncoderOutputs { states },
                    context,
                    tape: EncodeTape::Projection(regions.to_vec()),
                })
            }
        }
    }

    fn step_context(
        &self,
        outputs: &EncoderOutputs<T>,
        keys: Option<&AttentionKeys<T>>,
        z: &Vector<T>,
        h_prev: &[T],
    ) -> Result<(Vector<T>, Option<AttentionTape<T>>)> {
        match keys {
            Some(keys) => {
                let (zt, tape) = self.params.attention.attend_keyed(h_prev, outputs, keys)?;
                Ok((zt, Some(tape)))
            }
            None => Ok((z.clone(), None)),
        }
    }

    fn check_decoder_inputs(&self, outputs: &EncoderOutputs<T>, z: &[T], z_star: &[T]) -> Result<()> {
        let d = self.config.hidden_size;
        check_dim("decoder context z", d, z.len())?;
        check_dim("decoder fused context", d, z_star.len())?;
        check_dim("encoder outputs", self.config.regions, outputs.len())?;
        Ok(())
    }

    /// Teacher-forced decode of `target`. Dropout is applied only when `dropout_rng` is given.
    pub fn decode_train(
        &self,
        outputs: &EncoderOutputs<T>,
        z: &Vector<T>,
        z_star: &Vector<T>,
        target: &AttributeSequence,
        mut dropout_rng: Option<&mut SeededRng>,
    ) -> Result<DecodeTrace<T>> {
        let cfg = &self.config;
        self.check_decoder_inputs(outputs, z, z_star)?;
        if target.n_attr() != cfg.n_attr {
            return Err(JrlError::MalformedSequence(format!(
                "sequence over {} attributes, model has {}",
                target.n_attr(),
                cfg.n_attr
            )));
        }
        let keys = if cfg.attention {
            Some(self.params.attention.keys(outputs)?)
        } else {
            None
        };
        let targets = target.tokens();
        let keep = T::one() - T::lit(cfg.dropout);
        let zero_embed = Vector::zeros(cfg.embed_dim);

        let mut state = CellState {
            h: z_star.clone(),
            c: Vector::zeros(cfg.hidden_size),
        };
        let mut steps = Vec::with_capacity(targets.len());
        let mut logits_all = Vec::with_capacity(targets.len());
        let mut losses = Vec::with_capacity(targets.len());
        let mut prev_token: Option<usize> = None;
        for &tok in &targets {
            let (zt, att_tape) = self.step_context(outputs, keys.as_ref(), z, &state.h)?;
            let y_prev: &[T] = match prev_token {
                Some(p) => self.params.embedding.row(p),
                None => &zero_embed,
            };
            let (next, cell_tape) = self.params.decoder.step(&state, &[&zt, y_prev])?;

            let (head_input, mask) = match dropout_rng.as_deref_mut() {
                Some(rng) if cfg.dropout > 0.0 => {
                    let mask = Vector::from_fn(cfg.hidden_size, |_| {
                        if rng.bernoulli(cfg.dropout) {
                            T::zero()
                        } else {
                            T::one() / keep
                        }
                    });
                    let h = Vector::from_fn(cfg.hidden_size, |j| next.h[j] * mask[j]);
                    (h, Some(mask))
                }
                _ => (next.h.clone(), None),
            };
            let mut logits = self.params.head_b.clone();
            self.params.head_w.gemv_acc(&head_input, &mut logits);
            if !logits.is_finite() {
                return Err(JrlError::NonFinite("decoder logits".into()));
            }
            losses.push(log_sum_exp(&logits) - logits[tok]);
            logits_all.push(logits);
            steps.push(DecodeStep {
                cell: cell_tape,
                attention: att_tape,
                prev_token,
                head_input,
                dropout_mask: mask,
            });
            prev_token = Some(tok);
            state = next;
        }
        let loss = losses.iter().copied().sum::<T>() / T::lit(losses.len() as f64);
        Ok(DecodeTrace {
            logits: logits_all,
            step_losses: losses,
            loss,
            targets,
            steps,
            keys,
        })
    }

    /// Greedy decoding with previously emitted attributes masked out.
    pub fn decode_greedy(
        &self,
        outputs: &EncoderOutputs<T>,
        z: &Vector<T>,
        z_star: &Vector<T>,
    ) -> Result<AttributeSequence> {
        Ok(self.decode_greedy_traced(outputs, z, z_star)?.sequence)
    }

    pub fn decode_greedy_traced(
        &self,
        outputs: &EncoderOutputs<T>,
        z: &Vector<T>,
        z_star: &Vector<T>,
    ) -> Result<GreedyTrace<T>> {
        let cfg = &self.config;
        self.check_decoder_inputs(outputs, z, z_star)?;
        let keys = if cfg.attention {
            Some(self.params.attention.keys(outputs)?)
        } else {
            None
        };
        let stop = cfg.stop_token();
        let zero_embed = Vector::zeros(cfg.embed_dim);
        let mut emitted = vec![false; cfg.n_attr];
        let mut attrs = Vec::new();
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        let mut state = CellState {
            h: z_star.clone(),
            c: Vector::zeros(cfg.hidden_size),
        };
        let mut prev_token: Option<usize> = None;
        for _ in 0..=cfg.n_attr {
            let (zt, att_tape) = self.step_context(outputs, keys.as_ref(), z, &state.h)?;
            if let Some(t) = att_tape {
                weights.push(t.weights().clone());
            }
            let y_prev: &[T] = match prev_token {
                Some(p) => self.params.embedding.row(p),
                None => &zero_embed,
            };
            let (next, _) = self.params.decoder.step(&state, &[&zt, y_prev])?;
            let mut logits = self.params.head_b.clone();
            self.params.head_w.gemv_acc(&next.h, &mut logits);
            for (a, &done) in emitted.iter().enumerate() {
                if done {
                    logits[a] = T::neg_infinity();
                }
            }
            let tok = match logits.argmax() {
                Some(t) if t < stop && !emitted[t] => t,
                _ => stop,
            };
            tokens.push(tok);
            if tok == stop {
                break;
            }
            emitted[tok] = true;
            attrs.push(tok);
            prev_token = Some(tok);
            state = next;
        }
        if tokens.last() != Some(&stop) {
            tokens.push(stop);
        }
        Ok(GreedyTrace {
            sequence: AttributeSequence::new(attrs, cfg.n_attr)?,
            tokens,
            attention: weights,
        })
    }

    /// Encode, fuse with exemplar contexts, and teacher-force `target`.
    pub fn forward_train(
        &self,
        regions: &[Vector<T>],
        exemplar_contexts: &[&[T]],
        target: &AttributeSequence,
        dropout_rng: Option<&mut SeededRng>,
    ) -> Result<TrainTrace<T>> {
        let encoded = self.encode(regions)?;
        let k = self.config.effective_k();
        let exemplars = &exemplar_contexts[..k.min(exemplar_contexts.len())];
        let (fused, fuse) = max_fuse(&encoded.context, exemplars)?;
        let decode = self.decode_train(&encoded.outputs, &encoded.context, &fused, target, dropout_rng)?;
        Ok(TrainTrace {
            encoded,
            fused,
            fuse,
            decode,
        })
    }

    /// Encode, fuse and greedily decode one image.
    pub fn predict(&self, regions: &[Vector<T>], exemplar_contexts: &[&[T]]) -> Result<GreedyTrace<T>> {
        let encoded = self.encode(regions)?;
        let k = self.config.effective_k();
        let exemplars = &exemplar_contexts[..k.min(exemplar_contexts.len())];
        let (fused, _) = max_fuse(&encoded.context, exemplars)?;
        self.decode_greedy_traced(&encoded.outputs, &encoded.context, &fused)
    }

    /// Backpropagation through time over the decoder, attention, fusion and encoder.
    /// `loss_grads[t]` is the gradient on step `t`'s logits.
    pub fn backward_full(&self, trace: TrainTrace<T>, loss_grads: &[Vector<T>]) -> Result<JrlGrads<T>> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.hidden_size;
        let TrainTrace {
            encoded,
            fuse,
            decode,
            ..
        } = trace;
        if loss_grads.len() != decode.steps.len() {
            return Err(JrlError::TapeMismatch(format!(
                "{} loss gradients for {} decode steps",
                loss_grads.len(),
                decode.steps.len()
            )));
        }
        for g in loss_grads {
            check_dim("logit gradient", cfg.num_classes(), g.len())?;
        }
        if cfg.attention != decode.keys.is_some() {
            return Err(JrlError::TapeMismatch("attention mode differs from forward pass".into()));
        }

        let outputs = &encoded.outputs;
        let m = outputs.len();
        let mut grads = p.zeros_like();
        let mut grad_states = vec![Vector::zeros(d); m];
        let mut grad_keys = vec![Vector::zeros(cfg.attention_dim); m];
        let mut grad_z = Vector::zeros(d);
        let mut dh_next = Vector::zeros(d);
        let mut dc_next = Vector::zeros(d);

        for (step, dl) in decode.steps.into_iter().zip(loss_grads).rev() {
            grads.head_w.rank1_acc(dl, &step.head_input);
            grads.head_b.add_assign(dl);
            let mut dh = Vector::zeros(d);
            p.head_w.gemv_t_acc(dl, &mut dh);
            if let Some(mask) = &step.dropout_mask {
                for (g, &mk) in dh.iter_mut().zip(mask.iter()) {
                    *g *= mk;
                }
            }
            dh.add_assign(&dh_next);

            let sg = p.decoder.backward(step.cell, &dh, &dc_next, &mut grads.decoder)?;
            let mut h_prev = sg.h_prev;
            if let Some(tok) = step.prev_token {
                let row = grads.embedding.row_mut(tok);
                for (g, &v) in row.iter_mut().zip(sg.inputs[DECODER_Y].iter()) {
                    *g += v;
                }
            }
            match step.attention {
                Some(att) => {
                    let extra = p.attention.backward_keyed(
                        att,
                        outputs,
                        &sg.inputs[DECODER_Z],
                        &mut grads.attention,
                        &mut grad_states,
                        &mut grad_keys,
                    )?;
                    h_prev.add_assign(&extra);
                }
                None => grad_z.add_assign(&sg.inputs[DECODER_Z]),
            }
            dh_next = h_prev;
            dc_next = sg.c_prev;
        }

        if cfg.attention {
            p.attention
                .keys_backward(outputs, &grad_keys, &mut grads.attention, &mut grad_states)?;
        }
        // h_0 = z*; the initial cell state is the constant zero.
        let dz_query = max_fuse_backward(&fuse, &dh_next)?;
        grad_z.add_assign(&dz_query);

        match (&p.encoder, &mut grads.encoder, encoded.tape) {
            (RegionEncoder::Lstm(cell), RegionEncoder::Lstm(gcell), EncodeTape::Lstm(tapes)) => {
                if tapes.len() != m {
                    return Err(JrlError::TapeMismatch("encoder tape length".into()));
                }
                grad_states[m - 1].add_assign(&grad_z);
                let mut dh_carry = Vector::zeros(d);
                let mut dc_carry = Vector::zeros(d);
                for (i, tape) in tapes.into_iter().enumerate().rev() {
                    let mut dh = grad_states[i].clone();
                    dh.add_assign(&dh_carry);
                    let sg = cell.backward(tape, &dh, &dc_carry, gcell)?;
                    dh_carry = sg.h_prev;
                    dc_carry = sg.c_prev;
                }
            }
            (
                RegionEncoder::Projection { .. },
                RegionEncoder::Projection { w: gw, b: gb },
                EncodeTape::Projection(regions),
            ) => {
                let inv_m = T::one() / T::lit(m as f64);
                for (gs, x) in grad_states.iter_mut().zip(&regions) {
                    gs.axpy(inv_m, &grad_z);
                    gw.rank1_acc(gs, x);
                    gb.add_assign(gs);
                }
            }
            _ => return Err(JrlError::TapeMismatch("encoder kind differs from forward pass".into())),
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{labels_to_sequence, OrderSpec};

    fn tiny(seed: u64) -> (JrlModel<f64>, Vec<Vector<f64>>, SeededRng) {
        let mut rng = SeededRng::new(seed);
        let mut cfg = ModelConfig::new(5, 3, 4, 4);
        cfg.embed_dim = 3;
        cfg.attention_dim = 3;
        cfg.context_k = 1;
        let model = JrlModel::new(cfg, &mut rng).unwrap();
        let regions = (0..3).map(|_| rng.uniform_vector(4, 1.0)).collect();
        (model, regions, rng)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(4, 6, 3, 5).validate().is_ok());
        let mut c = ModelConfig::new(4, 6, 3, 5);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(0, 6, 3, 5).validate().is_err());
        assert_eq!(ModelConfig::new(512, 6, 3, 5).embed_dim, 128);
        assert_eq!(ModelConfig::new(32, 6, 3, 5).embed_dim, 32);
    }

    #[test]
    fn zero_encoder_gives_zero_context() {
        let cfg = ModelConfig::new(4, 3, 2, 3);
        let model = JrlModel {
            params: JrlParams::<f64>::zeros(&cfg),
            config: cfg,
        };
        let regions = vec![Vector::from(vec![1.0, -2.0]); 3];
        let enc = model.encode(&regions).unwrap();
        assert!(enc.context.iter().all(|&v| v == 0.0));
        assert!(enc.outputs.states.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn encode_rejects_wrong_shapes() {
        let (model, regions, _) = tiny(1);
        assert!(model.encode(&regions[..2]).is_err());
        let mut bad = regions.clone();
        bad[0] = Vector::zeros(3);
        assert!(model.encode(&bad).is_err());
    }

    #[test]
    fn uniform_head_gives_log_c_loss() {
        let (mut model, regions, _) = tiny(2);
        model.params.head_w = Matrix::zeros(5, 5);
        let order = OrderSpec::identity(4);
        let seq = labels_to_sequence(&vec![1, 0, 1, 1], &order).unwrap();
        let tr = model.forward_train(&regions, &[], &seq, None).unwrap();
        assert_eq!(tr.decode.step_losses.len(), 4);
        for l in &tr.decode.step_losses {
            assert!((l - 5.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_biased_head_emits_nothing() {
        let (mut model, regions, _) = tiny(3);
        model.params.head_b[4] = 1e3;
        let out = model.predict(&regions, &[]).unwrap();
        assert!(out.sequence.attrs().is_empty());
        assert_eq!(out.tokens, vec![4]);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_grads() {
        let (model, regions, mut rng) = tiny(4);
        let ex: Vector<f64> = rng.uniform_vector(5, 0.5);
        let seq = AttributeSequence::new(vec![2, 0], 4).unwrap();
        let tr = model.forward_train(&regions, &[&ex], &seq, None).unwrap();
        let zeros = vec![Vector::zeros(5); 3];
        let g = model.backward_full(tr, &zeros).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
    }

    #[test]
    fn untouched_embedding_rows_get_no_gradient() {
        let (model, regions, _) = tiny(5);
        let seq = AttributeSequence::new(vec![2, 0], 4).unwrap();
        let tr = model.forward_train(&regions, &[], &seq, None).unwrap();
        let lg = tr.decode.loss_grads();
        let g = model.backward_full(tr, &lg).unwrap();
        // Inputs are start (zero), then rows 2 and 0; the final target 0 feeds nothing.
        assert!(g.embedding.row(2).iter().any(|&v| v != 0.0));
        for r in [1, 3, 4] {
            assert!(g.embedding.row(r).iter().all(|&v| v == 0.0), "row {r}");
        }
    }

    #[test]
    fn loss_grad_count_must_match_steps() {
        let (model, regions, _) = tiny(6);
        let seq = AttributeSequence::new(vec![1], 4).unwrap();
        let tr = model.forward_train(&regions, &[], &seq, None).unwrap();
        assert!(matches!(
            model.backward_full(tr, &[Vector::zeros(5)]),
            Err(JrlError::TapeMismatch(_))
        ));
    }

    #[test]
    fn malformed_target_rejected() {
        let (model, regions, _) = tiny(7);
        let seq = AttributeSequence::new(vec![1], 6).unwrap();
        assert!(matches!(
            model.forward_train(&regions, &[], &seq, None),
            Err(JrlError::MalformedSequence(_))
        ));
    }

    #[test]
    fn dropout_only_with_rng() {
        let (mut model, regions, _) = tiny(8);
        model.config.dropout = 0.5;
        let seq = AttributeSequence::new(vec![3, 1], 4).unwrap();
        let a = model.forward_train(&regions, &[], &seq, None).unwrap();
        let b = model.forward_train(&regions, &[], &seq, None).unwrap();
        assert_eq!(a.decode.logits, b.decode.logits);
        let mut rng = SeededRng::new(1);
        let c = model.forward_train(&regions, &[], &seq, Some(&mut rng)).unwrap();
        assert_ne!(a.decode.logits, c.decode.logits);
    }

    #[test]
    fn projection_encoder_context_is_mean_projection() {
        let mut rng = SeededRng::new(9);
        let mut cfg = ModelConfig::new(4, 3, 2, 3);
        cfg.encoder = false;
        let model = JrlModel::<f64>::new(cfg, &mut rng).unwrap();
        let regions: Vec<Vector<f64>> = (0..3).map(|_| rng.uniform_vector(2, 1.0)).collect();
        let enc = model.encode(&regions).unwrap();
        let mut mean = Vector::zeros(2);
        for r in &regions {
            mean.axpy(1.0 / 3.0, r);
        }
        let RegionEncoder::Projection { w, b } = &model.params.encoder else {
            panic!("expected projection encoder");
        };
        let mut expect = b.clone();
        w.gemv_acc(&mean, &mut expect);
        for j in 0..4 {
            assert!((enc.context[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn f32_model_runs() {
        let mut rng = SeededRng::new(10);
        let model = JrlModel::<f32>::new(ModelConfig::new(4, 2, 3, 3), &mut rng).unwrap();
        let regions: Vec<Vector<f32>> = (0..2).map(|_| rng.uniform_vector(3, 1.0f32)).collect();
        let out = model.predict(&regions, &[]).unwrap();
        assert!(out.tokens.len() <= 4);
    }
}
