//! Central finite-difference check of every parameter gradient of the full network.

use serde::{Deserialize, Serialize};

use crate::data::AttributeSequence;
use crate::error::Result;
use crate::model::{JrlModel, ModelConfig};
use crate::numerics::{SeededRng, Vector};
use crate::tensor::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub hidden_size: usize,
    pub regions: usize,
    pub region_dim: usize,
    pub n_attr: usize,
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub context_k: usize,
    pub attention: bool,
    pub encoder: bool,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            hidden_size: 6,
            regions: 3,
            region_dim: 4,
            n_attr: 5,
            embed_dim: 4,
            attention_dim: 4,
            context_k: 1,
            attention: true,
            encoder: true,
            epsilon: 1e-5,
            seed: 7,
        }
    }
}

impl GradcheckConfig {
    pub const TOLERANCE: f64 = 1e-4;

    pub fn model_config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.hidden_size, self.regions, self.region_dim, self.n_attr);
        c.embed_dim = self.embed_dim;
        c.attention_dim = self.attention_dim;
        c.context_k = self.context_k;
        c.context = self.context_k > 0;
        c.attention = self.attention;
        c.encoder = self.encoder;
        c.dropout = 0.0;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GradcheckConfig::TOLERANCE
    }
}

/// Denominator floor of [`relative_error`]. Central differences at ε = 1e-5
/// carry round-off near 1e-11 absolute, so smaller gradients cannot be resolved.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a| + |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `backward_full` against central differences of the teacher-forced
/// loss for every scalar parameter. Exemplar contexts are held fixed.
pub fn check_model(
    model: &mut JrlModel<f64>,
    regions: &[Vector<f64>],
    exemplars: &[Vector<f64>],
    target: &AttributeSequence,
    epsilon: f64,
) -> Result<GradcheckReport> {
    let ex: Vec<&[f64]> = exemplars.iter().map(|v| &v[..]).collect();
    let trace = model.forward_train(regions, &ex, target, None)?;
    let lg = trace.decode.loss_grads();
    let grads = model.backward_full(trace, &lg)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let loss_at = |model: &JrlModel<f64>| -> Result<f64> {
        Ok(model.forward_train(regions, &ex, target, None)?.loss())
    };
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        tensors: Vec::with_capacity(analytic.len()),
    };
    for (t, (name, a)) in analytic.iter().enumerate() {
        let mut check = TensorCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (j, &a_j) in a.iter().enumerate() {
            let orig = model.params.tensors_mut()[t][j];
            model.params.tensors_mut()[t][j] = orig + epsilon;
            let up = loss_at(model)?;
            model.params.tensors_mut()[t][j] = orig - epsilon;
            let down = loss_at(model)?;
            model.params.tensors_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = relative_error(a_j, numeric);
            if err > check.max_rel_error || j == 0 {
                check.max_rel_error = err;
                check.worst_index = j;
                check.analytic = a_j;
                check.numeric = numeric;
            }
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.tensors.push(check);
    }
    Ok(report)
}

/// Builds a random instance from `config` and checks it.
pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = SeededRng::new(config.seed);
    let mut model = JrlModel::new(config.model_config(), &mut rng)?;
    // Nonzero output biases keep the head gradient away from symmetric points.
    for v in model.params.head_b.iter_mut() {
        *v = rng.uniform(-0.5, 0.5);
    }
    let regions: Vec<Vector<f64>> = (0..config.regions)
        .map(|_| rng.uniform_vector(config.region_dim, 1.0))
        .collect();
    let exemplars: Vec<Vector<f64>> = (0..config.context_k)
        .map(|_| rng.uniform_vector(config.hidden_size, 0.3))
        .collect();
    let mut attrs: Vec<usize> = (0..config.n_attr).collect();
    rng.shuffle(&mut attrs);
    attrs.truncate(config.n_attr.div_ceil(2));
    let target = AttributeSequence::new(attrs, config.n_attr)?;
    check_model(&mut model, &regions, &exemplars, &target, config.epsilon)
}
