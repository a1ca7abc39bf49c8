//! Synthetic region-feature data with chain-correlated attributes.
//!
//! Labels follow a Markov chain over attribute index: attribute `j` is drawn
//! conditioned on attribute `j-1` so that, before clamping, every marginal
//! equals its base rate and the correlation between neighbours equals
//! `correlation_strength`. Each local attribute lives in one region; global
//! attributes cover all regions. Within a region the signatures of the
//! attributes covering it are orthonormal.

use serde::{Deserialize, Serialize};

use super::{AttributeVocab, Dataset, Granularity, Sample};
use crate::error::{JrlError, Result};
use crate::numerics::{Scalar, SeededRng, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_attr: usize,
    pub m: usize,
    pub region_dim: usize,
    /// Must equal `region_dim`: the global feature is the mean region feature.
    pub global_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    /// Correlation between neighbouring attributes in the label chain, in `[0, 1)`.
    pub correlation_strength: f64,
    /// Attributes spanning every region (granularity `global`).
    pub n_global: usize,
    pub min_rate: f64,
    pub max_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_attr: 12,
            m: 6,
            region_dim: 16,
            global_dim: 16,
            n_train: 2000,
            n_test: 500,
            noise_sigma: 0.3,
            correlation_strength: 0.8,
            n_global: 2,
            min_rate: 0.1,
            max_rate: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(JrlError::InvalidConfig(msg));
        if self.n_attr == 0 || self.m == 0 || self.region_dim == 0 {
            return bad("n_attr, m and region_dim must be positive".into());
        }
        if self.global_dim != self.region_dim {
            return bad(format!(
                "global_dim {} must equal region_dim {} (global feature is the mean region feature)",
                self.global_dim, self.region_dim
            ));
        }
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if !(0.0..1.0).contains(&self.correlation_strength) {
            return bad("correlation_strength must lie in [0, 1)".into());
        }
        if self.n_global > self.n_attr {
            return bad("n_global exceeds n_attr".into());
        }
        if !(0.0 < self.min_rate && self.min_rate <= self.max_rate && self.max_rate < 1.0) {
            return bad("rates must satisfy 0 < min_rate <= max_rate < 1".into());
        }
        let n_local = self.n_attr - self.n_global;
        let per_region = n_local.div_ceil(self.m) + self.n_global;
        if per_region > self.region_dim {
            return bad(format!(
                "{per_region} attributes share a region but region_dim is {}",
                self.region_dim
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub vocab: AttributeVocab,
    /// Base positive rate of each attribute.
    pub base_rates: Vec<f64>,
    /// `signatures[r]` lists `(attribute, unit vector)` for every attribute covering region `r`.
    pub signatures: Vec<Vec<(usize, Vector<T>)>>,
}

fn orthonormal_set<T: Scalar>(count: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vector<T>> {
    let mut basis: Vec<Vector<T>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vector<T> = Vector::from_fn(dim, |_| rng.normal());
        for b in &basis {
            let proj = v.dot(b);
            v.axpy(-proj, b);
        }
        let norm = v.squared_norm().sqrt();
        if norm > T::lit(1e-6) {
            v.scale(T::one() / norm);
            basis.push(v);
        }
    }
    basis
}

fn sample_labels(rates: &[f64], rho: f64, rng: &mut SeededRng) -> Vec<u8> {
    let mut labels = Vec::with_capacity(rates.len());
    for (j, &p) in rates.iter().enumerate() {
        let prob = if j == 0 {
            p
        } else {
            let q = rates[j - 1];
            // Scale so corr(a_j, a_{j-1}) = rho when no clamping occurs.
            let kappa = (p * (1.0 - p) / (q * (1.0 - q))).sqrt();
            let prev = labels[j - 1] as f64;
            (p + rho * kappa * (prev - q)).clamp(0.0, 1.0)
        };
        labels.push(rng.bernoulli(prob) as u8);
    }
    labels
}

pub fn generate_synthetic<T: Scalar>(spec: &SynthSpec, rng: &mut SeededRng) -> Result<SyntheticData<T>> {
    spec.validate()?;
    let n = spec.n_attr;

    let base_rates: Vec<f64> = (0..n)
        .map(|_| spec.min_rate + (spec.max_rate - spec.min_rate) * rng.unit())
        .collect();

    let mut attr_order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut attr_order);
    let mut granularity = vec![Granularity::Local; n];
    for &a in &attr_order[..spec.n_global] {
        granularity[a] = Granularity::Global;
    }
    let mut region_cycle: Vec<usize> = (0..spec.m).collect();
    rng.shuffle(&mut region_cycle);
    let mut region_hint = vec![0usize; n];
    let mut covers: Vec<Vec<usize>> = vec![Vec::new(); spec.m];
    let mut local_count = 0;
    for a in 0..n {
        match granularity[a] {
            Granularity::Global => {
                for c in covers.iter_mut() {
                    c.push(a);
                }
            }
            Granularity::Local => {
                let r = region_cycle[local_count % spec.m];
                local_count += 1;
                region_hint[a] = r;
                covers[r].push(a);
            }
        }
    }

    let signatures: Vec<Vec<(usize, Vector<T>)>> = covers
        .iter()
        .map(|attrs| {
            let basis = orthonormal_set::<T>(attrs.len(), spec.region_dim, rng);
            attrs.iter().copied().zip(basis).collect()
        })
        .collect();

    let sigma = T::lit(spec.noise_sigma);
    let inv_m = T::one() / T::lit(spec.m as f64);
    let make = |prefix: &str, count: usize, rng: &mut SeededRng| -> Vec<Sample<T>> {
        (0..count)
            .map(|i| {
                let labels = sample_labels(&base_rates, spec.correlation_strength, rng);
                let mut regions = Vec::with_capacity(spec.m);
                let mut global = Vector::zeros(spec.region_dim);
                for sigs in &signatures {
                    let mut feat: Vector<T> = Vector::zeros(spec.region_dim);
                    for (a, sig) in sigs {
                        if labels[*a] == 1 {
                            feat.add_assign(sig);
                        }
                    }
                    for v in feat.iter_mut() {
                        *v += sigma * rng.normal::<T>();
                    }
                    global.axpy(inv_m, &feat);
                    regions.push(feat);
                }
                Sample {
                    id: format!("{prefix}-{i:05}"),
                    regions,
                    global,
                    labels,
                }
            })
            .collect()
    };
    let train = Dataset::new(make("train", spec.n_train, rng))?;
    let test = if spec.n_test > 0 {
        Dataset::new(make("test", spec.n_test, rng))?
    } else {
        Dataset { samples: Vec::new() }
    };

    let names = (0..n).map(|a| format!("attr_{a:02}")).collect();
    let freq = train.label_frequencies(n)?;
    let vocab = AttributeVocab::new(names, freq, Some(region_hint), Some(granularity))?;
    Ok(SyntheticData {
        train,
        test,
        vocab,
        base_rates,
        signatures,
    })
}
