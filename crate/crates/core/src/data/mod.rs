//! Samples, attribute vocabulary, emission orders and dataset files.

mod io;
mod order;
mod synth;

pub use io::{read_jsonl, read_vocab, write_jsonl, write_vocab, DataDir, VocabFile};
pub use order::{build_orders, labels_to_sequence, sequence_to_labels, OrderKind, OrderSpec};
pub use synth::{generate_synthetic, SynthSpec, SyntheticData};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, JrlError, Result};
use crate::numerics::{Scalar, Vector};

/// Binary attribute labels, one entry per attribute.
pub type AttributeLabels = Vec<u8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Global,
    Local,
}

/// Attribute names plus the metadata the order policies need.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVocab {
    pub names: Vec<String>,
    /// Positive rate on the training split.
    pub train_frequency: Vec<f64>,
    pub region_hint: Option<Vec<usize>>,
    pub granularity: Option<Vec<Granularity>>,
}

impl AttributeVocab {
    pub fn new(
        names: Vec<String>,
        train_frequency: Vec<f64>,
        region_hint: Option<Vec<usize>>,
        granularity: Option<Vec<Granularity>>,
    ) -> Result<Self> {
        let n = names.len();
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(JrlError::InvalidData(format!("duplicate attribute name {name:?}")));
            }
        }
        check_dim("vocab frequencies", n, train_frequency.len())?;
        if train_frequency.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(JrlError::InvalidData("attribute frequency outside [0, 1]".into()));
        }
        if let Some(h) = &region_hint {
            check_dim("vocab region hints", n, h.len())?;
        }
        if let Some(g) = &granularity {
            check_dim("vocab granularity", n, g.len())?;
        }
        Ok(AttributeVocab {
            names,
            train_frequency,
            region_hint,
            granularity,
        })
    }

    /// Combines a sidecar file with frequencies measured on `train`.
    pub fn from_sidecar<T: Scalar>(file: VocabFile, train: &Dataset<T>) -> Result<Self> {
        let freq = train.label_frequencies(file.names.len())?;
        AttributeVocab::new(file.names, freq, file.region_hint, file.granularity)
    }

    pub fn to_sidecar(&self) -> VocabFile {
        VocabFile {
            names: self.names.clone(),
            region_hint: self.region_hint.clone(),
            granularity: self.granularity.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Ordered attribute indices; the stop token is implicit and always last.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeSequence {
    attrs: Vec<usize>,
    n_attr: usize,
}

impl AttributeSequence {
    pub fn new(attrs: Vec<usize>, n_attr: usize) -> Result<Self> {
        let mut seen = vec![false; n_attr];
        for &a in &attrs {
            if a >= n_attr {
                return Err(JrlError::MalformedSequence(format!(
                    "token {a} out of range for {n_attr} attributes"
                )));
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(JrlError::MalformedSequence(format!("attribute {a} repeated")));
            }
        }
        Ok(AttributeSequence { attrs, n_attr })
    }

    /// Parses an explicit token list; the stop token (`n_attr`) must appear exactly once, last.
    pub fn from_tokens(tokens: &[usize], n_attr: usize) -> Result<Self> {
        match tokens.split_last() {
            Some((&last, body)) if last == n_attr => {
                if body.contains(&n_attr) {
                    return Err(JrlError::MalformedSequence("stop token before the end".into()));
                }
                AttributeSequence::new(body.to_vec(), n_attr)
            }
            _ => Err(JrlError::MalformedSequence("sequence must end with the stop token".into())),
        }
    }

    pub fn stop_token(&self) -> usize {
        self.n_attr
    }

    pub fn n_attr(&self) -> usize {
        self.n_attr
    }

    pub fn attrs(&self) -> &[usize] {
        &self.attrs
    }

    /// Attribute tokens followed by the stop token.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.attrs.clone();
        t.push(self.n_attr);
        t
    }

    /// Number of decode steps, stop included.
    pub fn len(&self) -> usize {
        self.attrs.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One image: `m` region features, a global feature for retrieval, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub regions: Vec<Vector<T>>,
    pub global: Vector<T>,
    pub labels: AttributeLabels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

/// Feature and label dimensions shared by every sample of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetShape {
    pub m: usize,
    pub region_dim: usize,
    pub global_dim: usize,
    pub n_attr: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Result<Self> {
        let ds = Dataset { samples };
        ds.shape()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Validates dimensional consistency and returns the common shape.
    pub fn shape(&self) -> Result<DatasetShape> {
        let first = self.samples.first().ok_or(JrlError::Empty("dataset"))?;
        let shape = DatasetShape {
            m: first.regions.len(),
            region_dim: first.regions.first().map_or(0, |r| r.len()),
            global_dim: first.global.len(),
            n_attr: first.labels.len(),
        };
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(JrlError::InvalidData(format!("duplicate sample id {:?}", s.id)));
            }
            check_dim("sample region count", shape.m, s.regions.len())?;
            for r in &s.regions {
                check_dim("sample region dim", shape.region_dim, r.len())?;
                if !r.is_finite() {
                    return Err(JrlError::NonFinite(format!("regions of sample {}", s.id)));
                }
            }
            check_dim("sample global dim", shape.global_dim, s.global.len())?;
            check_dim("sample labels", shape.n_attr, s.labels.len())?;
            if s.labels.iter().any(|&l| l > 1) {
                return Err(JrlError::InvalidData(format!("non-binary label in sample {}", s.id)));
            }
        }
        Ok(shape)
    }

    /// Per-attribute positive rate.
    pub fn label_frequencies(&self, n_attr: usize) -> Result<Vec<f64>> {
        if self.samples.is_empty() {
            return Err(JrlError::Empty("dataset"));
        }
        let mut counts = vec![0usize; n_attr];
        for s in &self.samples {
            check_dim("sample labels", n_attr, s.labels.len())?;
            for (c, &l) in counts.iter_mut().zip(&s.labels) {
                *c += l as usize;
            }
        }
        let n = self.samples.len() as f64;
        Ok(counts.into_iter().map(|c| c as f64 / n).collect())
    }

    /// Samples at the given positions, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn labels(&self) -> Vec<AttributeLabels> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }
}
