use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributeVocab, Dataset, Granularity, Sample};
use crate::error::{JrlError, Result};
use crate::numerics::{Scalar, Vector};

/// One line of a dataset file.
#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    regions: Vec<Vec<f64>>,
    global: Vec<f64>,
    attrs: Vec<u8>,
}

/// The vocabulary sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub names: Vec<String>,
    #[serde(default)]
    pub region_hint: Option<Vec<usize>>,
    #[serde(default)]
    pub granularity: Option<Vec<Granularity>>,
}

pub fn read_jsonl<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let file = File::open(path).map_err(|e| JrlError::io(path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JrlError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            JrlError::InvalidData(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        samples.push(Sample {
            id: rec.id,
            regions: rec.regions.iter().map(|r| Vector::from_f64(r)).collect(),
            global: Vector::from_f64(&rec.global),
            labels: rec.attrs,
        });
    }
    Dataset::new(samples)
}

pub fn write_jsonl<T: Scalar>(path: &Path, data: &Dataset<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| JrlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &data.samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            regions: s.regions.iter().map(|r| r.to_f64()).collect(),
            global: s.global.to_f64(),
            attrs: s.labels.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| JrlError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| JrlError::io(path, e))?;
    }
    w.flush().map_err(|e| JrlError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<VocabFile> {
    let text = fs::read_to_string(path).map_err(|e| JrlError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| JrlError::InvalidData(format!("{}: {e}", path.display())))
}

pub fn write_vocab(path: &Path, vocab: &VocabFile) -> Result<()> {
    let mut text = serde_json::to_string_pretty(vocab).map_err(|e| JrlError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| JrlError::io(path, e))
}

/// A dataset directory: `train.jsonl`, `test.jsonl` and `vocab.json`.
#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn train_path(&self) -> PathBuf {
        self.root.join("train.jsonl")
    }

    pub fn test_path(&self) -> PathBuf {
        self.root.join("test.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    /// Loads both splits and the vocabulary; frequencies come from the training split.
    pub fn load<T: Scalar>(
        &self,
        vocab_override: Option<&Path>,
    ) -> Result<(Dataset<T>, Dataset<T>, AttributeVocab)> {
        let train = read_jsonl::<T>(&self.train_path())?;
        let test = read_jsonl::<T>(&self.test_path())?;
        let vocab_path = vocab_override.map_or_else(|| self.vocab_path(), Path::to_path_buf);
        let vocab = AttributeVocab::from_sidecar(read_vocab(&vocab_path)?, &train)?;
        let (a, b) = (train.shape()?, test.shape()?);
        if a != b {
            return Err(JrlError::InvalidData(format!(
                "train shape {a:?} differs from test shape {b:?}"
            )));
        }
        if vocab.len() != a.n_attr {
            return Err(JrlError::InvalidData(format!(
                "vocabulary lists {} attributes, data has {}",
                vocab.len(),
                a.n_attr
            )));
        }
        Ok((train, test, vocab))
    }

    pub fn save<T: Scalar>(&self, train: &Dataset<T>, test: &Dataset<T>, vocab: &AttributeVocab) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| JrlError::io(&self.root, e))?;
        write_jsonl(&self.train_path(), train)?;
        write_jsonl(&self.test_path(), test)?;
        write_vocab(&self.vocab_path(), &vocab.to_sidecar())
    }
}
