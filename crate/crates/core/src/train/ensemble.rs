use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{train_member, write_loss_log, MemberRun, TrainConfig};
use crate::data::{build_orders, AttributeVocab, Dataset, OrderSpec};
use crate::error::{JrlError, Result};
use crate::model::{Checkpoint, ModelConfig};
use crate::numerics::Scalar;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub order: OrderSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
}

impl EnsembleSpec {
    pub const STANDARD_SIZE: usize = 10;

    pub fn new(members: Vec<MemberSpec>) -> Result<Self> {
        if members.is_empty() {
            return Err(JrlError::Empty("ensemble members"));
        }
        let mut seeds = HashSet::new();
        for m in &members {
            if !seeds.insert(m.seed) {
                return Err(JrlError::InvalidConfig(format!("member seed {} repeated", m.seed)));
            }
        }
        Ok(EnsembleSpec { members })
    }

    /// The ten-order ensemble: six policy orders plus four random ones, member
    /// `i` seeded `base_seed + i`.
    pub fn standard(vocab: &AttributeVocab, base_seed: u64) -> Self {
        Self::sized(vocab, base_seed, Self::STANDARD_SIZE)
    }

    /// The first `size` members of the standard construction; sizes above ten
    /// add further random orders.
    pub fn sized(vocab: &AttributeVocab, base_seed: u64, size: usize) -> Self {
        let n_random = size.saturating_sub(6).max(4);
        let members = build_orders(vocab, n_random, base_seed)
            .into_iter()
            .take(size)
            .enumerate()
            .map(|(i, order)| MemberSpec {
                order,
                seed: base_seed.wrapping_add(i as u64),
            })
            .collect();
        EnsembleSpec { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub order: OrderSpec,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub final_loss: Option<f64>,
    pub sha256: Option<String>,
    pub status: MemberStatus,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// False when any member failed.
    pub complete: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub members: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| JrlError::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| JrlError::InvalidData(format!("{}: {e}", path.display())))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(JrlError::InvalidData(format!(
                "{}: manifest version {} is not supported",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| JrlError::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| JrlError::io(path, e))
    }

    /// Loads every member checkpoint listed by the manifest at `path`, verifying hashes.
    pub fn load_members<T: Scalar>(&self, path: &Path) -> Result<Vec<Checkpoint<T>>> {
        if !self.complete {
            return Err(JrlError::InvalidData(format!(
                "{}: ensemble is incomplete",
                path.display()
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        self.members
            .iter()
            .map(|e| {
                let p = dir.join(&e.checkpoint);
                let bytes = fs::read(&p).map_err(|err| JrlError::io(&p, err))?;
                if let Some(expected) = &e.sha256 {
                    let found = sha256_hex(&bytes);
                    if &found != expected {
                        return Err(JrlError::CorruptCheckpoint(format!(
                            "{}: hash {found} differs from manifest {expected}",
                            p.display()
                        )));
                    }
                }
                Checkpoint::from_bytes(&bytes)
            })
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Trains every member independently; results are in spec order.
pub fn train_ensemble_members<T: Scalar>(
    data: &Dataset<T>,
    spec: &EnsembleSpec,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Vec<Result<MemberRun<T>>> {
    spec.members
        .par_iter()
        .map(|m| {
            let cfg = TrainConfig {
                seed: m.seed,
                ..config.clone()
            };
            train_member(data, &m.order, &cfg, model_config)
        })
        .collect()
}

/// Trains the ensemble and writes `member-NN.ckpt`, `member-NN.loss.csv` and
/// `manifest.json` into `out_dir`. Member failures are recorded, not raised.
pub fn train_ensemble<T: Scalar>(
    data: &Dataset<T>,
    spec: &EnsembleSpec,
    config: &TrainConfig,
    model_config: &ModelConfig,
    out_dir: &Path,
) -> Result<Manifest> {
    config.validate()?;
    model_config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| JrlError::io(out_dir, e))?;
    let runs = train_ensemble_members(data, spec, config, model_config);
    let mut members = Vec::with_capacity(runs.len());
    for (i, (m, run)) in spec.members.iter().zip(runs).enumerate() {
        let checkpoint = PathBuf::from(format!("member-{i:02}.ckpt"));
        let loss_log = PathBuf::from(format!("member-{i:02}.loss.csv"));
        let mut entry = ManifestEntry {
            order: m.order.clone(),
            seed: m.seed,
            checkpoint: checkpoint.clone(),
            loss_log: loss_log.clone(),
            final_loss: None,
            sha256: None,
            status: MemberStatus::Failed,
            error: None,
        };
        match run {
            Ok(run) => {
                let bytes = run.checkpoint.to_bytes()?;
                let path = out_dir.join(&checkpoint);
                fs::write(&path, &bytes).map_err(|e| JrlError::io(&path, e))?;
                write_loss_log(&out_dir.join(&loss_log), &run.loss_log)?;
                entry.final_loss = Some(run.final_loss);
                entry.sha256 = Some(sha256_hex(&bytes));
                entry.status = MemberStatus::Ok;
                log::info!("member {i} ({}) final loss {:.4}", m.order.kind, run.final_loss);
            }
            Err(e) => {
                log::error!("member {i} ({}) failed: {e}", m.order.kind);
                entry.error = Some(e.to_string());
            }
        }
        members.push(entry);
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        complete: members.iter().all(|e| e.status == MemberStatus::Ok),
        model: model_config.clone(),
        train: config.clone(),
        members,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
