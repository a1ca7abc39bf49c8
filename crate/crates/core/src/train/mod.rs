//! Optimizer, the single-order training loop and ensemble orchestration.

mod adam;
mod ensemble;

pub use adam::{clip_global_norm, AdamState};
pub use ensemble::{
    train_ensemble, train_ensemble_members, EnsembleSpec, Manifest, ManifestEntry, MemberSpec, MemberStatus,
    MANIFEST_VERSION, sha256_hex,
};

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{labels_to_sequence, AttributeSequence, Dataset, OrderSpec};
use crate::error::{JrlError, Result};
use crate::model::{Checkpoint, ExemplarCache, JrlModel, JrlParams, ModelConfig};
use crate::numerics::{Scalar, SeededRng};
use crate::tensor::ParamSet;

/// Samples whose forward/backward passes are in flight at once; bounds gradient memory.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Apply the model's dropout rate during training.
    pub dropout: bool,
    /// Global-norm gradient clip threshold, if any.
    pub clip: Option<f64>,
    /// Epochs between exemplar context refreshes.
    pub refresh_every: usize,
    /// Fraction of the training split held out for validation loss; 0 disables.
    pub validation_fraction: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            learning_rate: 1e-4,
            dropout: true,
            clip: None,
            refresh_every: 1,
            validation_fraction: 0.0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub const DEFAULT_CLIP: f64 = 5.0;

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(JrlError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.refresh_every == 0 {
            return Err(JrlError::InvalidConfig("refresh_every must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(JrlError::InvalidConfig("learning rate must be positive".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(JrlError::InvalidConfig("clip threshold must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(JrlError::InvalidConfig("validation_fraction must lie in [0, 1)".into()));
        }
        if self.patience.is_some() && self.validation_fraction == 0.0 {
            return Err(JrlError::InvalidConfig("early stopping needs a validation split".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean per-step cross-entropy over the epoch's samples, dropout active.
    pub loss: f64,
    pub validation_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MemberRun<T> {
    pub checkpoint: Checkpoint<T>,
    pub loss_log: Vec<EpochLoss>,
    /// Mean loss over the training samples with dropout off, after training.
    pub final_loss: f64,
}

pub fn write_loss_log(path: &Path, log: &[EpochLoss]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| JrlError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| JrlError::io(path, std::io::Error::other(e));
    w.write_record(["epoch", "loss", "validation_loss"]).map_err(csv_err)?;
    for e in log {
        let val = e.validation_loss.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.epoch.to_string(), e.loss.to_string(), val]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| JrlError::io(path, e))?;
    let mut inner = w.into_inner().map_err(|e| JrlError::io(path, std::io::Error::other(e.to_string())))?;
    inner.flush().map_err(|e| JrlError::io(path, e))
}

/// Checks that a dataset fits a model configuration.
pub fn check_compatible<T: Scalar>(data: &Dataset<T>, config: &ModelConfig) -> Result<()> {
    let shape = data.shape()?;
    let pairs = [
        ("regions per image", config.regions, shape.m),
        ("region feature dim", config.region_dim, shape.region_dim),
        ("attribute count", config.n_attr, shape.n_attr),
    ];
    for (what, want, got) in pairs {
        if want != got {
            return Err(JrlError::InvalidData(format!(
                "{what}: model expects {want}, data has {got}"
            )));
        }
    }
    Ok(())
}

/// Training state shared by the loss and gradient passes of one member.
struct Loop<'a, T> {
    data: &'a Dataset<T>,
    targets: Vec<AttributeSequence>,
    /// Neighbours of each training sample in the exemplar pool, self excluded.
    neighbours: Vec<Vec<usize>>,
}

impl<T: Scalar> Loop<'_, T> {
    fn sample_pass(
        &self,
        model: &JrlModel<T>,
        cache: Option<&ExemplarCache<T>>,
        i: usize,
        dropout_seed: Option<u64>,
        with_grad: bool,
    ) -> Result<(f64, Option<JrlParams<T>>)> {
        let s = &self.data.samples[i];
        let ex = match cache {
            Some(c) => c.contexts(&self.neighbours[i]),
            None => Vec::new(),
        };
        let mut rng = dropout_seed.map(SeededRng::new);
        let trace = model.forward_train(&s.regions, &ex, &self.targets[i], rng.as_mut())?;
        let loss = trace.loss().to_f64_lossy();
        if !loss.is_finite() {
            return Err(JrlError::Diverged(format!("non-finite loss on sample {}", s.id)));
        }
        if !with_grad {
            return Ok((loss, None));
        }
        let lg = trace.decode.loss_grads();
        Ok((loss, Some(model.backward_full(trace, &lg)?)))
    }

    fn mean_loss(&self, model: &JrlModel<T>, cache: Option<&ExemplarCache<T>>, idx: &[usize]) -> Result<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let losses = idx
            .par_iter()
            .map(|&i| self.sample_pass(model, cache, i, None, false).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(losses.iter().sum::<f64>() / idx.len() as f64)
    }
}

/// Mean per-step loss over `data` with dropout off; exemplars are drawn from
/// `pool` with each sample's own id excluded.
pub fn dataset_loss<T: Scalar>(
    model: &JrlModel<T>,
    data: &Dataset<T>,
    pool: &Dataset<T>,
    order: &OrderSpec,
) -> Result<f64> {
    check_compatible(data, &model.config)?;
    let k = model.config.effective_k();
    let cache = if k > 0 { Some(ExemplarCache::build(model, pool)?) } else { None };
    let neighbours = match &cache {
        Some(c) => data
            .samples
            .iter()
            .map(|s| c.neighbours(&s.global, k, Some(&s.id)))
            .collect::<Result<Vec<_>>>()?,
        None => vec![Vec::new(); data.len()],
    };
    let targets = data
        .samples
        .iter()
        .map(|s| labels_to_sequence(&s.labels, order))
        .collect::<Result<Vec<_>>>()?;
    let lp = Loop {
        data,
        targets,
        neighbours,
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    lp.mean_loss(model, cache.as_ref(), &idx)
}

/// Trains one network under a fixed emission order.
///
/// The returned checkpoint is stamped with `order`. With zero epochs it holds
/// the initialization.
pub fn train_member<T: Scalar>(
    data: &Dataset<T>,
    order: &OrderSpec,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<MemberRun<T>> {
    config.validate()?;
    model_config.validate()?;
    check_compatible(data, model_config)?;
    if order.len() != model_config.n_attr {
        return Err(JrlError::InvalidConfig(format!(
            "order covers {} attributes, model has {}",
            order.len(),
            model_config.n_attr
        )));
    }

    let root = SeededRng::new(config.seed);
    let mut model = JrlModel::new(model_config.clone(), &mut root.fork(0))?;
    let mut shuffle_rng = root.fork(1);

    let mut all: Vec<usize> = (0..data.len()).collect();
    let (train_idx, val_idx) = if config.validation_fraction > 0.0 {
        root.fork(2).shuffle(&mut all);
        let n_val = ((data.len() as f64) * config.validation_fraction).round() as usize;
        let n_val = n_val.clamp(1, data.len().saturating_sub(1).max(1));
        let val = all.split_off(data.len() - n_val);
        all.sort_unstable();
        (all, val)
    } else {
        (all, Vec::new())
    };
    if train_idx.is_empty() {
        return Err(JrlError::Empty("training split"));
    }

    let k = model_config.effective_k();
    let pool = data.subset(&train_idx);
    let mut cache = if k > 0 { Some(ExemplarCache::build(&model, &pool)?) } else { None };
    let neighbours = match &cache {
        Some(c) => data
            .samples
            .iter()
            .map(|s| c.neighbours(&s.global, k, Some(&s.id)))
            .collect::<Result<Vec<_>>>()?,
        None => vec![Vec::new(); data.len()],
    };
    let targets = data
        .samples
        .iter()
        .map(|s| labels_to_sequence(&s.labels, order))
        .collect::<Result<Vec<_>>>()?;
    let lp = Loop {
        data,
        targets,
        neighbours,
    };

    let mut adam = AdamState::new(&model.params, config.learning_rate);
    let use_dropout = config.dropout && model_config.dropout > 0.0;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, JrlParams<T>)> = None;
    let mut since_best = 0usize;
    let mut order_idx = train_idx.clone();

    for epoch in 0..config.epochs {
        if epoch > 0 && epoch % config.refresh_every == 0 {
            if let Some(c) = cache.as_mut() {
                c.refresh(&model, &pool)?;
            }
        }
        shuffle_rng.shuffle(&mut order_idx);
        let mut epoch_loss = 0.0;
        for batch in order_idx.chunks(config.batch_size) {
            let seeds: Vec<Option<u64>> = batch
                .iter()
                .map(|_| use_dropout.then(|| rand::RngCore::next_u64(&mut shuffle_rng)))
                .collect();
            let mut grads = model.params.zeros_like();
            for (chunk, chunk_seeds) in batch.chunks(CHUNK).zip(seeds.chunks(CHUNK)) {
                let results = chunk
                    .par_iter()
                    .zip(chunk_seeds)
                    .map(|(&i, &seed)| lp.sample_pass(&model, cache.as_ref(), i, seed, true))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| annotate(e, epoch))?;
                for (loss, g) in results {
                    epoch_loss += loss;
                    grads.accumulate(&g.expect("gradient requested"));
                }
            }
            grads.scale_all(T::one() / T::lit(batch.len() as f64));
            if let Some(c) = config.clip {
                clip_global_norm(&mut grads, c);
            }
            adam.step(&mut model.params, &grads)?;
        }
        let loss = epoch_loss / order_idx.len() as f64;
        let validation_loss = if val_idx.is_empty() {
            None
        } else {
            Some(lp.mean_loss(&model, cache.as_ref(), &val_idx)?)
        };
        log::debug!("epoch {epoch}: loss {loss:.6}");
        log.push(EpochLoss {
            epoch,
            loss,
            validation_loss,
        });
        if let (Some(v), Some(patience)) = (validation_loss, config.patience) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    if let Some(c) = cache.as_mut() {
        c.refresh(&model, &pool)?;
    }
    let final_loss = lp.mean_loss(&model, cache.as_ref(), &train_idx)?;
    Ok(MemberRun {
        checkpoint: Checkpoint::new(model, Some(order.clone())),
        loss_log: log,
        final_loss,
    })
}

fn annotate(e: JrlError, epoch: usize) -> JrlError {
    match e {
        JrlError::Diverged(msg) => JrlError::Diverged(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn tiny_data() -> Dataset<f64> {
        let spec = SynthSpec {
            n_attr: 4,
            m: 3,
            region_dim: 4,
            global_dim: 4,
            n_train: 12,
            n_test: 0,
            n_global: 1,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, &mut SeededRng::new(1)).unwrap().train
    }

    fn tiny_model() -> ModelConfig {
        let mut c = ModelConfig::new(5, 3, 4, 4);
        c.embed_dim = 3;
        c.attention_dim = 4;
        c
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = train_member(&data, &OrderSpec::identity(4), &cfg, &tiny_model()).unwrap();
        let init = JrlModel::<f64>::new(tiny_model(), &mut SeededRng::new(4).fork(0)).unwrap();
        assert_eq!(run.checkpoint.model, init);
        assert!(run.loss_log.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let a = train_member(&data, &OrderSpec::identity(4), &cfg, &tiny_model()).unwrap();
        let b = train_member(&data, &OrderSpec::identity(4), &cfg, &tiny_model()).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn loss_decreases_with_training() {
        let data = tiny_data();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            seed: 3,
            learning_rate: 1e-2,
            dropout: false,
            ..TrainConfig::default()
        };
        let run = train_member(&data, &OrderSpec::identity(4), &cfg, &tiny_model()).unwrap();
        assert!(run.loss_log.last().unwrap().loss < 0.7 * run.loss_log[0].loss);
        let direct = dataset_loss(&run.checkpoint.model, &data, &data, &OrderSpec::identity(4)).unwrap();
        assert!((direct - run.final_loss).abs() < 1e-12);
    }

    #[test]
    fn early_stopping_needs_validation() {
        let cfg = TrainConfig {
            patience: Some(2),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            epochs: 4,
            patience: Some(1),
            validation_fraction: 0.25,
            ..TrainConfig::default()
        };
        let run = train_member(&tiny_data(), &OrderSpec::identity(4), &cfg, &tiny_model()).unwrap();
        assert!(run.loss_log.iter().all(|e| e.validation_loss.is_some()));
    }

    #[test]
    fn incompatible_data_rejected() {
        let mut mc = tiny_model();
        mc.n_attr = 5;
        let err = train_member(&tiny_data(), &OrderSpec::identity(5), &TrainConfig::default(), &mc).unwrap_err();
        assert!(matches!(err, JrlError::InvalidData(_)));
    }

    #[test]
    fn loss_log_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let log = vec![
            EpochLoss { epoch: 0, loss: 1.5, validation_loss: None },
            EpochLoss { epoch: 1, loss: 0.75, validation_loss: Some(0.5) },
        ];
        write_loss_log(&p, &log).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,loss,validation_loss\n0,1.5,\n1,0.75,0.5\n");
    }
}
