//! Configuration presets, the ablation battery and the training-size robustness protocol.

use serde::{Deserialize, Serialize};

use crate::data::{AttributeVocab, Dataset, SynthSpec};
use crate::error::{JrlError, Result};
use crate::eval::{evaluate_models, format_table, EnsembleReport, METRIC_NAMES};
use crate::model::{JrlModel, ModelConfig};
use crate::numerics::{Scalar, SeededRng};
use crate::train::{train_ensemble_members, EnsembleSpec, TrainConfig};

/// A bundle of data, model and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESET_NAMES: [&str; 2] = ["acceptance", "full"];

impl Preset {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "acceptance" => Ok(Self::acceptance()),
            "full" => Ok(Self::full()),
            other => Err(JrlError::InvalidConfig(format!(
                "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
            ))),
        }
    }

    /// Small configuration: d = 32, m = 6, 12 attributes, E = 16, 2000/500 samples.
    pub fn acceptance() -> Self {
        let synth = SynthSpec::default();
        let mut model = ModelConfig::new(32, synth.m, synth.region_dim, synth.n_attr);
        model.embed_dim = 16;
        let train = TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        Preset {
            name: "acceptance".into(),
            synth,
            model,
            train,
        }
    }

    /// Full-size network (d = 512) on the default synthetic layout.
    pub fn full() -> Self {
        let synth = SynthSpec::default();
        let model = ModelConfig::new(512, synth.m, synth.region_dim, synth.n_attr);
        Preset {
            name: "full".into(),
            synth,
            model,
            train: TrainConfig::default(),
        }
    }
}

/// One trained ensemble evaluated on a test split.
#[derive(Clone, Debug)]
pub struct EnsembleOutcome<T> {
    pub models: Vec<JrlModel<T>>,
    pub report: EnsembleReport,
}

/// Trains an ensemble in memory and evaluates it. Any member failure is an error.
pub fn run_ensemble<T: Scalar>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    spec: &EnsembleSpec,
    config: &TrainConfig,
    model: &ModelConfig,
) -> Result<EnsembleOutcome<T>> {
    let runs = train_ensemble_members(train, spec, config, model);
    let mut models = Vec::with_capacity(runs.len());
    for (i, r) in runs.into_iter().enumerate() {
        let run = r.map_err(|e| JrlError::Diverged(format!("member {i}: {e}")))?;
        models.push(run.checkpoint.model);
    }
    let labels = spec
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| format!("{i:02} {}", m.order.kind))
        .collect();
    let (report, _) = evaluate_models(&models, labels, train, test)?;
    Ok(EnsembleOutcome { models, report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub full_label: String,
    pub ablated_label: String,
    pub full: [f64; 4],
    pub ablated: [f64; 4],
    /// `full − ablated`, per metric.
    pub delta: [f64; 4],
}

impl AblationRow {
    fn new(name: &str, full_label: &str, ablated_label: &str, full: [f64; 4], ablated: [f64; 4]) -> Self {
        let mut delta = [0.0; 4];
        for i in 0..4 {
            delta[i] = full[i] - ablated[i];
        }
        AblationRow {
            name: name.into(),
            full_label: full_label.into(),
            ablated_label: ablated_label.into(),
            full,
            ablated,
            delta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ensemble_size: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!("[{}]\n", row.name));
            out.push_str(&format_table(&[
                (row.full_label.clone(), row.full),
                (row.ablated_label.clone(), row.ablated),
                ("delta".into(), row.delta),
            ]));
        }
        out
    }
}

/// Trains the full model and the three single-component ablations as
/// ensembles of `ensemble_size`, and reports four comparisons: encoder vs
/// projection, exemplar context vs none, vote vs member average, attention
/// on vs off.
pub fn ablate<T: Scalar>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    vocab: &AttributeVocab,
    config: &TrainConfig,
    model: &ModelConfig,
    ensemble_size: usize,
) -> Result<AblationReport> {
    if ensemble_size == 0 {
        return Err(JrlError::InvalidConfig("ensemble size must be at least 1".into()));
    }
    let spec = EnsembleSpec::sized(vocab, config.seed, ensemble_size);
    let variant = |f: fn(&mut ModelConfig)| {
        let mut m = model.clone();
        f(&mut m);
        m
    };
    log::info!("ablation: full model");
    let full = run_ensemble(train, test, &spec, config, model)?.report;
    log::info!("ablation: no encoder");
    let no_ac = run_ensemble(train, test, &spec, config, &variant(|m| m.encoder = false))?.report;
    log::info!("ablation: no exemplar context");
    let no_sc = run_ensemble(train, test, &spec, config, &variant(|m| m.context = false))?.report;
    log::info!("ablation: no attention");
    let no_att = run_ensemble(train, test, &spec, config, &variant(|m| m.attention = false))?.report;

    let f = full.ensemble.headline();
    Ok(AblationReport {
        ensemble_size,
        seed: config.seed,
        rows: vec![
            AblationRow::new("intra-person attribute context", "encoder", "no encoder", f, no_ac.ensemble.headline()),
            AblationRow::new(
                "inter-person similarity context",
                &format!("k={}", model.context_k),
                "k=0",
                f,
                no_sc.ensemble.headline(),
            ),
            AblationRow::new("model ensemble", "ensemble", "average", f, full.member_average.headline()),
            AblationRow::new("attribute attention", "attention", "no attention", f, no_att.ensemble.headline()),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub fraction: f64,
    pub n_train: usize,
    pub metrics: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub ensemble_size: usize,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn table(&self) -> String {
        let rows: Vec<(String, [f64; 4])> = self
            .rows
            .iter()
            .map(|r| (format!("{:.0}% ({})", 100.0 * r.fraction, r.n_train), r.metrics))
            .collect();
        format_table(&rows)
    }

    pub fn metric_names() -> [&'static str; 4] {
        METRIC_NAMES
    }
}

pub const ROBUSTNESS_FRACTIONS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];

/// Nested training subsets: one seeded shuffle, each fraction takes a prefix.
pub fn nested_subsets(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut idx);
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                return Err(JrlError::InvalidConfig(format!("subset fraction {f} outside (0, 1]")));
            }
            let take = ((n as f64) * f).round().max(1.0) as usize;
            let mut s = idx[..take.min(n)].to_vec();
            s.sort_unstable();
            Ok(s)
        })
        .collect()
}

/// Retrains the ensemble on nested 100/75/50/25% subsets of the training split
/// and evaluates each on the full test split.
pub fn robustness<T: Scalar>(
    train: &Dataset<T>,
    test: &Dataset<T>,
    vocab: &AttributeVocab,
    config: &TrainConfig,
    model: &ModelConfig,
    ensemble_size: usize,
    fractions: &[f64],
) -> Result<RobustnessReport> {
    let subsets = nested_subsets(train.len(), fractions, config.seed)?;
    let spec = EnsembleSpec::sized(vocab, config.seed, ensemble_size);
    let mut rows = Vec::with_capacity(fractions.len());
    for (&fraction, idx) in fractions.iter().zip(&subsets) {
        let part = train.subset(idx);
        if model.effective_k() >= part.len() {
            return Err(JrlError::PoolTooSmall {
                requested: model.effective_k(),
                available: part.len().saturating_sub(1),
            });
        }
        log::info!("robustness: {} training samples", part.len());
        let out = run_ensemble(&part, test, &spec, config, model)?;
        rows.push(RobustnessRow {
            fraction,
            n_train: part.len(),
            metrics: out.report.ensemble.headline(),
        });
    }
    Ok(RobustnessReport { ensemble_size, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = Preset::by_name("acceptance").unwrap();
        assert_eq!(
            (p.model.hidden_size, p.model.regions, p.model.n_attr, p.model.embed_dim),
            (32, 6, 12, 16)
        );
        assert_eq!((p.synth.n_train, p.synth.n_test), (2000, 500));
        assert!(p.synth.validate().is_ok() && p.model.validate().is_ok() && p.train.validate().is_ok());
        let f = Preset::by_name("full").unwrap();
        assert_eq!(f.model.hidden_size, 512);
        assert_eq!(f.train.learning_rate, 1e-4);
        assert!(Preset::by_name("huge").is_err());
    }

    #[test]
    fn subsets_are_nested_and_sized() {
        let s = nested_subsets(200, &ROBUSTNESS_FRACTIONS, 3).unwrap();
        let sizes: Vec<usize> = s.iter().map(|v| v.len()).collect();
        assert_eq!(sizes, vec![200, 150, 100, 50]);
        for w in s.windows(2) {
            assert!(w[1].iter().all(|i| w[0].contains(i)));
        }
        assert!(nested_subsets(10, &[0.0], 1).is_err());
    }
}
