//! Ensemble voting and the class-centric and instance-centric metrics.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sequence_to_labels, AttributeLabels, Dataset};
use crate::error::{check_dim, JrlError, Result};
use crate::model::{ExemplarCache, JrlModel};
use crate::numerics::Scalar;
use crate::train::{check_compatible, Manifest};

/// Attribute `j` is set iff strictly more than half the members set it.
pub fn vote(members: &[&[u8]]) -> Result<AttributeLabels> {
    let first = members.first().ok_or(JrlError::Empty("vote members"))?;
    let n = first.len();
    let mut counts = vec![0usize; n];
    for m in members {
        check_dim("vote member length", n, m.len())?;
        for (c, &v) in counts.iter_mut().zip(m.iter()) {
            *c += (v != 0) as usize;
        }
    }
    Ok(counts.into_iter().map(|c| (2 * c > members.len()) as u8).collect())
}

fn check_aligned(preds: &[AttributeLabels], gts: &[AttributeLabels]) -> Result<usize> {
    check_dim("prediction count", gts.len(), preds.len())?;
    let n_attr = gts.first().map_or(0, |g| g.len());
    for (p, g) in preds.iter().zip(gts) {
        check_dim("ground-truth length", n_attr, g.len())?;
        check_dim("prediction length", n_attr, p.len())?;
    }
    Ok(n_attr)
}

/// Mean over attributes of ½(TPR + TNR). Attributes whose ground truth has a
/// single class get `None` and are left out of the mean.
pub fn map_cls(preds: &[AttributeLabels], gts: &[AttributeLabels]) -> Result<(f64, Vec<Option<f64>>)> {
    let n_attr = check_aligned(preds, gts)?;
    let mut per_attr = Vec::with_capacity(n_attr);
    for j in 0..n_attr {
        let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for (p, g) in preds.iter().zip(gts) {
            if g[j] != 0 {
                pos += 1;
                tp += (p[j] != 0) as usize;
            } else {
                neg += 1;
                tn += (p[j] == 0) as usize;
            }
        }
        if pos == 0 || neg == 0 {
            log::warn!("attribute {j} has a single ground-truth class; excluded from mAP");
            per_attr.push(None);
        } else {
            per_attr.push(Some(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64)));
        }
    }
    let defined: Vec<f64> = per_attr.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(JrlError::InvalidData("no attribute has both classes in the ground truth".into()));
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_attr))
}

/// Per-image precision and recall averaged over images, and F1 of the two
/// means. An empty prediction has precision 1; an empty ground truth has recall 1.
pub fn instance_metrics(preds: &[AttributeLabels], gts: &[AttributeLabels]) -> Result<(f64, f64, f64)> {
    check_aligned(preds, gts)?;
    if gts.is_empty() {
        return Err(JrlError::Empty("instance metrics"));
    }
    let (mut prc, mut rcl) = (0.0, 0.0);
    let (mut empty_pred, mut empty_gt) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        let inter = p.iter().zip(g).filter(|(&a, &b)| a != 0 && b != 0).count();
        let np = p.iter().filter(|&&v| v != 0).count();
        let ng = g.iter().filter(|&&v| v != 0).count();
        prc += if np == 0 {
            empty_pred += 1;
            1.0
        } else {
            inter as f64 / np as f64
        };
        rcl += if ng == 0 {
            empty_gt += 1;
            1.0
        } else {
            inter as f64 / ng as f64
        };
    }
    if empty_pred + empty_gt > 0 {
        log::debug!("{empty_pred} empty predictions, {empty_gt} empty ground truths");
    }
    let n = gts.len() as f64;
    let (mprc, mrcl) = (prc / n, rcl / n);
    let f1 = if mprc + mrcl > 0.0 {
        2.0 * mprc * mrcl / (mprc + mrcl)
    } else {
        0.0
    };
    Ok((mprc, mrcl, f1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_cls: f64,
    pub per_attribute_ap: Vec<Option<f64>>,
    pub mprc_ins: f64,
    pub mrcl_ins: f64,
    pub f1_ins: f64,
}

impl MetricsReport {
    pub fn compute(preds: &[AttributeLabels], gts: &[AttributeLabels]) -> Result<Self> {
        let (map, per_attribute_ap) = map_cls(preds, gts)?;
        let (mprc_ins, mrcl_ins, f1_ins) = instance_metrics(preds, gts)?;
        Ok(MetricsReport {
            map_cls: map,
            per_attribute_ap,
            mprc_ins,
            mrcl_ins,
            f1_ins,
        })
    }

    /// Metric-wise mean of several reports; per-attribute entries average the defined values.
    pub fn average(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or(JrlError::Empty("reports to average"))?;
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let per_attribute_ap = (0..first.per_attribute_ap.len())
            .map(|j| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_attribute_ap[j]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Ok(MetricsReport {
            map_cls: mean(|r| r.map_cls),
            per_attribute_ap,
            mprc_ins: mean(|r| r.mprc_ins),
            mrcl_ins: mean(|r| r.mrcl_ins),
            f1_ins: mean(|r| r.f1_ins),
        })
    }

    /// The four headline metrics in table order.
    pub fn headline(&self) -> [f64; 4] {
        [self.map_cls, self.mprc_ins, self.mrcl_ins, self.f1_ins]
    }
}

pub const METRIC_NAMES: [&str; 4] = ["mAP_cls", "mPrc_ins", "mRcl_ins", "F1_ins"];

/// Aligned text table, values in percent.
pub fn format_table(rows: &[(String, [f64; 4])]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "");
    for name in METRIC_NAMES {
        let _ = write!(out, " {name:>9}");
    }
    out.push('\n');
    for (name, vals) in rows {
        let _ = write!(out, "{name:<width$}");
        for v in vals {
            let _ = write!(out, " {:>9.2}", 100.0 * v);
        }
        out.push('\n');
    }
    out
}

/// Greedy predictions of one model for every image of `data`. Exemplars come
/// from `pool` with nothing excluded.
pub fn predict_dataset<T: Scalar>(
    model: &JrlModel<T>,
    pool: &Dataset<T>,
    data: &Dataset<T>,
) -> Result<Vec<AttributeLabels>> {
    check_compatible(data, &model.config)?;
    let k = model.config.effective_k();
    let cache = if k > 0 { Some(ExemplarCache::build(model, pool)?) } else { None };
    data.samples
        .par_iter()
        .map(|s| {
            let ex = match &cache {
                Some(c) => c.contexts(&c.neighbours(&s.global, k, None)?),
                None => Vec::new(),
            };
            let out = model.predict(&s.regions, &ex)?;
            sequence_to_labels(&out.sequence, model.config.n_attr)
        })
        .collect()
}

/// Voted predictions plus each member's own, member-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub voted: Vec<AttributeLabels>,
    pub members: Vec<Vec<AttributeLabels>>,
}

impl PredictionSet {
    pub fn from_members(members: Vec<Vec<AttributeLabels>>) -> Result<Self> {
        let n_img = members.first().ok_or(JrlError::Empty("ensemble members"))?.len();
        for m in &members {
            check_dim("member prediction count", n_img, m.len())?;
        }
        let voted = (0..n_img)
            .map(|i| {
                let votes: Vec<&[u8]> = members.iter().map(|m| &m[i][..]).collect();
                vote(&votes)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PredictionSet { voted, members })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub ensemble: MetricsReport,
    pub member_average: MetricsReport,
    pub members: Vec<MetricsReport>,
    pub member_labels: Vec<String>,
}

impl EnsembleReport {
    pub fn from_predictions(set: &PredictionSet, gts: &[AttributeLabels], labels: Vec<String>) -> Result<Self> {
        let members = set
            .members
            .iter()
            .map(|p| MetricsReport::compute(p, gts))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleReport {
            ensemble: MetricsReport::compute(&set.voted, gts)?,
            member_average: MetricsReport::average(&members)?,
            members,
            member_labels: labels,
        })
    }

    pub fn table(&self) -> String {
        let mut rows = vec![
            ("ensemble".to_string(), self.ensemble.headline()),
            ("average".to_string(), self.member_average.headline()),
        ];
        for (label, r) in self.member_labels.iter().zip(&self.members) {
            rows.push((label.clone(), r.headline()));
        }
        format_table(&rows)
    }
}

/// Evaluates models against `test`, voting across them.
pub fn evaluate_models<T: Scalar>(
    models: &[JrlModel<T>],
    labels: Vec<String>,
    pool: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<(EnsembleReport, PredictionSet)> {
    let preds = models
        .iter()
        .map(|m| predict_dataset(m, pool, test))
        .collect::<Result<Vec<_>>>()?;
    let set = PredictionSet::from_members(preds)?;
    let report = EnsembleReport::from_predictions(&set, &test.labels(), labels)?;
    Ok((report, set))
}

/// Loads the members listed in a manifest and evaluates them on `test`.
pub fn evaluate_ensemble<T: Scalar>(
    manifest_path: &Path,
    pool: &Dataset<T>,
    test: &Dataset<T>,
) -> Result<(EnsembleReport, PredictionSet)> {
    let manifest = Manifest::load(manifest_path)?;
    let checkpoints = manifest.load_members::<T>(manifest_path)?;
    let labels = manifest
        .members
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{i:02} {}", e.order.kind))
        .collect();
    let models: Vec<JrlModel<T>> = checkpoints.into_iter().map(|c| c.model).collect();
    evaluate_models(&models, labels, pool, test)
}
