//! Inter-person similarity context: exemplar retrieval in global-feature
//! space and element-wise max fusion of context vectors.

use std::cmp::Ordering;
use std::collections::HashSet;

use crate::error::{check_dim, JrlError, Result};
use crate::numerics::{Scalar, Vector};

/// Retrieval pool over training-image global features.
#[derive(Clone, Debug)]
pub struct ExemplarIndex<T> {
    ids: Vec<String>,
    features: Vec<Vector<T>>,
}

impl<T: Scalar> ExemplarIndex<T> {
    pub fn new(ids: Vec<String>, features: Vec<Vector<T>>) -> Result<Self> {
        check_dim("exemplar index size", ids.len(), features.len())?;
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(JrlError::InvalidData(format!("duplicate exemplar id {id:?}")));
            }
        }
        if let Some(first) = features.first() {
            for f in &features {
                check_dim("exemplar feature", first.len(), f.len())?;
            }
        }
        Ok(ExemplarIndex { ids, features })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    /// Pool positions of the `k` nearest exemplars by L2 distance, ascending;
    /// equal distances are ordered by ascending id.
    pub fn nearest(&self, query: &[T], k: usize, exclude_id: Option<&str>) -> Result<Vec<usize>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut scored: Vec<(T, usize)> = Vec::with_capacity(self.len());
        for (i, f) in self.features.iter().enumerate() {
            if Some(self.ids[i].as_str()) == exclude_id {
                continue;
            }
            check_dim("knn query", f.len(), query.len())?;
            let dist: T = f
                .iter()
                .zip(query)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            scored.push((dist, i));
        }
        if k > scored.len() {
            return Err(JrlError::PoolTooSmall {
                requested: k,
                available: scored.len(),
            });
        }
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored.into_iter().map(|(_, i)| i).collect())
    }

    /// Same as [`Self::nearest`] but returns exemplar ids.
    pub fn knn(&self, query: &[T], k: usize, exclude_id: Option<&str>) -> Result<Vec<&str>> {
        Ok(self
            .nearest(query, k, exclude_id)?
            .into_iter()
            .map(|i| self.ids[i].as_str())
            .collect())
    }
}

/// Per-component record of whether the query vector attained the maximum.
#[derive(Clone, Debug)]
pub struct FuseTape {
    query_wins: Vec<bool>,
}

impl FuseTape {
    /// Tape for fusion with no exemplars: every component routes to the query.
    pub fn identity(len: usize) -> Self {
        FuseTape {
            query_wins: vec![true; len],
        }
    }
}

/// `z*[j] = max(z[j], e_1[j], …, e_k[j])`.
pub fn max_fuse<T: Scalar>(z: &[T], exemplars: &[&[T]]) -> Result<(Vector<T>, FuseTape)> {
    let mut fused = Vector::from(z.to_vec());
    let mut query_wins = vec![true; z.len()];
    for e in exemplars {
        check_dim("max fusion exemplar", z.len(), e.len())?;
        for j in 0..z.len() {
            // Strict: ties stay with the query.
            if e[j] > fused[j] {
                fused[j] = e[j];
                query_wins[j] = false;
            }
        }
    }
    Ok((fused, FuseTape { query_wins }))
}

/// Subgradient of max fusion with respect to the query; exemplars are constants.
pub fn max_fuse_backward<T: Scalar>(tape: &FuseTape, grad_fused: &[T]) -> Result<Vector<T>> {
    if tape.query_wins.len() != grad_fused.len() {
        return Err(JrlError::TapeMismatch(format!(
            "fusion tape covers {} components, gradient has {}",
            tape.query_wins.len(),
            grad_fused.len()
        )));
    }
    Ok(Vector::from(
        tape.query_wins
            .iter()
            .zip(grad_fused)
            .map(|(&w, &g)| if w { g } else { T::zero() })
            .collect::<Vec<_>>(),
    ))
}
