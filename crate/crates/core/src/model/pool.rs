use rayon::prelude::*;

use super::JrlModel;
use crate::context::ExemplarIndex;
use crate::data::Dataset;
use crate::error::Result;
use crate::numerics::{Scalar, Vector};

/// Training images indexed by global feature, with their encoder contexts
/// under the most recent parameters.
#[derive(Clone, Debug)]
pub struct ExemplarCache<T> {
    index: ExemplarIndex<T>,
    contexts: Vec<Vector<T>>,
}

impl<T: Scalar> ExemplarCache<T> {
    /// Builds the index and encodes every training image with `model`.
    pub fn build(model: &JrlModel<T>, train: &Dataset<T>) -> Result<Self> {
        let ids = train.samples.iter().map(|s| s.id.clone()).collect();
        let feats = train.samples.iter().map(|s| s.global.clone()).collect();
        let mut cache = ExemplarCache {
            index: ExemplarIndex::new(ids, feats)?,
            contexts: Vec::new(),
        };
        cache.refresh(model, train)?;
        Ok(cache)
    }

    /// Re-encodes the pool with the current parameters.
    pub fn refresh(&mut self, model: &JrlModel<T>, train: &Dataset<T>) -> Result<()> {
        self.contexts = train
            .samples
            .par_iter()
            .map(|s| model.encode(&s.regions).map(|e| e.context))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &ExemplarIndex<T> {
        &self.index
    }

    pub fn neighbours(&self, global: &[T], k: usize, exclude_id: Option<&str>) -> Result<Vec<usize>> {
        if k == 0 {
            return Ok(Vec::new());
        }
        self.index.nearest(global, k, exclude_id)
    }

    /// Neighbour lists for every training image, each excluding the image itself.
    pub fn train_neighbours(&self, train: &Dataset<T>, k: usize) -> Result<Vec<Vec<usize>>> {
        train
            .samples
            .par_iter()
            .map(|s| self.neighbours(&s.global, k, Some(&s.id)))
            .collect()
    }

    pub fn contexts(&self, neighbours: &[usize]) -> Vec<&[T]> {
        neighbours.iter().map(|&i| &self.contexts[i][..]).collect()
    }
}
