//! Label-stratified batch sampler.
//!
//! Each batch holds `per_class = max(2, ⌈B/C⌉)` distinct samples from each of
//! `min(C, max(1, ⌊B/per_class⌋))` classes chosen at random, so every anchor
//! in a batch has at least one other positive whenever its class has two or
//! more training clips. An epoch is `⌈n/B⌉` batches.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone)]
pub struct StratifiedSampler {
    by_class: Vec<Vec<usize>>,
    per_class: usize,
    classes_per_batch: usize,
    batches_per_epoch: usize,
}

impl StratifiedSampler {
    /// `items` are (dataset index, label) pairs of the training split.
    pub fn new(items: &[(usize, usize)], batch_size: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        if batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(idx, label) in items {
            groups.entry(label).or_default().push(idx);
        }
        let by_class: Vec<Vec<usize>> = groups.into_values().collect();
        let c = by_class.len();
        let per_class = 2usize.max(batch_size.div_ceil(c));
        let classes_per_batch = c.min(1usize.max(batch_size / per_class));
        Ok(Self { by_class, per_class, classes_per_batch, batches_per_epoch: items.len().div_ceil(batch_size) })
    }

    /// Fails if any class has fewer than two clips (no positive possible).
    pub fn require_pairs(&self) -> Result<()> {
        if let Some(g) = self.by_class.iter().find(|g| g.len() < 2) {
            return Err(Error::Data(format!(
                "class of sample {} has a single training clip; contrastive batches need two",
                g[0]
            )));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    /// The batches of one epoch, fully determined by `(seed, epoch)`.
    pub fn epoch(&self, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = rng::stream(seed, Purpose::Sampler, epoch as u64, 0);
        (0..self.batches_per_epoch)
            .map(|_| {
                let classes = sample(&mut rng, self.by_class.len(), self.classes_per_batch);
                let mut batch = Vec::with_capacity(self.classes_per_batch * self.per_class);
                for c in classes.iter() {
                    let members = &self.by_class[c];
                    let take = self.per_class.min(members.len());
                    batch.extend(sample(&mut rng, members.len(), take).iter().map(|k| members[k]));
                }
                batch
            })
            .collect()
    }
}
