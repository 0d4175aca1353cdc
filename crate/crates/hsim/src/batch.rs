//! Mini-batch embedding container and per-anchor pair-set construction.

use crate::error::{Error, Result};

/// Embeddings for one mini-batch with labels and augmentation tags.
///
/// `aug_of[j] = Some(i)` marks sample `j` as an augmentation of anchor `i`.
/// Augmentations carry their anchor's label, participate only in their own
/// anchor's augmentation set, and are never anchors themselves.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub aug_of: Vec<Option<usize>>,
    pub epoch: u64,
}

/// Per-anchor index sets: disjoint, anchor excluded from all three.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSets {
    pub anchor: usize,
    pub aug: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

impl EmbeddingBatch {
    /// Batch with no augmentations.
    pub fn plain(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, epoch: u64) -> Self {
        let n = embeddings.len();
        Self {
            embeddings,
            labels,
            aug_of: vec![None; n],
            epoch,
        }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n || self.aug_of.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "batch fields disagree: {} embeddings, {} labels, {} tags",
                n,
                self.labels.len(),
                self.aug_of.len()
            )));
        }
        let dim = self.dim();
        for (i, e) in self.embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: e.len(),
                });
            }
            if e.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite {
                    context: "batch embedding",
                });
            }
            if let Some(a) = self.aug_of[i] {
                if a >= n {
                    return Err(Error::IndexOutOfRange { index: a, len: n });
                }
                if self.aug_of[a].is_some() {
                    return Err(Error::ShapeMismatch(format!(
                        "augmentation {i} points at augmentation {a}"
                    )));
                }
                if self.labels[i] != self.labels[a] {
                    return Err(Error::ShapeMismatch(format!(
                        "augmentation {i} label differs from its anchor {a}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Indices of non-augmentation samples, in batch order.
    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.aug_of[i].is_none())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors().count()
    }

    /// Pair sets for one anchor. Augmentations enter only their own anchor's
    /// augmentation set; positives and negatives are non-augmented samples.
    pub fn pair_sets(&self, anchor: usize) -> PairSets {
        let mut sets = PairSets {
            anchor,
            aug: Vec::new(),
            pos: Vec::new(),
            neg: Vec::new(),
        };
        for j in 0..self.len() {
            if j == anchor {
                continue;
            }
            match self.aug_of[j] {
                Some(a) if a == anchor => sets.aug.push(j),
                Some(_) => {}
                None => {
                    if self.labels[j] == self.labels[anchor] {
                        sets.pos.push(j);
                    } else {
                        sets.neg.push(j);
                    }
                }
            }
        }
        sets
    }
}
