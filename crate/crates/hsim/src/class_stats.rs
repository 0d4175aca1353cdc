//! Class-wise divergence statistics: the symmetric intra/inter similarity
//! matrix, its rescaling into `[0, 0.2]`, and per-class minimum intra-class
//! similarity.

use crate::error::{Error, Result};
use crate::geometry::SimilarityKind;

/// Symmetric `c x c` table of class similarity statistics.
///
/// The diagonal holds average intra-class similarity (unordered pairs,
/// coefficient `2/(n_a^2 - n_a)`); off-diagonal entries hold average
/// cross-class similarity over all `n_a * n_b` pairs. Singleton classes get
/// a diagonal of `1.0` by convention (no spread evidence).
#[derive(Debug, Clone)]
pub struct ClassSimilarityMatrix {
    entries: Vec<f64>,
    class_sizes: Vec<usize>,
    epoch: u64,
}

impl ClassSimilarityMatrix {
    /// Builds a matrix from a flat row-major `c x c` table. The table must be
    /// symmetric and finite; used when statistics come from somewhere other
    /// than [`class_similarity_matrix`] (tests, serialized snapshots).
    pub fn from_entries(entries: Vec<f64>, class_sizes: Vec<usize>, epoch: u64) -> Result<Self> {
        let c = class_sizes.len();
        if entries.len() != c * c {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries for {} classes, got {}",
                c * c,
                c,
                entries.len()
            )));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite {
                context: "class similarity entries",
            });
        }
        for a in 0..c {
            for b in 0..c {
                if entries[a * c + b] != entries[b * c + a] {
                    return Err(Error::ShapeMismatch(format!(
                        "entries not symmetric at ({a},{b})"
                    )));
                }
            }
        }
        if class_sizes.iter().any(|&n| n == 0) {
            return Err(Error::EmptyClass {
                class: class_sizes.iter().position(|&n| n == 0).unwrap(),
            });
        }
        Ok(Self {
            entries,
            class_sizes,
            epoch,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.entries[a * self.num_classes() + b]
    }

    pub fn class_sizes(&self) -> &[usize] {
        &self.class_sizes
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

/// Groups sample indices by class, erroring on any empty class id in `[0, c)`.
pub(crate) fn indices_by_class(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let c = labels.iter().max().unwrap() + 1;
    let mut by_class = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass { class });
        }
    }
    Ok(by_class)
}

/// Builds the class similarity matrix over the given embeddings.
///
/// Summation runs in sorted sample-index order so the result is
/// bit-reproducible for a fixed input ordering.
pub fn class_similarity_matrix(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    kind: SimilarityKind,
    epoch: u64,
) -> Result<ClassSimilarityMatrix> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings vs {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let by_class = indices_by_class(labels)?;
    let c = by_class.len();
    let mut entries = vec![0.0; c * c];

    for (a, members) in by_class.iter().enumerate() {
        let n = members.len();
        if n == 1 {
            entries[a * c + a] = 1.0;
            continue;
        }
        let mut sum = 0.0;
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                sum += kind.similarity(&embeddings[i], &embeddings[j])?;
            }
        }
        entries[a * c + a] = 2.0 / ((n * n - n) as f64) * sum;
    }

    for a in 0..c {
        for b in (a + 1)..c {
            let mut sum = 0.0;
            for &i in &by_class[a] {
                for &j in &by_class[b] {
                    sum += kind.similarity(&embeddings[i], &embeddings[j])?;
                }
            }
            let v = sum / (by_class[a].len() * by_class[b].len()) as f64;
            entries[a * c + b] = v;
            entries[b * c + a] = v;
        }
    }

    Ok(ClassSimilarityMatrix {
        entries,
        class_sizes: by_class.iter().map(Vec::len).collect(),
        epoch,
    })
}

/// Result of the min-max rescale into `[0, 0.2]`.
#[derive(Debug, Clone)]
pub struct RescaledSet {
    pub values: Vec<f64>,
    /// Indices of the source values sorted ascending (stable), recording the
    /// ordering the rescale must preserve.
    pub source_order: Vec<usize>,
}

/// Affine map `v -> 0.2 (v - min) / (max - min)`.
///
/// A degenerate set (all values equal, or a single value) maps to all zeros,
/// collapsing the adaptive margins back to the fixed-margin baseline.
pub fn rescale_to_unit_fifth(values: &[f64]) -> RescaledSet {
    let mut source_order: Vec<usize> = (0..values.len()).collect();
    source_order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());

    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rescaled = if values.is_empty() || max == min {
        vec![0.0; values.len()]
    } else {
        values
            .iter()
            .map(|v| 0.2 * ((v - min) / (max - min)).clamp(0.0, 1.0))
            .collect()
    };
    RescaledSet {
        values: rescaled,
        source_order,
    }
}

/// Minimum pairwise intra-class similarity for `class_id`.
/// Singleton classes return `1.0` so the consistency constraint degenerates
/// to "augmentations at least as close as the anchor itself".
pub fn min_intra_similarity(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_id: usize,
    kind: SimilarityKind,
) -> Result<f64> {
    intra_extremum(embeddings, labels, class_id, kind, false)
}

/// Min (or max) pairwise intra-class similarity; singleton classes map to 1.0.
pub(crate) fn intra_extremum(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    class_id: usize,
    kind: SimilarityKind,
    take_max: bool,
) -> Result<f64> {
    let members: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == class_id)
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return Err(Error::EmptyClass { class: class_id });
    }
    if members.len() == 1 {
        return Ok(1.0);
    }
    let mut acc = if take_max {
        f64::NEG_INFINITY
    } else {
        f64::INFINITY
    };
    for (k, &i) in members.iter().enumerate() {
        for &j in &members[k + 1..] {
            let s = kind.similarity(&embeddings[i], &embeddings[j])?;
            acc = if take_max { acc.max(s) } else { acc.min(s) };
        }
    }
    Ok(acc)
}

/// Deterministic per-class subsample: keeps at most `cap` indices per class,
/// in ascending index order. Used to bound the epoch statistics pass.
pub fn subsample_per_class(labels: &[usize], cap: usize) -> Vec<usize> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut taken = vec![0usize; c];
    let mut keep = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if taken[l] < cap {
            taken[l] += 1;
            keep.push(i);
        }
    }
    keep
}
