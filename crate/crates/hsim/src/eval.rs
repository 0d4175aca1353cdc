//! Retrieval evaluation: Recall@K and textual neighbor dumps.
//!
//! Protocol: every sample queries the rest of the set (self excluded),
//! ranked by descending similarity with ties broken by ascending sample
//! index; a query scores at `K` if any of its top-`K` neighbors shares its
//! label.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::SimilarityKind;

#[derive(Debug, Clone, Serialize)]
pub struct RecallReport {
    pub k_values: Vec<usize>,
    pub recalls: Vec<f64>,
    pub n_queries: usize,
}

impl RecallReport {
    /// One CSV row: `n_queries,recall@k1,recall@k2,...` under a matching header.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("n_queries");
        let mut row = format!("{}", self.n_queries);
        for (k, r) in self.k_values.iter().zip(&self.recalls) {
            header.push_str(&format!(",recall@{k}"));
            row.push_str(&format!(",{r:.6}"));
        }
        format!("{header}\n{row}\n")
    }
}

/// Neighbor ranking for one query: all other indices sorted by
/// (similarity desc, index asc).
fn ranked_neighbors(
    embeddings: &[Vec<f64>],
    query: usize,
    kind: SimilarityKind,
) -> Result<Vec<(usize, f64)>> {
    let mut sims: Vec<(usize, f64)> = Vec::with_capacity(embeddings.len() - 1);
    for (j, e) in embeddings.iter().enumerate() {
        if j == query {
            continue;
        }
        sims.push((j, kind.similarity(&embeddings[query], e)?));
    }
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(sims)
}

pub fn recall_at_k(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    k_values: &[usize],
    kind: SimilarityKind,
) -> Result<RecallReport> {
    let n = embeddings.len();
    if n < 2 || labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "need >= 2 samples with matching labels, got {n} embeddings / {} labels",
            labels.len()
        )));
    }
    let mut ks: Vec<usize> = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.first() == Some(&0) {
        return Err(Error::InvalidConfig("k values must be >= 1".into()));
    }
    if let Some(&kmax) = ks.last() {
        if kmax >= n {
            return Err(Error::KTooLarge { k: kmax, n });
        }
    }
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let ranked = ranked_neighbors(embeddings, q, kind)?;
        // First rank (1-based) at which a same-label neighbor appears.
        let first_hit = ranked
            .iter()
            .position(|&(j, _)| labels[j] == labels[q])
            .map(|p| p + 1);
        if let Some(rank) = first_hit {
            for (ki, &k) in ks.iter().enumerate() {
                if rank <= k {
                    hits[ki] += 1;
                }
            }
        }
    }
    let recalls = hits.iter().map(|&h| h as f64 / n as f64).collect();
    Ok(RecallReport {
        k_values: ks,
        recalls,
        n_queries: n,
    })
}

/// Textual neighbor table for the given queries: rank, neighbor id,
/// similarity to six decimals, neighbor label and a hit/miss flag.
pub fn neighbor_dump(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    queries: &[usize],
    top_k: usize,
    kind: SimilarityKind,
) -> Result<String> {
    let n = embeddings.len();
    let mut out = String::from("query\tquery_label\trank\tneighbor\tsimilarity\tneighbor_label\tflag\n");
    for &q in queries {
        if q >= n {
            return Err(Error::IndexOutOfRange { index: q, len: n });
        }
        let ranked = ranked_neighbors(embeddings, q, kind)?;
        for (rank, &(j, s)) in ranked.iter().take(top_k).enumerate() {
            let flag = if labels[j] == labels[q] { "hit" } else { "miss" };
            out.push_str(&format!(
                "{q}\t{}\t{}\t{j}\t{s:.6}\t{}\t{flag}\n",
                labels[q],
                rank + 1,
                labels[j],
            ));
        }
    }
    Ok(out)
}
