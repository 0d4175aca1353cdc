//! Pair-based metric losses with analytic gradients.
//!
//! Everything is expressed in similarity semantics: larger values mean more
//! alike, for both cosine and the hyperbolic `exp(-d)` mode. The fixed-margin
//! forms (`triplet`, `lifted`, `ms`) are the published baselines; the starred
//! forms substitute the per-class / per-class-pair margins of a
//! [`MarginTable`] and, for `ms_star` and `triplet_star`, add the
//! augmentation-consistency term.

use crate::batch::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::geometry::SimilarityKind;
use crate::margins::MarginTable;

/// Scalar loss value plus the gradient for every embedding in the batch.
/// Gradients are exactly zero for embeddings participating in no active pair.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossResult {
    fn zeros(batch: &EmbeddingBatch) -> Self {
        Self {
            value: 0.0,
            grads: batch
                .embeddings
                .iter()
                .map(|e| vec![0.0; e.len()])
                .collect(),
        }
    }
}

/// Scales of the three multi-similarity terms: `rho` for augmentations,
/// `varrho` for positives, `sigma` for negatives.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MsHyperParams {
    pub rho: f64,
    pub varrho: f64,
    pub sigma: f64,
}

impl Default for MsHyperParams {
    fn default() -> Self {
        Self {
            rho: 2.0,
            varrho: 2.0,
            sigma: 40.0,
        }
    }
}

impl MsHyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("varrho", self.varrho),
            ("sigma", self.sigma),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed margin or a per-class margin table.
#[derive(Debug, Clone, Copy)]
pub enum MarginSource<'a> {
    Fixed(f64),
    Table(&'a MarginTable),
}

/// Hinge triplet term in similarity semantics, `[s_an - s_ap + margin]_+`,
/// with subgradient zero at the kink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletTerm {
    pub value: f64,
    pub d_s_ap: f64,
    pub d_s_an: f64,
}

pub fn triplet_loss(s_ap: f64, s_an: f64, margin: f64) -> TripletTerm {
    let arg = s_an - s_ap + margin;
    if arg > 0.0 {
        TripletTerm {
            value: arg,
            d_s_ap: -1.0,
            d_s_an: 1.0,
        }
    } else {
        TripletTerm {
            value: 0.0,
            d_s_ap: 0.0,
            d_s_an: 0.0,
        }
    }
}

/// `(1/scale) ln(1 + sum_j exp(sign * scale * (s_j - m_j)))` with max-shifted
/// exponentials. Returns the term value and `d/ds_j` (sign included).
pub(crate) fn ms_term(pairs: &[(f64, f64)], scale: f64, sign: f64) -> (f64, Vec<f64>) {
    if pairs.is_empty() {
        return (0.0, Vec::new());
    }
    let z: Vec<f64> = pairs.iter().map(|&(s, m)| sign * scale * (s - m)).collect();
    let shift = z.iter().fold(0.0_f64, |a, &b| a.max(b));
    let total: f64 = (-shift).exp() + z.iter().map(|&zj| (zj - shift).exp()).sum::<f64>();
    let value = (shift + total.ln()) / scale;
    let weights = z
        .iter()
        .map(|&zj| sign * (zj - shift).exp() / total)
        .collect();
    (value, weights)
}

/// Per-anchor lifted-structure term,
/// `[ln sum_P exp(m_p - s) + ln sum_N exp(s - m_n)]_+`.
/// Either set empty makes the anchor contribute zero. Weights are the
/// softmax derivatives, or all zero when the hinge is inactive.
pub(crate) fn lifted_term(
    pos: &[(f64, f64)],
    neg: &[(f64, f64)],
) -> (f64, Vec<f64>, Vec<f64>) {
    if pos.is_empty() || neg.is_empty() {
        return (0.0, vec![0.0; pos.len()], vec![0.0; neg.len()]);
    }
    let zp: Vec<f64> = pos.iter().map(|&(s, m)| m - s).collect();
    let zn: Vec<f64> = neg.iter().map(|&(s, m)| s - m).collect();
    let lse = |z: &[f64]| -> (f64, Vec<f64>) {
        let shift = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let total: f64 = z.iter().map(|&zj| (zj - shift).exp()).sum();
        (
            shift + total.ln(),
            z.iter().map(|&zj| (zj - shift).exp() / total).collect(),
        )
    };
    let (lp, wp) = lse(&zp);
    let (ln_, wn) = lse(&zn);
    let arg = lp + ln_;
    if arg > 0.0 {
        // d z_p / d s = -1, d z_n / d s = +1.
        (
            arg,
            wp.iter().map(|w| -w).collect(),
            wn,
        )
    } else {
        (0.0, vec![0.0; pos.len()], vec![0.0; neg.len()])
    }
}

fn check_table(batch: &EmbeddingBatch, table: &MarginTable) -> Result<()> {
    if table.epoch() != batch.epoch {
        return Err(Error::StaleMarginTable {
            table_epoch: table.epoch(),
            current_epoch: batch.epoch,
        });
    }
    if let Some(&l) = batch.labels.iter().max() {
        if l >= table.num_classes() {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: table.num_classes(),
            });
        }
    }
    Ok(())
}

fn anchors_or_empty(batch: &EmbeddingBatch) -> Result<Vec<usize>> {
    batch.validate()?;
    let anchors: Vec<usize> = batch.anchors().collect();
    if anchors.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(anchors)
}

/// Pair similarities and their gradients for one anchor against a set.
struct PairGrads {
    sims: Vec<f64>,
    grads_anchor: Vec<Vec<f64>>,
    grads_other: Vec<Vec<f64>>,
}

fn pair_grads(
    batch: &EmbeddingBatch,
    anchor: usize,
    others: &[usize],
    kind: SimilarityKind,
) -> Result<PairGrads> {
    let mut sims = Vec::with_capacity(others.len());
    let mut grads_anchor = Vec::with_capacity(others.len());
    let mut grads_other = Vec::with_capacity(others.len());
    for &j in others {
        let (s, gu, gv) =
            kind.similarity_with_grad(&batch.embeddings[anchor], &batch.embeddings[j])?;
        sims.push(s);
        grads_anchor.push(gu);
        grads_other.push(gv);
    }
    Ok(PairGrads {
        sims,
        grads_anchor,
        grads_other,
    })
}

fn accumulate(
    out: &mut LossResult,
    anchor: usize,
    others: &[usize],
    pg: &PairGrads,
    weights: &[f64],
    outer: f64,
) {
    for ((&j, w), (ga, go)) in others
        .iter()
        .zip(weights)
        .zip(pg.grads_anchor.iter().zip(&pg.grads_other))
    {
        if *w == 0.0 {
            continue;
        }
        let c = w * outer;
        for (dst, g) in out.grads[anchor].iter_mut().zip(ga) {
            *dst += c * g;
        }
        for (dst, g) in out.grads[j].iter_mut().zip(go) {
            *dst += c * g;
        }
    }
}

/// Multi-similarity loss with a fixed margin (the published baseline).
pub fn ms_loss(
    batch: &EmbeddingBatch,
    gamma: f64,
    varrho: f64,
    sigma: f64,
    kind: SimilarityKind,
) -> Result<LossResult> {
    let anchors = anchors_or_empty(batch)?;
    let inv_n = 1.0 / anchors.len() as f64;
    let mut out = LossResult::zeros(batch);
    for &i in &anchors {
        let sets = batch.pair_sets(i);
        let pos = pair_grads(batch, i, &sets.pos, kind)?;
        let neg = pair_grads(batch, i, &sets.neg, kind)?;
        let pos_pairs: Vec<(f64, f64)> = pos.sims.iter().map(|&s| (s, gamma)).collect();
        let neg_pairs: Vec<(f64, f64)> = neg.sims.iter().map(|&s| (s, gamma)).collect();
        let (vp, wp) = ms_term(&pos_pairs, varrho, -1.0);
        let (vn, wn) = ms_term(&neg_pairs, sigma, 1.0);
        out.value += (vp + vn) * inv_n;
        accumulate(&mut out, i, &sets.pos, &pos, &wp, inv_n);
        accumulate(&mut out, i, &sets.neg, &neg, &wn, inv_n);
    }
    Ok(out)
}

/// Multi-similarity loss with hierarchical margins and the
/// augmentation-consistency term.
pub fn ms_star_loss(
    batch: &EmbeddingBatch,
    margins: &MarginTable,
    hp: &MsHyperParams,
    kind: SimilarityKind,
) -> Result<LossResult> {
    hp.validate()?;
    let anchors = anchors_or_empty(batch)?;
    check_table(batch, margins)?;
    let inv_n = 1.0 / anchors.len() as f64;
    let mut out = LossResult::zeros(batch);
    for &i in &anchors {
        let class = batch.labels[i];
        let sets = batch.pair_sets(i);
        let aug = pair_grads(batch, i, &sets.aug, kind)?;
        let pos = pair_grads(batch, i, &sets.pos, kind)?;
        let neg = pair_grads(batch, i, &sets.neg, kind)?;

        let m_a = margins.m_aug(class);
        let m_p = margins.m_pos(class);
        let aug_pairs: Vec<(f64, f64)> = aug.sims.iter().map(|&s| (s, m_a)).collect();
        let pos_pairs: Vec<(f64, f64)> = pos.sims.iter().map(|&s| (s, m_p)).collect();
        let neg_pairs: Vec<(f64, f64)> = sets
            .neg
            .iter()
            .zip(&neg.sims)
            .map(|(&j, &s)| (s, margins.m_neg(class, batch.labels[j])))
            .collect();

        let (va, wa) = ms_term(&aug_pairs, hp.rho, -1.0);
        let (vp, wp) = ms_term(&pos_pairs, hp.varrho, -1.0);
        let (vn, wn) = ms_term(&neg_pairs, hp.sigma, 1.0);
        out.value += (va + vp + vn) * inv_n;
        accumulate(&mut out, i, &sets.aug, &aug, &wa, inv_n);
        accumulate(&mut out, i, &sets.pos, &pos, &wp, inv_n);
        accumulate(&mut out, i, &sets.neg, &neg, &wn, inv_n);
    }
    Ok(out)
}

/// Lifted-structure loss; `margins` selects the fixed-margin baseline or the
/// hierarchical table. Anchors missing a positive or a negative contribute
/// zero.
pub fn lifted_loss(
    batch: &EmbeddingBatch,
    margins: MarginSource<'_>,
    kind: SimilarityKind,
) -> Result<LossResult> {
    let anchors = anchors_or_empty(batch)?;
    if let MarginSource::Table(t) = margins {
        check_table(batch, t)?;
    }
    let inv_n = 1.0 / anchors.len() as f64;
    let mut out = LossResult::zeros(batch);
    for &i in &anchors {
        let class = batch.labels[i];
        let sets = batch.pair_sets(i);
        if sets.pos.is_empty() || sets.neg.is_empty() {
            continue;
        }
        let pos = pair_grads(batch, i, &sets.pos, kind)?;
        let neg = pair_grads(batch, i, &sets.neg, kind)?;
        let (m_p_of, m_n_of): (f64, Option<&MarginTable>) = match margins {
            MarginSource::Fixed(g) => (g, None),
            MarginSource::Table(t) => (t.m_pos(class), Some(t)),
        };
        let pos_pairs: Vec<(f64, f64)> = pos.sims.iter().map(|&s| (s, m_p_of)).collect();
        let neg_pairs: Vec<(f64, f64)> = sets
            .neg
            .iter()
            .zip(&neg.sims)
            .map(|(&j, &s)| {
                let m = match m_n_of {
                    None => m_p_of,
                    Some(t) => t.m_neg(class, batch.labels[j]),
                };
                (s, m)
            })
            .collect();
        let (v, wp, wn) = lifted_term(&pos_pairs, &neg_pairs);
        out.value += v * inv_n;
        accumulate(&mut out, i, &sets.pos, &pos, &wp, inv_n);
        accumulate(&mut out, i, &sets.neg, &neg, &wn, inv_n);
    }
    Ok(out)
}

/// Fixed-margin triplet loss averaged over every in-batch triplet
/// `(anchor, positive, negative)`.
pub fn triplet_batch_loss(
    batch: &EmbeddingBatch,
    margin: f64,
    kind: SimilarityKind,
) -> Result<LossResult> {
    triplet_impl(batch, None, margin, kind)
}

/// Triplet loss with the class-compactness and class-divergence offsets from
/// the margin table, plus a hinge pulling each anchor's augmentations above
/// its consistency margin.
pub fn triplet_star_loss(
    batch: &EmbeddingBatch,
    margins: &MarginTable,
    kind: SimilarityKind,
) -> Result<LossResult> {
    check_table(batch, margins)?;
    triplet_impl(batch, Some(margins), margins.gamma(), kind)
}

fn triplet_impl(
    batch: &EmbeddingBatch,
    table: Option<&MarginTable>,
    gamma_t: f64,
    kind: SimilarityKind,
) -> Result<LossResult> {
    let anchors = anchors_or_empty(batch)?;
    let mut out = LossResult::zeros(batch);

    // First pass counts the triplets and augmentation pairs so each family
    // can be averaged.
    let mut n_triplets = 0usize;
    let mut n_aug_pairs = 0usize;
    for &i in &anchors {
        let sets = batch.pair_sets(i);
        n_triplets += sets.pos.len() * sets.neg.len();
        if table.is_some() {
            n_aug_pairs += sets.aug.len();
        }
    }

    let inv_t = if n_triplets > 0 {
        1.0 / n_triplets as f64
    } else {
        0.0
    };
    let inv_a = if n_aug_pairs > 0 {
        1.0 / n_aug_pairs as f64
    } else {
        0.0
    };

    for &i in &anchors {
        let class = batch.labels[i];
        let sets = batch.pair_sets(i);
        let pos = pair_grads(batch, i, &sets.pos, kind)?;
        let neg = pair_grads(batch, i, &sets.neg, kind)?;

        let mut wp = vec![0.0; sets.pos.len()];
        let mut wn = vec![0.0; sets.neg.len()];
        for (pi, &s_ap) in pos.sims.iter().enumerate() {
            for (ni, (&nj, &s_an)) in sets.neg.iter().zip(&neg.sims).enumerate() {
                let margin = match table {
                    None => gamma_t,
                    Some(t) => {
                        (t.m_pos(class) - t.gamma())
                            + (t.gamma() - t.m_neg(class, batch.labels[nj]))
                            + gamma_t
                    }
                };
                let term = triplet_loss(s_ap, s_an, margin);
                out.value += term.value * inv_t;
                wp[pi] += term.d_s_ap;
                wn[ni] += term.d_s_an;
            }
        }
        accumulate(&mut out, i, &sets.pos, &pos, &wp, inv_t);
        accumulate(&mut out, i, &sets.neg, &neg, &wn, inv_t);

        if let Some(t) = table {
            if !sets.aug.is_empty() {
                let aug = pair_grads(batch, i, &sets.aug, kind)?;
                let m_a = t.m_aug(class);
                let mut wa = vec![0.0; sets.aug.len()];
                for (ai, &s) in aug.sims.iter().enumerate() {
                    let arg = m_a - s;
                    if arg > 0.0 {
                        out.value += arg * inv_a;
                        wa[ai] = -1.0;
                    }
                }
                accumulate(&mut out, i, &sets.aug, &aug, &wa, inv_a);
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient check. Returns the maximum relative error over
/// coordinates whose analytic gradient exceeds `1e-8` in magnitude.
/// Coordinates adjacent to a hinge kink (detected by disagreement between the
/// `eps` and `eps/2` central differences) are excluded.
pub fn finite_difference_check<F>(
    loss: F,
    batch: &EmbeddingBatch,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&EmbeddingBatch) -> Result<LossResult>,
{
    let base = loss(batch)?;
    let mut work = batch.clone();
    let mut max_rel = 0.0_f64;
    for i in 0..batch.len() {
        for k in 0..batch.embeddings[i].len() {
            let orig = batch.embeddings[i][k];
            let mut eval = |x: f64| -> Result<f64> {
                work.embeddings[i][k] = x;
                Ok(loss(&work)?.value)
            };
            let g_full = (eval(orig + eps)? - eval(orig - eps)?) / (2.0 * eps);
            let g_half = (eval(orig + eps / 2.0)? - eval(orig - eps / 2.0)?) / eps;
            work.embeddings[i][k] = orig;
            if (g_full - g_half).abs() > 1e-3 * (g_full.abs() + g_half.abs()) + 1e-9 {
                // A kink inside the stencil makes the stencil widths disagree.
                continue;
            }
            let analytic = base.grads[i][k];
            if analytic.abs() > 1e-8 {
                max_rel = max_rel.max((g_full - analytic).abs() / analytic.abs());
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::EmbeddingBatch;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // 50-digit reference evaluations, rounded to f64.
    const MS_SINGLE_POS_AT_GAMMA: f64 = 0.346_573_590_279_972_65; // (1/2) ln 2
    const MS_EXAMPLE: f64 = 0.319_197_723_440_888_06;
    const MS_STAR_SIX_SAMPLE: f64 = 0.346_983_271_789_235_2;

    fn cos() -> SimilarityKind {
        SimilarityKind::Cosine
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.9, 0.2, 0.5).value, 0.0);
        let t = triplet_loss(0.4, 0.8, 0.5);
        assert!((t.value - 0.9).abs() < 1e-15);
        assert_eq!(t.d_s_ap, -1.0);
        assert_eq!(t.d_s_an, 1.0);
        let t = triplet_loss(0.3, 0.3, 0.0);
        assert_eq!(t.value, 0.0);
        assert_eq!(t.d_s_ap, 0.0);
    }

    #[test]
    fn lifted_term_examples() {
        // Boundary pairs: both logs are ln(e^0) = 0, hinge gives 0.
        let (v, _, _) = lifted_term(&[(0.7, 0.7)], &[(0.4, 0.4)]);
        assert_eq!(v, 0.0);
        // Single-element sums one unit past each margin.
        let (v, wp, wn) = lifted_term(&[(0.7 - 1.0, 0.7)], &[(0.4 + 1.0, 0.4)]);
        assert!((v - 2.0).abs() < 1e-12);
        assert!((wp[0] + 1.0).abs() < 1e-12);
        assert!((wn[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ms_term_examples() {
        // One positive exactly at the margin, scale 2 -> (1/2) ln 2.
        let (v, _) = ms_term(&[(0.5, 0.5)], 2.0, -1.0);
        assert!((v - MS_SINGLE_POS_AT_GAMMA).abs() < 1e-15);
        // Positive s = 0.8, negative s = 0.6, gamma = 0.5.
        let (vp, _) = ms_term(&[(0.8, 0.5)], 2.0, -1.0);
        let (vn, _) = ms_term(&[(0.6, 0.5)], 40.0, 1.0);
        assert!((vp + vn - MS_EXAMPLE).abs() < 1e-15);
    }

    fn random_batch(
        rng: &mut ChaCha8Rng,
        n_per_class: usize,
        classes: usize,
        dim: usize,
        augs: bool,
        epoch: u64,
    ) -> EmbeddingBatch {
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        let mut aug_of = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per_class {
                embeddings.push(
                    (0..dim)
                        .map(|_| rng.random_range(-1.0..1.0))
                        .collect::<Vec<f64>>(),
                );
                labels.push(c);
                aug_of.push(None);
            }
        }
        if augs {
            let n = embeddings.len();
            for a in 0..n {
                let mut e = embeddings[a].clone();
                for c in e.iter_mut() {
                    *c += rng.random_range(-0.05..0.05);
                }
                embeddings.push(e);
                labels.push(labels[a]);
                aug_of.push(Some(a));
            }
        }
        EmbeddingBatch {
            embeddings,
            labels,
            aug_of,
            epoch,
        }
    }

    /// Direct, shift-free evaluation of the fixed-margin MS formula.
    fn naive_ms(batch: &EmbeddingBatch, gamma: f64, varrho: f64, sigma: f64) -> f64 {
        let anchors: Vec<usize> = batch.anchors().collect();
        let mut total = 0.0;
        for &i in &anchors {
            let sets = batch.pair_sets(i);
            let mut sp = 0.0;
            for &j in &sets.pos {
                let s = cos()
                    .similarity(&batch.embeddings[i], &batch.embeddings[j])
                    .unwrap();
                sp += (-varrho * (s - gamma)).exp();
            }
            let mut sn = 0.0;
            for &j in &sets.neg {
                let s = cos()
                    .similarity(&batch.embeddings[i], &batch.embeddings[j])
                    .unwrap();
                sn += (sigma * (s - gamma)).exp();
            }
            total += (1.0 + sp).ln() / varrho + (1.0 + sn).ln() / sigma;
        }
        total / anchors.len() as f64
    }

    #[test]
    fn ms_loss_matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..30 {
            let batch = random_batch(&mut rng, 4, 2, 3, false, 0);
            let got = ms_loss(&batch, 0.5, 2.0, 40.0, cos()).unwrap().value;
            let expect = naive_ms(&batch, 0.5, 2.0, 40.0);
            assert!((got - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn ms_loss_empty_sets() {
        // Every anchor a singleton class: no positives, no negatives... c == 1
        // means no negatives; a lone anchor per class has no positives either.
        let batch = EmbeddingBatch::plain(vec![vec![1.0, 0.0]], vec![0], 0);
        let r = ms_loss(&batch, 0.5, 2.0, 40.0, cos()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grads[0].iter().all(|&g| g == 0.0));
    }

    fn six_sample_batch() -> (EmbeddingBatch, MarginTable) {
        let batch = EmbeddingBatch {
            embeddings: vec![
                vec![1.0, 0.1],
                vec![0.9, -0.2],
                vec![-0.2, 1.0],
                vec![0.1, 0.8],
                vec![0.95, 0.05],
                vec![-0.1, 0.9],
            ],
            labels: vec![0, 0, 1, 1, 0, 1],
            aug_of: vec![None, None, None, None, Some(0), Some(2)],
            epoch: 3,
        };
        let table = MarginTable::from_parts(
            vec![0.65, 0.55],
            vec![0.5, 0.45, 0.45, 0.5],
            vec![0.9, 0.85],
            0.5,
            3,
        )
        .unwrap();
        (batch, table)
    }

    #[test]
    fn ms_star_pinned_six_sample_value() {
        let (batch, table) = six_sample_batch();
        let hp = MsHyperParams::default();
        let r = ms_star_loss(&batch, &table, &hp, cos()).unwrap();
        assert!(
            (r.value - MS_STAR_SIX_SAMPLE).abs() < 1e-12,
            "got {}",
            r.value
        );
        // Independent naive term-by-term evaluation.
        let sim = |i: usize, j: usize| {
            cos()
                .similarity(&batch.embeddings[i], &batch.embeddings[j])
                .unwrap()
        };
        let term = |i: usize, aug: &[usize], pos: &[usize], neg: &[usize], c: usize| {
            let ta: f64 = aug
                .iter()
                .map(|&j| (-2.0 * (sim(i, j) - table.m_aug(c))).exp())
                .sum();
            let tp: f64 = pos
                .iter()
                .map(|&j| (-2.0 * (sim(i, j) - table.m_pos(c))).exp())
                .sum();
            let tn: f64 = neg
                .iter()
                .map(|&j| (40.0 * (sim(i, j) - table.m_neg(c, batch.labels[j]))).exp())
                .sum();
            (1.0 + ta).ln() / 2.0 + (1.0 + tp).ln() / 2.0 + (1.0 + tn).ln() / 40.0
        };
        let naive = (term(0, &[4], &[1], &[2, 3], 0)
            + term(1, &[], &[0], &[2, 3], 0)
            + term(2, &[5], &[3], &[0, 1], 1)
            + term(3, &[], &[2], &[0, 1], 1))
            / 4.0;
        assert!((r.value - naive).abs() < 1e-12);
    }

    #[test]
    fn ms_star_stale_table_rejected() {
        let (batch, table) = six_sample_batch();
        let mut stale = batch.clone();
        stale.epoch = 4;
        let hp = MsHyperParams::default();
        assert!(matches!(
            ms_star_loss(&stale, &table, &hp, cos()),
            Err(Error::StaleMarginTable { .. })
        ));
    }

    #[test]
    fn ms_star_all_sets_empty() {
        let batch = EmbeddingBatch::plain(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 0],
            0,
        );
        // Two positives, no negatives, no augs: positive term only.
        let table = MarginTable::baseline(0.5, 1, 0);
        let hp = MsHyperParams::default();
        let r = ms_star_loss(&batch, &table, &hp, cos()).unwrap();
        assert!(r.value > 0.0);

        // Singleton anchor: everything empty -> exactly zero.
        let lone = EmbeddingBatch::plain(vec![vec![1.0, 0.0]], vec![0], 0);
        let r = ms_star_loss(&lone, &MarginTable::baseline(0.5, 1, 0), &hp, cos()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn reduction_identity_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let hp = MsHyperParams::default();
        for _ in 0..100 {
            let batch = random_batch(&mut rng, 3, 3, 4, false, 5);
            let table = MarginTable::baseline(0.5, 3, 5);
            let star = ms_star_loss(&batch, &table, &hp, cos()).unwrap();
            let plain = ms_loss(&batch, 0.5, hp.varrho, hp.sigma, cos()).unwrap();
            assert!((star.value - plain.value).abs() < 1e-12);
            for (gs, gp) in star.grads.iter().zip(&plain.grads) {
                for (a, b) in gs.iter().zip(gp) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lifted_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        for _ in 0..30 {
            let batch = random_batch(&mut rng, 4, 2, 3, false, 0);
            let got = lifted_loss(&batch, MarginSource::Fixed(0.5), cos())
                .unwrap()
                .value;
            // Direct per-anchor evaluation of the formula.
            let anchors: Vec<usize> = batch.anchors().collect();
            let mut total = 0.0;
            for &i in &anchors {
                let sets = batch.pair_sets(i);
                if sets.pos.is_empty() || sets.neg.is_empty() {
                    continue;
                }
                let sp: f64 = sets
                    .pos
                    .iter()
                    .map(|&j| {
                        (0.5 - cos()
                            .similarity(&batch.embeddings[i], &batch.embeddings[j])
                            .unwrap())
                        .exp()
                    })
                    .sum();
                let sn: f64 = sets
                    .neg
                    .iter()
                    .map(|&j| {
                        (cos()
                            .similarity(&batch.embeddings[i], &batch.embeddings[j])
                            .unwrap()
                            - 0.5)
                            .exp()
                    })
                    .sum();
                total += (sp.ln() + sn.ln()).max(0.0);
            }
            let expect = total / anchors.len() as f64;
            assert!((got - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn triplet_star_reduces_to_fixed_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let batch = random_batch(&mut rng, 3, 2, 3, false, 1);
        let table = MarginTable::baseline(0.5, 2, 1);
        let star = triplet_star_loss(&batch, &table, cos()).unwrap();
        let fixed = triplet_batch_loss(&batch, 0.5, cos()).unwrap();
        assert!((star.value - fixed.value).abs() < 1e-15);
    }

    #[test]
    fn triplet_star_offsets() {
        // m_pos - gamma = 0.2, gamma - m_neg = 0.2, gamma_t = 0.5:
        // effective margin 0.9; s_an = 0.1, s_ap = 0.9 -> 0.1.
        let term = triplet_loss(0.9, 0.1, 0.2 + 0.2 + 0.5);
        assert!((term.value - 0.1).abs() < 1e-15);
        // Augmentation hinge inactive when the augmentation is above margin.
        assert_eq!(triplet_loss(0.9, 0.0, 0.7 - 0.9 + 0.0).value.max(0.0), 0.0);
    }

    #[test]
    fn monotone_in_pair_similarity() {
        // Two-sample batches isolate a single pair; shrinking the angle
        // raises its cosine similarity. Negative-pair losses must be
        // nondecreasing in the similarity, positive-pair losses nonincreasing.
        let hp = MsHyperParams::default();
        let table = MarginTable::baseline(0.5, 2, 0);
        let angles = [1.4_f64, 1.0, 0.6, 0.2];

        let mut prev_neg: Option<(f64, f64)> = None;
        let mut prev_pos: Option<(f64, f64)> = None;
        for &a in &angles {
            let points = vec![vec![1.0, 0.0], vec![a.cos(), a.sin()]];
            let neg = EmbeddingBatch::plain(points.clone(), vec![0, 1], 0);
            let star = ms_star_loss(&neg, &table, &hp, cos()).unwrap().value;
            let plain = ms_loss(&neg, 0.5, 2.0, 40.0, cos()).unwrap().value;
            if let Some((ps, pp)) = prev_neg {
                assert!(star >= ps - 1e-12);
                assert!(plain >= pp - 1e-12);
            }
            prev_neg = Some((star, plain));

            let pos = EmbeddingBatch::plain(points, vec![0, 0], 0);
            let star = ms_star_loss(&pos, &table, &hp, cos()).unwrap().value;
            let plain = ms_loss(&pos, 0.5, 2.0, 40.0, cos()).unwrap().value;
            if let Some((ps, pp)) = prev_pos {
                assert!(star <= ps + 1e-12);
                assert!(plain <= pp + 1e-12);
            }
            prev_pos = Some((star, plain));
        }
    }

    #[test]
    fn margin_shift_covariance() {
        // Adding delta to every margin and every similarity leaves MS* fixed.
        // Realized at the term level since similarities enter only as s - m.
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        for _ in 0..50 {
            let pairs: Vec<(f64, f64)> = (0..4)
                .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.3..0.7)))
                .collect();
            let delta = rng.random_range(-0.5..0.5);
            let shifted: Vec<(f64, f64)> =
                pairs.iter().map(|&(s, m)| (s + delta, m + delta)).collect();
            for (scale, sign) in [(2.0, -1.0), (40.0, 1.0)] {
                let (v1, _) = ms_term(&pairs, scale, sign);
                let (v2, _) = ms_term(&shifted, scale, sign);
                assert!((v1 - v2).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn all_losses_nonnegative_and_untouched_grads_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        let hp = MsHyperParams::default();
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 3, 2, 3, true, 2);
            let table = MarginTable::baseline(0.5, 2, 2);
            for r in [
                ms_loss(&batch, 0.5, 2.0, 40.0, cos()).unwrap(),
                ms_star_loss(&batch, &table, &hp, cos()).unwrap(),
                lifted_loss(&batch, MarginSource::Fixed(0.5), cos()).unwrap(),
                lifted_loss(&batch, MarginSource::Table(&table), cos()).unwrap(),
                triplet_batch_loss(&batch, 0.5, cos()).unwrap(),
                triplet_star_loss(&batch, &table, cos()).unwrap(),
            ] {
                assert!(r.value >= 0.0);
                assert!(r.grads.iter().flatten().all(|g| g.is_finite()));
            }
        }
    }

    #[test]
    fn finite_difference_on_every_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let hp = MsHyperParams::default();
        let kinds = [
            SimilarityKind::Cosine,
            SimilarityKind::NegExpPoincare { curvature: 1.0 },
        ];
        for kind in kinds {
            for _ in 0..5 {
                let batch = random_batch(&mut rng, 2, 2, 3, true, 0);
                let table = MarginTable::from_parts(
                    vec![0.62, 0.55],
                    vec![0.5, 0.42, 0.42, 0.5],
                    vec![0.6, 0.5],
                    0.5,
                    0,
                )
                .unwrap();
                let checks: Vec<(&str, f64)> = vec![
                    (
                        "ms",
                        finite_difference_check(
                            |b| ms_loss(b, 0.5, 2.0, 40.0, kind),
                            &batch,
                            1e-5,
                        )
                        .unwrap(),
                    ),
                    (
                        "ms_star",
                        finite_difference_check(
                            |b| ms_star_loss(b, &table, &hp, kind),
                            &batch,
                            1e-5,
                        )
                        .unwrap(),
                    ),
                    (
                        "lifted",
                        finite_difference_check(
                            |b| lifted_loss(b, MarginSource::Table(&table), kind),
                            &batch,
                            1e-5,
                        )
                        .unwrap(),
                    ),
                    (
                        "triplet",
                        finite_difference_check(
                            |b| triplet_batch_loss(b, 0.5, kind),
                            &batch,
                            1e-5,
                        )
                        .unwrap(),
                    ),
                    (
                        "triplet_star",
                        finite_difference_check(
                            |b| triplet_star_loss(b, &table, kind),
                            &batch,
                            1e-5,
                        )
                        .unwrap(),
                    ),
                ];
                for (name, err) in checks {
                    assert!(err < 1e-4, "{name} ({kind:?}): fd error {err}");
                }
            }
        }
    }

    #[test]
    fn zero_gradient_batch_has_zero_fd_error() {
        let batch = EmbeddingBatch::plain(vec![vec![1.0, 0.0]], vec![0], 0);
        let err =
            finite_difference_check(|b| ms_loss(b, 0.5, 2.0, 40.0, cos()), &batch, 1e-5)
                .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let batch = EmbeddingBatch::plain(vec![], vec![], 0);
        assert!(matches!(
            ms_loss(&batch, 0.5, 2.0, 40.0, cos()),
            Err(Error::EmptyBatch)
        ));
    }
}
