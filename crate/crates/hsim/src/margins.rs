//! Epoch-versioned margin tables: per-class positive margins, per-class-pair
//! negative margins, and per-class augmentation-consistency margins.

use serde::{Deserialize, Serialize};

use crate::class_stats::{
    intra_extremum, rescale_to_unit_fifth, ClassSimilarityMatrix,
};
use crate::error::{Error, Result};
use crate::geometry::SimilarityKind;

/// How the inter-class similarity set is transformed before rescaling.
///
/// `Reciprocal` follows the published construction `{1/S_ab}` with a clamp at
/// `epsilon` since the reciprocal is singular (and sign-flipping) for
/// `S_ab <= 0`. `Negation` uses `{-S_ab}`, which is total and yields the same
/// ordering for positive similarities; it is the default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InterTransform {
    Reciprocal { epsilon: f64 },
    Negation,
}

impl Default for InterTransform {
    fn default() -> Self {
        InterTransform::Negation
    }
}

/// Which intra-class statistic feeds the augmentation margin. `Min` is the
/// printed definition; `Max` matches the surrounding prose reading and is
/// kept as an explicit switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyStat {
    #[default]
    Min,
    Max,
}

/// Margin construction parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MarginParams {
    pub gamma: f64,
    #[serde(default)]
    pub inter_transform: InterTransform,
    #[serde(default)]
    pub consistency: ConsistencyStat,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            inter_transform: InterTransform::default(),
            consistency: ConsistencyStat::default(),
        }
    }
}

/// Immutable per-epoch margin table.
#[derive(Debug, Clone)]
pub struct MarginTable {
    m_pos: Vec<f64>,
    m_neg: Vec<f64>,
    m_aug: Vec<f64>,
    gamma: f64,
    epoch: u64,
    inter_transform: InterTransform,
}

impl MarginTable {
    pub fn num_classes(&self) -> usize {
        self.m_pos.len()
    }

    pub fn m_pos(&self, class: usize) -> f64 {
        self.m_pos[class]
    }

    pub fn m_neg(&self, a: usize, b: usize) -> f64 {
        self.m_neg[a * self.num_classes() + b]
    }

    pub fn m_aug(&self, class: usize) -> f64 {
        self.m_aug[class]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn inter_transform(&self) -> InterTransform {
        self.inter_transform
    }

    /// Fixed-margin table: every positive and negative margin is `gamma`,
    /// every augmentation margin `1.0`. Equivalent to the degenerate-rescale
    /// output, i.e. the published fixed-margin baseline.
    pub fn baseline(gamma: f64, num_classes: usize, epoch: u64) -> Self {
        Self {
            m_pos: vec![gamma; num_classes],
            m_neg: vec![gamma; num_classes * num_classes],
            m_aug: vec![1.0; num_classes],
            gamma,
            epoch,
            inter_transform: InterTransform::Negation,
        }
    }

    /// Assembles a table from explicit margin arrays, enforcing the range
    /// invariants the rescale construction guarantees.
    pub fn from_parts(
        m_pos: Vec<f64>,
        m_neg: Vec<f64>,
        m_aug: Vec<f64>,
        gamma: f64,
        epoch: u64,
    ) -> Result<Self> {
        let c = m_pos.len();
        if m_neg.len() != c * c || m_aug.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "margin arrays disagree: {} classes, {} pair entries, {} aug entries",
                c,
                m_neg.len(),
                m_aug.len()
            )));
        }
        if m_pos
            .iter()
            .any(|&p| !(gamma..=gamma + 0.2 + 1e-12).contains(&p))
        {
            return Err(Error::InvalidConfig(
                "m_pos outside [gamma, gamma + 0.2]".into(),
            ));
        }
        if m_neg
            .iter()
            .any(|&n| !(gamma - 0.2 - 1e-12..=gamma).contains(&n))
        {
            return Err(Error::InvalidConfig(
                "m_neg outside [gamma - 0.2, gamma]".into(),
            ));
        }
        for a in 0..c {
            for b in 0..c {
                if m_neg[a * c + b] != m_neg[b * c + a] {
                    return Err(Error::ShapeMismatch(format!(
                        "m_neg not symmetric at ({a},{b})"
                    )));
                }
            }
        }
        if m_aug.iter().any(|&m| !(-1.0..=1.0).contains(&m)) {
            return Err(Error::InvalidConfig("m_aug outside [-1, 1]".into()));
        }
        Ok(Self {
            m_pos,
            m_neg,
            m_aug,
            gamma,
            epoch,
            inter_transform: InterTransform::Negation,
        })
    }

    /// Copy with the class-wise margins collapsed to `gamma`, keeping the
    /// augmentation margins. Used by the component-ablation grid.
    pub fn with_collapsed_class_margins(&self) -> Self {
        let c = self.num_classes();
        Self {
            m_pos: vec![self.gamma; c],
            m_neg: vec![self.gamma; c * c],
            m_aug: self.m_aug.clone(),
            gamma: self.gamma,
            epoch: self.epoch,
            inter_transform: self.inter_transform,
        }
    }

    /// Diagnostic dump: per-class arrays plus the pair table flattened in
    /// row-major upper-triangle order.
    pub fn diagnostic_json(&self) -> serde_json::Value {
        let c = self.num_classes();
        let mut upper = Vec::with_capacity(c * (c.saturating_sub(1)) / 2);
        for a in 0..c {
            for b in (a + 1)..c {
                upper.push(self.m_neg(a, b));
            }
        }
        serde_json::json!({
            "epoch": self.epoch,
            "gamma": self.gamma,
            "inter_transform": self.inter_transform,
            "m_pos": self.m_pos,
            "m_aug": self.m_aug,
            "m_neg_upper_triangle": upper,
        })
    }
}

/// Builds the margin table for one epoch from the class statistics.
///
/// * `m_pos[a] = gamma + rescale({S_aa})[a]`
/// * `m_neg[a][b] = gamma - rescale(transform({S_ab}))[(a,b)]`
/// * `m_aug[a] = min (or max) intra-class similarity of class `a``
pub fn build_margin_table(
    stats: &ClassSimilarityMatrix,
    embeddings: &[Vec<f64>],
    labels: &[usize],
    params: &MarginParams,
    kind: SimilarityKind,
) -> Result<MarginTable> {
    if params.gamma <= 0.0 || !params.gamma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "gamma must be positive, got {}",
            params.gamma
        )));
    }
    let c = stats.num_classes();
    let gamma = params.gamma;

    let intra: Vec<f64> = (0..c).map(|a| stats.get(a, a)).collect();
    let m_pos: Vec<f64> = rescale_to_unit_fifth(&intra)
        .values
        .iter()
        .map(|s| gamma + s)
        .collect();

    // Upper-triangle pair values, row-major.
    let mut inter = Vec::with_capacity(c * c.saturating_sub(1) / 2);
    for a in 0..c {
        for b in (a + 1)..c {
            let s = stats.get(a, b);
            inter.push(match params.inter_transform {
                InterTransform::Reciprocal { epsilon } => 1.0 / s.max(epsilon),
                InterTransform::Negation => -s,
            });
        }
    }
    let rescaled = rescale_to_unit_fifth(&inter).values;
    let mut m_neg = vec![gamma; c * c];
    let mut it = rescaled.iter();
    for a in 0..c {
        for b in (a + 1)..c {
            let v = gamma - it.next().unwrap();
            m_neg[a * c + b] = v;
            m_neg[b * c + a] = v;
        }
    }

    let take_max = params.consistency == ConsistencyStat::Max;
    let mut m_aug = Vec::with_capacity(c);
    for class in 0..c {
        m_aug.push(intra_extremum(embeddings, labels, class, kind, take_max)?);
    }

    for (a, &p) in m_pos.iter().enumerate() {
        assert!(
            (gamma..=gamma + 0.2 + 1e-12).contains(&p),
            "m_pos[{a}] = {p} out of [gamma, gamma + 0.2]"
        );
        assert!(
            (-1.0 - 1e-12..=1.0 + 1e-12).contains(&m_aug[a]),
            "m_aug[{a}] = {} out of range",
            m_aug[a]
        );
    }
    for (i, &n) in m_neg.iter().enumerate() {
        assert!(
            (gamma - 0.2 - 1e-12..=gamma).contains(&n),
            "m_neg[{i}] = {n} out of [gamma - 0.2, gamma]"
        );
    }

    Ok(MarginTable {
        m_pos,
        m_neg,
        m_aug,
        gamma,
        epoch: stats.epoch(),
        inter_transform: params.inter_transform,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class_stats::class_similarity_matrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(t: InterTransform) -> MarginParams {
        MarginParams {
            gamma: 0.5,
            inter_transform: t,
            consistency: ConsistencyStat::Min,
        }
    }

    /// Independent brute-force evaluation of the worked three-class example.
    fn brute_force_m_neg(inter: &[f64], gamma: f64, transform: InterTransform) -> Vec<f64> {
        let t: Vec<f64> = inter
            .iter()
            .map(|&s| match transform {
                InterTransform::Reciprocal { epsilon } => 1.0 / s.max(epsilon),
                InterTransform::Negation => -s,
            })
            .collect();
        let min = t.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        t.iter()
            .map(|&v| {
                if max == min {
                    gamma
                } else {
                    gamma - 0.2 * (v - min) / (max - min)
                }
            })
            .collect()
    }

    #[test]
    fn worked_three_class_example() {
        // S_12 = 0.5, S_13 = 0.1, S_23 = 0.3 (1-indexed classes).
        let stats = ClassSimilarityMatrix::from_entries(
            vec![
                0.9, 0.5, 0.1, //
                0.5, 0.8, 0.3, //
                0.1, 0.3, 0.7,
            ],
            vec![2, 2, 2],
            0,
        )
        .unwrap();
        let embeddings = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 1.0],
            vec![-1.0, 0.0],
            vec![-1.0, 0.1],
        ];
        let labels = vec![0, 0, 1, 1, 2, 2];

        let neg = build_margin_table(
            &stats,
            &embeddings,
            &labels,
            &params(InterTransform::Negation),
            SimilarityKind::Cosine,
        )
        .unwrap();
        assert!((neg.m_neg(0, 1) - 0.5).abs() < 1e-9);
        assert!((neg.m_neg(0, 2) - 0.3).abs() < 1e-9);
        assert!((neg.m_neg(1, 2) - 0.4).abs() < 1e-9);

        let rec = build_margin_table(
            &stats,
            &embeddings,
            &labels,
            &params(InterTransform::Reciprocal { epsilon: 1e-3 }),
            SimilarityKind::Cosine,
        )
        .unwrap();
        assert!((rec.m_neg(0, 1) - 0.5).abs() < 1e-9);
        assert!((rec.m_neg(0, 2) - 0.3).abs() < 1e-9);
        assert!((rec.m_neg(1, 2) - 0.4666667).abs() < 1e-7);

        // Cross-check both against the independent brute-force route.
        for transform in [
            InterTransform::Negation,
            InterTransform::Reciprocal { epsilon: 1e-3 },
        ] {
            let expect = brute_force_m_neg(&[0.5, 0.1, 0.3], 0.5, transform);
            let table = build_margin_table(
                &stats,
                &embeddings,
                &labels,
                &params(transform),
                SimilarityKind::Cosine,
            )
            .unwrap();
            let got = [table.m_neg(0, 1), table.m_neg(0, 2), table.m_neg(1, 2)];
            for (g, e) in got.iter().zip(&expect) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn m_pos_from_rescaled_intra() {
        // Hat{S}_aa = 0.2 for the most compact class -> m_pos = 0.7.
        let stats = ClassSimilarityMatrix::from_entries(
            vec![0.9, 0.0, 0.0, 0.2],
            vec![2, 2],
            0,
        )
        .unwrap();
        let embeddings = vec![vec![1.0, 0.0]; 4];
        let labels = vec![0, 0, 1, 1];
        let t = build_margin_table(
            &stats,
            &embeddings,
            &labels,
            &params(InterTransform::Negation),
            SimilarityKind::Cosine,
        )
        .unwrap();
        assert!((t.m_pos(0) - 0.7).abs() < 1e-12);
        assert!((t.m_pos(1) - 0.5).abs() < 1e-12);
        // Two classes: a single inter value degenerates to m_neg = gamma.
        assert!((t.m_neg(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn baseline_collapse() {
        // All S_aa equal and all S_ab equal -> every margin is gamma.
        let stats = ClassSimilarityMatrix::from_entries(
            vec![
                0.8, 0.2, 0.2, //
                0.2, 0.8, 0.2, //
                0.2, 0.2, 0.8,
            ],
            vec![1, 1, 1],
            4,
        )
        .unwrap();
        let embeddings = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        let labels = vec![0, 1, 2];
        let t = build_margin_table(
            &stats,
            &embeddings,
            &labels,
            &params(InterTransform::Negation),
            SimilarityKind::Cosine,
        )
        .unwrap();
        for a in 0..3 {
            assert_eq!(t.m_pos(a), 0.5);
            for b in 0..3 {
                assert_eq!(t.m_neg(a, b), 0.5);
            }
        }
        assert_eq!(t.epoch(), 4);
    }

    #[test]
    fn ordering_law_both_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for transform in [
            InterTransform::Negation,
            InterTransform::Reciprocal { epsilon: 1e-3 },
        ] {
            for _ in 0..100 {
                let c = rng.random_range(3..6usize);
                let mut entries = vec![0.0; c * c];
                for a in 0..c {
                    entries[a * c + a] = rng.random_range(0.2..1.0);
                    for b in (a + 1)..c {
                        // Keep values above the reciprocal clamp.
                        let v = rng.random_range(0.01..0.9);
                        entries[a * c + b] = v;
                        entries[b * c + a] = v;
                    }
                }
                let stats =
                    ClassSimilarityMatrix::from_entries(entries.clone(), vec![1; c], 0).unwrap();
                let embeddings: Vec<Vec<f64>> = (0..c)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect();
                let labels: Vec<usize> = (0..c).collect();
                let t = build_margin_table(
                    &stats,
                    &embeddings,
                    &labels,
                    &params(transform),
                    SimilarityKind::Cosine,
                )
                .unwrap();
                for a in 0..c {
                    for b in (a + 1)..c {
                        for a2 in 0..c {
                            for b2 in (a2 + 1)..c {
                                if stats.get(a, b) > stats.get(a2, b2) {
                                    assert!(
                                        t.m_neg(a, b) >= t.m_neg(a2, b2) - 1e-12,
                                        "{transform:?}: S {} > {} but m_neg {} < {}",
                                        stats.get(a, b),
                                        stats.get(a2, b2),
                                        t.m_neg(a, b),
                                        t.m_neg(a2, b2)
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let embeddings: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let stats =
            class_similarity_matrix(&embeddings, &labels, SimilarityKind::Cosine, 2).unwrap();
        let t1 = build_margin_table(
            &stats,
            &embeddings,
            &labels,
            &params(InterTransform::Negation),
            SimilarityKind::Cosine,
        )
        .unwrap();
        let t2 = build_margin_table(
            &stats,
            &embeddings,
            &labels,
            &params(InterTransform::Negation),
            SimilarityKind::Cosine,
        )
        .unwrap();
        for a in 0..3 {
            assert_eq!(t1.m_pos(a).to_bits(), t2.m_pos(a).to_bits());
            assert_eq!(t1.m_aug(a).to_bits(), t2.m_aug(a).to_bits());
            for b in 0..3 {
                assert_eq!(t1.m_neg(a, b).to_bits(), t2.m_neg(a, b).to_bits());
            }
        }
    }

    #[test]
    fn diagnostic_dump_shape() {
        let t = MarginTable::baseline(0.5, 3, 7);
        let v = t.diagnostic_json();
        assert_eq!(v["epoch"], 7);
        assert_eq!(v["m_pos"].as_array().unwrap().len(), 3);
        assert_eq!(v["m_neg_upper_triangle"].as_array().unwrap().len(), 3);
    }
}
