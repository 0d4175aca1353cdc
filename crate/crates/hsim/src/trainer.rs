//! Training configuration and the per-epoch loop: statistics pass, margin
//! construction, then optimization on class-balanced mini-batches.

use serde::{Deserialize, Serialize};

use crate::batch::EmbeddingBatch;
use crate::class_stats::{class_similarity_matrix, subsample_per_class};
use crate::error::{Error, Result};
use crate::geometry::SimilarityKind;
use crate::losses::{
    lifted_loss, ms_loss, ms_star_loss, triplet_batch_loss, triplet_star_loss, LossResult,
    MarginSource, MsHyperParams,
};
use crate::margins::{
    build_margin_table, ConsistencyStat, InterTransform, MarginParams, MarginTable,
};
use crate::model::MlpModel;
use crate::optim::{AdamParams, AdamState};
use crate::perturb::{augment_stream, strong_augment, weak_augment, AugmentPolicy};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Triplet,
    Lifted,
    Ms,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    Fixed,
    Hierarchical,
}

/// Which pieces of the hierarchical method are active. Normally derived from
/// [`MarginMode`]; the ablation grid overrides them individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentToggles {
    pub class_divergence: bool,
    pub sample_consistency: bool,
}

impl ComponentToggles {
    pub fn any(&self) -> bool {
        self.class_divergence || self.sample_consistency
    }

    /// Human-readable mode name used in metrics rows.
    pub fn mode_name(&self) -> &'static str {
        match (self.class_divergence, self.sample_consistency) {
            (false, false) => "fixed",
            (true, false) => "class_wise",
            (false, true) => "sample_wise",
            (true, true) => "hierarchical",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub gamma: f64,
    pub ms: MsHyperParams,
    pub similarity: SimilarityKind,
    /// `None` derives jitter scales from the training features.
    pub augment: Option<AugmentPolicy>,
    pub loss: LossKind,
    pub margin_mode: MarginMode,
    /// Component override for ablations; `None` follows `margin_mode`.
    pub components: Option<ComponentToggles>,
    pub inter_transform: InterTransform,
    pub consistency_stat: ConsistencyStat,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub adam: AdamParams,
    /// Per-class cap on the epoch statistics pass.
    pub stats_cap: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            classes_per_batch: 4,
            samples_per_class: 4,
            gamma: 0.5,
            ms: MsHyperParams::default(),
            similarity: SimilarityKind::Cosine,
            augment: None,
            loss: LossKind::Ms,
            margin_mode: MarginMode::Hierarchical,
            components: None,
            inter_transform: InterTransform::default(),
            consistency_stat: ConsistencyStat::default(),
            hidden_dims: vec![128],
            embed_dim: 32,
            adam: AdamParams::default(),
            stats_cap: Some(256),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn effective_components(&self) -> ComponentToggles {
        self.components.unwrap_or(match self.margin_mode {
            MarginMode::Fixed => ComponentToggles {
                class_divergence: false,
                sample_consistency: false,
            },
            MarginMode::Hierarchical => ComponentToggles {
                class_divergence: true,
                sample_consistency: true,
            },
        })
    }

    pub fn margin_params(&self) -> MarginParams {
        MarginParams {
            gamma: self.gamma,
            inter_transform: self.inter_transform,
            consistency: self.consistency_stat,
        }
    }

    pub fn model_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidConfig(
                "batch composition counts must be >= 1".into(),
            ));
        }
        if self.gamma <= 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if self.embed_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("layer dims must be >= 1".into()));
        }
        self.ms.validate()?;
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginSummary {
    pub m_pos_min: f64,
    pub m_pos_max: f64,
    pub m_neg_min: f64,
    pub m_neg_max: f64,
    pub m_aug_min: f64,
    pub m_aug_max: f64,
}

impl MarginSummary {
    fn of(table: &MarginTable) -> Self {
        let c = table.num_classes();
        let mut s = Self {
            m_pos_min: f64::INFINITY,
            m_pos_max: f64::NEG_INFINITY,
            m_neg_min: f64::INFINITY,
            m_neg_max: f64::NEG_INFINITY,
            m_aug_min: f64::INFINITY,
            m_aug_max: f64::NEG_INFINITY,
        };
        for a in 0..c {
            s.m_pos_min = s.m_pos_min.min(table.m_pos(a));
            s.m_pos_max = s.m_pos_max.max(table.m_pos(a));
            s.m_aug_min = s.m_aug_min.min(table.m_aug(a));
            s.m_aug_max = s.m_aug_max.max(table.m_aug(a));
            for b in (a + 1)..c {
                s.m_neg_min = s.m_neg_min.min(table.m_neg(a, b));
                s.m_neg_max = s.m_neg_max.max(table.m_neg(a, b));
            }
        }
        if c < 2 {
            s.m_neg_min = table.gamma();
            s.m_neg_max = table.gamma();
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub margins: MarginSummary,
}

pub struct FitOutput {
    pub history: Vec<EpochStats>,
    pub final_margins: Option<MarginTable>,
}

fn group_by_class(labels: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .collect()
}

fn check_batch_spec(labels: &[usize], config: &TrainConfig) -> Result<()> {
    let groups = group_by_class(labels);
    if groups.len() < config.classes_per_batch {
        return Err(Error::UnsatisfiableBatchSpec(format!(
            "{} classes present, batch wants {}",
            groups.len(),
            config.classes_per_batch
        )));
    }
    for (class, members) in &groups {
        if members.len() < config.samples_per_class {
            return Err(Error::UnsatisfiableBatchSpec(format!(
                "class {class} has {} samples, batch wants {}",
                members.len(),
                config.samples_per_class
            )));
        }
    }
    Ok(())
}

fn eval_loss(
    batch: &EmbeddingBatch,
    table: &MarginTable,
    config: &TrainConfig,
    toggles: ComponentToggles,
) -> Result<LossResult> {
    let kind = config.similarity;
    match config.loss {
        LossKind::Ms => {
            if toggles.any() {
                ms_star_loss(batch, table, &config.ms, kind)
            } else {
                ms_loss(batch, config.gamma, config.ms.varrho, config.ms.sigma, kind)
            }
        }
        LossKind::Triplet => {
            if toggles.any() {
                triplet_star_loss(batch, table, kind)
            } else {
                triplet_batch_loss(batch, config.gamma, kind)
            }
        }
        LossKind::Lifted => {
            if toggles.class_divergence {
                lifted_loss(batch, MarginSource::Table(table), kind)
            } else {
                lifted_loss(batch, MarginSource::Fixed(config.gamma), kind)
            }
        }
    }
}

/// One optimization epoch over class-balanced mini-batches. The margin table
/// must carry this epoch's stamp.
pub fn train_epoch(
    model: &mut MlpModel,
    adam: &mut AdamState,
    features: &[Vec<f64>],
    labels: &[usize],
    table: &MarginTable,
    policy: &AugmentPolicy,
    config: &TrainConfig,
    epoch: u64,
) -> Result<(f64, usize)> {
    if table.epoch() != epoch {
        return Err(Error::StaleMarginTable {
            table_epoch: table.epoch(),
            current_epoch: epoch,
        });
    }
    check_batch_spec(labels, config)?;
    let toggles = config.effective_components();
    // The lifted loss has no augmentation term, so never pay for attaching.
    let attach_augs = toggles.sample_consistency && config.loss != LossKind::Lifted;

    let groups = group_by_class(labels);
    let batch_size = config.classes_per_batch * config.samples_per_class;
    let num_batches = (features.len() / batch_size).max(1);
    let mut rng = stream([config.seed, epoch, 0, tag::BATCH]);

    let mut total_loss = 0.0;
    for _ in 0..num_batches {
        let class_picks =
            rand::seq::index::sample(&mut rng, groups.len(), config.classes_per_batch);
        let mut batch_features: Vec<Vec<f64>> = Vec::with_capacity(batch_size * 3);
        let mut batch_labels: Vec<usize> = Vec::with_capacity(batch_size * 3);
        let mut aug_of: Vec<Option<usize>> = Vec::with_capacity(batch_size * 3);
        let mut source: Vec<usize> = Vec::with_capacity(batch_size);
        for g in class_picks {
            let (class, members) = &groups[g];
            for pick in
                rand::seq::index::sample(&mut rng, members.len(), config.samples_per_class)
            {
                let gi = members[pick];
                batch_features.push(features[gi].clone());
                batch_labels.push(*class);
                aug_of.push(None);
                source.push(gi);
            }
        }
        if attach_augs {
            for (pos, &gi) in source.iter().enumerate() {
                let mut s = augment_stream(config.seed, gi as u64, epoch);
                let weak = weak_augment(&features[gi], policy, &mut s);
                let strong = strong_augment(&features[gi], policy, &mut s);
                for aug in [weak, strong] {
                    batch_features.push(aug);
                    batch_labels.push(batch_labels[pos]);
                    aug_of.push(Some(pos));
                }
            }
        }
        let (embeddings, cache) = model.forward(&batch_features)?;
        let batch = EmbeddingBatch {
            embeddings,
            labels: batch_labels,
            aug_of,
            epoch,
        };
        let loss = eval_loss(&batch, table, config, toggles)?;
        let grads = model.backward(&cache, &loss.grads)?;
        adam.step(model, &grads)?;
        total_loss += loss.value;
    }
    Ok((total_loss / num_batches as f64, num_batches))
}

/// Builds this epoch's margin table: statistics pass in evaluation mode (no
/// augmentations), then the margin construction, honoring component toggles.
pub fn epoch_margin_table(
    model: &MlpModel,
    features: &[Vec<f64>],
    labels: &[usize],
    config: &TrainConfig,
    epoch: u64,
) -> Result<MarginTable> {
    let toggles = config.effective_components();
    if !toggles.any() {
        let c = labels.iter().max().map_or(0, |m| m + 1);
        return Ok(MarginTable::baseline(config.gamma, c, epoch));
    }
    let keep: Vec<usize> = match config.stats_cap {
        Some(cap) => subsample_per_class(labels, cap),
        None => (0..labels.len()).collect(),
    };
    let feats: Vec<Vec<f64>> = keep.iter().map(|&i| features[i].clone()).collect();
    let labs: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
    let embeddings = model.forward_eval(&feats)?;
    let stats = class_similarity_matrix(&embeddings, &labs, config.similarity, epoch)?;
    let table = build_margin_table(
        &stats,
        &embeddings,
        &labs,
        &config.margin_params(),
        config.similarity,
    )?;
    Ok(if toggles.class_divergence {
        table
    } else {
        table.with_collapsed_class_margins()
    })
}

/// Full training loop: per epoch, statistics pass, margin table, then one
/// optimization epoch. The observer sees the model after each epoch.
pub fn fit<F>(
    model: &mut MlpModel,
    features: &[Vec<f64>],
    labels: &[usize],
    config: &TrainConfig,
    mut observer: F,
) -> Result<FitOutput>
where
    F: FnMut(usize, &MlpModel, &EpochStats),
{
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    if config.epochs > 0 {
        check_batch_spec(labels, config)?;
    }
    let policy = config
        .augment
        .unwrap_or_else(|| AugmentPolicy::scaled_to(features));
    policy.validate()?;

    let mut adam = AdamState::new(model, config.adam);
    let mut history = Vec::with_capacity(config.epochs);
    let mut final_margins = None;
    for epoch in 0..config.epochs {
        let table = epoch_margin_table(model, features, labels, config, epoch as u64)?;
        let (mean_loss, batches) = train_epoch(
            model,
            &mut adam,
            features,
            labels,
            &table,
            &policy,
            config,
            epoch as u64,
        )?;
        let stats = EpochStats {
            epoch,
            mean_loss,
            batches,
            margins: MarginSummary::of(&table),
        };
        observer(epoch, model, &stats);
        history.push(stats);
        final_margins = Some(table);
    }
    Ok(FitOutput {
        history,
        final_margins,
    })
}
