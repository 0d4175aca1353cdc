//! Feature-space contrastive augmentation and symmetric label-noise
//! injection.
//!
//! The image-space weak/strong augmentations of the original protocol are
//! realized in feature space: weak adds a small isotropic Gaussian jitter,
//! strong adds a larger jitter and zeroes a fraction of coordinates. Label
//! noise flips an exact fraction of labels to uniformly chosen other classes.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::norm;
use crate::rng::{stream, tag};

/// Jitter scales and masking fraction for the weak/strong augmentation pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask_frac: f64,
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.weak_sigma < 0.0 || !self.weak_sigma.is_finite() {
            return Err(Error::InvalidConfig("weak_sigma must be >= 0".into()));
        }
        if self.strong_sigma < self.weak_sigma || !self.strong_sigma.is_finite() {
            return Err(Error::InvalidConfig(
                "strong_sigma must be >= weak_sigma".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.strong_mask_frac) {
            return Err(Error::InvalidConfig(
                "strong_mask_frac must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Default policy scaled to the data: weak jitter at 5% of the mean
    /// feature norm, strong at 3x weak plus 25% coordinate masking.
    pub fn scaled_to(features: &[Vec<f64>]) -> Self {
        let mean_norm = if features.is_empty() {
            1.0
        } else {
            features.iter().map(|f| norm(f)).sum::<f64>() / features.len() as f64
        };
        let weak = 0.05 * mean_norm;
        Self {
            weak_sigma: weak,
            strong_sigma: 3.0 * weak,
            strong_mask_frac: 0.25,
        }
    }
}

/// Symmetric label-flipping spec: exactly `round(ratio * n)` labels change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { ratio: 0.0, seed: 0 }
    }
}

/// The per-sample augmentation stream for epoch `epoch`. Both augmentations
/// of a sample are drawn from this one stream (weak first), so batch
/// composition cannot alter the draws.
pub fn augment_stream(global_seed: u64, sample: u64, epoch: u64) -> rand_chacha::ChaCha8Rng {
    stream([global_seed, sample, epoch, tag::AUGMENT])
}

/// Weak augmentation: `x + eta`, `eta ~ N(0, weak_sigma^2 I)`.
pub fn weak_augment<R: Rng>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&c| {
            let eta: f64 = rng.sample(StandardNormal);
            c + policy.weak_sigma * eta
        })
        .collect()
}

/// Strong augmentation: larger jitter, then `floor(strong_mask_frac * d)`
/// uniformly chosen coordinates zeroed.
pub fn strong_augment<R: Rng>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .map(|&c| {
            let eta: f64 = rng.sample(StandardNormal);
            c + policy.strong_sigma * eta
        })
        .collect();
    let k = (policy.strong_mask_frac * x.len() as f64).floor() as usize;
    if k > 0 {
        for i in index::sample(rng, x.len(), k) {
            out[i] = 0.0;
        }
    }
    out
}

/// Flips exactly `round(ratio * n)` labels, chosen uniformly without
/// replacement, each to a uniformly drawn *different* class. Returns the new
/// labels and a diagnostic mask of flipped positions (never shown to
/// training).
pub fn inject_label_noise(
    labels: &[usize],
    num_classes: usize,
    spec: &NoiseSpec,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(Error::InvalidConfig(format!(
            "noise ratio must lie in [0, 1], got {}",
            spec.ratio
        )));
    }
    let n = labels.len();
    let flips = (spec.ratio * n as f64).round() as usize;
    if flips > 0 && num_classes < 2 {
        return Err(Error::TooFewClasses {
            classes: num_classes,
        });
    }
    let mut out = labels.to_vec();
    let mut mask = vec![false; n];
    if flips == 0 {
        return Ok((out, mask));
    }
    let mut rng = stream([spec.seed, 0, 0, tag::NOISE]);
    let mut chosen: Vec<usize> = index::sample(&mut rng, n, flips).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let r = rng.random_range(0..num_classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
        mask[i] = true;
    }
    Ok((out, mask))
}
