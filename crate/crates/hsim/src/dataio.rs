//! Synthetic hierarchical dataset generation and feature-file input/output.
//!
//! Two on-disk formats carry `(label, feature-vector)` tables:
//!
//! * CSV: header `label,f0,f1,...`, one row per sample, 17 significant
//!   digits so values round-trip exactly.
//! * Binary (`HSFD1`): magic, little-endian `u32` sample count, dimension and
//!   class count, then `n` `u32` labels followed by `n * d` `f64` values
//!   row-major. Bit-exact round trips.
//!
//! Neither format stores the train/test partition; datasets are re-split
//! deterministically (per class, alternating indices) on construction.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

const FEATURE_MAGIC: &[u8; 5] = b"HSFD1";
const MAX_DIM: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Csv,
    Binary,
}

/// Where a dataset came from, echoed into experiment reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { spec: HierarchySpec, seed: u64 },
    File { path: String },
}

/// Feature vectors with integer class labels and a train/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub provenance: Provenance,
}

impl FeatureDataset {
    /// Assembles a dataset, validating labels and computing the stratified
    /// split: per class, indices alternate train/test so counts differ by at
    /// most one.
    pub fn from_parts(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::InconsistentDimensions(format!(
                "{} feature rows vs {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features.first().map_or(0, Vec::len);
        for (i, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::InconsistentDimensions(format!(
                    "row {i} has {} values, expected {dim}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "dataset features",
                });
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: num_classes,
            });
        }
        let mut seen = vec![0usize; num_classes];
        let mut train_indices = Vec::new();
        let mut test_indices = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if seen[l] % 2 == 0 {
                train_indices.push(i);
            } else {
                test_indices.push(i);
            }
            seen[l] += 1;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            train_indices,
            test_indices,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn select(&self, indices: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        (
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn train_split(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.select(&self.train_indices)
    }

    pub fn test_split(&self) -> (Vec<Vec<f64>>, Vec<usize>) {
        self.select(&self.test_indices)
    }
}

/// Two-level Gaussian hierarchy: superclass centers, subclass centers offset
/// from them, samples jittered around subclass centers. Total classes
/// `superclasses * subclasses_per_super`; subclasses of one superclass are
/// "siblings" and measurably more similar than cross-superclass pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub superclasses: usize,
    pub subclasses_per_super: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub super_scale: f64,
    pub sub_scale: f64,
    pub noise_scale: f64,
}

impl HierarchySpec {
    pub fn num_classes(&self) -> usize {
        self.superclasses * self.subclasses_per_super
    }

    pub fn validate(&self) -> Result<()> {
        if self.superclasses == 0
            || self.subclasses_per_super == 0
            || self.samples_per_class == 0
            || self.dim == 0
        {
            return Err(Error::InvalidSpec("all counts must be >= 1".into()));
        }
        let ordered = self.super_scale > self.sub_scale
            && self.sub_scale > self.noise_scale
            && self.noise_scale > 0.0;
        if !ordered {
            return Err(Error::InvalidSpec(format!(
                "scales must satisfy super > sub > noise > 0, got {} / {} / {}",
                self.super_scale, self.sub_scale, self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Draws the hierarchical mixture. Deterministic given `(spec, seed)`.
pub fn generate_hierarchical(spec: &HierarchySpec, seed: u64) -> Result<FeatureDataset> {
    spec.validate()?;
    let mut rng = stream([seed, 0, 0, tag::GENERATE]);
    let d = spec.dim;
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, center: &[f64], scale: f64| -> Vec<f64> {
        center
            .iter()
            .map(|&c| {
                let eta: f64 = rng.sample(StandardNormal);
                c + scale * eta
            })
            .collect()
    };
    let origin = vec![0.0; d];
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for s in 0..spec.superclasses {
        let super_center = gauss(&mut rng, &origin, spec.super_scale);
        for k in 0..spec.subclasses_per_super {
            let sub_center = gauss(&mut rng, &super_center, spec.sub_scale);
            let class = s * spec.subclasses_per_super + k;
            for _ in 0..spec.samples_per_class {
                features.push(gauss(&mut rng, &sub_center, spec.noise_scale));
                labels.push(class);
            }
        }
    }
    FeatureDataset::from_parts(
        features,
        labels,
        spec.num_classes(),
        Provenance::Synthetic { spec: *spec, seed },
    )
}

/// Parses the CSV feature format from raw bytes.
pub fn parse_features_csv(data: &[u8], path: &str) -> Result<FeatureDataset> {
    let malformed = |line: usize, message: String| Error::MalformedFile {
        path: path.to_string(),
        line,
        message,
    };
    let text =
        std::str::from_utf8(data).map_err(|e| malformed(0, format!("not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(malformed(1, "header must start with `label`".into()));
    }
    let dim = cols.len() - 1;
    for (i, c) in cols.iter().skip(1).enumerate() {
        if *c != format!("f{i}") {
            return Err(malformed(1, format!("unexpected header column {c:?}")));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut parts = line.split(',');
        let label: usize = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| malformed(lineno, format!("bad label: {e}")))?;
        let row: Vec<f64> = parts
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|e| malformed(lineno, format!("bad value {p:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != dim {
            return Err(malformed(
                lineno,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(malformed(lineno, "non-finite value".into()));
        }
        features.push(row);
        labels.push(label);
    }
    if features.is_empty() {
        return Err(malformed(1, "no data rows".into()));
    }
    let num_classes = labels.iter().max().unwrap() + 1;
    FeatureDataset::from_parts(
        features,
        labels,
        num_classes,
        Provenance::File { path: path.to_string() },
    )
}

/// Parses the `HSFD1` binary feature format from raw bytes.
pub fn parse_features_binary(data: &[u8], path: &str) -> Result<FeatureDataset> {
    let malformed = |message: String| Error::MalformedFile {
        path: path.to_string(),
        line: 0,
        message,
    };
    if data.len() < 17 {
        return Err(malformed("truncated header".into()));
    }
    if &data[..5] != FEATURE_MAGIC {
        return Err(Error::UnknownMagic {
            found: String::from_utf8_lossy(&data[..5]).into_owned(),
            expected: "HSFD1",
        });
    }
    let n = u32::from_le_bytes(data[5..9].try_into().unwrap());
    let d = u32::from_le_bytes(data[9..13].try_into().unwrap());
    let c = u32::from_le_bytes(data[13..17].try_into().unwrap());
    if n == 0 || d == 0 || c == 0 || d > MAX_DIM {
        return Err(malformed(format!("implausible counts n={n} d={d} c={c}")));
    }
    let expected = 17u64 + n as u64 * 4 + n as u64 * d as u64 * 8;
    if data.len() as u64 != expected {
        return Err(malformed(format!(
            "expected {expected} bytes for n={n} d={d}, found {}",
            data.len()
        )));
    }
    let mut labels = Vec::with_capacity(n as usize);
    let mut off = 17usize;
    for _ in 0..n {
        let l = u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
        if l >= c {
            return Err(malformed(format!("label {l} out of range for c={c}")));
        }
        labels.push(l as usize);
        off += 4;
    }
    let mut features = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let mut row = Vec::with_capacity(d as usize);
        for _ in 0..d {
            let v = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(malformed("non-finite feature value".into()));
            }
            row.push(v);
            off += 8;
        }
        features.push(row);
    }
    FeatureDataset::from_parts(
        features,
        labels,
        c as usize,
        Provenance::File { path: path.to_string() },
    )
}

pub fn features_to_csv(dataset: &FeatureDataset) -> String {
    let d = dataset.dim();
    let mut out = String::from("label");
    for i in 0..d {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (f, &l) in dataset.features.iter().zip(&dataset.labels) {
        out.push_str(&l.to_string());
        for v in f {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn features_to_binary(dataset: &FeatureDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    for &l in &dataset.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for row in &dataset.features {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_features(dataset: &FeatureDataset, path: &Path, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => std::fs::write(path, features_to_csv(dataset))?,
        FileFormat::Binary => std::fs::write(path, features_to_binary(dataset))?,
    }
    Ok(())
}

pub fn load_features(path: &Path, format: FileFormat) -> Result<FeatureDataset> {
    let data = std::fs::read(path)?;
    let name = path.display().to_string();
    match format {
        FileFormat::Csv => parse_features_csv(&data, &name),
        FileFormat::Binary => parse_features_binary(&data, &name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class_stats::class_similarity_matrix;
    use crate::geometry::SimilarityKind;

    fn small_spec() -> HierarchySpec {
        HierarchySpec {
            superclasses: 2,
            subclasses_per_super: 2,
            samples_per_class: 10,
            dim: 8,
            super_scale: 1.0,
            sub_scale: 0.4,
            noise_scale: 0.1,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_hierarchical(&small_spec(), 7).unwrap();
        let b = generate_hierarchical(&small_spec(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_hierarchical(&small_spec(), 8).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn split_is_stratified() {
        let ds = generate_hierarchical(&small_spec(), 3).unwrap();
        for class in 0..ds.num_classes {
            let train = ds
                .train_indices
                .iter()
                .filter(|&&i| ds.labels[i] == class)
                .count();
            let test = ds
                .test_indices
                .iter()
                .filter(|&&i| ds.labels[i] == class)
                .count();
            assert!(train >= 1 && test >= 1);
            assert!(train.abs_diff(test) <= 1);
        }
        assert_eq!(ds.train_indices.len() + ds.test_indices.len(), ds.len());
    }

    #[test]
    fn single_cluster_concentrates() {
        let spec = HierarchySpec {
            superclasses: 1,
            subclasses_per_super: 1,
            samples_per_class: 4,
            dim: 4,
            super_scale: 1.0,
            sub_scale: 0.5,
            noise_scale: 0.05,
        };
        // Over many seeds, same-class samples stay within a few noise scales
        // of their mutual mean essentially always.
        let mut within = 0usize;
        let mut total = 0usize;
        for seed in 0..50 {
            let ds = generate_hierarchical(&spec, seed).unwrap();
            let mut mean = vec![0.0; spec.dim];
            for f in &ds.features {
                for (m, v) in mean.iter_mut().zip(f) {
                    *m += v / ds.len() as f64;
                }
            }
            for f in &ds.features {
                let dist: f64 = f
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                total += 1;
                if dist < 3.0 * spec.noise_scale * (spec.dim as f64).sqrt() {
                    within += 1;
                }
            }
        }
        assert!(within as f64 / total as f64 > 0.99);
    }

    /// Sibling subclasses (same superclass) must look more similar than
    /// cross-superclass pairs under the inter-class statistic.
    #[test]
    fn sibling_similarity_exceeds_cross_super() {
        let spec = small_spec();
        let mut sibling_sum = 0.0;
        let mut cross_sum = 0.0;
        let mut sibling_n = 0usize;
        let mut cross_n = 0usize;
        for seed in 0..20 {
            let ds = generate_hierarchical(&spec, 100 + seed).unwrap();
            let m = class_similarity_matrix(
                &ds.features,
                &ds.labels,
                SimilarityKind::Cosine,
                0,
            )
            .unwrap();
            let k = spec.subclasses_per_super;
            for a in 0..ds.num_classes {
                for b in (a + 1)..ds.num_classes {
                    if a / k == b / k {
                        sibling_sum += m.get(a, b);
                        sibling_n += 1;
                    } else {
                        cross_sum += m.get(a, b);
                        cross_n += 1;
                    }
                }
            }
        }
        let sibling_mean = sibling_sum / sibling_n as f64;
        let cross_mean = cross_sum / cross_n as f64;
        assert!(
            sibling_mean > cross_mean,
            "sibling {sibling_mean} vs cross {cross_mean}"
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec();
        s.noise_scale = 0.5; // violates sub > noise
        assert!(matches!(
            generate_hierarchical(&s, 0),
            Err(Error::InvalidSpec(_))
        ));
        let mut s = small_spec();
        s.samples_per_class = 0;
        assert!(generate_hierarchical(&s, 0).is_err());
    }

    #[test]
    fn binary_roundtrip_bit_exact() {
        let ds = generate_hierarchical(&small_spec(), 11).unwrap();
        let bytes = features_to_binary(&ds);
        let back = parse_features_binary(&bytes, "mem").unwrap();
        assert_eq!(ds.features, back.features);
        assert_eq!(ds.labels, back.labels);
        assert_eq!(ds.num_classes, back.num_classes);
        assert_eq!(ds.train_indices, back.train_indices);
    }

    #[test]
    fn csv_roundtrip_value_exact() {
        let ds = generate_hierarchical(&small_spec(), 13).unwrap();
        let text = features_to_csv(&ds);
        let back = parse_features_csv(text.as_bytes(), "mem").unwrap();
        assert_eq!(ds.labels, back.labels);
        for (a, b) in ds.features.iter().zip(&back.features) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn csv_examples_and_errors() {
        let ds = parse_features_csv(b"label,f0,f1\n2,0.5,-1.0\n0,1,2\n1,0,0\n", "t.csv").unwrap();
        assert_eq!(ds.labels[0], 2);
        assert_eq!(ds.features[0], vec![0.5, -1.0]);
        assert_eq!(ds.num_classes, 3);

        let err = parse_features_csv(b"label,f0,f1\n1,0.5\n", "t.csv").unwrap_err();
        match err {
            Error::MalformedFile { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn binary_rejects_bad_magic_and_truncation() {
        assert!(matches!(
            parse_features_binary(b"XXXXX\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00", "m"),
            Err(Error::UnknownMagic { .. })
        ));
        let ds = generate_hierarchical(&small_spec(), 1).unwrap();
        let mut bytes = features_to_binary(&ds);
        bytes.pop();
        assert!(matches!(
            parse_features_binary(&bytes, "m"),
            Err(Error::MalformedFile { .. })
        ));
    }
}
