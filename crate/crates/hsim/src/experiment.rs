//! Config-driven experiment runs: end-to-end training with noise injection,
//! per-epoch metrics, the component-ablation grid, and on-disk artifacts.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{generate_hierarchical, load_features, FeatureDataset, FileFormat, HierarchySpec};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, RecallReport};
use crate::geometry::SimilarityKind;
use crate::margins::MarginTable;
use crate::model::MlpModel;
use crate::perturb::{inject_label_noise, NoiseSpec};
use crate::trainer::{fit, ComponentToggles, EpochStats, LossKind, TrainConfig};

/// Curvature used when an ablation turns hyperbolic geometry on and the base
/// config is Euclidean. Chosen inside the window where the exponential map
/// neither clamps at the ball boundary (tau > 1/8) nor compresses all
/// similarities toward 1 (tau well below 1), so `exp(-d)` scores spread over
/// most of `(0, 1]`.
pub const DEFAULT_CURVATURE: f64 = 0.15;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { spec: HierarchySpec, seed: u64 },
    File { path: String, format: FileFormat },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_eval_k")]
    pub eval_k: Vec<usize>,
    #[serde(default)]
    pub dump_margins: bool,
    /// Seeds for the ablation grid; defaults to the single training seed.
    #[serde(default)]
    pub ablation_seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub run_id: Option<String>,
}

fn default_eval_k() -> Vec<usize> {
    vec![1, 2, 4, 8]
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(Error::InvalidConfig(
                "eval_k must be nonempty with k >= 1".into(),
            ));
        }
        self.train.validate()
    }

    /// Copy with dataset, noise and training seeds all set to `seed`, so one
    /// seed value selects one fully independent world.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.train.seed = seed;
        out.noise.seed = seed;
        if let DatasetSource::Synthetic { seed: s, .. } = &mut out.dataset {
            *s = seed;
        }
        out
    }

    pub fn load_dataset(&self) -> Result<FeatureDataset> {
        match &self.dataset {
            DatasetSource::Synthetic { spec, seed } => generate_hierarchical(spec, *seed),
            DatasetSource::File { path, format } => load_features(Path::new(path), *format),
        }
    }
}

fn sim_kind_name(kind: SimilarityKind) -> &'static str {
    match kind {
        SimilarityKind::Cosine => "cosine",
        SimilarityKind::NegExpPoincare { .. } => "neg_exp_poincare",
    }
}

fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Triplet => "triplet",
        LossKind::Lifted => "lifted",
        LossKind::Ms => "ms",
    }
}

/// One metrics line: per-epoch rows plus one final row per run.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub loss: String,
    pub margin_mode: String,
    pub sim_kind: String,
    pub noise_ratio: f64,
    pub seed: u64,
    pub epoch: usize,
    pub mean_loss: f64,
    pub recalls: Vec<f64>,
}

pub fn metrics_csv_header(k_values: &[usize]) -> String {
    let mut h = String::from("run_id,loss,margin_mode,sim_kind,noise_ratio,seed,epoch,mean_loss");
    for k in k_values {
        h.push_str(&format!(",recall@{k}"));
    }
    h
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let mut line = format!(
            "{},{},{},{},{},{},{},{:.9}",
            self.run_id,
            self.loss,
            self.margin_mode,
            self.sim_kind,
            self.noise_ratio,
            self.seed,
            self.epoch,
            self.mean_loss
        );
        for r in &self.recalls {
            line.push_str(&format!(",{r:.6}"));
        }
        line
    }
}

pub fn rows_to_csv(k_values: &[usize], rows: &[MetricsRow]) -> String {
    let mut out = metrics_csv_header(k_values);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// In-memory result of one run.
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub history: Vec<EpochStats>,
    pub final_recall: RecallReport,
    pub model: MlpModel,
    pub final_margins: Option<MarginTable>,
    pub flipped_labels: usize,
}

/// Executes one experiment: data, noise on the train split only, training,
/// evaluation on the clean test split. No files are written.
pub fn run_core(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let (train_features, clean_train_labels) = dataset.train_split();
    let (test_features, test_labels) = dataset.test_split();
    if test_features.len() < 2 {
        return Err(Error::InvalidConfig(
            "test split needs at least 2 samples".into(),
        ));
    }
    let mut ks: Vec<usize> = config.eval_k.clone();
    ks.sort_unstable();
    ks.dedup();
    if *ks.last().unwrap() >= test_features.len() {
        return Err(Error::KTooLarge {
            k: *ks.last().unwrap(),
            n: test_features.len(),
        });
    }

    let (train_labels, flipped_mask) = inject_label_noise(
        &clean_train_labels,
        dataset.num_classes,
        &config.noise,
    )?;
    let flipped_labels = flipped_mask.iter().filter(|&&m| m).count();

    let mut model = MlpModel::new(
        &config.train.model_dims(dataset.dim()),
        config.train.seed,
    )?;

    let run_id = config.run_id.clone().unwrap_or_else(|| "run".to_string());
    let toggles = config.train.effective_components();
    let row_of = |epoch: usize, mean_loss: f64, recall: &RecallReport| MetricsRow {
        run_id: run_id.clone(),
        loss: loss_name(config.train.loss).to_string(),
        margin_mode: toggles.mode_name().to_string(),
        sim_kind: sim_kind_name(config.train.similarity).to_string(),
        noise_ratio: config.noise.ratio,
        seed: config.train.seed,
        epoch,
        mean_loss,
        recalls: recall.recalls.clone(),
    };

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut eval_err: Option<Error> = None;
    let kind = config.train.similarity;
    let fit_out = fit(
        &mut model,
        &train_features,
        &train_labels,
        &config.train,
        |epoch, m, stats| {
            if eval_err.is_some() {
                return;
            }
            match m
                .forward_eval(&test_features)
                .and_then(|e| recall_at_k(&e, &test_labels, &ks, kind))
            {
                Ok(rep) => rows.push(row_of(epoch, stats.mean_loss, &rep)),
                Err(e) => eval_err = Some(e),
            }
        },
    )?;
    if let Some(e) = eval_err {
        return Err(e);
    }

    let final_recall = recall_at_k(
        &model.forward_eval(&test_features)?,
        &test_labels,
        &ks,
        kind,
    )?;
    let last_loss = fit_out.history.last().map_or(0.0, |s| s.mean_loss);
    rows.push(row_of(config.train.epochs, last_loss, &final_recall));

    Ok(RunOutput {
        rows,
        history: fit_out.history,
        final_recall,
        model,
        final_margins: fit_out.final_margins,
        flipped_labels,
    })
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a ExperimentConfig,
    flipped_labels: usize,
    history: &'a [EpochStats],
    final_recall: &'a RecallReport,
    wall_clock_secs: f64,
}

/// Runs one experiment and writes `metrics.csv`, `report.json`, `config.json`,
/// `model.ckpt` and (optionally) `margins.json` into `out_dir`.
///
/// `config_bytes`, when given, is copied verbatim as the config echo;
/// otherwise the parsed config is re-serialized.
pub fn run(
    config: &ExperimentConfig,
    out_dir: &Path,
    config_bytes: Option<&[u8]>,
) -> Result<RunOutput> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let out = run_core(config)?;

    let mut ks = config.eval_k.clone();
    ks.sort_unstable();
    ks.dedup();
    std::fs::write(out_dir.join("metrics.csv"), rows_to_csv(&ks, &out.rows))?;
    match config_bytes {
        Some(bytes) => std::fs::write(out_dir.join("config.json"), bytes)?,
        None => std::fs::write(
            out_dir.join("config.json"),
            serde_json::to_string_pretty(config)?,
        )?,
    }
    out.model.save(&out_dir.join("model.ckpt"))?;
    if config.dump_margins {
        if let Some(table) = &out.final_margins {
            std::fs::write(
                out_dir.join("margins.json"),
                serde_json::to_string_pretty(&table.diagnostic_json())?,
            )?;
        }
    }
    let report = RunReport {
        config,
        flipped_labels: out.flipped_labels,
        history: &out.history,
        final_recall: &out.final_recall,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(out)
}

/// The Table-V style component grid plus the hyperbolic on/off pair.
pub fn ablation_grid(base_kind: SimilarityKind) -> Vec<(&'static str, ComponentToggles, SimilarityKind)> {
    let full = ComponentToggles {
        class_divergence: true,
        sample_consistency: true,
    };
    let hyperbolic = match base_kind {
        SimilarityKind::NegExpPoincare { .. } => base_kind,
        SimilarityKind::Cosine => SimilarityKind::NegExpPoincare {
            curvature: DEFAULT_CURVATURE,
        },
    };
    vec![
        (
            "baseline",
            ComponentToggles {
                class_divergence: false,
                sample_consistency: false,
            },
            base_kind,
        ),
        (
            "class_wise",
            ComponentToggles {
                class_divergence: true,
                sample_consistency: false,
            },
            base_kind,
        ),
        (
            "sample_wise",
            ComponentToggles {
                class_divergence: false,
                sample_consistency: true,
            },
            base_kind,
        ),
        ("full", full, base_kind),
        ("hg_off", full, SimilarityKind::Cosine),
        ("hg_on", full, hyperbolic),
    ]
}

pub struct AblationOutput {
    /// Final metrics row per (grid row, seed), grid order outer.
    pub rows: Vec<MetricsRow>,
    /// Mean recall@k per grid row, aligned with the grid order.
    pub mean_recalls: Vec<(String, Vec<f64>)>,
}

/// Runs the ablation grid, sharing each seed across all rows.
pub fn run_ablation_core(config: &ExperimentConfig) -> Result<AblationOutput> {
    let seeds = config
        .ablation_seeds
        .clone()
        .unwrap_or_else(|| vec![config.train.seed]);
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut mean_recalls = Vec::new();
    for (name, toggles, kind) in ablation_grid(config.train.similarity) {
        let mut sums: Vec<f64> = Vec::new();
        for &seed in &seeds {
            let mut cfg = config.reseeded(seed);
            cfg.train.components = Some(toggles);
            cfg.train.similarity = kind;
            cfg.run_id = Some(name.to_string());
            let out = run_core(&cfg)?;
            let last = out.rows.last().unwrap().clone();
            if sums.is_empty() {
                sums = vec![0.0; last.recalls.len()];
            }
            for (s, r) in sums.iter_mut().zip(&last.recalls) {
                *s += r;
            }
            rows.push(last);
        }
        mean_recalls.push((
            name.to_string(),
            sums.iter().map(|s| s / seeds.len() as f64).collect(),
        ));
    }
    Ok(AblationOutput { rows, mean_recalls })
}

/// Runs the grid and writes `ablation.csv` plus `ablation_report.json`.
pub fn run_ablation(config: &ExperimentConfig, out_dir: &Path) -> Result<AblationOutput> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let out = run_ablation_core(config)?;
    let mut ks = config.eval_k.clone();
    ks.sort_unstable();
    ks.dedup();
    std::fs::write(out_dir.join("ablation.csv"), rows_to_csv(&ks, &out.rows))?;
    let report = serde_json::json!({
        "config": config,
        "mean_recalls": out.mean_recalls
            .iter()
            .map(|(name, recalls)| serde_json::json!({"row": name, "recalls": recalls}))
            .collect::<Vec<_>>(),
        "wall_clock_secs": started.elapsed().as_secs_f64(),
    });
    std::fs::write(
        out_dir.join("ablation_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(out)
}
