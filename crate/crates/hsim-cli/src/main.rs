//! Experiment harness: `generate`, `train`, `eval` and `ablate` subcommands
//! driven by a JSON config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hsim::dataio::{save_features, FileFormat};
use hsim::eval::{neighbor_dump, recall_at_k};
use hsim::experiment::{run, run_ablation, ExperimentConfig};
use hsim::model::MlpModel;

#[derive(Parser)]
#[command(name = "hsim", version, about = "Adaptive hierarchical-margin metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override every seed in the config (dataset, noise, training).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write the final margin table as JSON.
    #[arg(long)]
    dump_margins: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the config's dataset as both binary and CSV feature files.
    Generate(CommonArgs),
    /// Train a model: writes metrics.csv, report.json, config.json, model.ckpt.
    Train(CommonArgs),
    /// Evaluate an existing checkpoint on the config's clean test split.
    Eval(EvalArgs),
    /// Run the component-ablation grid (plus hyperbolic on/off).
    Ablate(CommonArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Neighbors per query in the textual dump.
    #[arg(long, default_value_t = 8)]
    top_k: usize,
}

fn load_config(args: &CommonArgs) -> Result<(ExperimentConfig, Vec<u8>)> {
    let bytes = std::fs::read(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let text = String::from_utf8(bytes.clone()).context("config is not UTF-8")?;
    let mut cfg = ExperimentConfig::from_json_str(&text).context("parsing config")?;
    if let Some(seed) = args.seed {
        cfg = cfg.reseeded(seed);
    }
    if args.dump_margins {
        cfg.dump_margins = true;
    }
    Ok((cfg, bytes))
}

fn cmd_generate(args: &CommonArgs) -> Result<()> {
    let (cfg, _) = load_config(args)?;
    let dataset = cfg.load_dataset()?;
    std::fs::create_dir_all(&args.out)?;
    let bin = args.out.join("dataset.hsfd");
    let csv = args.out.join("dataset.csv");
    save_features(&dataset, &bin, FileFormat::Binary)?;
    save_features(&dataset, &csv, FileFormat::Csv)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {} and {}",
        dataset.len(),
        dataset.num_classes,
        dataset.dim(),
        bin.display(),
        csv.display()
    );
    Ok(())
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let (cfg, bytes) = load_config(args)?;
    let out = run(&cfg, &args.out, Some(&bytes))?;
    println!("trained {} epochs; artifacts in {}", out.history.len(), args.out.display());
    for (k, r) in out.final_recall.k_values.iter().zip(&out.final_recall.recalls) {
        println!("recall@{k} = {r:.4}");
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (cfg, _) = load_config(&args.common)?;
    let dataset = cfg.load_dataset()?;
    let (test_features, test_labels) = dataset.test_split();
    if test_features.is_empty() {
        bail!("dataset has an empty test split");
    }
    let model = MlpModel::load(&args.checkpoint)?;
    let embeddings = model.forward_eval(&test_features)?;
    let kind = cfg.train.similarity;
    let report = recall_at_k(&embeddings, &test_labels, &cfg.eval_k, kind)?;
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(args.common.out.join("recall.csv"), report.to_csv())?;
    let queries: Vec<usize> = (0..test_features.len().min(5)).collect();
    let dump = neighbor_dump(&embeddings, &test_labels, &queries, args.top_k, kind)?;
    std::fs::write(args.common.out.join("neighbors.txt"), dump)?;
    for (k, r) in report.k_values.iter().zip(&report.recalls) {
        println!("recall@{k} = {r:.4}");
    }
    Ok(())
}

fn cmd_ablate(args: &CommonArgs) -> Result<()> {
    let (cfg, _) = load_config(args)?;
    let out = run_ablation(&cfg, &args.out)?;
    println!("ablation grid written to {}", args.out.join("ablation.csv").display());
    for (name, recalls) in &out.mean_recalls {
        let r1 = recalls.first().copied().unwrap_or(f64::NAN);
        println!("{name:>12}: mean recall@{} = {r1:.4}", min_k(&cfg));
    }
    Ok(())
}

fn min_k(cfg: &ExperimentConfig) -> usize {
    cfg.eval_k.iter().copied().min().unwrap_or(1)
}

fn ensure_parent_exists(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            bail!("directory {} does not exist", parent.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(a) => {
            ensure_parent_exists(&a.config)?;
            cmd_generate(a)
        }
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}
