//! Experiment harness: dataset generation, training, evaluation,
//! perturbation, ablations, throughput benchmarking and trajectory export.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gdp::ablate::{ablate, AblationToggle};
use gdp::bench::{bench_frames, write_bench_csv};
use gdp::checkpoint::load_checkpoint;
use gdp::config::Config;
use gdp::dataset::{generate_dataset, load_dataset, perturb_dataset, perturb_dataset_custom};
use gdp::eval::{evaluate, write_report};
use gdp::export::{export_trajectory, plot_from_csv};
use gdp::model::Model;
use gdp::synth::{PerturbKind, PerturbPreset};
use gdp::train::train;

/// Multi-view camera pose regression with graph neural diffusion.
#[derive(Parser)]
#[command(name = "gdp", version, about)]
struct Cli {
    /// Declarative config file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path overrides, e.g. --set train.epochs=10
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed (overrides data.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a dataset.
    Train {
        /// Dataset directory (resolved under GDP_DATA_DIR when relative).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for the checkpoint and logs.
        #[arg(long)]
        out: PathBuf,
        /// Training seed (overrides train.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a perturbed sibling of a dataset.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to a sibling named after the preset.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Named preset (medium or hard).
        #[arg(long, conflicts_with_all = ["kind", "severity"])]
        preset: Option<String>,
        /// Single operator kind (fog, occlusion, gaussian_noise).
        #[arg(long, requires = "severity")]
        kind: Option<String>,
        /// Severity in [0, 1] for --kind.
        #[arg(long)]
        severity: Option<f64>,
    },
    /// Train and evaluate ablation variants against the base config.
    Ablate {
        /// Training dataset.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset (defaults to the training dataset).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Optional perturbed split reported in extra columns.
        #[arg(long)]
        perturbed_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated toggles, e.g. no_diffusion,topology=grid
        #[arg(long, value_delimiter = ',')]
        toggles: Vec<String>,
    },
    /// Measure inference throughput per frame count.
    Bench {
        /// Comma-separated frame counts in 1..=11.
        #[arg(long, value_delimiter = ',', default_value = "3,5,7,9,11")]
        frames: Vec<usize>,
        /// Optional checkpoint; a fresh model is used when omitted.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Optional dataset for mean-error columns.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export ground-truth versus predicted trajectory (CSV + plot).
    Export {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Re-render the plot from an existing trajectory CSV instead.
        #[arg(long, conflicts_with_all = ["ckpt", "data"])]
        from_csv: Option<PathBuf>,
    },
}

/// Resolve a dataset path under `GDP_DATA_DIR` when it is relative and the
/// variable is set.
fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("GDP_DATA_DIR") {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let base = match &cli.config {
        Some(path) => Config::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    Ok(base.with_overrides(&cli.overrides)?)
}

fn load_model(path: &Path) -> Result<Model> {
    let (config, tensors) =
        load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Model::from_tensors(&config, tensors)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = load_config(&cli)?;

    match &cli.command {
        Command::Generate { out, seed } => {
            if let Some(seed) = seed {
                config.data.seed = *seed;
            }
            let dataset = generate_dataset(&config, out)?;
            println!(
                "generated {} frames / {} windows at {}",
                dataset.meta.num_frames,
                dataset.num_windows(),
                out.display()
            );
        }
        Command::Train { data, out, seed } => {
            if let Some(seed) = seed {
                config.train.seed = *seed;
            }
            let dataset = load_dataset(&resolve_data_path(data))?;
            let outcome = train(&config, &dataset, out)?;
            println!(
                "trained {} steps; loss {} -> {}; checkpoint at {}",
                outcome.steps_run,
                outcome.initial_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
                outcome.final_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
                outcome.checkpoint_path.display()
            );
        }
        Command::Eval { ckpt, data, out } => {
            let model = load_model(ckpt)?;
            let dataset = load_dataset(&resolve_data_path(data))?;
            let report = evaluate(&model, &dataset)?;
            write_report(&report, out)?;
            println!(
                "mean {:.3} m / {:.3} deg, median {:.3} m / {:.3} deg over {} frames",
                report.metrics.mean_translation_m,
                report.metrics.mean_rotation_deg,
                report.metrics.median_translation_m,
                report.metrics.median_rotation_deg,
                report.metrics.num_frames
            );
        }
        Command::Perturb { data, out, preset, kind, severity } => {
            let src_path = resolve_data_path(data);
            let dataset = load_dataset(&src_path)?;
            let (out_path, result) = match (preset, kind) {
                (Some(name), None) => {
                    let preset = match name.as_str() {
                        "medium" => PerturbPreset::Medium,
                        "hard" => PerturbPreset::Hard,
                        other => bail!("unknown preset `{other}` (expected medium or hard)"),
                    };
                    let out_path = out
                        .clone()
                        .unwrap_or_else(|| sibling_path(&src_path, preset.name()));
                    let ds = perturb_dataset(&dataset, preset, &out_path)?;
                    (out_path, ds)
                }
                (None, Some(kind_name)) => {
                    let kind = match kind_name.as_str() {
                        "fog" => PerturbKind::Fog,
                        "occlusion" => PerturbKind::Occlusion,
                        "gaussian_noise" => PerturbKind::GaussianNoise,
                        other => bail!("unknown perturbation kind `{other}`"),
                    };
                    let severity = severity.expect("clap enforces severity with kind");
                    let out_path =
                        out.clone().unwrap_or_else(|| sibling_path(&src_path, kind_name));
                    let ds = perturb_dataset_custom(&dataset, kind, severity, &out_path)?;
                    (out_path, ds)
                }
                _ => bail!("pass exactly one of --preset or --kind/--severity"),
            };
            println!("wrote perturbed dataset ({} frames) to {}", result.meta.num_frames, out_path.display());
        }
        Command::Ablate { data, eval_data, perturbed_data, out, toggles } => {
            let train_set = load_dataset(&resolve_data_path(data))?;
            let eval_set = match eval_data {
                Some(p) => load_dataset(&resolve_data_path(p))?,
                None => train_set.clone(),
            };
            let extra = match perturbed_data {
                Some(p) => Some(load_dataset(&resolve_data_path(p))?),
                None => None,
            };
            let toggles: Result<Vec<AblationToggle>, _> = toggles
                .iter()
                .filter(|t| !t.is_empty())
                .map(|t| AblationToggle::parse(t))
                .collect();
            let rows = ablate(&config, &toggles?, &train_set, &eval_set, extra.as_ref(), out)?;
            for row in &rows {
                println!(
                    "{:<24} mean {:.3} m / {:.3} deg",
                    row.variant, row.mean_translation_m, row.mean_rotation_deg
                );
            }
            println!("table written to {}", out.join("ablation.csv").display());
        }
        Command::Bench { frames, ckpt, data, out } => {
            let model = match ckpt {
                Some(path) => load_model(path)?,
                None => Model::new(&config),
            };
            let dataset = match data {
                Some(p) => Some(load_dataset(&resolve_data_path(p))?),
                None => None,
            };
            let rows = bench_frames(&model.config.clone(), &model, frames, dataset.as_ref())?;
            write_bench_csv(&rows, out)?;
            for row in &rows {
                println!("{} frames: {:.1} iters/s", row.frames, row.iters_per_s);
            }
        }
        Command::Export { ckpt, data, out, from_csv } => match from_csv {
            Some(csv_path) => {
                let text = std::fs::read_to_string(csv_path)
                    .with_context(|| format!("reading {}", csv_path.display()))?;
                let png = plot_from_csv(&text)?;
                std::fs::create_dir_all(out)?;
                let plot_path = out.join("trajectory.png");
                std::fs::write(&plot_path, png)?;
                println!("re-rendered plot at {}", plot_path.display());
            }
            None => {
                let (Some(ckpt), Some(data)) = (ckpt, data) else {
                    bail!("export needs --ckpt and --data (or --from-csv)");
                };
                let model = load_model(ckpt)?;
                let dataset = load_dataset(&resolve_data_path(data))?;
                let rows = export_trajectory(&model, &dataset, out)?;
                println!("exported {} frames to {}", rows.len(), out.display());
            }
        },
    }
    Ok(())
}

fn sibling_path(src: &Path, suffix: &str) -> PathBuf {
    let name = src
        .file_name()
        .map(|n| format!("{}_{suffix}", n.to_string_lossy()))
        .unwrap_or_else(|| suffix.to_string());
    src.parent().map(|p| p.join(&name)).unwrap_or_else(|| PathBuf::from(name))
}
