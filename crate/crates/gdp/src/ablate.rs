//! Ablation harness: toggle-derived config variants trained and evaluated
//! with a shared seed and dataset, exported as one comparison CSV.

use std::io::Write;
use std::path::Path;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::eval::{evaluate, EvalError};
use crate::geometry::RotationRepr;
use crate::graph::Topology;
use crate::model::Model;
use crate::objective::DecodeLayer;
use crate::train::{train, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AblateError {
    #[error("unknown ablation toggle `{0}`")]
    UnknownToggle(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One config mutation for a comparison row.
#[derive(Debug, Clone, PartialEq)]
pub enum AblationToggle {
    NoDiffusion,
    NoVectorGraph,
    NoBranchedDecoder,
    NoMultilevel,
    Topology(Topology),
    RotationRepr(RotationRepr),
    StagePlacement(Vec<usize>),
}

impl AblationToggle {
    pub fn parse(text: &str) -> Result<Self, AblateError> {
        let (key, value) = match text.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (text.trim(), None),
        };
        match (key, value) {
            ("no_diffusion", None) => Ok(Self::NoDiffusion),
            ("no_vector_graph", None) => Ok(Self::NoVectorGraph),
            ("no_branched_decoder", None) => Ok(Self::NoBranchedDecoder),
            ("no_multilevel", None) => Ok(Self::NoMultilevel),
            ("topology", Some(v)) => {
                let t = match v {
                    "complete" => Topology::Complete,
                    "grid" => Topology::Grid,
                    "self_cross" => Topology::SelfCross,
                    _ => return Err(AblateError::UnknownToggle(text.to_string())),
                };
                Ok(Self::Topology(t))
            }
            ("rotation_repr", Some(v)) => {
                let r = match v {
                    "quaternion" => RotationRepr::Quaternion,
                    "log_quaternion" => RotationRepr::LogQuaternion,
                    "rotation_matrix" => RotationRepr::RotationMatrix,
                    "axis_angle" => RotationRepr::AxisAngle,
                    _ => return Err(AblateError::UnknownToggle(text.to_string())),
                };
                Ok(Self::RotationRepr(r))
            }
            ("stage_placement", Some(v)) => {
                let stages: Result<Vec<usize>, _> =
                    v.split(',').map(|s| s.trim().parse::<usize>()).collect();
                match stages {
                    Ok(stages) if stages.iter().all(|s| (3..=4).contains(s)) => {
                        Ok(Self::StagePlacement(stages))
                    }
                    _ => Err(AblateError::UnknownToggle(text.to_string())),
                }
            }
            _ => Err(AblateError::UnknownToggle(text.to_string())),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::NoDiffusion => "no_diffusion".into(),
            Self::NoVectorGraph => "no_vector_graph".into(),
            Self::NoBranchedDecoder => "no_branched_decoder".into(),
            Self::NoMultilevel => "no_multilevel".into(),
            Self::Topology(t) => format!("topology_{t:?}").to_lowercase(),
            Self::RotationRepr(r) => format!("rotation_{r:?}").to_lowercase(),
            Self::StagePlacement(s) => format!(
                "stage_{}",
                s.iter().map(ToString::to_string).collect::<Vec<_>>().join("_")
            ),
        }
    }

    /// Apply this toggle to a copy of the base config.
    pub fn apply(&self, base: &Config) -> Config {
        let mut config = base.clone();
        match self {
            Self::NoDiffusion => {
                config.model.diffusion_stages.clear();
                config.diffusion.vector_blocks = 0;
            }
            Self::NoVectorGraph => config.diffusion.vector_blocks = 0,
            Self::NoBranchedDecoder => config.model.branched_decoder = false,
            Self::NoMultilevel => config.loss.decode_layers = vec![DecodeLayer::Final],
            Self::Topology(t) => config.graph.topology = *t,
            Self::RotationRepr(r) => config.model.rotation_repr = *r,
            Self::StagePlacement(stages) => config.model.diffusion_stages = stages.clone(),
        }
        config
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub mean_translation_m: f64,
    pub median_translation_m: f64,
    pub mean_rotation_deg: f64,
    pub median_rotation_deg: f64,
    /// Metrics on the optional extra (perturbed) split.
    pub extra: Option<(f64, f64)>,
    pub config: Config,
}

/// Train and evaluate the base config plus one variant per toggle. Every
/// run shares the base seed and training dataset. `extra_eval` adds
/// mean translation/rotation columns for a second (perturbed) split.
pub fn ablate(
    base: &Config,
    toggles: &[AblationToggle],
    train_data: &Dataset,
    eval_data: &Dataset,
    extra_eval: Option<&Dataset>,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, AblateError> {
    std::fs::create_dir_all(out_dir)?;
    let mut variants: Vec<(String, Config)> = vec![("base".into(), base.clone())];
    for toggle in toggles {
        variants.push((toggle.label(), toggle.apply(base)));
    }

    let mut rows = Vec::with_capacity(variants.len());
    for (label, config) in variants {
        let run_dir = out_dir.join(&label);
        let outcome = train(&config, train_data, &run_dir)?;
        let (ck_config, tensors) = crate::checkpoint::load_checkpoint(&outcome.checkpoint_path)?;
        let model = Model::from_tensors(&ck_config, tensors)?;
        let report = evaluate(&model, eval_data)?;
        let extra = match extra_eval {
            Some(dataset) => {
                let r = evaluate(&model, dataset)?;
                Some((r.metrics.mean_translation_m, r.metrics.mean_rotation_deg))
            }
            None => None,
        };
        rows.push(AblationRow {
            variant: label,
            mean_translation_m: report.metrics.mean_translation_m,
            median_translation_m: report.metrics.median_translation_m,
            mean_rotation_deg: report.metrics.mean_rotation_deg,
            median_rotation_deg: report.metrics.median_rotation_deg,
            extra,
            config,
        });
    }
    write_table(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

fn write_table(rows: &[AblationRow], path: &Path) -> Result<(), AblateError> {
    let mut file = std::fs::File::create(path)?;
    let has_extra = rows.iter().any(|r| r.extra.is_some());
    let mut header =
        "variant,mean_translation_m,median_translation_m,mean_rotation_deg,median_rotation_deg"
            .to_string();
    if has_extra {
        header.push_str(",perturbed_mean_translation_m,perturbed_mean_rotation_deg");
    }
    writeln!(file, "{header}")?;
    for row in rows {
        let mut line = format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.variant,
            row.mean_translation_m,
            row.median_translation_m,
            row.mean_rotation_deg,
            row.median_rotation_deg
        );
        if has_extra {
            match row.extra {
                Some((t, r)) => line.push_str(&format!(",{t:.6},{r:.6}")),
                None => line.push_str(",,"),
            }
        }
        writeln!(file, "{line}")?;
    }
    Ok(())
}
