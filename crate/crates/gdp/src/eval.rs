//! Inference-time evaluation: per-frame pose errors, mean/median
//! aggregation and deterministic metrics files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::Dataset;
use crate::geometry::{pose_error, Pose};
use crate::model::{Model, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// One evaluated (window, frame) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameError {
    pub window: usize,
    pub frame_id: usize,
    pub translation_m: f64,
    pub rotation_deg: f64,
    pub predicted: Pose,
}

/// Deterministic evaluation metrics (everything except timing).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_translation_m: f64,
    pub median_translation_m: f64,
    pub mean_rotation_deg: f64,
    pub median_rotation_deg: f64,
    pub num_frames: usize,
    pub seed: u64,
    pub per_frame: Vec<FrameError>,
    pub config: Config,
}

/// Full report: metrics plus wall-clock timing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    pub wall_clock_seconds: f64,
}

/// Even-count medians average the two middle values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Run inference window by window and aggregate pose errors per frame.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport, EvalError> {
    let start = std::time::Instant::now();
    let mut per_frame = Vec::new();
    for (widx, window) in dataset.windows.iter().enumerate() {
        let images = dataset.window_images(window);
        let poses = model.forward_window(&images)?;
        for (slot, &frame_id) in window.iter().enumerate() {
            let err = pose_error(&poses[slot], &dataset.poses[frame_id]);
            per_frame.push(FrameError {
                window: widx,
                frame_id,
                translation_m: err.translation_error,
                rotation_deg: err.rotation_error,
                predicted: poses[slot],
            });
        }
    }
    let trans: Vec<f64> = per_frame.iter().map(|f| f.translation_m).collect();
    let rots: Vec<f64> = per_frame.iter().map(|f| f.rotation_deg).collect();
    let metrics = EvalMetrics {
        mean_translation_m: trans.iter().sum::<f64>() / trans.len() as f64,
        median_translation_m: median(&trans),
        mean_rotation_deg: rots.iter().sum::<f64>() / rots.len() as f64,
        median_rotation_deg: median(&rots),
        num_frames: per_frame.len(),
        seed: model.config.train.seed,
        per_frame,
        config: model.config.clone(),
    };
    Ok(EvalReport { metrics, wall_clock_seconds: start.elapsed().as_secs_f64() })
}

/// Write `metrics.json` (deterministic) and `report.json` (with timing).
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let mut metrics = serde_json::to_string_pretty(&report.metrics)?;
    metrics.push('\n');
    std::fs::write(dir.join("metrics.json"), metrics)?;
    let mut full = serde_json::to_string_pretty(report)?;
    full.push('\n');
    std::fs::write(dir.join("report.json"), full)?;
    Ok(())
}
