//! Inference throughput measurement across window frame counts.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::eval::median;
use crate::geometry::pose_error;
use crate::model::{Model, ModelError};
use crate::synth::{generate_scene, generate_trajectory};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("frame counts must lie in 1..=11, got {0}")]
    BadFrameCount(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub frames: usize,
    pub iters_per_s: f64,
    pub mean_translation_m: Option<f64>,
}

/// Iterations used for the timed section; at least 100 warm iterations.
pub const BENCH_ITERS: usize = 100;
const WARMUP_ITERS: usize = 10;

/// Measure inference iterations/second per frame count. One iteration is a
/// full window forward pass. When an evaluation dataset is given, its
/// frames are re-windowed at each count and the mean translation error is
/// reported alongside.
pub fn bench_frames(
    config: &Config,
    model: &Model,
    counts: &[usize],
    eval_data: Option<&Dataset>,
) -> Result<Vec<BenchRow>, BenchError> {
    for &n in counts {
        if !(1..=11).contains(&n) {
            return Err(BenchError::BadFrameCount(n));
        }
    }
    let max_count = counts.iter().copied().max().unwrap_or(1);
    let scene = generate_scene(config.data.seed, config.data.num_landmarks, config.data.scale);
    let trajectory =
        generate_trajectory(config.data.kind, max_count.max(2), config.data.scale);
    let size = config.model.image_size;
    let frames: Vec<crate::tensor::Tensor> = trajectory.poses[..max_count]
        .iter()
        .map(|p| crate::synth::render_observation(p, &scene, size, size))
        .collect();

    let stack = |n: usize| {
        let mut window = crate::tensor::Tensor::zeros(&[n, size, size, 3]);
        let frame_len = size * size * 3;
        for (slot, frame) in frames[..n].iter().enumerate() {
            window.data_mut()[slot * frame_len..(slot + 1) * frame_len]
                .copy_from_slice(frame.data());
        }
        window
    };

    // Untimed sweep over every count first; cold caches and allocator
    // growth otherwise penalize whichever count runs first.
    for &n in counts {
        model.forward_window(&stack(n))?;
    }

    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let window = stack(n);
        for _ in 0..WARMUP_ITERS {
            model.forward_window(&window)?;
        }
        let start = Instant::now();
        for _ in 0..BENCH_ITERS {
            model.forward_window(&window)?;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let iters_per_s = BENCH_ITERS as f64 / elapsed;

        let mean_translation_m = match eval_data {
            Some(dataset) => Some(rewindowed_mean_error(model, dataset, n)?),
            None => None,
        };
        rows.push(BenchRow { frames: n, iters_per_s, mean_translation_m });
    }
    Ok(rows)
}

/// Mean translation error over disjoint windows of `n` frames.
fn rewindowed_mean_error(model: &Model, dataset: &Dataset, n: usize) -> Result<f64, BenchError> {
    let mut errors = Vec::new();
    let mut start = 0;
    while start + n <= dataset.poses.len() {
        let window: Vec<usize> = (start..start + n).collect();
        let images = dataset.window_images(&window);
        let poses = model.forward_window(&images)?;
        for (slot, &frame) in window.iter().enumerate() {
            errors.push(pose_error(&poses[slot], &dataset.poses[frame]).translation_error);
        }
        start += n;
    }
    let _ = median(&errors);
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<(), BenchError> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "frames,iters_per_s,mean_translation_m")?;
    for row in rows {
        match row.mean_translation_m {
            Some(err) => writeln!(file, "{},{:.3},{:.6}", row.frames, row.iters_per_s, err)?,
            None => writeln!(file, "{},{:.3},", row.frames, row.iters_per_s)?,
        }
    }
    Ok(())
}
