//! Dataset directory layout and IO: `meta.json` (config echo, seed,
//! counts), `poses.csv` (frame_id, dx, dy, dz, rx, ry, rz) and
//! `frames/<id>.png`, plus perturbed sibling variants.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::geometry::Pose;
use crate::synth::{
    self, apply_preset, generate_scene, generate_trajectory, PerturbKind, PerturbPreset,
    SynthError,
};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("meta.json is missing required fields: {0}")]
    MissingFields(String),
    #[error("meta.json is malformed: {0}")]
    BadMeta(String),
    #[error("poses.csv is malformed at line {line}: {reason}")]
    BadPoses { line: usize, reason: String },
    #[error("frame image {path} failed to decode: {reason}")]
    BadFrame { path: PathBuf, reason: String },
    #[error("dataset lists {expected} frames but {got} were found")]
    FrameCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Record of applied perturbations, stored in the meta echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub preset: Option<String>,
    pub ops: Vec<(PerturbKind, f64)>,
    pub seed: u64,
}

/// Dataset metadata and config echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub num_frames: usize,
    pub window_size: usize,
    pub stride: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub trajectory_diameter: f64,
    pub perturbation: Option<PerturbationRecord>,
    pub config: Config,
}

/// A loaded dataset: frames in [0, 1], ground-truth poses and the derived
/// covisibility windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub poses: Vec<Pose>,
    pub frames: Vec<Tensor>,
    pub windows: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    /// Stack the frames of one window into a `[n, h, w, 3]` tensor.
    pub fn window_images(&self, window: &[usize]) -> Tensor {
        let h = self.meta.image_height;
        let w = self.meta.image_width;
        let mut out = Tensor::zeros(&[window.len(), h, w, 3]);
        let frame_len = h * w * 3;
        for (slot, &idx) in window.iter().enumerate() {
            out.data_mut()[slot * frame_len..(slot + 1) * frame_len]
                .copy_from_slice(self.frames[idx].data());
        }
        out
    }
}

fn derive_windows(num_frames: usize, window_size: usize, stride: usize) -> Vec<Vec<usize>> {
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_size <= num_frames {
        windows.push((start..start + window_size).collect());
        start += stride;
    }
    windows
}

pub fn quantize_image(image: &Tensor) -> Vec<u8> {
    image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn save_frame(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let buf = image::RgbImage::from_raw(w as u32, h as u32, quantize_image(image))
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|e| DataError::BadFrame {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_frame(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadFrame { path: path.to_path_buf(), reason: e.to_string() })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[h, w, 3], data))
}

/// Generate the full synthetic dataset described by the config and write it
/// to `dir`. Deterministic in (seed, config): regenerating yields
/// byte-identical files.
pub fn generate_dataset(config: &Config, dir: &Path) -> Result<Dataset, DataError> {
    let data = &config.data;
    let scene = generate_scene(data.seed, data.num_landmarks, data.scale);
    let trajectory = generate_trajectory(data.kind, data.num_poses, data.scale);
    let frames: Vec<Tensor> = trajectory
        .poses
        .iter()
        .map(|p| synth::render_observation(p, &scene, data.image_size, data.image_size))
        .collect();
    let meta = DatasetMeta {
        format_version: 1,
        seed: data.seed,
        num_frames: frames.len(),
        window_size: data.window_size,
        stride: data.stride,
        image_width: data.image_size,
        image_height: data.image_size,
        trajectory_diameter: data.scale,
        perturbation: None,
        config: config.clone(),
    };
    write_dataset(dir, &meta, &trajectory.poses, &frames)?;
    // Reload so in-memory frames carry the stored 8-bit precision.
    load_dataset(dir)
}

pub fn write_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    poses: &[Pose],
    frames: &[Tensor],
) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("frames")).map_err(io_err(dir))?;

    let meta_path = dir.join("meta.json");
    let mut meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    meta_json.push('\n');
    std::fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;

    let poses_path = dir.join("poses.csv");
    let mut file = std::fs::File::create(&poses_path).map_err(io_err(&poses_path))?;
    writeln!(file, "frame_id,dx,dy,dz,rx,ry,rz").map_err(io_err(&poses_path))?;
    for (i, pose) in poses.iter().enumerate() {
        let v = pose.to_vec();
        writeln!(
            file,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            i, v[0], v[1], v[2], v[3], v[4], v[5]
        )
        .map_err(io_err(&poses_path))?;
    }

    for (i, frame) in frames.iter().enumerate() {
        let path = dir.join("frames").join(format!("{i:06}.png"));
        save_frame(&path, frame)?;
    }
    Ok(())
}

/// Parse `poses.csv` content. Exposed for fuzzing.
pub fn parse_poses_csv(text: &str) -> Result<Vec<(usize, Pose)>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    {
        let headers = reader
            .headers()
            .map_err(|e| DataError::BadPoses { line: 1, reason: e.to_string() })?;
        let expected = ["frame_id", "dx", "dy", "dz", "rx", "ry", "rz"];
        if headers.len() != expected.len()
            || headers.iter().zip(expected).any(|(h, e)| h != e)
        {
            return Err(DataError::BadPoses {
                line: 1,
                reason: format!("unexpected header {:?}", headers),
            });
        }
    }
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| DataError::BadPoses { line, reason: e.to_string() })?;
        if record.len() != 7 {
            return Err(DataError::BadPoses {
                line,
                reason: format!("expected 7 fields, got {}", record.len()),
            });
        }
        let frame_id: usize = record[0]
            .parse()
            .map_err(|e| DataError::BadPoses { line, reason: format!("frame_id: {e}") })?;
        let mut values = [0.0_f64; 6];
        for (k, v) in values.iter_mut().enumerate() {
            *v = record[k + 1].parse().map_err(|e| DataError::BadPoses {
                line,
                reason: format!("field {}: {e}", k + 1),
            })?;
            if !v.is_finite() {
                return Err(DataError::BadPoses {
                    line,
                    reason: format!("field {} is not finite", k + 1),
                });
            }
        }
        out.push((frame_id, Pose::from_parts(&values)));
    }
    Ok(out)
}

/// Parse and validate `meta.json` content, listing any missing required
/// fields. Exposed for fuzzing.
pub fn parse_meta_json(text: &str) -> Result<DatasetMeta, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| DataError::BadMeta(e.to_string()))?;
    let required = [
        "format_version",
        "seed",
        "num_frames",
        "window_size",
        "stride",
        "image_width",
        "image_height",
        "trajectory_diameter",
        "config",
    ];
    let missing: Vec<&str> = required
        .iter()
        .filter(|&&key| value.get(key).is_none())
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingFields(missing.join(", ")));
    }
    serde_json::from_value(value).map_err(|e| DataError::BadMeta(e.to_string()))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta = parse_meta_json(&meta_text)?;

    let poses_path = dir.join("poses.csv");
    let poses_text = std::fs::read_to_string(&poses_path).map_err(io_err(&poses_path))?;
    let rows = parse_poses_csv(&poses_text)?;
    if rows.len() != meta.num_frames {
        return Err(DataError::FrameCountMismatch {
            expected: meta.num_frames,
            got: rows.len(),
        });
    }
    let mut poses = vec![Pose::zero(); rows.len()];
    for (i, (frame_id, pose)) in rows.into_iter().enumerate() {
        if frame_id != i {
            return Err(DataError::BadPoses {
                line: i + 2,
                reason: format!("frame ids must be dense, got {frame_id}"),
            });
        }
        poses[i] = pose;
    }

    let mut frames = Vec::with_capacity(meta.num_frames);
    for i in 0..meta.num_frames {
        let path = dir.join("frames").join(format!("{i:06}.png"));
        frames.push(load_frame(&path)?);
    }

    let windows = derive_windows(meta.num_frames, meta.window_size, meta.stride);
    Ok(Dataset { meta, poses, frames, windows })
}

/// Write a perturbed sibling of a dataset: same poses and windows, frames
/// passed through the preset's operator stack with per-frame seeds.
pub fn perturb_dataset(
    source: &Dataset,
    preset: PerturbPreset,
    dir: &Path,
) -> Result<Dataset, DataError> {
    let seed = source.meta.seed;
    let frames: Result<Vec<Tensor>, SynthError> = source
        .frames
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let frame_seed = seed
                .wrapping_add(0x70726573)
                .wrapping_add((i as u64).wrapping_mul(0x100000001b3));
            apply_preset(frame, preset, frame_seed)
        })
        .collect();
    let mut meta = source.meta.clone();
    meta.perturbation = Some(PerturbationRecord {
        preset: Some(preset.name().to_string()),
        ops: preset.ops(),
        seed,
    });
    write_dataset(dir, &meta, &source.poses, &frames?)?;
    load_dataset(dir)
}

/// Custom single-operator variant of [`perturb_dataset`].
pub fn perturb_dataset_custom(
    source: &Dataset,
    kind: PerturbKind,
    severity: f64,
    dir: &Path,
) -> Result<Dataset, DataError> {
    let seed = source.meta.seed;
    let frames: Result<Vec<Tensor>, SynthError> = source
        .frames
        .iter()
        .enumerate()
        .map(|(i, frame)| {
            let frame_seed = seed
                .wrapping_add(0x6f700000)
                .wrapping_add((i as u64).wrapping_mul(0x100000001b3));
            synth::perturb(frame, kind, severity, frame_seed)
        })
        .collect();
    let mut meta = source.meta.clone();
    meta.perturbation = Some(PerturbationRecord {
        preset: None,
        ops: vec![(kind, severity)],
        seed,
    });
    write_dataset(dir, &meta, &source.poses, &frames?)?;
    load_dataset(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        let mut config = Config::default();
        config.data.num_poses = 8;
        config.data.image_size = 16;
        config.data.window_size = 3;
        config.data.stride = 1;
        config
    }

    #[test]
    fn generate_write_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let dataset = generate_dataset(&config, dir.path()).unwrap();
        assert_eq!(dataset.poses.len(), 8);
        assert_eq!(dataset.frames.len(), 8);
        assert_eq!(dataset.num_windows(), 6);

        let reloaded = load_dataset(dir.path()).unwrap();
        assert_eq!(reloaded.meta, dataset.meta);
        for (a, b) in reloaded.frames.iter().zip(&dataset.frames) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let config = tiny_config();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate_dataset(&config, dir_a.path()).unwrap();
        generate_dataset(&config, dir_b.path()).unwrap();
        for name in ["meta.json", "poses.csv", "frames/000003.png"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between regenerations");
        }
    }

    #[test]
    fn poses_survive_csv_round_trip_at_stored_precision() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let dataset = generate_dataset(&config, dir.path()).unwrap();
        let trajectory = crate::synth::generate_trajectory(
            config.data.kind,
            config.data.num_poses,
            config.data.scale,
        );
        for (stored, original) in dataset.poses.iter().zip(&trajectory.poses) {
            for (a, b) in stored.to_vec().iter().zip(original.to_vec()) {
                assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn missing_meta_fields_are_listed() {
        let err = parse_meta_json("{\"seed\": 1, \"stride\": 1}").unwrap_err();
        match err {
            DataError::MissingFields(fields) => {
                assert!(fields.contains("num_frames"));
                assert!(fields.contains("window_size"));
                assert!(!fields.contains("stride"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_poses_rows_are_rejected() {
        assert!(parse_poses_csv("bogus,header\n").is_err());
        let header = "frame_id,dx,dy,dz,rx,ry,rz\n";
        assert!(parse_poses_csv(&format!("{header}0,1,2,3,4,5\n")).is_err());
        assert!(parse_poses_csv(&format!("{header}0,1,2,3,4,5,nan\n")).is_err());
        assert!(parse_poses_csv(&format!("{header}x,1,2,3,4,5,6\n")).is_err());
        let good = parse_poses_csv(&format!("{header}0,1,2,3,4e-1,5e-1,6e-1\n")).unwrap();
        assert_eq!(good.len(), 1);
        assert_eq!(good[0].1.d, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn perturbed_sibling_keeps_poses_and_marks_meta() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let dataset = generate_dataset(&config, dir.path().join("clean").as_path()).unwrap();
        let hard =
            perturb_dataset(&dataset, PerturbPreset::Hard, dir.path().join("hard").as_path())
                .unwrap();
        assert_eq!(hard.poses.len(), dataset.poses.len());
        let record = hard.meta.perturbation.as_ref().unwrap();
        assert_eq!(record.preset.as_deref(), Some("hard"));
        assert_eq!(record.ops.len(), 3);
        // Frames actually changed.
        assert_ne!(hard.frames[0].data(), dataset.frames[0].data());
    }
}
