//! Procedural driving-style data: landmark scenes, trajectories with
//! tangent headings, pose-conditioned pinhole renderings, perturbation
//! operators and covisibility windowing.
//!
//! Observations are landmark-disc projections over a horizon-gradient
//! background rather than photorealistic renders; they keep the pose
//! recoverable by a small CNN while staying dependency-free and fast.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrajectoryKind;
use crate::geometry::{matrix_to_quat, quat_exp, quat_log, quat_to_matrix, Pose};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("perturbation severity {0} is outside [0, 1]")]
    SeverityOutOfRange(f64),
    #[error("window size {window} exceeds trajectory length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("window size {0} must be in 1..=11")]
    BadWindowSize(usize),
}

/// One procedural landmark: a colored disc in world space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: [f64; 3],
    pub color: [f64; 3],
    /// Disc radius in meters.
    pub size: f64,
}

/// Deterministic landmark layout derived from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    /// World extent the landmarks cover (trajectory diameter).
    pub extent: f64,
    pub landmarks: Vec<Landmark>,
}

/// Minimum landmark count produced by the generator.
pub const MIN_LANDMARKS: usize = 32;

/// Generate a deterministic scene. Identical seeds yield bit-identical
/// scenes; `count` is clamped up to the generator minimum.
pub fn generate_scene(seed: u64, count: usize, extent: f64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7363656e65));
    let count = count.max(MIN_LANDMARKS);
    let radius_max = 0.625 * extent;
    let mut landmarks = Vec::with_capacity(count);
    for _ in 0..count {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = radius_max * rng.gen_range(0.05f64..1.0).sqrt();
        let height = rng.gen_range(0.0..0.15 * extent);
        landmarks.push(Landmark {
            position: [radius * angle.cos(), radius * angle.sin(), height],
            color: [
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
            ],
            size: extent * rng.gen_range(0.02..0.06),
        });
    }
    Scene { seed, extent, landmarks }
}

/// Ordered poses at uniform arc spacing with headings tangent to the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    /// Diameter in meters.
    pub scale: f64,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Axis-aligned bounding volume of the trajectory translations.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.poses {
            for k in 0..3 {
                lo[k] = lo[k].min(p.d[k]);
                hi[k] = hi[k].max(p.d[k]);
            }
        }
        (lo, hi)
    }
}

/// Camera orientation with the given unit forward direction, horizontal
/// up, in the x-right / y-down / z-forward camera convention.
fn heading_pose(position: [f64; 3], forward: [f64; 3]) -> Pose {
    let norm = (forward[0] * forward[0] + forward[1] * forward[1] + forward[2] * forward[2]).sqrt();
    let f = [forward[0] / norm, forward[1] / norm, forward[2] / norm];
    let up = [0.0, 0.0, 1.0];
    // right = forward x up, down = -up
    let right = [
        f[1] * up[2] - f[2] * up[1],
        f[2] * up[0] - f[0] * up[2],
        f[0] * up[1] - f[1] * up[0],
    ];
    let rn = (right[0] * right[0] + right[1] * right[1] + right[2] * right[2]).sqrt();
    let r = [right[0] / rn, right[1] / rn, right[2] / rn];
    let down = [
        f[1] * r[2] - f[2] * r[1],
        f[2] * r[0] - f[0] * r[2],
        f[0] * r[1] - f[1] * r[0],
    ];
    // Column-major axes into a row-major rotation matrix R_wc.
    let m = [
        r[0], down[0], f[0], //
        r[1], down[1], f[1], //
        r[2], down[2], f[2],
    ];
    let q = matrix_to_quat(&m).expect("orthonormal heading matrix");
    Pose::new(position, quat_log(&q))
}

/// Camera height above the ground plane as a fraction of scale.
const CAMERA_HEIGHT_FRACTION: f64 = 0.04;

/// Generate a trajectory of `num_poses` poses. Loops close to within one
/// step; lines keep a constant heading; figure-eights are resampled to
/// uniform arc length.
pub fn generate_trajectory(kind: TrajectoryKind, num_poses: usize, scale: f64) -> Trajectory {
    assert!(num_poses >= 2, "a trajectory needs at least two poses");
    let height = CAMERA_HEIGHT_FRACTION * scale;
    let radius = scale / 2.0;
    let poses = match kind {
        TrajectoryKind::Loop => (0..num_poses)
            .map(|k| {
                let theta = std::f64::consts::TAU * k as f64 / num_poses as f64;
                heading_pose(
                    [radius * theta.cos(), radius * theta.sin(), height],
                    [-theta.sin(), theta.cos(), 0.0],
                )
            })
            .collect(),
        TrajectoryKind::Line => (0..num_poses)
            .map(|k| {
                let t = k as f64 / (num_poses - 1) as f64;
                heading_pose([scale * (t - 0.5), 0.0, height], [1.0, 0.0, 0.0])
            })
            .collect(),
        TrajectoryKind::FigureEight => {
            // Lemniscate of Gerono, resampled to uniform arc length.
            let curve = |t: f64| {
                let x = radius * t.sin();
                let y = radius * t.sin() * t.cos();
                [x, y, height]
            };
            let dense = 4096;
            let mut points = Vec::with_capacity(dense + 1);
            let mut cumulative = Vec::with_capacity(dense + 1);
            let mut total = 0.0;
            let mut prev = curve(0.0);
            points.push(prev);
            cumulative.push(0.0);
            for i in 1..=dense {
                let t = std::f64::consts::TAU * i as f64 / dense as f64;
                let p = curve(t);
                total += ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
                points.push(p);
                cumulative.push(total);
                prev = p;
            }
            (0..num_poses)
                .map(|k| {
                    let target = total * k as f64 / num_poses as f64;
                    let idx = cumulative.partition_point(|&c| c < target).clamp(1, dense);
                    let (c0, c1) = (cumulative[idx - 1], cumulative[idx]);
                    let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
                    let lerp = |a: f64, b: f64| a + (b - a) * frac;
                    let p0 = points[idx - 1];
                    let p1 = points[idx];
                    let position = [lerp(p0[0], p1[0]), lerp(p0[1], p1[1]), height];
                    heading_pose(position, [p1[0] - p0[0], p1[1] - p0[1], 0.0])
                })
                .collect()
        }
    };
    Trajectory { kind, scale, poses }
}

const SKY_COLOR: [f64; 3] = [0.55, 0.70, 0.90];
const GROUND_COLOR: [f64; 3] = [0.35, 0.30, 0.25];
const NEAR_CLIP: f64 = 0.5;

/// Pinhole projection of scene landmarks as colored discs over a
/// horizon-gradient background. Deterministic; values in [0, 1].
pub fn render_observation(pose: &Pose, scene: &Scene, width: usize, height: usize) -> Tensor {
    let rot = quat_to_matrix(&quat_exp(pose.r));
    // Column k of R_wc is camera axis k in world coordinates; rows transform
    // world into camera after transposition.
    let to_cam = |p: &[f64; 3]| {
        let rel = [p[0] - pose.d[0], p[1] - pose.d[1], p[2] - pose.d[2]];
        [
            rot[0] * rel[0] + rot[3] * rel[1] + rot[6] * rel[2],
            rot[1] * rel[0] + rot[4] * rel[1] + rot[7] * rel[2],
            rot[2] * rel[0] + rot[5] * rel[1] + rot[8] * rel[2],
        ]
    };
    let focal = width as f64 / 2.0;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);

    let mut data = vec![0.0; width * height * 3];
    for y in 0..height {
        for x in 0..width {
            // World up-ness of the pixel ray sets the sky/ground blend; an
            // azimuth-dependent horizon glow keeps the bearing observable
            // (the plain vertical gradient is invariant to yaw).
            let dx = (x as f64 + 0.5 - cx) / focal;
            let dy = (y as f64 + 0.5 - cy) / focal;
            let norm = (dx * dx + dy * dy + 1.0).sqrt();
            let wx = rot[0] * dx + rot[1] * dy + rot[2];
            let wy = rot[3] * dx + rot[4] * dy + rot[5];
            let up = (rot[6] * dx + rot[7] * dy + rot[8]) / norm;
            let azimuth = wy.atan2(wx);
            let t = (up + 1.0) / 2.0;
            let glow = 0.5 * (1.0 + azimuth.cos()) * (1.0 - up.abs());
            let cross = 0.5 * (1.0 + azimuth.sin()) * (1.0 - up.abs());
            let base = (y * width + x) * 3;
            let blend = |c: usize| GROUND_COLOR[c] + (SKY_COLOR[c] - GROUND_COLOR[c]) * t;
            data[base] = (blend(0) + 0.22 * glow - 0.08 * cross).clamp(0.0, 1.0);
            data[base + 1] = (blend(1) + 0.10 * cross - 0.05 * glow).clamp(0.0, 1.0);
            data[base + 2] = (blend(2) - 0.12 * glow + 0.06 * cross).clamp(0.0, 1.0);
        }
    }

    // Painter's algorithm: far landmarks first.
    let mut visible: Vec<([f64; 3], &Landmark)> = scene
        .landmarks
        .iter()
        .filter_map(|lm| {
            let cam = to_cam(&lm.position);
            (cam[2] > NEAR_CLIP).then_some((cam, lm))
        })
        .collect();
    visible.sort_by(|a, b| b.0[2].partial_cmp(&a.0[2]).unwrap());

    for (cam, lm) in visible {
        let u = focal * cam[0] / cam[2] + cx;
        let v = focal * cam[1] / cam[2] + cy;
        let r_px = focal * lm.size / cam[2];
        // Sub-pixel discs fade smoothly so renders vary continuously with
        // the pose.
        let gain = (2.0 * r_px).powi(2).min(1.0);
        if gain < 1e-6 {
            continue;
        }
        let reach = r_px + 1.0;
        let x0 = ((u - reach).floor().max(0.0)) as usize;
        let x1 = ((u + reach).ceil().min(width as f64 - 1.0)) as usize;
        let y0 = ((v - reach).floor().max(0.0)) as usize;
        let y1 = ((v + reach).ceil().min(height as f64 - 1.0)) as usize;
        if x0 > x1 || y0 > y1 || u + reach < 0.0 || v + reach < 0.0 {
            continue;
        }
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dist = ((px as f64 + 0.5 - u).powi(2) + (py as f64 + 0.5 - v).powi(2)).sqrt();
                let coverage = (r_px - dist + 0.5).clamp(0.0, 1.0) * gain;
                if coverage <= 0.0 {
                    continue;
                }
                let base = (py * width + px) * 3;
                for c in 0..3 {
                    data[base + c] = data[base + c] * (1.0 - coverage) + lm.color[c] * coverage;
                }
            }
        }
    }
    Tensor::new(&[height, width, 3], data)
}

/// Image corruption families mirroring the perturbed-dataset regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    Fog,
    Occlusion,
    GaussianNoise,
}

/// Apply one corruption at the given severity. Deterministic given the
/// seed; severity 0 is the identity for every kind.
pub fn perturb(
    image: &Tensor,
    kind: PerturbKind,
    severity: f64,
    seed: u64,
) -> Result<Tensor, SynthError> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SynthError::SeverityOutOfRange(severity));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = image.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70657274);
    match kind {
        PerturbKind::Fog => {
            for v in out.data_mut() {
                *v = *v * (1.0 - severity) + severity;
            }
        }
        PerturbKind::Occlusion => {
            // Random gray rectangles until severity * 25% of the area is
            // covered (by union), bounded by a rectangle budget.
            let target = (severity * 0.25 * (h * w) as f64) as usize;
            let mut mask = vec![false; h * w];
            let mut covered = 0;
            let mut budget = 64;
            while covered < target && budget > 0 {
                budget -= 1;
                let rw = rng.gen_range((w / 8).max(1)..=(w / 3).max(2));
                let rh = rng.gen_range((h / 8).max(1)..=(h / 3).max(2));
                let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
                let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
                let gray = rng.gen_range(0.25..0.75);
                for y in y0..(y0 + rh).min(h) {
                    for x in x0..(x0 + rw).min(w) {
                        let idx = y * w + x;
                        if !mask[idx] {
                            mask[idx] = true;
                            covered += 1;
                        }
                        let base = idx * 3;
                        for c in 0..3 {
                            out.data_mut()[base + c] = gray;
                        }
                    }
                }
            }
        }
        PerturbKind::GaussianNoise => {
            let std = 0.3 * severity;
            for v in out.data_mut() {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen::<f64>();
                let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *v = (*v + std * z).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Named corruption presets: Medium stacks fog and occlusion, Hard adds
/// Gaussian noise on top.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbPreset {
    Medium,
    Hard,
}

impl PerturbPreset {
    pub fn ops(&self) -> Vec<(PerturbKind, f64)> {
        match self {
            PerturbPreset::Medium => {
                vec![(PerturbKind::Fog, 0.4), (PerturbKind::Occlusion, 0.3)]
            }
            PerturbPreset::Hard => vec![
                (PerturbKind::Fog, 0.4),
                (PerturbKind::Occlusion, 0.3),
                (PerturbKind::GaussianNoise, 0.6),
            ],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerturbPreset::Medium => "medium",
            PerturbPreset::Hard => "hard",
        }
    }
}

/// Apply a preset's operator stack with per-operator derived seeds.
pub fn apply_preset(
    image: &Tensor,
    preset: PerturbPreset,
    seed: u64,
) -> Result<Tensor, SynthError> {
    let mut out = image.clone();
    for (i, (kind, severity)) in preset.ops().into_iter().enumerate() {
        let op_seed = seed.wrapping_add((i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        out = perturb(&out, kind, severity, op_seed)?;
    }
    Ok(out)
}

/// N covisible observations with ground-truth poses.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    pub frames: Vec<Tensor>,
    pub poses: Vec<Pose>,
    pub window_indices: Vec<usize>,
}

/// Sliding covisible windows over the trajectory, each frame rendered from
/// its pose.
pub fn window_samples(
    trajectory: &Trajectory,
    scene: &Scene,
    window_size: usize,
    stride: usize,
    width: usize,
    height: usize,
) -> Result<Vec<SampleWindow>, SynthError> {
    if window_size == 0 || window_size > 11 {
        return Err(SynthError::BadWindowSize(window_size));
    }
    let len = trajectory.poses.len();
    if window_size > len {
        return Err(SynthError::WindowTooLarge { window: window_size, len });
    }
    assert!(stride >= 1);
    let frames: Vec<Tensor> = trajectory
        .poses
        .iter()
        .map(|p| render_observation(p, scene, width, height))
        .collect();
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_size <= len {
        let indices: Vec<usize> = (start..start + window_size).collect();
        windows.push(SampleWindow {
            frames: indices.iter().map(|&i| frames[i].clone()).collect(),
            poses: indices.iter().map(|&i| trajectory.poses[i]).collect(),
            window_indices: indices,
        });
        start += stride;
    }
    Ok(windows)
}
