//! Gradient-descent training: Adam with weight decay, seeded batching and
//! augmentation, per-step loss logging and checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::config::Config;
use crate::dataset::{DataError, Dataset};
use crate::geometry::{quat_exp, rotation_encode};
use crate::graph::build_pose_chain_graph;
use crate::model::{Model, ModelError};
use crate::objective::{absolute_loss_tape, relative_loss_tape, BalanceVars, DecodeLayer};
use crate::params::ParamStore;
use crate::synth::{perturb, PerturbKind};
use crate::tensor::{Tape, TapeError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("checkpoint directory is locked by another run: {0}")]
    Locked(PathBuf),
    #[error("dataset image {got}x{got2} does not match the divisibility contract: {reason}")]
    BadDataset { got: usize, got2: usize, reason: String },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Adam with additive (L2) weight decay, state aligned with the store.
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update. `grads` must be aligned with the store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let tensor = store.tensor_mut_by_index(idx);
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for (k, theta) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad.data()[k] + self.weight_decay * *theta;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *theta -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Removes the lock file when the run finishes or unwinds.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(TrainError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Deterministic per-(step, slot) RNG stream.
fn stream_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add((step as u64).wrapping_mul(0xff51afd7ed558ccd))
        .wrapping_add((slot as u64).wrapping_mul(0xc4ceb9fe1a85ec53));
    ChaCha8Rng::seed_from_u64(mix)
}

/// Shift, jitter and optional corruption augmentation for one frame.
fn augment_frame(
    frame: &Tensor,
    config: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, TrainError> {
    let aug = &config.train.augment;
    let mut out = frame.clone();
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    if aug.crop {
        // Random cropping realized as an edge-clamped integer shift, which
        // keeps the stride-32 divisibility contract intact.
        let dy = rng.gen_range(-2_i64..=2);
        let dx = rng.gen_range(-2_i64..=2);
        if dy != 0 || dx != 0 {
            let mut shifted = Tensor::zeros(frame.shape());
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    for c in 0..3 {
                        shifted.data_mut()[(y * w + x) * 3 + c] =
                            out.data()[(sy * w + sx) * 3 + c];
                    }
                }
            }
            out = shifted;
        }
    }
    if aug.color_jitter {
        let brightness = rng.gen_range(0.92..1.08);
        let contrast = rng.gen_range(0.92..1.08);
        for v in out.data_mut() {
            *v = (((*v - 0.5) * contrast + 0.5) * brightness).clamp(0.0, 1.0);
        }
    }
    if aug.noise && rng.gen_bool(0.5) {
        let kind = match rng.gen_range(0..3) {
            0 => PerturbKind::Fog,
            1 => PerturbKind::Occlusion,
            _ => PerturbKind::GaussianNoise,
        };
        let severity = rng.gen_range(0.0..0.6);
        let seed = rng.gen::<u64>();
        out = perturb(&out, kind, severity, seed).map_err(DataError::Synth)?;
    }
    Ok(out)
}

/// Rotation targets in the configured representation. Log-quaternion ground
/// truth passes through unchanged for the default representation.
fn rotation_targets(config: &Config, poses: &[crate::geometry::Pose]) -> Vec<f64> {
    let repr = config.model.rotation_repr;
    poses
        .iter()
        .flat_map(|p| rotation_encode(&quat_exp(p.r), repr))
        .collect()
}

pub struct BatchLoss {
    pub total: f64,
    pub per_layer: Vec<(DecodeLayer, f64, f64)>,
}

/// Build the forward + loss graph for a batch of windows and return the
/// scalar loss node. The loss is the mean per-window multi-level total.
pub fn batch_loss(
    model: &Model,
    tape: &Tape,
    binding: &crate::params::TapeBinding,
    images: Tensor,
    window_sizes: &[usize],
    poses: &[crate::geometry::Pose],
) -> Result<(crate::tensor::Var, BatchLoss), TrainError> {
    let config = &model.config;
    let rdim = config.model.rotation_repr.dim();
    let total_frames: usize = window_sizes.iter().sum();
    assert_eq!(poses.len(), total_frames);

    let images = tape.leaf(images);
    let decoded = model.forward_training(tape, binding, images, window_sizes)?;

    let target_d = tape.leaf(Tensor::new(
        &[total_frames, 3],
        poses.iter().flat_map(|p| p.d).collect(),
    ));
    let target_r = tape.leaf(Tensor::new(
        &[total_frames, rdim],
        rotation_targets(config, poses),
    ));

    // Directed chain pairs, offset per window.
    let mut pairs = Vec::new();
    let mut offset = 0;
    for &n in window_sizes {
        let chain = build_pose_chain_graph(n).expect("window has frames");
        for (i, j) in chain.directed_pairs() {
            pairs.push((offset + i, offset + j));
        }
        offset += n;
    }

    let bp = BalanceVars {
        alpha: binding.var(model.balance.alpha),
        beta: binding.var(model.balance.beta),
        gamma: binding.var(model.balance.gamma),
        lambda: binding.var(model.balance.lambda),
    };
    let norm = config.loss.norm;

    let mut total: Option<crate::tensor::Var> = None;
    let mut per_layer = Vec::with_capacity(decoded.len());
    for (layer, pred) in &decoded {
        let abs = absolute_loss_tape(tape, *pred, target_d, target_r, &bp, norm)?;
        let rel = if pairs.is_empty() {
            None
        } else {
            Some(relative_loss_tape(tape, *pred, target_d, target_r, &pairs, &bp, norm)?)
        };
        per_layer.push((
            *layer,
            tape.value(abs).item(),
            rel.map(|r| tape.value(r).item()).unwrap_or(0.0),
        ));
        let layer_total = match rel {
            Some(r) => tape.add(abs, r)?,
            None => abs,
        };
        total = Some(match total {
            Some(t) => tape.add(t, layer_total)?,
            None => layer_total,
        });
    }
    let total = total.expect("at least one decode layer");
    let mean = tape.scale(total, 1.0 / window_sizes.len() as f64);
    let value = tape.value(mean).item();
    Ok((mean, BatchLoss { total: value, per_layer }))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Train a fresh model on the dataset and write `checkpoint.gdp` plus a
/// per-step `train_log.csv` into `out_dir`. Bit-reproducible given the seed.
pub fn train(config: &Config, dataset: &Dataset, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let _lock = LockGuard::acquire(out_dir)?;
    validate_dataset(config, dataset)?;

    let mut model = Model::new(config);
    let mut adam = Adam::new(&model.store, config.train.learning_rate, config.train.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_add(0x736866));

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::fs::File::create(&log_path)?;
    writeln!(log, "step,loss,{}", layer_columns(config))?;

    let steps_per_epoch = dataset.num_windows().div_ceil(config.train.batch_size);
    let planned = config
        .train
        .max_steps
        .unwrap_or(usize::MAX)
        .min(config.train.epochs * steps_per_epoch);

    let mut step = 0;
    let mut initial_loss = None;
    let mut final_loss = None;
    'epochs: for _epoch in 0..config.train.epochs {
        let mut order: Vec<usize> = (0..dataset.num_windows()).collect();
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.train.batch_size) {
            if step >= planned {
                break 'epochs;
            }
            let (images, window_sizes, poses) = assemble_batch(config, dataset, batch, step)?;
            let tape = Tape::new();
            let binding = model.store.bind(&tape);
            let (loss_var, batch) =
                batch_loss(&model, &tape, &binding, images, &window_sizes, &poses)?;
            if !batch.total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let grads = tape.backward(loss_var)?;
            let grad_list: Vec<Tensor> = model
                .store
                .ids()
                .map(|id| grads.wrt(&tape, binding.var(id)))
                .collect();
            adam.step(&mut model.store, &grad_list);

            write_log_row(&mut log, step, &batch)?;
            if initial_loss.is_none() {
                initial_loss = Some(batch.total);
            }
            final_loss = Some(batch.total);
            step += 1;
        }
    }
    drop(log);

    let checkpoint_path = out_dir.join("checkpoint.gdp");
    save_checkpoint(&checkpoint_path, config, &model.store)?;
    Ok(TrainOutcome { steps_run: step, initial_loss, final_loss, checkpoint_path, log_path })
}

fn layer_columns(config: &Config) -> String {
    let mut layers: Vec<DecodeLayer> = config.loss.decode_layers.clone();
    layers.sort_unstable();
    layers.dedup();
    layers
        .iter()
        .map(|l| format!("abs_{l},rel_{l}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn write_log_row(log: &mut std::fs::File, step: usize, batch: &BatchLoss) -> std::io::Result<()> {
    let mut row = format!("{step},{:.9e}", batch.total);
    for (_, abs, rel) in &batch.per_layer {
        row.push_str(&format!(",{abs:.9e},{rel:.9e}"));
    }
    writeln!(log, "{row}")
}

fn validate_dataset(config: &Config, dataset: &Dataset) -> Result<(), TrainError> {
    let (h, w) = (dataset.meta.image_height, dataset.meta.image_width);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(TrainError::BadDataset {
            got: h,
            got2: w,
            reason: "image dims must be divisible by the total backbone stride 32".into(),
        });
    }
    if dataset.meta.window_size > config.model.max_frames {
        return Err(TrainError::BadDataset {
            got: dataset.meta.window_size,
            got2: config.model.max_frames,
            reason: "window size exceeds model.max_frames".into(),
        });
    }
    if dataset.windows.is_empty() {
        return Err(TrainError::BadDataset {
            got: dataset.meta.num_frames,
            got2: dataset.meta.window_size,
            reason: "dataset yields no windows".into(),
        });
    }
    Ok(())
}

fn assemble_batch(
    config: &Config,
    dataset: &Dataset,
    batch: &[usize],
    step: usize,
) -> Result<(Tensor, Vec<usize>, Vec<crate::geometry::Pose>), TrainError> {
    let (h, w) = (dataset.meta.image_height, dataset.meta.image_width);
    let frame_len = h * w * 3;
    let total_frames: usize = batch.iter().map(|&b| dataset.windows[b].len()).sum();
    let mut images = Tensor::zeros(&[total_frames, h, w, 3]);
    let mut poses = Vec::with_capacity(total_frames);
    let mut window_sizes = Vec::with_capacity(batch.len());
    let mut slot = 0;
    for (widx, &b) in batch.iter().enumerate() {
        let window = &dataset.windows[b];
        window_sizes.push(window.len());
        for (fidx, &frame) in window.iter().enumerate() {
            let mut rng = stream_rng(config.train.seed, step, widx * 16 + fidx);
            let augmented = augment_frame(&dataset.frames[frame], config, &mut rng)?;
            images.data_mut()[slot * frame_len..(slot + 1) * frame_len]
                .copy_from_slice(augmented.data());
            poses.push(dataset.poses[frame]);
            slot += 1;
        }
    }
    Ok((images, window_sizes, poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;

    fn tiny_train_config() -> Config {
        let mut config = Config::default();
        config.data.num_poses = 8;
        config.data.image_size = 32;
        config.data.window_size = 2;
        config.model.stage_widths = [4, 4, 8, 8];
        config.diffusion.heads = 2;
        config.diffusion.steps_per_unit = 2;
        config.diffusion.vector_blocks = 1;
        config.train.batch_size = 4;
        config.train.epochs = 2;
        config
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_train_config();
        config.train.epochs = 0;
        let dataset = generate_dataset(&config, &dir.path().join("data")).unwrap();
        let outcome = train(&config, &dataset, &dir.path().join("run")).unwrap();
        assert_eq!(outcome.steps_run, 0);
        assert!(outcome.initial_loss.is_none());

        let (_, tensors) = crate::checkpoint::load_checkpoint(&outcome.checkpoint_path).unwrap();
        let fresh = Model::new(&config);
        for (name, tensor) in tensors {
            let id = fresh.store.id_by_name(&name).unwrap();
            assert_eq!(fresh.store.get(id).data(), tensor.data(), "{name}");
        }
    }

    #[test]
    fn same_seed_twice_gives_identical_final_loss() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_train_config();
        let dataset = generate_dataset(&config, &dir.path().join("data")).unwrap();
        let a = train(&config, &dataset, &dir.path().join("run_a")).unwrap();
        let b = train(&config, &dataset, &dir.path().join("run_b")).unwrap();
        assert_eq!(a.final_loss, b.final_loss);
        assert!(a.steps_run > 0);

        let log_a = std::fs::read(&a.log_path).unwrap();
        let log_b = std::fs::read(&b.log_path).unwrap();
        assert_eq!(log_a, log_b);
        let ck_a = std::fs::read(&a.checkpoint_path).unwrap();
        let ck_b = std::fs::read(&b.checkpoint_path).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn loss_decreases_on_short_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_train_config();
        config.train.epochs = 15;
        config.train.learning_rate = 2e-3;
        config.train.augment.crop = false;
        config.train.augment.color_jitter = false;
        let dataset = generate_dataset(&config, &dir.path().join("data")).unwrap();
        let outcome = train(&config, &dataset, &dir.path().join("run")).unwrap();
        let initial = outcome.initial_loss.unwrap();
        let fin = outcome.final_loss.unwrap();
        assert!(fin < initial, "loss {fin} did not improve on {initial}");
    }

    #[test]
    fn lock_file_blocks_concurrent_runs_and_is_released() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let _guard = LockGuard::acquire(&run_dir).unwrap();
        assert!(matches!(LockGuard::acquire(&run_dir), Err(TrainError::Locked(_))));
        drop(_guard);
        assert!(LockGuard::acquire(&run_dir).is_ok());
    }

    #[test]
    fn max_steps_caps_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_train_config();
        config.train.max_steps = Some(3);
        config.train.epochs = 100;
        let dataset = generate_dataset(&config, &dir.path().join("data")).unwrap();
        let outcome = train(&config, &dataset, &dir.path().join("run")).unwrap();
        assert_eq!(outcome.steps_run, 3);
    }

    #[test]
    fn augmentation_streams_are_deterministic() {
        let config = tiny_train_config();
        let frame = Tensor::full(&[32, 32, 3], 0.5);
        let mut a_rng = stream_rng(config.train.seed, 7, 3);
        let mut b_rng = stream_rng(config.train.seed, 7, 3);
        let a = augment_frame(&frame, &config, &mut a_rng).unwrap();
        let b = augment_frame(&frame, &config, &mut b_rng).unwrap();
        assert_eq!(a, b);
        let mut c_rng = stream_rng(config.train.seed, 8, 3);
        let c = augment_frame(&frame, &config, &mut c_rng).unwrap();
        assert_ne!(a, c);
    }
}
