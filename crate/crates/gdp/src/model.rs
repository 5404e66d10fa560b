//! End-to-end network: staged convolutional backbone, feature-map diffusion,
//! pooling, cascaded vector-embedding diffusion, branched decoders and
//! multi-level decoding.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::diffusion::{
    cascaded_diffusion, diffusion_block, BlockVars, DiffusionError, HeadVars, SelfFieldVars,
};
use crate::geometry::{quat_log, rotation_decode, GeometryError, Pose};
use crate::graph::{
    build_complete_graph, build_grid_graph, build_self_cross_schedule, disjoint_union,
    DiffusionGraph, GraphError, Topology,
};
use crate::objective::DecodeLayer;
use crate::params::{ParamId, ParamStore, TapeBinding};
use crate::tensor::{Tape, TapeError, Tensor, Var};

/// Spatial strides of the four backbone stages relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("input {height}x{width} is not divisible by the stride of stage {stage}")]
    IndivisibleInput { stage: usize, height: usize, width: usize },
    #[error("window holds {got} frames, model supports at most {max}")]
    TooManyFrames { got: usize, max: usize },
    #[error("a window must contain at least one frame")]
    ZeroFrames,
    #[error("feature graph covers {expected} nodes but the maps hold {got}")]
    NodeCountMismatch { expected: usize, got: usize },
    #[error("no decoder parameters exist for layer {layer}")]
    MissingDecoder { layer: DecodeLayer },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
struct StageIds {
    down_w: ParamId,
    down_b: ParamId,
    refine_w: ParamId,
    refine_b: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    heads: Vec<(ParamId, ParamId)>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderIds {
    trunk_d: MlpIds,
    /// Present only for the branched decoder.
    trunk_r: Option<MlpIds>,
    w_out: ParamId,
    b_out: ParamId,
}

/// Balance scalar handles, owned by the model store so the optimizer sees
/// them alongside the network weights.
#[derive(Debug, Clone, Copy)]
pub struct BalanceIds {
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
    pub lambda: ParamId,
}

/// The full parameterized network plus its configuration echo.
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    stages: Vec<StageIds>,
    feat_blocks: Vec<(usize, BlockIds)>,
    vect_blocks: Vec<BlockIds>,
    decoders: Vec<(DecodeLayer, DecoderIds)>,
    pub balance: BalanceIds,
}

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Model {
    /// Build a freshly initialized model; weights derive from the training
    /// seed so runs are reproducible.
    pub fn new(config: &Config) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed.wrapping_add(0x6d6f64656c));
        let mut store = ParamStore::new();
        let widths = config.model.stage_widths;

        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let k = if i == 0 { 4 } else { 2 };
            let prefix = format!("backbone.stage{}", i + 1);
            let down_w = store.add_randn(
                &mut rng,
                format!("{prefix}.down.w"),
                &[k, k, cin, cout],
                xavier_std(k * k * cin, k * k * cout),
            );
            let down_b = store.add(format!("{prefix}.down.b"), Tensor::zeros(&[cout]));
            let refine_w = store.add_randn(
                &mut rng,
                format!("{prefix}.refine.w"),
                &[3, 3, cout, cout],
                xavier_std(9 * cout, 9 * cout),
            );
            let refine_b = store.add(format!("{prefix}.refine.b"), Tensor::zeros(&[cout]));
            stages.push(StageIds { down_w, down_b, refine_w, refine_b });
            cin = cout;
        }

        let add_block = |store: &mut ParamStore,
                             rng: &mut ChaCha8Rng,
                             prefix: &str,
                             c: usize|
         -> BlockIds {
            let k = config.diffusion.heads;
            assert_eq!(c % k, 0, "heads must divide channel width");
            let d = c / k;
            let heads = (0..k)
                .map(|h| {
                    let w = store.add_randn(
                        rng,
                        format!("{prefix}.cross.head{h}.w"),
                        &[c, d],
                        xavier_std(c, d),
                    );
                    let b = store.add(format!("{prefix}.cross.head{h}.b"), Tensor::zeros(&[d]));
                    (w, b)
                })
                .collect();
            let w1 = store.add_randn(rng, format!("{prefix}.self.w1"), &[c, c], xavier_std(c, c));
            let b1 = store.add(format!("{prefix}.self.b1"), Tensor::zeros(&[c]));
            let w2 = store.add_randn(rng, format!("{prefix}.self.w2"), &[c, c], xavier_std(c, c));
            let b2 = store.add(format!("{prefix}.self.b2"), Tensor::zeros(&[c]));
            BlockIds { heads, w1, b1, w2, b2 }
        };

        let mut placements: Vec<usize> = config.model.diffusion_stages.clone();
        placements.sort_unstable();
        placements.dedup();
        let feat_blocks = placements
            .iter()
            .map(|&stage| {
                let c = widths[stage - 1];
                (stage, add_block(&mut store, &mut rng, &format!("diffusion.feat{stage}"), c))
            })
            .collect();

        let c_final = widths[3];
        let vect_blocks = (0..config.diffusion.vector_blocks)
            .map(|i| add_block(&mut store, &mut rng, &format!("diffusion.vect{i}"), c_final))
            .collect();

        let out_dim = 3 + config.model.rotation_repr.dim();
        let mut decode_layers: Vec<DecodeLayer> = config.loss.decode_layers.clone();
        decode_layers.sort_unstable();
        decode_layers.dedup();
        let add_mlp = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize| {
            MlpIds {
                w1: store.add_randn(rng, format!("{prefix}.w1"), &[c, c], xavier_std(c, c)),
                b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[c])),
                w2: store.add_randn(rng, format!("{prefix}.w2"), &[c, c], xavier_std(c, c)),
                b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[c])),
            }
        };
        let decoders = decode_layers
            .iter()
            .map(|&layer| {
                let c = match layer {
                    DecodeLayer::Stage3 => widths[2],
                    DecodeLayer::Stage4 | DecodeLayer::Final => widths[3],
                };
                let prefix = format!("decoder.{layer}");
                let trunk_d = add_mlp(&mut store, &mut rng, &format!("{prefix}.d"), c);
                let trunk_r = config
                    .model
                    .branched_decoder
                    .then(|| add_mlp(&mut store, &mut rng, &format!("{prefix}.r"), c));
                let merged = if trunk_r.is_some() { 2 * c } else { c };
                let w_out = store.add_randn(
                    &mut rng,
                    format!("{prefix}.out.w"),
                    &[merged, out_dim],
                    0.01,
                );
                let b_out = store.add(format!("{prefix}.out.b"), Tensor::zeros(&[out_dim]));
                (layer, DecoderIds { trunk_d, trunk_r, w_out, b_out })
            })
            .collect();

        let balance = BalanceIds {
            alpha: store.add("loss.alpha", Tensor::scalar(config.loss.init_alpha)),
            beta: store.add("loss.beta", Tensor::scalar(config.loss.init_beta)),
            gamma: store.add("loss.gamma", Tensor::scalar(config.loss.init_gamma)),
            lambda: store.add("loss.lambda", Tensor::scalar(config.loss.init_lambda)),
        };

        Self {
            config: config.clone(),
            store,
            stages,
            feat_blocks,
            vect_blocks,
            decoders,
            balance,
        }
    }

    /// Rebuild a model and overwrite its tensors from checkpoint entries.
    pub fn from_tensors(
        config: &Config,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, crate::checkpoint::CheckpointError> {
        let mut model = Model::new(config);
        let mut loaded = std::collections::BTreeMap::new();
        for (name, tensor) in tensors {
            loaded.insert(name, tensor);
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let tensor = loaded.remove(&name).ok_or_else(|| {
                crate::checkpoint::CheckpointError::MissingTensor { name: name.clone() }
            })?;
            if tensor.shape() != model.store.get(id).shape() {
                return Err(crate::checkpoint::CheckpointError::ShapeMismatch {
                    name,
                    expected: model.store.get(id).shape().to_vec(),
                    got: tensor.shape().to_vec(),
                });
            }
            *model.store.get_mut(id) = tensor;
        }
        if let Some((name, _)) = loaded.into_iter().next() {
            return Err(crate::checkpoint::CheckpointError::UnknownTensor { name });
        }
        Ok(model)
    }

    fn block_vars(&self, binding: &TapeBinding, ids: &BlockIds) -> BlockVars {
        BlockVars {
            heads: ids
                .heads
                .iter()
                .map(|&(w, b)| HeadVars { w: binding.var(w), b: binding.var(b) })
                .collect(),
            self_field: SelfFieldVars {
                w1: binding.var(ids.w1),
                b1: binding.var(ids.b1),
                w2: binding.var(ids.w2),
                b2: binding.var(ids.b2),
            },
        }
    }

    /// Run the four backbone stages over a frame batch `[m, h, w, 3]`.
    /// Spatial dims must be divisible by the total stride of 32.
    pub fn backbone_forward(
        &self,
        tape: &Tape,
        binding: &TapeBinding,
        images: Var,
    ) -> Result<[Var; 4], ModelError> {
        let shape = tape.shape(images);
        let (mut h, mut w) = (shape[1], shape[2]);
        let mut outputs = Vec::with_capacity(4);
        let mut x = images;
        for (i, stage) in self.stages.iter().enumerate() {
            let (k, stride) = if i == 0 { (4, 4) } else { (2, 2) };
            if h % stride != 0 || w % stride != 0 {
                return Err(ModelError::IndivisibleInput { stage: i + 1, height: h, width: w });
            }
            h /= stride;
            w /= stride;
            let down = tape.conv2d(x, binding.var(stage.down_w), binding.var(stage.down_b), stride, 0)?;
            debug_assert_eq!(tape.shape(down)[1], h);
            let _ = k;
            let act = tape.tanh(down);
            let refined = tape.conv2d(
                act,
                binding.var(stage.refine_w),
                binding.var(stage.refine_b),
                1,
                1,
            )?;
            x = tape.tanh(refined);
            outputs.push(x);
        }
        Ok([outputs[0], outputs[1], outputs[2], outputs[3]])
    }

    /// Flatten stage maps into one node set, run a diffusion block over the
    /// given graph and restore the original shape.
    pub fn feature_map_diffuse(
        &self,
        tape: &Tape,
        binding: &TapeBinding,
        stage: usize,
        maps: Var,
        graph: &Rc<DiffusionGraph>,
    ) -> Result<Var, ModelError> {
        let ids = self
            .feat_blocks
            .iter()
            .find(|(s, _)| *s == stage)
            .map(|(_, ids)| ids)
            .expect("no diffusion block placed at this stage");
        let shape = tape.shape(maps);
        let (m, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        if graph.num_nodes() != m * h * w {
            return Err(ModelError::NodeCountMismatch {
                expected: graph.num_nodes(),
                got: m * h * w,
            });
        }
        let flat = tape.reshape(maps, &[m * h * w, c]);
        let block = self.block_vars(binding, ids);
        let out = diffusion_block(tape, &block, flat, graph, &self.config.diffusion)?;
        Ok(tape.reshape(out, &[m, h, w, c]))
    }

    /// Two-layer decoder trunk.
    fn mlp(&self, tape: &Tape, binding: &TapeBinding, ids: &MlpIds, x: Var) -> Result<Var, TapeError> {
        let hidden = tape.tanh(tape.add_row(tape.matmul(x, binding.var(ids.w1))?, binding.var(ids.b1))?);
        tape.add_row(tape.matmul(hidden, binding.var(ids.w2))?, binding.var(ids.b2))
    }

    /// Branched pose regression: decoupled translation/rotation trunks
    /// merged by a final affine map to the pose vector.
    pub fn branched_decode(
        &self,
        tape: &Tape,
        binding: &TapeBinding,
        layer: DecodeLayer,
        h: Var,
    ) -> Result<Var, ModelError> {
        let ids = self
            .decoders
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, ids)| ids)
            .ok_or(ModelError::MissingDecoder { layer })?;
        let h_d = self.mlp(tape, binding, &ids.trunk_d, h)?;
        let merged = match &ids.trunk_r {
            Some(trunk_r) => {
                let h_r = self.mlp(tape, binding, trunk_r, h)?;
                tape.concat_cols(&[h_d, h_r])?
            }
            None => h_d,
        };
        Ok(tape.add_row(tape.matmul(merged, binding.var(ids.w_out))?, binding.var(ids.b_out))?)
    }

    fn feature_graph(
        &self,
        window_sizes: &[usize],
        h: usize,
        w: usize,
    ) -> Result<Rc<DiffusionGraph>, GraphError> {
        let parts: Result<Vec<_>, _> = window_sizes
            .iter()
            .map(|&n| match self.config.graph.topology {
                Topology::Complete => build_complete_graph(n * h * w),
                Topology::Grid => build_grid_graph(n, h, w),
                Topology::SelfCross => build_self_cross_schedule(n, h * w),
                Topology::Chain => build_grid_graph(n, 1, 1),
            })
            .collect();
        Ok(Rc::new(disjoint_union(&parts?)?))
    }

    fn vector_graph(&self, window_sizes: &[usize]) -> Result<Rc<DiffusionGraph>, GraphError> {
        let parts: Result<Vec<_>, _> = window_sizes
            .iter()
            .map(|&n| match self.config.graph.topology {
                Topology::Complete => build_complete_graph(n),
                Topology::Grid | Topology::Chain => build_grid_graph(n, 1, 1),
                Topology::SelfCross => build_self_cross_schedule(n, 1),
            })
            .collect();
        Ok(Rc::new(disjoint_union(&parts?)?))
    }

    fn check_window_sizes(&self, window_sizes: &[usize]) -> Result<(), ModelError> {
        for &n in window_sizes {
            if n == 0 {
                return Err(ModelError::ZeroFrames);
            }
            if n > self.config.model.max_frames {
                return Err(ModelError::TooManyFrames {
                    got: n,
                    max: self.config.model.max_frames,
                });
            }
        }
        Ok(())
    }

    /// Shared trunk of the forward pass: backbone, feature-map diffusion at
    /// the placed stages, pooling and the vector-embedding cascade. Returns
    /// the per-stage maps (diffused where placed) and the final embedding.
    fn trunk(
        &self,
        tape: &Tape,
        binding: &TapeBinding,
        images: Var,
        window_sizes: &[usize],
    ) -> Result<([Var; 4], Var), ModelError> {
        self.check_window_sizes(window_sizes)?;
        let mut stages = self.backbone_forward(tape, binding, images)?;
        let raw_stage3 = stages[2];
        for &(stage, _) in &self.feat_blocks {
            let maps = stages[stage - 1];
            let shape = tape.shape(maps);
            let graph = self.feature_graph(window_sizes, shape[1], shape[2])?;
            stages[stage - 1] = self.feature_map_diffuse(tape, binding, stage, maps, &graph)?;
        }
        if !self.config.model.decode_diffused_stage3 {
            stages[2] = raw_stage3;
        }
        let pooled = tape.spatial_mean(stages[3])?;
        let h_final = if self.vect_blocks.is_empty() {
            pooled
        } else {
            let graph = self.vector_graph(window_sizes)?;
            let blocks: Vec<BlockVars> = self
                .vect_blocks
                .iter()
                .map(|ids| self.block_vars(binding, ids))
                .collect();
            cascaded_diffusion(tape, &blocks, pooled, &graph, &self.config.diffusion)?
        };
        Ok((stages, h_final))
    }

    /// Training path: decode every configured layer. Feature-map layers
    /// decode pooled maps, the final layer decodes the vector embedding.
    pub fn forward_training(
        &self,
        tape: &Tape,
        binding: &TapeBinding,
        images: Var,
        window_sizes: &[usize],
    ) -> Result<Vec<(DecodeLayer, Var)>, ModelError> {
        let (stages, h_final) = self.trunk(tape, binding, images, window_sizes)?;
        let mut decoded = Vec::with_capacity(self.decoders.len());
        for (layer, _) in &self.decoders {
            let input = match layer {
                DecodeLayer::Stage3 => tape.spatial_mean(stages[2])?,
                DecodeLayer::Stage4 => tape.spatial_mean(stages[3])?,
                DecodeLayer::Final => h_final,
            };
            decoded.push((*layer, self.branched_decode(tape, binding, *layer, input)?));
        }
        Ok(decoded)
    }

    /// Inference path: the final-layer decode only.
    pub fn forward_inference(
        &self,
        tape: &Tape,
        binding: &TapeBinding,
        images: Var,
        window_sizes: &[usize],
    ) -> Result<Var, ModelError> {
        let (_, h_final) = self.trunk(tape, binding, images, window_sizes)?;
        self.branched_decode(tape, binding, DecodeLayer::Final, h_final)
    }

    /// Decode one window of frames to poses.
    pub fn forward_window(&self, images: &Tensor) -> Result<Vec<Pose>, ModelError> {
        let n = images.shape()[0];
        let tape = Tape::new();
        let binding = self.store.bind(&tape);
        let input = tape.leaf(images.clone());
        let out = self.forward_inference(&tape, &binding, input, &[n])?;
        self.decode_pose_rows(&tape.value(out))
    }

    /// Convert raw decoder rows to poses: translation columns pass through,
    /// the rotation encoding is decoded to a canonical log-quaternion.
    pub fn decode_pose_rows(&self, matrix: &Tensor) -> Result<Vec<Pose>, ModelError> {
        let repr = self.config.model.rotation_repr;
        let rows = matrix.shape()[0];
        let cols = matrix.shape()[1];
        let mut poses = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &matrix.data()[i * cols..(i + 1) * cols];
            let q = rotation_decode(&row[3..], repr)?;
            poses.push(Pose::new([row[0], row[1], row[2]], quat_log(&q)));
        }
        Ok(poses)
    }

    /// Per-pixel salience: magnitude of the gradient of the predicted pose
    /// norm with respect to the input image, min-max normalized to [0, 1].
    pub fn salience(&self, image: &Tensor) -> Result<Tensor, ModelError> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let tape = Tape::new();
        let binding = self.store.bind(&tape);
        let input = tape.leaf(image.clone().reshaped(&[1, h, w, 3]));
        let out = self.forward_inference(&tape, &binding, input, &[1])?;
        let scalar = tape.l2_row_norm_sum(out)?;
        let grads = tape.backward(scalar)?;
        let g = grads.wrt(&tape, input);
        let mut salience = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut mag = 0.0;
                for c in 0..3 {
                    let v = g.data()[(y * w + x) * 3 + c];
                    mag += v * v;
                }
                salience[y * w + x] = mag.sqrt();
            }
        }
        let max = salience.iter().cloned().fold(0.0_f64, f64::max);
        let min = salience.iter().cloned().fold(f64::INFINITY, f64::min);
        if max > min {
            for v in salience.iter_mut() {
                *v = (*v - min) / (max - min);
            }
        } else {
            salience.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Tensor::new(&[h, w], salience))
    }
}

/// Arithmetic mean over the spatial cells of a single `[h, w, c]` map.
pub fn global_avg_pool(map: &Tensor) -> Vec<f64> {
    let s = map.shape();
    assert_eq!(s.len(), 3, "expected a single [h, w, c] map");
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; c];
    for cell in 0..h * w {
        for ch in 0..c {
            out[ch] += map.data()[cell * c + ch];
        }
    }
    for v in out.iter_mut() {
        *v /= (h * w) as f64;
    }
    out
}

/// Relative pose messages along directed pairs: rows `to - from`.
pub fn relative_messages(
    tape: &Tape,
    poses: Var,
    pairs: &[(usize, usize)],
) -> Result<Var, TapeError> {
    let from: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let to: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    tape.sub(tape.gather_rows(poses, &to)?, tape.gather_rows(poses, &from)?)
}
