//! Graph neural diffusion: the cross-diffusion attention field, the
//! node-wise self-diffusion field, fixed-step ODE integrators and the
//! composed diffusion block.
//!
//! A diffusion block integrates the cross field over [t0, t1] and the self
//! field over [t1, t2]. Both fields are autonomous; parameters are tied
//! across integration steps.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::graph::DiffusionGraph;
use crate::tensor::{attention_forward, matmul_raw, Tape, TapeError, Tensor, Var};

/// State entries beyond this magnitude abort integration.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("state diverged (entry above {DIVERGENCE_LIMIT:.0e}) at integration step {step}")]
    Diverged { step: usize },
    #[error("invalid diffusion config: {0}")]
    BadConfig(String),
}

/// Fixed-step ODE solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Euler,
    Rk4,
}

/// Integration times, solver selection and attention bookkeeping for one
/// diffusion block family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub solver: Solver,
    pub steps_per_unit: usize,
    pub heads: usize,
    pub dot_scaling: bool,
    /// Cascade depth for the vector-embedding diffusion stage.
    pub vector_blocks: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t1: 1.0,
            t2: 2.0,
            solver: Solver::Euler,
            steps_per_unit: 5,
            heads: 8,
            dot_scaling: false,
            vector_blocks: 2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.t0 < self.t1 && self.t1 < self.t2) {
            return Err(DiffusionError::BadConfig(format!(
                "integration times must satisfy t0 < t1 < t2, got {} {} {}",
                self.t0, self.t1, self.t2
            )));
        }
        if self.steps_per_unit == 0 {
            return Err(DiffusionError::BadConfig("steps_per_unit must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(DiffusionError::BadConfig("heads must be >= 1".into()));
        }
        Ok(())
    }

    fn steps_for(&self, t_start: f64, t_end: f64) -> usize {
        (((t_end - t_start) * self.steps_per_unit as f64).ceil() as usize).max(1)
    }

    /// Logit multiplier for a given head width.
    pub fn dot_scale(&self, head_dim: usize) -> f64 {
        if self.dot_scaling {
            1.0 / (head_dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// One attention head registered on a tape: `w` is `[C, C/K]`, `b` is `[C/K]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub b: Var,
}

/// Two-layer self-diffusion MLP (`C -> C -> C`, tanh between layers)
/// registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SelfFieldVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameters of one diffusion block on a tape.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub self_field: SelfFieldVars,
}

/// Per-node attention weights over the graph for one head, value level.
///
/// `w` is `[C, d]`, `b` is `[d]`, `state` is `[n, C]`. Each returned list is
/// aligned with the node's neighborhood and sums to 1.
pub fn attention_weights(
    w: &Tensor,
    b: &Tensor,
    state: &Tensor,
    graph: &DiffusionGraph,
    scale: f64,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let n = state.shape()[0];
    let c = state.shape()[1];
    let d = w.shape()[1];
    let mut m = matmul_raw(state.data(), w.data(), n, c, d).into_data();
    for (i, v) in m.iter_mut().enumerate() {
        *v += b.data()[i % d];
    }
    let (_, weights) = attention_forward(&m, n, d, graph, scale)?;
    Ok(weights)
}

/// Right-hand side of the cross-diffusion ODE: per head, project node
/// features, attend over the neighborhood, then concatenate heads back to
/// the full channel width.
pub fn cross_field(
    tape: &Tape,
    heads: &[HeadVars],
    state: Var,
    graph: &Rc<DiffusionGraph>,
    config: &DiffusionConfig,
) -> Result<Var, DiffusionError> {
    let mut outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let head_dim = tape.shape(head.w)[1];
        let m_fc = tape.add_row(tape.matmul(state, head.w)?, head.b)?;
        let weighted =
            tape.graph_attention(m_fc, graph.clone(), config.dot_scale(head_dim))?;
        outputs.push(weighted);
    }
    Ok(tape.concat_cols(&outputs)?)
}

/// Right-hand side of the self-diffusion ODE: a bounded two-layer MLP
/// applied independently to every node row.
pub fn self_field(
    tape: &Tape,
    params: &SelfFieldVars,
    state: Var,
) -> Result<Var, DiffusionError> {
    let hidden = tape.tanh(tape.add_row(tape.matmul(state, params.w1)?, params.b1)?);
    Ok(tape.add_row(tape.matmul(hidden, params.w2)?, params.b2)?)
}

/// Fixed-step integration of an autonomous field from `t_start` to `t_end`.
///
/// Euler: x <- x + h f(x). RK4: classical four-stage update. Aborts with a
/// divergence error naming the step if any state entry leaves the trusted
/// range.
pub fn integrate(
    tape: &Tape,
    field: &mut dyn FnMut(&Tape, Var) -> Result<Var, DiffusionError>,
    x0: Var,
    t_start: f64,
    t_end: f64,
    solver: Solver,
    steps: usize,
) -> Result<Var, DiffusionError> {
    assert!(t_end > t_start, "integration interval must be forward in time");
    assert!(steps >= 1);
    let h = (t_end - t_start) / steps as f64;
    let mut x = x0;
    for step in 0..steps {
        x = match solver {
            Solver::Euler => {
                let k = field(tape, x)?;
                tape.add(x, tape.scale(k, h))?
            }
            Solver::Rk4 => {
                let k1 = field(tape, x)?;
                let k2 = field(tape, tape.add(x, tape.scale(k1, h / 2.0))?)?;
                let k3 = field(tape, tape.add(x, tape.scale(k2, h / 2.0))?)?;
                let k4 = field(tape, tape.add(x, tape.scale(k3, h))?)?;
                // x + h/6 (k1 + 2 k2 + 2 k3 + k4)
                let sum = tape.add(
                    tape.add(k1, tape.scale(k2, 2.0))?,
                    tape.add(tape.scale(k3, 2.0), k4)?,
                )?;
                tape.add(x, tape.scale(sum, h / 6.0))?
            }
        };
        let value = tape.value(x);
        if !value.is_finite() || value.max_abs() > DIVERGENCE_LIMIT {
            return Err(DiffusionError::Diverged { step });
        }
    }
    Ok(x)
}

/// One diffusion block: cross-diffusion over [t0, t1], then self-diffusion
/// over [t1, t2]. Scheduled (self-cross) graphs split the cross interval
/// evenly across their phases.
pub fn diffusion_block(
    tape: &Tape,
    block: &BlockVars,
    x0: Var,
    graph: &Rc<DiffusionGraph>,
    config: &DiffusionConfig,
) -> Result<Var, DiffusionError> {
    let cross_steps = config.steps_for(config.t0, config.t1);
    let mut x = x0;
    match graph.phases() {
        Some(phases) if !phases.is_empty() => {
            let span = (config.t1 - config.t0) / phases.len() as f64;
            let steps = (cross_steps / phases.len()).max(1);
            for (k, phase) in phases.iter().enumerate() {
                let phase_graph = Rc::new(graph.with_neighborhoods(phase.clone()));
                let t_a = config.t0 + span * k as f64;
                x = integrate(
                    tape,
                    &mut |t, v| cross_field(t, &block.heads, v, &phase_graph, config),
                    x,
                    t_a,
                    t_a + span,
                    config.solver,
                    steps,
                )?;
            }
        }
        _ => {
            x = integrate(
                tape,
                &mut |t, v| cross_field(t, &block.heads, v, graph, config),
                x,
                config.t0,
                config.t1,
                config.solver,
                cross_steps,
            )?;
        }
    }
    integrate(
        tape,
        &mut |t, v| self_field(t, &block.self_field, v),
        x,
        config.t1,
        config.t2,
        config.solver,
        config.steps_for(config.t1, config.t2),
    )
}

/// Sequential application of diffusion blocks.
pub fn cascaded_diffusion(
    tape: &Tape,
    blocks: &[BlockVars],
    h: Var,
    graph: &Rc<DiffusionGraph>,
    config: &DiffusionConfig,
) -> Result<Var, DiffusionError> {
    assert!(!blocks.is_empty(), "cascade requires at least one block");
    let mut x = h;
    for block in blocks {
        x = diffusion_block(tape, block, x, graph, config)?;
    }
    Ok(x)
}
