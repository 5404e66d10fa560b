//! Weighted balance loss with learnable homoscedastic parameters and the
//! multi-level absolute + relative total loss.
//!
//! Value-level functions mirror the tape-level graph used in training; the
//! two are cross-checked in tests.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::graph::DiffusionGraph;
use crate::tensor::{Tape, TapeError, Var};

/// Residual norm used inside the balance loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    L1,
    L2,
}

/// Learnable balance scalars: alpha/beta weight the absolute translation and
/// rotation terms, gamma/lambda the relative ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for BalanceParams {
    fn default() -> Self {
        // Rotation residuals are small in log-quaternion units; the rotation
        // balances start low.
        Self { alpha: 0.0, beta: -3.0, gamma: 0.0, lambda: -3.0 }
    }
}

/// Decoding layers contributing loss terms. `Final` is the vector-embedding
/// layer L; the others are pooled feature-map stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeLayer {
    Stage3,
    Stage4,
    Final,
}

impl std::fmt::Display for DecodeLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeLayer::Stage3 => write!(f, "3"),
            DecodeLayer::Stage4 => write!(f, "4"),
            DecodeLayer::Final => write!(f, "L"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("decoded output for layer {layer} has {got} poses, expected {expected}")]
    FrameCountMismatch { layer: DecodeLayer, got: usize, expected: usize },
    #[error("no decoding layers present in the decoded output")]
    NoLayers,
    #[error(transparent)]
    Tape(#[from] TapeError),
}

fn vec3_norm(v: &[f64; 3], norm: LossNorm) -> f64 {
    match norm {
        LossNorm::L1 => v.iter().map(|x| x.abs()).sum(),
        LossNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

fn diff3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Absolute pose term: |d - d*| exp(-alpha) + alpha + |r - r*| exp(-beta) + beta.
pub fn absolute_pose_loss(
    pred: &Pose,
    target: &Pose,
    bp: &BalanceParams,
    norm: LossNorm,
) -> f64 {
    let dt = vec3_norm(&diff3(&pred.d, &target.d), norm);
    let dr = vec3_norm(&diff3(&pred.r, &target.r), norm);
    dt * (-bp.alpha).exp() + bp.alpha + dr * (-bp.beta).exp() + bp.beta
}

/// Relative pose term, same form with gamma and lambda.
pub fn relative_pose_loss(
    pred_rel: &Pose,
    target_rel: &Pose,
    bp: &BalanceParams,
    norm: LossNorm,
) -> f64 {
    let dt = vec3_norm(&diff3(&pred_rel.d, &target_rel.d), norm);
    let dr = vec3_norm(&diff3(&pred_rel.r, &target_rel.r), norm);
    dt * (-bp.gamma).exp() + bp.gamma + dr * (-bp.lambda).exp() + bp.lambda
}

/// Per-layer loss terms and their exact sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// (layer, absolute term sum, relative term sum).
    pub per_layer: Vec<(DecodeLayer, f64, f64)>,
    pub total: f64,
}

/// Multi-level total: for every layer, absolute terms summed over frames
/// plus relative terms summed over both directed chain neighbor pairs.
pub fn total_loss(
    decoded: &[(DecodeLayer, Vec<Pose>)],
    targets: &[Pose],
    bp: &BalanceParams,
    chain: &DiffusionGraph,
    norm: LossNorm,
) -> Result<LossBreakdown, ObjectiveError> {
    if decoded.is_empty() {
        return Err(ObjectiveError::NoLayers);
    }
    let pairs = chain.directed_pairs();
    let mut per_layer = Vec::with_capacity(decoded.len());
    let mut total = 0.0;
    for (layer, poses) in decoded {
        if poses.len() != targets.len() {
            return Err(ObjectiveError::FrameCountMismatch {
                layer: *layer,
                got: poses.len(),
                expected: targets.len(),
            });
        }
        let mut absolute = 0.0;
        for (pred, target) in poses.iter().zip(targets) {
            absolute += absolute_pose_loss(pred, target, bp, norm);
        }
        let mut relative = 0.0;
        for &(i, j) in &pairs {
            let pred_rel = crate::geometry::pose_relative(&poses[i], &poses[j]);
            let target_rel = crate::geometry::pose_relative(&targets[i], &targets[j]);
            relative += relative_pose_loss(&pred_rel, &target_rel, bp, norm);
        }
        total += absolute + relative;
        per_layer.push((*layer, absolute, relative));
    }
    Ok(LossBreakdown { per_layer, total })
}

/// Balance scalars registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BalanceVars {
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub lambda: Var,
}

/// Residual norm of a `[n, c]` difference matrix summed over rows.
fn norm_sum(tape: &Tape, diff: Var, norm: LossNorm) -> Result<Var, TapeError> {
    match norm {
        LossNorm::L1 => Ok(tape.sum_all(tape.abs(diff))),
        LossNorm::L2 => tape.l2_row_norm_sum(diff),
    }
}

/// `residual_norm * exp(-balance) + count * balance` on the tape.
fn balance_term(
    tape: &Tape,
    residual_norm: Var,
    count: usize,
    balance: Var,
) -> Result<Var, TapeError> {
    let weighted = tape.mul(residual_norm, tape.exp(tape.neg(balance)))?;
    tape.add(weighted, tape.scale(balance, count as f64))
}

/// Tape-level absolute loss for one layer.
///
/// `pred` is `[n, 3 + rdim]` (translation then rotation encoding); targets
/// are leaves of matching split shapes.
pub fn absolute_loss_tape(
    tape: &Tape,
    pred: Var,
    target_d: Var,
    target_r: Var,
    bp: &BalanceVars,
    norm: LossNorm,
) -> Result<Var, TapeError> {
    let n = tape.shape(pred)[0];
    let rdim = tape.shape(pred)[1] - 3;
    let pred_d = tape.slice_cols(pred, 0, 3)?;
    let pred_r = tape.slice_cols(pred, 3, rdim)?;
    let nd = norm_sum(tape, tape.sub(pred_d, target_d)?, norm)?;
    let nr = norm_sum(tape, tape.sub(pred_r, target_r)?, norm)?;
    tape.add(
        balance_term(tape, nd, n, bp.alpha)?,
        balance_term(tape, nr, n, bp.beta)?,
    )
}

/// Tape-level relative loss over directed pairs for one layer. Relative
/// predictions and targets are componentwise differences of the absolute
/// rows, matching the simplified relative pose computation.
pub fn relative_loss_tape(
    tape: &Tape,
    pred: Var,
    target_d: Var,
    target_r: Var,
    pairs: &[(usize, usize)],
    bp: &BalanceVars,
    norm: LossNorm,
) -> Result<Var, TapeError> {
    assert!(!pairs.is_empty());
    let rdim = tape.shape(pred)[1] - 3;
    let from: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let to: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let rel = |m: Var| -> Result<Var, TapeError> {
        tape.sub(tape.gather_rows(m, &to)?, tape.gather_rows(m, &from)?)
    };
    let pred_rel = rel(pred)?;
    let pred_rel_d = tape.slice_cols(pred_rel, 0, 3)?;
    let pred_rel_r = tape.slice_cols(pred_rel, 3, rdim)?;
    let tgt_rel_d = rel(target_d)?;
    let tgt_rel_r = rel(target_r)?;
    let nd = norm_sum(tape, tape.sub(pred_rel_d, tgt_rel_d)?, norm)?;
    let nr = norm_sum(tape, tape.sub(pred_rel_r, tgt_rel_r)?, norm)?;
    tape.add(
        balance_term(tape, nd, pairs.len(), bp.gamma)?,
        balance_term(tape, nr, pairs.len(), bp.lambda)?,
    )
}
