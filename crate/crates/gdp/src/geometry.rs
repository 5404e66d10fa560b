//! Quaternion and pose algebra: log/exp maps, rotation representation
//! conversions, relative poses and error metrics.
//!
//! Rotations are carried through the pipeline as log-quaternions (the
//! 3-vector logarithm of a canonical unit quaternion). The double cover is
//! resolved at construction by forcing the scalar part non-negative, which
//! keeps the log map single-valued with norm at most pi/2.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("cannot normalize a zero-norm quaternion")]
    ZeroNormQuaternion,
}

/// Unit-norm quaternion (q1, q2, q3, q4) with q1 the scalar part, kept in
/// canonical form q1 >= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    q: [f64; 4],
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self { q: [1.0, 0.0, 0.0, 0.0] }
    }

    pub fn components(&self) -> [f64; 4] {
        self.q
    }

    pub fn scalar(&self) -> f64 {
        self.q[0]
    }

    pub fn vector(&self) -> [f64; 3] {
        [self.q[1], self.q[2], self.q[3]]
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.q.iter().zip(&other.q).map(|(a, b)| a * b).sum()
    }
}

/// Normalize to unit length and resolve the double cover (q1 >= 0).
pub fn quat_normalize(q: [f64; 4]) -> Result<UnitQuaternion, GeometryError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(GeometryError::ZeroNormQuaternion);
    }
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    Ok(UnitQuaternion {
        q: [
            sign * q[0] / norm,
            sign * q[1] / norm,
            sign * q[2] / norm,
            sign * q[3] / norm,
        ],
    })
}

/// Logarithm map: ((q2,q3,q4)/|(q2,q3,q4)|) * arccos(q1) when the vector
/// part is nonzero, the zero vector otherwise.
pub fn quat_log(q: &UnitQuaternion) -> [f64; 3] {
    let v = q.vector();
    let vnorm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if vnorm == 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let angle = q.scalar().clamp(-1.0, 1.0).acos();
    let s = angle / vnorm;
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Exponential map, inverse of [`quat_log`]: (cos|r|, sin|r| * r/|r|), with
/// the zero vector mapping to the identity.
pub fn quat_exp(r: [f64; 3]) -> UnitQuaternion {
    let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if norm == 0.0 {
        return UnitQuaternion::identity();
    }
    let s = norm.sin() / norm;
    UnitQuaternion { q: [norm.cos(), r[0] * s, r[1] * s, r[2] * s] }
}

/// Rotation encodings selectable for the decoder output and targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRepr {
    Quaternion,
    LogQuaternion,
    RotationMatrix,
    AxisAngle,
}

impl RotationRepr {
    pub fn dim(&self) -> usize {
        match self {
            RotationRepr::Quaternion => 4,
            RotationRepr::LogQuaternion => 3,
            RotationRepr::RotationMatrix => 9,
            RotationRepr::AxisAngle => 3,
        }
    }
}

/// Row-major 3x3 rotation matrix of the quaternion.
pub fn quat_to_matrix(q: &UnitQuaternion) -> [f64; 9] {
    let [w, x, y, z] = q.components();
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// Shepperd's method: pick the largest diagonal combination for stability.
pub fn matrix_to_quat(m: &[f64; 9]) -> Result<UnitQuaternion, GeometryError> {
    let trace = m[0] + m[4] + m[8];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[7] - m[5]) / s, (m[2] - m[6]) / s, (m[3] - m[1]) / s]
    } else if m[0] > m[4] && m[0] > m[8] {
        let s = (1.0 + m[0] - m[4] - m[8]).sqrt() * 2.0;
        [(m[7] - m[5]) / s, 0.25 * s, (m[1] + m[3]) / s, (m[2] + m[6]) / s]
    } else if m[4] > m[8] {
        let s = (1.0 + m[4] - m[0] - m[8]).sqrt() * 2.0;
        [(m[2] - m[6]) / s, (m[1] + m[3]) / s, 0.25 * s, (m[5] + m[7]) / s]
    } else {
        let s = (1.0 + m[8] - m[0] - m[4]).sqrt() * 2.0;
        [(m[3] - m[1]) / s, (m[2] + m[6]) / s, (m[5] + m[7]) / s, 0.25 * s]
    };
    quat_normalize(q)
}

/// Encode a quaternion in the requested representation. The axis-angle form
/// is the so(3) vector (rotation angle times unit axis).
pub fn rotation_encode(q: &UnitQuaternion, repr: RotationRepr) -> Vec<f64> {
    match repr {
        RotationRepr::Quaternion => q.components().to_vec(),
        RotationRepr::LogQuaternion => quat_log(q).to_vec(),
        RotationRepr::RotationMatrix => quat_to_matrix(q).to_vec(),
        RotationRepr::AxisAngle => {
            // Full rotation angle is twice the quaternion log angle.
            let r = quat_log(q);
            vec![2.0 * r[0], 2.0 * r[1], 2.0 * r[2]]
        }
    }
}

/// Decode a representation vector back to a canonical unit quaternion.
/// Inputs need not be exactly valid (regression outputs): quaternions are
/// renormalized and matrices go through Shepperd's method.
pub fn rotation_decode(v: &[f64], repr: RotationRepr) -> Result<UnitQuaternion, GeometryError> {
    match repr {
        RotationRepr::Quaternion => {
            assert_eq!(v.len(), 4);
            quat_normalize([v[0], v[1], v[2], v[3]])
        }
        RotationRepr::LogQuaternion => {
            assert_eq!(v.len(), 3);
            Ok(quat_exp([v[0], v[1], v[2]]))
        }
        RotationRepr::RotationMatrix => {
            assert_eq!(v.len(), 9);
            let m: [f64; 9] = v.try_into().unwrap();
            matrix_to_quat(&m)
        }
        RotationRepr::AxisAngle => {
            assert_eq!(v.len(), 3);
            Ok(quat_exp([v[0] / 2.0, v[1] / 2.0, v[2] / 2.0]))
        }
    }
}

/// 6-DoF pose: translation in meters plus log-quaternion rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Translation (dx, dy, dz) in meters.
    pub d: [f64; 3],
    /// Rotation as a log-quaternion (rx, ry, rz).
    pub r: [f64; 3],
}

impl Pose {
    pub fn zero() -> Self {
        Self { d: [0.0; 3], r: [0.0; 3] }
    }

    pub fn new(d: [f64; 3], r: [f64; 3]) -> Self {
        Self { d, r }
    }

    pub fn from_parts(v: &[f64]) -> Self {
        assert_eq!(v.len(), 6);
        Self { d: [v[0], v[1], v[2]], r: [v[3], v[4], v[5]] }
    }

    pub fn to_vec(&self) -> [f64; 6] {
        [self.d[0], self.d[1], self.d[2], self.r[0], self.r[1], self.r[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.d.iter().chain(&self.r).all(|v| v.is_finite())
    }
}

/// Componentwise relative pose p_j - p_i (both translation and rotation).
pub fn pose_relative(p_i: &Pose, p_j: &Pose) -> Pose {
    Pose {
        d: [p_j.d[0] - p_i.d[0], p_j.d[1] - p_i.d[1], p_j.d[2] - p_i.d[2]],
        r: [p_j.r[0] - p_i.r[0], p_j.r[1] - p_i.r[1], p_j.r[2] - p_i.r[2]],
    }
}

/// Translation (meters) and rotation (degrees) error between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translation_error: f64,
    pub rotation_error: f64,
}

/// Euclidean translation error and quaternion angle error in degrees:
/// (360/pi) * arccos(|<exp(r_pred), exp(r_target)>|).
pub fn pose_error(pred: &Pose, target: &Pose) -> PoseError {
    let translation_error = pred
        .d
        .iter()
        .zip(&target.d)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let qp = quat_exp(pred.r);
    let qt = quat_exp(target.r);
    // atan2 form of arccos(|<qp, qt>|), exact at zero angle.
    let s = if qp.dot(&qt) < 0.0 { -1.0 } else { 1.0 };
    let (mut diff, mut sum) = (0.0, 0.0);
    for (a, b) in qp.components().iter().zip(qt.components()) {
        diff += (a - s * b) * (a - s * b);
        sum += (a + s * b) * (a + s * b);
    }
    let half_angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    let rotation_error = 360.0 / std::f64::consts::PI * half_angle;
    PoseError { translation_error, rotation_error }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_canonical_quat<R: Rng>(rng: &mut R) -> UnitQuaternion {
        loop {
            let q: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-3 {
                return quat_normalize(q).unwrap();
            }
        }
    }

    #[test]
    fn normalize_scales_to_unit_norm() {
        let q = quat_normalize([2.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.components(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_resolves_double_cover() {
        let q = quat_normalize([-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(q.components(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_hand_computed_norm_two() {
        let q = quat_normalize([1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(q.components(), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            quat_normalize([0.0; 4]),
            Err(GeometryError::ZeroNormQuaternion)
        ));
    }

    #[test]
    fn log_identity_branch_is_exact_zero() {
        let r = quat_log(&UnitQuaternion::identity());
        assert_eq!(r, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_analytic_arccos_evaluation() {
        let q = quat_normalize([(PI / 6.0).cos(), (PI / 6.0).sin(), 0.0, 0.0]).unwrap();
        let r = quat_log(&q);
        assert!((r[0] - PI / 6.0).abs() < 1e-12);
        assert!(r[1].abs() < 1e-12 && r[2].abs() < 1e-12);
    }

    #[test]
    fn exp_identity_and_analytic_values() {
        assert_eq!(quat_exp([0.0; 3]).components(), [1.0, 0.0, 0.0, 0.0]);
        let q = quat_exp([PI / 2.0, 0.0, 0.0]);
        let c = q.components();
        assert!(c[0].abs() < 1e-15);
        assert!((c[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exp_log_round_trip_1000_random_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = random_canonical_quat(&mut rng);
            let q2 = quat_exp(quat_log(&q));
            for (a, b) in q.components().iter().zip(q2.components()) {
                assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", q, q2);
            }
        }
    }

    #[test]
    fn log_exp_round_trip_inside_half_pi_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let dir: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = (dir.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if n < 1e-6 {
                continue;
            }
            let len = rng.gen_range(0.0..PI / 2.0 * 0.999);
            let r = [dir[0] / n * len, dir[1] / n * len, dir[2] / n * len];
            let r2 = quat_log(&quat_exp(r));
            for (a, b) in r.iter().zip(&r2) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    /// Textbook quaternion-to-matrix formula written out independently of
    /// the implementation path under test.
    fn matrix_oracle(q: &UnitQuaternion) -> [f64; 9] {
        let [w, x, y, z] = q.components();
        let (ww, xx, yy, zz) = (w * w, x * x, y * y, z * z);
        [
            ww + xx - yy - zz,
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            ww - xx + yy - zz,
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            ww - xx - yy + zz,
        ]
    }

    #[test]
    fn encode_matches_independent_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let q = random_canonical_quat(&mut rng);
            let enc = rotation_encode(&q, RotationRepr::RotationMatrix);
            let oracle = matrix_oracle(&q);
            for (a, b) in enc.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_encodings() {
        let id = UnitQuaternion::identity();
        let m = rotation_encode(&id, RotationRepr::RotationMatrix);
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(rotation_encode(&id, RotationRepr::LogQuaternion), vec![0.0; 3]);
    }

    #[test]
    fn all_representations_round_trip_1000_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let reprs = [
            RotationRepr::Quaternion,
            RotationRepr::LogQuaternion,
            RotationRepr::RotationMatrix,
            RotationRepr::AxisAngle,
        ];
        for _ in 0..1000 {
            let q = random_canonical_quat(&mut rng);
            for repr in reprs {
                let enc = rotation_encode(&q, repr);
                assert_eq!(enc.len(), repr.dim());
                let q2 = rotation_decode(&enc, repr).unwrap();
                for (a, b) in q.components().iter().zip(q2.components()) {
                    assert!(
                        (a - b).abs() < 1e-8,
                        "{:?} round trip failed: {:?} vs {:?}",
                        repr,
                        q.components(),
                        q2.components()
                    );
                }
            }
        }
    }

    #[test]
    fn relative_pose_is_componentwise_subtraction() {
        let p_i = Pose::new([1.0, 2.0, 3.0], [0.1, 0.2, 0.3]);
        let p_j = Pose::new([4.0, 4.0, 4.0], [0.1, 0.2, 0.3]);
        let rel = pose_relative(&p_i, &p_j);
        assert_eq!(rel.d, [3.0, 2.0, 1.0]);
        assert_eq!(rel.r, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pose_error_examples() {
        let p = Pose::new([1.0, 2.0, 3.0], [0.3, -0.1, 0.2]);
        let e = pose_error(&p, &p);
        assert_eq!(e.translation_error, 0.0);
        assert!(e.rotation_error < 1e-6);

        // 3-4-5 triangle.
        let a = Pose::new([0.0, 0.0, 0.0], [0.0; 3]);
        let b = Pose::new([3.0, 4.0, 0.0], [0.0; 3]);
        assert!((pose_error(&a, &b).translation_error - 5.0).abs() < 1e-12);

        // Axis-angle of pi/18 rad = 10 degrees; log-quaternion is half that.
        let pred = Pose::new([0.0; 3], [PI / 36.0, 0.0, 0.0]);
        let target = Pose::zero();
        assert!((pose_error(&pred, &target).rotation_error - 10.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn relative_pose_diagonal_and_antisymmetry(
            d1 in proptest::array::uniform3(-100.0f64..100.0),
            r1 in proptest::array::uniform3(-1.5f64..1.5),
            d2 in proptest::array::uniform3(-100.0f64..100.0),
            r2 in proptest::array::uniform3(-1.5f64..1.5),
        ) {
            let p = Pose::new(d1, r1);
            let q = Pose::new(d2, r2);
            prop_assert_eq!(pose_relative(&p, &p), Pose::zero());
            let ab = pose_relative(&p, &q);
            let ba = pose_relative(&q, &p);
            for k in 0..3 {
                prop_assert_eq!(ab.d[k], -ba.d[k]);
                prop_assert_eq!(ab.r[k], -ba.r[k]);
            }
        }

        #[test]
        fn pose_error_nonnegative_bounded_symmetric_rotation(
            d1 in proptest::array::uniform3(-50.0f64..50.0),
            r1 in proptest::array::uniform3(-1.5f64..1.5),
            d2 in proptest::array::uniform3(-50.0f64..50.0),
            r2 in proptest::array::uniform3(-1.5f64..1.5),
        ) {
            let p = Pose::new(d1, r1);
            let q = Pose::new(d2, r2);
            let e = pose_error(&p, &q);
            prop_assert!(e.translation_error >= 0.0);
            prop_assert!(e.rotation_error >= 0.0 && e.rotation_error <= 180.0);
            let e2 = pose_error(&q, &p);
            prop_assert!((e.rotation_error - e2.rotation_error).abs() < 1e-9);
        }
    }
}
