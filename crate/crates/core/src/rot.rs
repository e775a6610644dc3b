//! Rotation representations and conversions.
//!
//! Poses are per-joint rotations stored in one of three forms: axis-angle
//! (compact, used in pose banks and files), 3×3 matrices (the form consumed
//! by skinning), and a 6D encoding (the first two columns of the matrix,
//! decoded by Gram–Schmidt). Optimizers work in the 6D form because the
//! decode is continuous and surjective onto SO(3); axis-angle and unit
//! quaternions both have discontinuities that stall gradient descent.
//!
//! The matrix → axis-angle direction is deliberately not public: nothing in
//! the pipeline needs it (the angle prior uses a crate-internal log map), and
//! exposing it invites ambiguity at the π boundary.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Orthonormality slack accepted by [`matrix_to_rot6d`].
const ROTATION_CHECK_TOL: f64 = 1e-6;

/// Below this angle (radians) Rodrigues and the log map switch to series
/// expansions; the closed forms lose precision as sin θ → 0.
const SMALL_ANGLE: f64 = 1e-8;

/// Six-coefficient rotation encoding: the first two columns of a rotation
/// matrix, stored column-major as `[c1x, c1y, c1z, c2x, c2y, c2z]`.
///
/// Any pair of non-parallel, nonzero vectors decodes to a valid rotation;
/// the encoding of a rotation matrix decodes back to the same matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    /// Encoding of the identity rotation.
    pub fn identity() -> Self {
        Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn a1(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn a2(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// Per-joint rotations for all K joints of a model, in whichever
/// representation the producer works in.
#[derive(Debug, Clone, PartialEq)]
pub enum PoseParams {
    /// K axis-angle vectors; direction is the rotation axis, norm the angle.
    AxisAngle(Vec<Vector3<f64>>),
    /// K rotation matrices.
    Matrices(Vec<Matrix3<f64>>),
    /// K six-coefficient encodings.
    Rot6d(Vec<Rotation6D>),
}

impl PoseParams {
    /// Identity pose for `k` joints, in axis-angle form.
    pub fn identity(k: usize) -> Self {
        PoseParams::AxisAngle(vec![Vector3::zeros(); k])
    }

    pub fn joint_count(&self) -> usize {
        match self {
            PoseParams::AxisAngle(v) => v.len(),
            PoseParams::Matrices(v) => v.len(),
            PoseParams::Rot6d(v) => v.len(),
        }
    }

    /// Decodes to rotation matrices, whatever the stored representation.
    pub fn to_matrices(&self) -> Result<Vec<Matrix3<f64>>> {
        match self {
            PoseParams::AxisAngle(v) => Ok(v.iter().map(axis_angle_to_matrix).collect()),
            PoseParams::Matrices(v) => Ok(v.clone()),
            PoseParams::Rot6d(v) => v.iter().map(rot6d_to_matrix).collect(),
        }
    }
}

/// Decodes a 6D encoding to a rotation matrix by Gram–Schmidt: the first
/// column is the normalized first triple, the second is the normalized
/// residual of the second triple, the third their cross product.
///
/// Errors if the first triple is (numerically) zero or the second is
/// (numerically) parallel to the first.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>> {
    let a1 = r.a1();
    let a2 = r.a2();
    let n1 = a1.norm();
    if n1 < 1e-12 {
        return Err(Error::numeric(format!(
            "rot6d decode: first column has near-zero norm {n1:.3e}"
        )));
    }
    let c1 = a1 / n1;
    let u2 = a2 - c1.dot(&a2) * c1;
    let n2 = u2.norm();
    if n2 < 1e-12 {
        return Err(Error::numeric(format!(
            "rot6d decode: second column parallel to first (residual norm {n2:.3e})"
        )));
    }
    let c2 = u2 / n2;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Reverse-mode derivative of [`rot6d_to_matrix`]: given dL/dR, returns
/// dL/d(coeffs). Recomputes the forward intermediates; the decode is cheap.
pub fn rot6d_to_matrix_vjp(r: &Rotation6D, d_matrix: &Matrix3<f64>) -> Result<[f64; 6]> {
    let a1 = r.a1();
    let a2 = r.a2();
    let n1 = a1.norm();
    if n1 < 1e-12 {
        return Err(Error::numeric("rot6d vjp: degenerate first column".to_string()));
    }
    let c1 = a1 / n1;
    let dot = c1.dot(&a2);
    let u2 = a2 - dot * c1;
    let n2 = u2.norm();
    if n2 < 1e-12 {
        return Err(Error::numeric("rot6d vjp: degenerate second column".to_string()));
    }
    let c2 = u2 / n2;

    let g1 = d_matrix.column(0).into_owned();
    let g2 = d_matrix.column(1).into_owned();
    let g3 = d_matrix.column(2).into_owned();

    // c3 = c1 × c2: ⟨g3, dc1 × c2⟩ = ⟨c2 × g3, dc1⟩ and likewise for c2.
    let mut d_c1 = g1 + c2.cross(&g3);
    let d_c2 = g2 + g3.cross(&c1);

    // c2 = u2 / ‖u2‖.
    let d_u2 = (d_c2 - c2.dot(&d_c2) * c2) / n2;

    // u2 = a2 − (c1·a2) c1.
    let d_a2 = d_u2 - c1.dot(&d_u2) * c1;
    d_c1 += -(d_u2.dot(&c1)) * a2 - dot * d_u2;

    // c1 = a1 / ‖a1‖.
    let d_a1 = (d_c1 - c1.dot(&d_c1) * c1) / n1;

    Ok([d_a1.x, d_a1.y, d_a1.z, d_a2.x, d_a2.y, d_a2.z])
}

/// Encodes a rotation matrix as its first two columns.
///
/// Errors unless the input is orthonormal (within 1e-6) with determinant +1.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rotation6D> {
    let gram = m.transpose() * m - Matrix3::identity();
    let defect = gram.norm();
    if defect > ROTATION_CHECK_TOL {
        return Err(Error::parameter(format!(
            "matrix is not orthonormal: ‖RᵀR − I‖ = {defect:.3e}"
        )));
    }
    let det = m.determinant();
    if (det - 1.0).abs() > ROTATION_CHECK_TOL {
        return Err(Error::parameter(format!(
            "matrix is not a proper rotation: det = {det:.9}"
        )));
    }
    Ok(Rotation6D([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]))
}

/// Rodrigues' formula. For angles below [`SMALL_ANGLE`] the sin θ/θ and
/// (1−cos θ)/θ² factors come from their series so the limit θ → 0 yields
/// exactly the identity.
pub fn axis_angle_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta = v.norm();
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        // sin θ / θ and (1 − cos θ) / θ².
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    let k = skew(v);
    Matrix3::identity() + a * k + b * (k * k)
}

/// Cross-product matrix of `v`.
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Log map SO(3) → so(3): the axis-angle vector of a rotation matrix.
///
/// Intended for rotations comfortably away from the π boundary (within this
/// crate the angle prior only ever sees hinge rotations of a few radians);
/// accuracy degrades as the angle approaches π where the map itself is
/// discontinuous.
pub(crate) fn log_map(m: &Matrix3<f64>) -> Vector3<f64> {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    // v = c(θ)·w with c = θ / (2 sin θ); series below the switch point.
    let c = if theta < SMALL_ANGLE.sqrt() {
        let t2 = theta * theta;
        0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0
    } else {
        theta / (2.0 * theta.sin())
    };
    c * w
}

/// Reverse-mode derivative of [`log_map`]: given dL/dv, returns dL/dR.
pub(crate) fn log_map_vjp(m: &Matrix3<f64>, d_v: &Vector3<f64>) -> Matrix3<f64> {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let c = if theta < SMALL_ANGLE.sqrt() {
        let t2 = theta * theta;
        0.5 + t2 / 12.0 + 7.0 * t2 * t2 / 720.0
    } else {
        theta / (2.0 * theta.sin())
    };
    // dL/dtrace = (dL·w) · c'(θ) · dθ/dtrace. The product
    // k(θ) = c'(θ) · (−1 / (2 sin θ)) stays finite at θ → 0.
    let k = if theta < 1e-3 {
        let t2 = theta * theta;
        -1.0 / 12.0 - t2 / 30.0
    } else {
        let s = theta.sin();
        -(s - theta * theta.cos()) / (4.0 * s * s * s)
    };
    let d_trace = d_v.dot(&w) * k;

    let mut d_m = Matrix3::zeros();
    d_m[(0, 0)] += d_trace;
    d_m[(1, 1)] += d_trace;
    d_m[(2, 2)] += d_trace;

    // w is a fixed linear read of off-diagonal entries.
    d_m[(2, 1)] += c * d_v.x;
    d_m[(1, 2)] -= c * d_v.x;
    d_m[(0, 2)] += c * d_v.y;
    d_m[(2, 0)] -= c * d_v.y;
    d_m[(1, 0)] += c * d_v.z;
    d_m[(0, 1)] -= c * d_v.z;
    d_m
}

/// Concatenates the row-major 3×3 matrices of all joints into one vector of
/// length 9K.
pub fn flatten_rotations(pose: &PoseParams) -> Result<Vec<f64>> {
    let mats = pose.to_matrices()?;
    let mut out = Vec::with_capacity(mats.len() * 9);
    for m in &mats {
        for r in 0..3 {
            for c in 0..3 {
                out.push(m[(r, c)]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    /// Matrix exponential of the skew matrix of `v`, by 24-term Taylor
    /// series. Converges to well below 1e-12 for angles up to π.
    fn exp_so3_series(v: &Vector3<f64>) -> Matrix3<f64> {
        let k = skew(v);
        let mut term = Matrix3::identity();
        let mut sum = Matrix3::identity();
        for n in 1..=24 {
            term = (term * k) / n as f64;
            sum += term;
        }
        sum
    }

    fn assert_mat_close(a: &Matrix3<f64>, b: &Matrix3<f64>, tol: f64) {
        let diff = (a - b).norm();
        assert!(diff <= tol, "matrices differ by {diff:.3e} > {tol:.1e}\n{a}\n{b}");
    }

    #[test]
    fn identity_coeffs_decode_to_identity() {
        let m = rot6d_to_matrix(&Rotation6D::identity()).unwrap();
        assert_mat_close(&m, &Matrix3::identity(), 0.0);
    }

    #[test]
    fn unnormalized_identity_coeffs_decode_to_identity() {
        let m = rot6d_to_matrix(&Rotation6D([2.0, 0.0, 0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_mat_close(&m, &Matrix3::identity(), 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_encodes_as_its_columns() {
        let m = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let r6 = matrix_to_rot6d(&m).unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (got, want) in r6.0.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-15, "{:?} != {:?}", r6.0, expect);
        }
    }

    #[test]
    fn rodrigues_matches_series_exponential() {
        let mut rng = seeded(11);
        for _ in 0..200 {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let got = axis_angle_to_matrix(&v);
            let want = exp_so3_series(&v);
            assert_mat_close(&got, &want, 1e-12);
        }
    }

    #[test]
    fn rodrigues_small_angle_branch_matches_series() {
        for scale in [0.0, 1e-12, 1e-9, 9e-9] {
            let v = Vector3::new(0.6, -0.3, 0.74).normalize() * scale;
            let got = axis_angle_to_matrix(&v);
            let want = exp_so3_series(&v);
            assert_mat_close(&got, &want, 1e-15);
        }
    }

    #[test]
    fn decode_outputs_are_orthonormal_right_handed() {
        let mut rng = seeded(13);
        for _ in 0..2000 {
            let r = Rotation6D(std::array::from_fn(|_| rng.gen_range(-2.0..2.0)));
            let m = match rot6d_to_matrix(&r) {
                Ok(m) => m,
                Err(_) => continue, // degenerate sample; rejection is the contract
            };
            let defect = (m.transpose() * m - Matrix3::identity()).norm();
            assert!(defect < 1e-9, "orthonormality defect {defect:.3e}");
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_then_decode_is_identity_on_rotations() {
        let mut rng = seeded(17);
        for _ in 0..500 {
            let v = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let m = axis_angle_to_matrix(&v);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&m).unwrap()).unwrap();
            assert_mat_close(&back, &m, 1e-12);
        }
    }

    #[test]
    fn degenerate_coeffs_are_rejected() {
        assert!(rot6d_to_matrix(&Rotation6D([0.0; 6])).is_err());
        // Second triple parallel to the first.
        assert!(rot6d_to_matrix(&Rotation6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn non_rotation_matrix_is_rejected_by_encoder() {
        let m = Matrix3::identity() * 1.5;
        assert!(matrix_to_rot6d(&m).is_err());
        // Reflection: orthonormal but det −1.
        let refl = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matrix_to_rot6d(&refl).is_err());
    }

    #[test]
    fn log_map_inverts_rodrigues() {
        let mut rng = seeded(19);
        for _ in 0..500 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0_f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if axis.norm() < 1e-3 {
                continue;
            }
            let v = axis.normalize() * rng.gen_range(0.0..2.8);
            let m = axis_angle_to_matrix(&v);
            let back = log_map(&m);
            assert!((back - v).norm() < 1e-9, "log map error {:.3e}", (back - v).norm());
        }
    }

    #[test]
    fn log_map_small_angles() {
        for scale in [0.0, 1e-10, 1e-6, 1e-4] {
            let v = Vector3::new(1.0, 2.0, -2.0).normalize() * scale;
            let m = axis_angle_to_matrix(&v);
            let back = log_map(&m);
            assert!((back - v).norm() < 1e-12);
        }
    }

    #[test]
    fn rot6d_vjp_matches_finite_differences() {
        let mut rng = seeded(23);
        for _ in 0..40 {
            let r = Rotation6D(std::array::from_fn(|_| rng.gen_range(-1.5..1.5)));
            if rot6d_to_matrix(&r).is_err() {
                continue;
            }
            // Random linear functional of the matrix entries.
            let w: [f64; 9] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let f = |r: &Rotation6D| -> f64 {
                let m = rot6d_to_matrix(r).unwrap();
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += w[i * 3 + j] * m[(i, j)];
                    }
                }
                s
            };
            let mut d_matrix = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    d_matrix[(i, j)] = w[i * 3 + j];
                }
            }
            let analytic = rot6d_to_matrix_vjp(&r, &d_matrix).unwrap();
            let h = 1e-6;
            for k in 0..6 {
                let mut plus = r;
                let mut minus = r;
                plus.0[k] += h;
                minus.0[k] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!(
                    (fd - analytic[k]).abs() / denom < 1e-5,
                    "coeff {k}: fd {fd:.9} vs analytic {:.9}",
                    analytic[k]
                );
            }
        }
    }

    #[test]
    fn log_map_vjp_matches_finite_differences() {
        let mut rng = seeded(29);
        for _ in 0..40 {
            let v0 = Vector3::new(
                rng.gen_range(-1.0..1.0_f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            // Differentiate through Rodrigues ∘ log at a generic point by
            // perturbing the *matrix* entries directly; the vjp is defined on
            // raw 3×3 inputs near the manifold.
            let m = axis_angle_to_matrix(&v0);
            let w = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let f = |m: &Matrix3<f64>| log_map(m).dot(&w);
            let d_m = log_map_vjp(&m, &w);
            let h = 1e-6;
            for i in 0..3 {
                for j in 0..3 {
                    let mut plus = m;
                    let mut minus = m;
                    plus[(i, j)] += h;
                    minus[(i, j)] -= h;
                    let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                    let denom = fd.abs().max(d_m[(i, j)].abs()).max(1e-5);
                    assert!(
                        (fd - d_m[(i, j)]).abs() / denom < 2e-4,
                        "entry ({i},{j}): fd {fd:.9} vs analytic {:.9} at angle {:.3}",
                        d_m[(i, j)],
                        v0.norm(),
                    );
                }
            }
        }
    }

    #[test]
    fn flatten_length_is_nine_per_joint() {
        let pose = PoseParams::identity(24);
        let flat = flatten_rotations(&pose).unwrap();
        assert_eq!(flat.len(), 216);
        // Identity pose flattens to K copies of the row-major identity.
        for chunk in flat.chunks(9) {
            assert_eq!(chunk, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn flatten_is_row_major() {
        let m = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let flat = flatten_rotations(&PoseParams::Matrices(vec![m])).unwrap();
        // Row-major 90° about z: rows (0,−1,0), (1,0,0), (0,0,1).
        let want = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        for (g, w) in flat.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-15);
        }
    }
}
