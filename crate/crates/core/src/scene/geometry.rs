//! Quaternion, covariance and density helpers for anisotropic Gaussians.
//!
//! Quaternions are stored as `[w, x, y, z]`.

use nalgebra::{Matrix3, Vector3, Vector4};

use super::SceneError;

/// Returns `q / |q|`. A zero quaternion maps to the identity.
pub fn normalize_quaternion(q: Vector4<f64>) -> Vector4<f64> {
    // Quaternions already unit to within rounding are returned unchanged, which
    // makes normalization idempotent.
    const TOL: f64 = 8.0 * f64::EPSILON;
    let mut q = q;
    for _ in 0..4 {
        let n = q.norm();
        if n == 0.0 || !n.is_finite() {
            return Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
        if (n - 1.0).abs() <= TOL {
            return q;
        }
        q /= n;
    }
    q
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn rotation_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`rotation_matrix`] with respect to `w, x, y, z`.
pub fn rotation_matrix_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let d_w = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let d_x = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let d_y = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let d_z = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [d_w, d_x, d_y, d_z]
}

/// Quaternion `[w, x, y, z]` of a proper rotation matrix.
pub fn quaternion_from_matrix(r: &Matrix3<f64>) -> Vector4<f64> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let uq = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    Vector4::new(uq.w, uq.i, uq.j, uq.k)
}

/// Builds `Σ = R·S·Sᵀ·Rᵀ` from per-axis scales and a unit quaternion.
pub fn covariance_from_params(
    scale: &Vector3<f64>,
    rotation: &Vector4<f64>,
) -> Result<Matrix3<f64>, SceneError> {
    if scale.iter().chain(rotation.iter()).any(|v| !v.is_finite()) {
        return Err(SceneError::InvalidParameter(
            "non-finite scale or rotation".into(),
        ));
    }
    if scale.iter().any(|s| *s <= 0.0) {
        return Err(SceneError::InvalidParameter(
            "scales must be strictly positive".into(),
        ));
    }
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    let sigma = m * m.transpose();
    // Symmetrize away rounding asymmetry.
    Ok((sigma + sigma.transpose()) * 0.5)
}

/// Unnormalized Gaussian density `exp(-½ (p-μ)ᵀ Σ⁻¹ (p-μ))`.
pub fn query_gaussian(
    p: &Vector3<f64>,
    mean: &Vector3<f64>,
    covariance: &Matrix3<f64>,
) -> Result<f64, SceneError> {
    let eig = covariance.symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(min > 0.0) || max / min >= 1e12 {
        return Err(SceneError::DegenerateCovariance);
    }
    let chol = covariance
        .cholesky()
        .ok_or(SceneError::DegenerateCovariance)?;
    let d = p - mean;
    let solved = chol.solve(&d);
    Ok((-0.5 * d.dot(&solved)).exp())
}
