//! Axis-angle rotations and their derivatives.

use nalgebra::{Matrix3, Vector3};

const SMALL_ANGLE: f64 = 1e-8;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix from an axis-angle vector:
/// `R = I + sin(phi) [k]x + (1 - cos(phi)) [k]x^2` with `phi = |theta|`.
/// Angles below 1e-8 use the second-order Taylor expansion.
pub fn rodrigues(theta: &Vector3<f64>) -> Matrix3<f64> {
    let phi = theta.norm();
    if phi < SMALL_ANGLE {
        let k = skew(theta);
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let axis = theta / phi;
    let k = skew(&axis);
    Matrix3::identity() + phi.sin() * k + (1.0 - phi.cos()) * k * k
}

/// Partial derivatives of the rotation matrix with respect to the three
/// axis-angle components (Gallego & Yezzi closed form):
/// `dR/dtheta_a = (theta_a [theta]x + [theta x ((I - R) e_a)]x) / |theta|^2 * R`.
pub fn rodrigues_jacobian(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let phi2 = theta.norm_squared();
    if phi2.sqrt() < SMALL_ANGLE {
        return [
            skew(&Vector3::x()),
            skew(&Vector3::y()),
            skew(&Vector3::z()),
        ];
    }
    let r = rodrigues(theta);
    let theta_cross = skew(theta);
    let mut out = [Matrix3::zeros(); 3];
    for a in 0..3 {
        let mut e = Vector3::zeros();
        e[a] = 1.0;
        let v = theta.cross(&((Matrix3::identity() - r) * e));
        out[a] = (theta[a] * theta_cross + skew(&v)) * r / phi2;
    }
    out
}
