//! Rigid transforms, the se(3) exponential map, and quaternion rotation
//! derivatives.
//!
//! Pose corrections are stored as a 6-vector `[rho, phi]` (translation,
//! rotation) and applied as `exp([rho, phi]) ∘ pose`. Because gradients of
//! the rendering loss are checked against central finite differences on the
//! *stored* coordinates, the derivative helpers here differentiate the exact
//! exponential at an arbitrary tangent value, not just at zero.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// World-to-camera (or any) rigid transform, rotation stored as a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// World-to-camera transform for a camera at `eye` looking at `target`.
    ///
    /// Camera convention: +x right, +y down, +z forward (into the scene).
    /// `up` is the world direction the image's upward axis should follow.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> RigidTransform {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(up);
        if right.norm() < 1e-12 {
            // Looking straight along `up`; pick an arbitrary perpendicular.
            let alt = if forward.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            right = forward.cross(&alt);
        }
        let right = right.normalize();
        let down = forward.cross(&right).normalize();
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        RigidTransform {
            rotation,
            translation: -(rotation * eye),
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Series coefficients for the SO(3) exponential and its left Jacobian.
///
/// a = sin(t)/t, b = (1-cos(t))/t^2, c = (t-sin(t))/t^3, plus the
/// t-derivatives of b and c used by the dexp chain. Taylor fallbacks keep
/// everything smooth through t = 0.
struct So3Coeffs {
    a: f64,
    b: f64,
    c: f64,
    db: f64,
    dc: f64,
}

fn so3_coeffs(theta: f64) -> So3Coeffs {
    let t = theta;
    if t < 1e-4 {
        let t2 = t * t;
        So3Coeffs {
            a: 1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            b: 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            c: 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            db: -t / 12.0 + t * t2 / 180.0,
            dc: -t / 60.0 + t * t2 / 1260.0,
        }
    } else {
        let (s, co) = t.sin_cos();
        So3Coeffs {
            a: s / t,
            b: (1.0 - co) / (t * t),
            c: (t - s) / (t * t * t),
            db: (t * s - 2.0 * (1.0 - co)) / (t * t * t),
            dc: (t * (1.0 - co) - 3.0 * (t - s)) / (t * t * t * t),
        }
    }
}

/// Rodrigues' formula: exp of the rotation tangent `phi`.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let c = so3_coeffs(theta);
    Matrix3::identity() + k * c.a + k * k * c.b
}

/// Left Jacobian of SO(3): J_l = I + b [phi]x + c [phi]x^2.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(phi);
    let c = so3_coeffs(phi.norm());
    Matrix3::identity() + k * c.b + k * k * c.c
}

/// Right Jacobian of SO(3): J_r(phi) = J_l(-phi) = J_l(phi)^T.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(phi).transpose()
}

/// exp of the se(3) tangent `delta = [rho, phi]` as a rigid transform:
/// rotation exp([phi]x), translation J_l(phi) rho.
pub fn se3_exp(delta: &[f64; 6]) -> RigidTransform {
    let rho = Vector3::new(delta[0], delta[1], delta[2]);
    let phi = Vector3::new(delta[3], delta[4], delta[5]);
    RigidTransform {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * rho,
    }
}

/// Exact derivatives of `exp(delta)` with respect to the six tangent
/// coordinates, evaluated at an arbitrary `delta`.
///
/// `d_rotation[i]` is dR/d(phi_i); `d_translation[i]` is d(J_l(phi) rho)
/// with respect to coordinate i (rho coordinates give the columns of
/// J_l(phi), phi coordinates differentiate both series coefficients).
pub struct Se3ExpDerivatives {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub d_rotation: [Matrix3<f64>; 3],
    pub d_translation: [Vector3<f64>; 6],
}

pub fn se3_exp_with_derivatives(delta: &[f64; 6]) -> Se3ExpDerivatives {
    let rho = Vector3::new(delta[0], delta[1], delta[2]);
    let phi = Vector3::new(delta[3], delta[4], delta[5]);
    let theta = phi.norm();
    let co = so3_coeffs(theta);
    let k = skew(&phi);
    let k2 = k * k;

    let rotation = Matrix3::identity() + k * co.a + k2 * co.b;
    let jl = Matrix3::identity() + k * co.b + k2 * co.c;
    let translation = jl * rho;

    // dR/d(phi_i) = R [J_r e_i]x.
    let jr = so3_right_jacobian(&phi);
    let mut d_rotation = [Matrix3::zeros(); 3];
    for i in 0..3 {
        let e = Vector3::ith(i, 1.0);
        d_rotation[i] = rotation * skew(&(jr * e));
    }

    let mut d_translation = [Vector3::zeros(); 6];
    // rho coordinates: columns of J_l.
    for i in 0..3 {
        d_translation[i] = jl.column(i).into();
    }
    // phi coordinates: differentiate J_l(phi) rho through b(theta), c(theta)
    // and the skew structure. d theta/d phi_i = phi_i/theta (0 at theta=0,
    // where db = dc = 0 too, so the product stays well-defined).
    for i in 0..3 {
        let e = Vector3::ith(i, 1.0);
        let ke = skew(&e);
        let dtheta = if theta < 1e-12 { 0.0 } else { phi[i] / theta };
        let d_jl = k * (co.db * dtheta)
            + ke * co.b
            + k2 * (co.dc * dtheta)
            + (ke * k + k * ke) * co.c;
        d_translation[3 + i] = d_jl * rho;
    }

    Se3ExpDerivatives {
        rotation,
        translation,
        d_rotation,
        d_translation,
    }
}

/// Rotation matrix of a quaternion `[w, x, y, z]`, normalizing internally.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
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

/// Pull a loss gradient on the rotation matrix back to the raw (possibly
/// unnormalized) quaternion coordinates.
///
/// The rotation is built from the normalized quaternion, so the chain is
/// dL/dq_raw = (I - q̂ q̂ᵀ)/|q| · dL/dq̂ with dL/dq̂_k = Σ_ab dL/dR_ab ∂R_ab/∂q̂_k.
pub fn quat_rotation_backward(q: &[f64; 4], d_rotation: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);

    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;

    let g_hat = [
        d_rotation.component_mul(&dr_dw).sum(),
        d_rotation.component_mul(&dr_dx).sum(),
        d_rotation.component_mul(&dr_dy).sum(),
        d_rotation.component_mul(&dr_dz).sum(),
    ];

    // Project to the tangent of the unit sphere and undo the 1/n scaling.
    let q_hat = [w, x, y, z];
    let dot = (0..4).map(|i| q_hat[i] * g_hat[i]).sum::<f64>();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (g_hat[i] - q_hat[i] * dot) / n;
    }
    out
}

pub fn quat_normalize(q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}
