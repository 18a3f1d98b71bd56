//! Gaussian scene representation and parameter flattening.
//!
//! Every Gaussian carries 15 parameters in a fixed order (mean 3, log-scale
//! 3, quaternion 4, opacity logit 1, color 3, mask logit 1) so that flat
//! gradient vectors and Hessian diagonals index deterministically.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::math::{quat_normalize, quat_to_rotation, sigmoid};

/// Parameters per Gaussian in the flat layout.
pub const PARAMS_PER_GAUSSIAN: usize = 15;

/// Flat-layout slot offsets within one Gaussian's block.
pub mod slots {
    pub const MEAN: usize = 0; // 3 entries
    pub const LOG_SCALE: usize = 3; // 3 entries
    pub const ROTATION: usize = 6; // 4 entries (w, x, y, z)
    pub const OPACITY: usize = 10; // 1 entry
    pub const COLOR: usize = 11; // 3 entries
    pub const MASK: usize = 14; // 1 entry
}

/// One splat: position, anisotropic log-scale, orientation, opacity logit,
/// degree-0 color, and an object-membership logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    /// Unit quaternion (w, x, y, z); renormalized after every update.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    pub mask_logit: f64,
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn mask_value(&self) -> f64 {
        sigmoid(self.mask_logit)
    }

    pub fn mean_vec(&self) -> Vector3<f64> {
        Vector3::new(self.mean[0], self.mean[1], self.mean[2])
    }

    pub fn scales(&self) -> Vector3<f64> {
        Vector3::new(
            self.log_scale[0].exp(),
            self.log_scale[1].exp(),
            self.log_scale[2].exp(),
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.rotation)
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = quat_normalize(&self.rotation);
    }
}

/// Covariance Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)).
pub fn covariance(g: &Gaussian3D) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = Vector3::new(
        (2.0 * g.log_scale[0]).exp(),
        (2.0 * g.log_scale[1]).exp(),
        (2.0 * g.log_scale[2]).exp(),
    );
    let d = Matrix3::from_diagonal(&s2);
    r * d * r.transpose()
}

/// The full scene: Gaussians plus a background color composited behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub background: [f64; 3],
    pub gaussians: Vec<Gaussian3D>,
}

impl SceneModel {
    pub fn new(background: [f64; 3]) -> Self {
        Self {
            background,
            gaussians: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gaussians.len() * PARAMS_PER_GAUSSIAN
    }

    /// Flatten all Gaussian parameters in the fixed global ordering.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.gaussians {
            out.extend_from_slice(&g.mean);
            out.extend_from_slice(&g.log_scale);
            out.extend_from_slice(&g.rotation);
            out.push(g.opacity_logit);
            out.extend_from_slice(&g.color);
            out.push(g.mask_logit);
        }
        out
    }

    /// Overwrite Gaussian parameters from a flat vector; exact inverse of
    /// [`SceneModel::flatten`]. Panics when the length does not match.
    pub fn unflatten(&mut self, params: &[f64]) {
        assert_eq!(
            params.len(),
            self.param_count(),
            "flat parameter vector length mismatch"
        );
        for (g, chunk) in self
            .gaussians
            .iter_mut()
            .zip(params.chunks_exact(PARAMS_PER_GAUSSIAN))
        {
            g.mean.copy_from_slice(&chunk[0..3]);
            g.log_scale.copy_from_slice(&chunk[3..6]);
            g.rotation.copy_from_slice(&chunk[6..10]);
            g.opacity_logit = chunk[10];
            g.color.copy_from_slice(&chunk[11..14]);
            g.mask_logit = chunk[14];
        }
    }

    /// Bounding-box diagonal of the Gaussian means; used to scale the
    /// position learning rate. Zero for empty scenes.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            let m = g.mean_vec();
            lo = lo.inf(&m);
            hi = hi.sup(&m);
        }
        (hi - lo).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sample_gaussian() -> Gaussian3D {
        Gaussian3D {
            mean: [0.1, -0.2, 1.5],
            log_scale: [-2.0, -2.5, -1.5],
            rotation: [0.9, 0.1, -0.2, 0.3],
            opacity_logit: 0.4,
            color: [0.2, 0.5, 0.8],
            mask_logit: -1.0,
        }
    }

    #[test]
    fn covariance_identity_for_unit_params() {
        let mut g = sample_gaussian();
        g.rotation = [1.0, 0.0, 0.0, 0.0];
        g.log_scale = [0.0, 0.0, 0.0];
        assert_relative_eq!(covariance(&g), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_axis_scaling() {
        let mut g = sample_gaussian();
        g.rotation = [1.0, 0.0, 0.0, 0.0];
        g.log_scale = [2.0f64.ln(), 0.0, 0.0];
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert_relative_eq!(covariance(&g), expected, epsilon = 1e-12);
    }

    #[test]
    fn covariance_rotated_by_quarter_turn() {
        // 90 degrees about z moves the stretched x-axis onto y:
        // R S S^T R^T = diag(1, 4, 1).
        let s = std::f64::consts::FRAC_PI_4;
        let mut g = sample_gaussian();
        g.rotation = [s.cos(), 0.0, 0.0, s.sin()];
        g.log_scale = [2.0f64.ln(), 0.0, 0.0];
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert_relative_eq!(covariance(&g), expected, epsilon = 1e-12);
    }

    #[test]
    fn scene_json_schema_round_trips() {
        let scene = SceneModel {
            background: [0.0, 0.25, 0.5],
            gaussians: vec![sample_gaussian()],
        };
        let json = serde_json::to_string(&scene).unwrap();
        assert!(json.contains("\"background\""));
        assert!(json.contains("\"gaussians\""));
        assert!(json.contains("\"opacity_logit\""));
        let back: SceneModel = serde_json::from_str(&json).unwrap();
        assert_eq!(scene, back);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trips(
            params in proptest::collection::vec(-10.0f64..10.0, PARAMS_PER_GAUSSIAN * 3)
        ) {
            let mut scene = SceneModel::new([0.0; 3]);
            scene.gaussians = vec![sample_gaussian(); 3];
            scene.unflatten(&params);
            prop_assert_eq!(scene.flatten(), params);
        }

        #[test]
        fn covariance_eigenvalues_nonnegative(
            ls in proptest::collection::vec(-4.0f64..2.0, 3),
            q in proptest::collection::vec(-1.0f64..1.0, 4)
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let mut g = sample_gaussian();
            g.log_scale = [ls[0], ls[1], ls[2]];
            g.rotation = [q[0], q[1], q[2], q[3]];
            let cov = covariance(&g);
            let eig = cov.symmetric_eigenvalues();
            for i in 0..3 {
                prop_assert!(eig[i] >= -1e-12);
            }
            // Symmetry to 1e-12.
            prop_assert!((cov - cov.transpose()).abs().max() <= 1e-12 * cov.abs().max().max(1.0));
        }
    }
}
