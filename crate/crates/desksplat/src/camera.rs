//! Camera views: poses, intrinsics, projection models, and the EWA-style
//! projection of 3D Gaussians to screen space.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid::{ColorImage, DepthImage, MaskImage};
use crate::math::{se3_exp, RigidTransform};
use crate::scene::{covariance, Gaussian3D};

/// Near plane (meters); Gaussians closer than this are culled.
pub const Z_NEAR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> crate::Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(crate::Error::InvalidInput(
                "focal lengths must be positive".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(crate::Error::InvalidInput(
                "image dimensions must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionModel {
    Pinhole,
    /// Equidistant fisheye: radial pixel distance r = f * theta.
    EquidistantFisheye,
}

/// Supervision payload attached to a training view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Supervision {
    pub color: Option<ColorImage>,
    /// Metric sensor depth, NaN = invalid.
    pub sensor_depth: Option<DepthImage>,
    /// Monocular depth after per-mask affine alignment (metric).
    pub aligned_depth: Option<DepthImage>,
    /// Raw relative monocular depth (arbitrary affine scale).
    pub mono_depth: Option<DepthImage>,
    pub object_mask: Option<MaskImage>,
    /// Dense touch depth target plus its validity map (touch views only).
    pub touch_depth: Option<(DepthImage, MaskImage)>,
}

/// A camera with optional supervision. `pose` maps world to camera; the
/// learned `pose_delta` correction is applied as `exp(pose_delta) ∘ pose`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub id: usize,
    pub pose: RigidTransform,
    pub intrinsics: Intrinsics,
    pub projection: ProjectionModel,
    pub supervision: Supervision,
    /// Touch views supervise depth only and are excluded from photometric loss.
    pub depth_only: bool,
    /// se(3) correction [rho, phi] optimized per view.
    pub pose_delta: [f64; 6],
}

impl CameraView {
    pub fn new(id: usize, pose: RigidTransform, intrinsics: Intrinsics) -> Self {
        Self {
            id,
            pose,
            intrinsics,
            projection: ProjectionModel::Pinhole,
            supervision: Supervision::default(),
            depth_only: false,
            pose_delta: [0.0; 6],
        }
    }

    /// Effective world-to-camera transform: exp(pose_delta) ∘ pose.
    pub fn apply_pose_delta(&self) -> RigidTransform {
        se3_exp(&self.pose_delta).compose(&self.pose)
    }

    /// Unit ray direction in the camera frame through pixel center (x, y).
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        match self.projection {
            ProjectionModel::Pinhole => {
                let dx = (x - self.intrinsics.cx) / self.intrinsics.fx;
                let dy = (y - self.intrinsics.cy) / self.intrinsics.fy;
                Vector3::new(dx, dy, 1.0).normalize()
            }
            ProjectionModel::EquidistantFisheye => {
                let dx = x - self.intrinsics.cx;
                let dy = y - self.intrinsics.cy;
                let r = (dx * dx + dy * dy).sqrt();
                let theta = r / self.intrinsics.fx;
                if r < 1e-12 {
                    return Vector3::z();
                }
                let (sin_t, cos_t) = theta.sin_cos();
                Vector3::new(sin_t * dx / r, sin_t * dy / r, cos_t)
            }
        }
    }

    /// Pinhole backprojection of pixel (x, y) at camera-frame depth z.
    pub fn backproject_pinhole(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(
            (x - self.intrinsics.cx) / self.intrinsics.fx * z,
            (y - self.intrinsics.cy) / self.intrinsics.fy * z,
            z,
        )
    }

    /// Pinhole projection of a camera-frame point to pixel coordinates.
    pub fn project_pinhole(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z < Z_NEAR {
            return None;
        }
        Some(Vector2::new(
            self.intrinsics.fx * p.x / p.z + self.intrinsics.cx,
            self.intrinsics.fy * p.y / p.z + self.intrinsics.cy,
        ))
    }
}

/// Screen-space footprint of one Gaussian in one view.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Raw projected covariance J W Σ Wᵀ Jᵀ (no dilation).
    pub cov2d: Matrix2<f64>,
    /// Camera-frame z of the mean.
    pub depth: f64,
}

/// Perspective-project one Gaussian; `None` when culled (behind znear).
///
/// Standard EWA splatting: the projection is linearized at the mean, so
/// cov2d = J W Σ Wᵀ Jᵀ with J the projection Jacobian and W the rotation of
/// the (delta-corrected) world-to-camera transform.
pub fn project_gaussian(g: &Gaussian3D, cam: &CameraView) -> Option<ProjectedGaussian> {
    let world_to_cam = cam.apply_pose_delta();
    project_gaussian_with_transform(g, cam, &world_to_cam)
}

/// Like [`project_gaussian`] but with the world-to-camera transform already
/// computed (renders share it across Gaussians).
pub fn project_gaussian_with_transform(
    g: &Gaussian3D,
    cam: &CameraView,
    world_to_cam: &RigidTransform,
) -> Option<ProjectedGaussian> {
    let p = world_to_cam.transform_point(&g.mean_vec());
    if p.z < Z_NEAR {
        return None;
    }
    let fx = cam.intrinsics.fx;
    let fy = cam.intrinsics.fy;
    let mean2d = Vector2::new(fx * p.x / p.z + cam.intrinsics.cx, fy * p.y / p.z + cam.intrinsics.cy);
    let j = projection_jacobian(fx, fy, &p);
    let sigma_cam = world_to_cam.rotation * covariance(g) * world_to_cam.rotation.transpose();
    let cov2d = j * sigma_cam * j.transpose();
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        depth: p.z,
    })
}

/// Jacobian of the pinhole projection at camera-frame point `p`.
pub fn projection_jacobian(fx: f64, fy: f64, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let z_inv = 1.0 / p.z;
    let z_inv2 = z_inv * z_inv;
    Matrix2x3::new(
        fx * z_inv,
        0.0,
        -fx * p.x * z_inv2,
        0.0,
        fy * z_inv,
        -fy * p.y * z_inv2,
    )
}

/// Serializable pose for candidate/camera files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for PoseRecord {
    fn from(t: &RigidTransform) -> Self {
        let r = &t.rotation;
        PoseRecord {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl From<&PoseRecord> for RigidTransform {
    fn from(p: &PoseRecord) -> Self {
        let r = p.rotation;
        RigidTransform::new(
            Matrix3::new(
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ),
            Vector3::new(p.translation[0], p.translation[1], p.translation[2]),
        )
    }
}
