//! Forward rasterization of color, depth, accumulated alpha, and object-mask
//! channels by ordered alpha compositing.
//!
//! Per pixel, Gaussians are blended front to back by camera-frame mean depth:
//! out = Σ v_i α_i T_i with T_i = Π_{j<i} (1 - α_j) and the background color
//! composited behind the remaining transmittance. Depth is composited
//! un-normalized (no division by accumulated alpha).

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::{project_gaussian_with_transform, CameraView};
use crate::grid::{ColorImage, Grid, ScalarImage};
use crate::scene::SceneModel;

/// Isotropic screen-space dilation added to every projected covariance.
pub const COV2D_DILATION: f64 = 0.3;
/// Compositing for a pixel stops once transmittance falls below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Default squared Mahalanobis footprint radius (8 sigma): exp(-32) ~ 1e-14
/// keeps truncation far below every verification tolerance. Training loops
/// may shrink the footprint (still well beyond the 3-sigma splatting
/// convention) to cut pixel work.
pub const MAX_MAHALANOBIS_SQ: f64 = 64.0;

/// One Gaussian's screen-space footprint, ready for per-pixel evaluation.
#[derive(Clone, Debug)]
pub struct PreparedGaussian {
    /// Index into the scene's Gaussian list.
    pub index: usize,
    /// Camera-frame position of the mean (kept for the backward chain).
    pub p_cam: nalgebra::Vector3<f64>,
    pub mean2d: Vector2<f64>,
    /// Inverse of the dilated 2D covariance.
    pub conic: Matrix2<f64>,
    /// Dilated 2D covariance (kept for the backward pass).
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    /// sigmoid(opacity_logit).
    pub opacity: f64,
    pub color: [f64; 3],
    /// sigmoid(mask_logit).
    pub mask: f64,
    /// Inclusive pixel bounds of the footprint.
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl PreparedGaussian {
    /// Gaussian falloff exp(-0.5 d²) at a pixel, None outside the footprint.
    #[inline]
    pub fn falloff(&self, px: f64, py: f64, max_d2: f64) -> Option<f64> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let d2 = self.conic[(0, 0)] * dx * dx
            + 2.0 * self.conic[(0, 1)] * dx * dy
            + self.conic[(1, 1)] * dy * dy;
        if d2 > max_d2 || d2 < 0.0 {
            return None;
        }
        Some((-0.5 * d2).exp())
    }
}

/// Projected scene with a fixed front-to-back draw order, shared by the
/// forward render, the backward pass, and Fisher scoring.
pub struct PreparedScene {
    pub items: Vec<PreparedGaussian>,
    /// Indices into `items`, sorted by (depth, gaussian index).
    pub order: Vec<usize>,
    /// Per pixel row, the items (as indices into `items`) whose footprint
    /// touches the row, in draw order.
    pub rows: Vec<Vec<u32>>,
    pub background: [f64; 3],
    pub width: usize,
    pub height: usize,
    /// Squared Mahalanobis truncation radius of every footprint.
    pub max_d2: f64,
}

pub fn prepare(scene: &SceneModel, cam: &CameraView) -> PreparedScene {
    prepare_with_footprint(scene, cam, MAX_MAHALANOBIS_SQ)
}

pub fn prepare_with_footprint(scene: &SceneModel, cam: &CameraView, max_d2: f64) -> PreparedScene {
    let width = cam.intrinsics.width;
    let height = cam.intrinsics.height;
    let world_to_cam = cam.apply_pose_delta();

    let mut items = Vec::with_capacity(scene.gaussians.len());
    for (index, g) in scene.gaussians.iter().enumerate() {
        let Some(proj) = project_gaussian_with_transform(g, cam, &world_to_cam) else {
            continue; // behind the camera
        };
        let cov2d = proj.cov2d + Matrix2::identity() * COV2D_DILATION;
        let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
        if !(det > 1e-12) || !cov2d.iter().all(|v| v.is_finite()) {
            continue; // degenerate footprint, skip for this view
        }
        let conic = Matrix2::new(
            cov2d[(1, 1)] / det,
            -cov2d[(0, 1)] / det,
            -cov2d[(1, 0)] / det,
            cov2d[(0, 0)] / det,
        );
        // Conservative bbox of the d² <= max_d2 ellipse.
        let rx = (max_d2 * cov2d[(0, 0)]).sqrt() + 1.0;
        let ry = (max_d2 * cov2d[(1, 1)]).sqrt() + 1.0;
        if !proj.mean2d.x.is_finite() || !proj.mean2d.y.is_finite() {
            continue;
        }
        let x0 = (proj.mean2d.x - rx).floor().max(0.0) as usize;
        let y0 = (proj.mean2d.y - ry).floor().max(0.0) as usize;
        if proj.mean2d.x + rx < 0.0
            || proj.mean2d.y + ry < 0.0
            || x0 >= width
            || y0 >= height
        {
            continue; // entirely off-screen
        }
        let x1 = ((proj.mean2d.x + rx).ceil() as usize).min(width - 1);
        let y1 = ((proj.mean2d.y + ry).ceil() as usize).min(height - 1);
        items.push(PreparedGaussian {
            index,
            p_cam: world_to_cam.transform_point(&g.mean_vec()),
            mean2d: proj.mean2d,
            conic,
            cov2d,
            depth: proj.depth,
            opacity: g.opacity(),
            color: g.color,
            mask: g.mask_value(),
            x0,
            x1,
            y0,
            y1,
        });
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[a]
            .depth
            .total_cmp(&items[b].depth)
            .then(items[a].index.cmp(&items[b].index))
    });

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for &i in &order {
        let it = &items[i];
        for row in rows.iter_mut().take(it.y1 + 1).skip(it.y0) {
            row.push(i as u32);
        }
    }

    PreparedScene {
        items,
        order,
        rows,
        background: scene.background,
        width,
        height,
        max_d2,
    }
}

/// Per-pixel render output: color, un-normalized composited depth,
/// accumulated alpha, and the object-mask channel.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
    pub mask: ScalarImage,
}

impl PreparedScene {
    /// Composite one pixel; returns (rgb, depth, alpha, mask).
    pub fn composite_pixel(&self, x: usize, y: usize) -> ([f64; 3], f64, f64, f64) {
        let px = x as f64;
        let py = y as f64;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut alpha = 0.0;
        let mut mask = 0.0;
        let mut transmittance = 1.0;
        for &i in &self.rows[y] {
            if transmittance < TRANSMITTANCE_CUTOFF {
                break;
            }
            let it = &self.items[i as usize];
            if x < it.x0 || x > it.x1 {
                continue;
            }
            let Some(falloff) = it.falloff(px, py, self.max_d2) else {
                continue;
            };
            let a = it.opacity * falloff;
            let w = a * transmittance;
            color[0] += w * it.color[0];
            color[1] += w * it.color[1];
            color[2] += w * it.color[2];
            depth += w * it.depth;
            mask += w * it.mask;
            alpha += w;
            transmittance *= 1.0 - a;
        }
        for c in 0..3 {
            color[c] += transmittance * self.background[c];
        }
        (color, depth, alpha, mask)
    }
}

/// Render all channels. Pure; pixels are computed independently (and in
/// parallel), so the output is deterministic across schedules.
pub fn render(scene: &SceneModel, cam: &CameraView) -> RenderOutput {
    render_prepared(&prepare(scene, cam))
}

pub fn render_prepared(prep: &PreparedScene) -> RenderOutput {
    let width = prep.width;
    let height = prep.height;
    let rows: Vec<Vec<([f64; 3], f64, f64, f64)>> = (0..height)
        .into_par_iter()
        .map(|y| (0..width).map(|x| prep.composite_pixel(x, y)).collect())
        .collect();

    let mut color = Vec::with_capacity(width * height);
    let mut depth = Vec::with_capacity(width * height);
    let mut alpha = Vec::with_capacity(width * height);
    let mut mask = Vec::with_capacity(width * height);
    for row in rows {
        for (c, d, a, m) in row {
            color.push(c);
            depth.push(d);
            alpha.push(a);
            mask.push(m);
        }
    }
    RenderOutput {
        color: Grid {
            width,
            height,
            data: color,
        },
        depth: Grid {
            width,
            height,
            data: depth,
        },
        alpha: Grid {
            width,
            height,
            data: alpha,
        },
        mask: Grid {
            width,
            height,
            data: mask,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::math::{logit, RigidTransform};
    use crate::scene::Gaussian3D;
    use approx::assert_relative_eq;

    fn test_camera(width: usize, height: usize) -> CameraView {
        CameraView::new(
            0,
            RigidTransform::identity(),
            Intrinsics {
                fx: 50.0,
                fy: 50.0,
                cx: (width as f64 - 1.0) / 2.0,
                cy: (height as f64 - 1.0) / 2.0,
                width,
                height,
            },
        )
    }

    fn opaque_gaussian(mean: [f64; 3], color: [f64; 3], opacity: f64) -> Gaussian3D {
        Gaussian3D {
            mean,
            log_scale: [-1.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity),
            color,
            mask_logit: 0.0,
        }
    }

    #[test]
    fn empty_scene_renders_background() {
        let scene = SceneModel::new([0.1, 0.2, 0.3]);
        let out = render(&scene, &test_camera(9, 9));
        for (x, y) in out.color.coords() {
            assert_eq!(*out.color.get(x, y), [0.1, 0.2, 0.3]);
            assert_eq!(*out.depth.get(x, y), 0.0);
            assert_eq!(*out.alpha.get(x, y), 0.0);
        }
    }

    #[test]
    fn two_gaussians_on_ray_composite_per_blend_equation() {
        // Pixel opacities 0.5 / 0.5: color = 0.5 c1 + 0.25 c2 + 0.25 bg,
        // depth = 0.5 d1 + 0.25 d2. Huge scales make the falloff 1 at the
        // center pixel to 1e-12.
        let cam = test_camera(9, 9);
        let mut scene = SceneModel::new([1.0, 1.0, 1.0]);
        let mut g1 = opaque_gaussian([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 0.5);
        g1.log_scale = [3.0; 3];
        let mut g2 = opaque_gaussian([0.0, 0.0, 2.0], [0.0, 1.0, 0.0], 0.5);
        g2.log_scale = [3.0; 3];
        scene.gaussians = vec![g2, g1]; // insertion order must not matter
        let out = render(&scene, &cam);
        let center = out.color.get(4, 4);
        assert_relative_eq!(center[0], 0.5 + 0.25, epsilon = 1e-9); // red from g1 + white bg
        assert_relative_eq!(center[1], 0.25 + 0.25, epsilon = 1e-9); // green from g2 + bg
        assert_relative_eq!(center[2], 0.25, epsilon = 1e-9); // bg only
        assert_relative_eq!(*out.depth.get(4, 4), 0.5 * 1.0 + 0.25 * 2.0, epsilon = 1e-9);
        assert_relative_eq!(*out.alpha.get(4, 4), 0.75, epsilon = 1e-9);
    }

    #[test]
    fn near_opaque_gaussian_dominates_pixel() {
        let cam = test_camera(9, 9);
        let mut scene = SceneModel::new([0.0, 0.0, 0.0]);
        let mut g = opaque_gaussian([0.0, 0.0, 1.5], [0.3, 0.6, 0.9], 0.9999999);
        g.log_scale = [3.0; 3];
        scene.gaussians = vec![g];
        let out = render(&scene, &cam);
        let c = out.color.get(4, 4);
        assert_relative_eq!(c[0], 0.3, epsilon = 1e-6);
        assert_relative_eq!(*out.depth.get(4, 4), 1.5, epsilon = 1e-5);
        assert_relative_eq!(*out.alpha.get(4, 4), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn alpha_in_unit_interval_and_depth_nonnegative() {
        let cam = test_camera(16, 16);
        let mut scene = SceneModel::new([0.5, 0.5, 0.5]);
        for k in 0..20 {
            let t = k as f64 / 20.0;
            scene.gaussians.push(opaque_gaussian(
                [t - 0.5, 0.3 * (t * 12.0).sin(), 1.0 + t],
                [t, 1.0 - t, 0.5],
                0.7,
            ));
        }
        let out = render(&scene, &cam);
        for v in &out.alpha.data {
            assert!(*v >= 0.0 && *v <= 1.0 + 1e-12);
        }
        for v in &out.depth.data {
            assert!(*v >= 0.0);
        }
    }
}
