//! Simulated tactile sensing and its conversion into depth-only training
//! views, plus Fisher-guided next-best-touch selection restricted to object
//! Gaussians.
//!
//! The simulated sensor is an equidistant-fisheye depth camera pressed
//! toward the surface: rays are cast against ground-truth geometry, contact
//! points are filtered radially and by height, triangulated over the pixel
//! grid, and rasterized into a (pinhole) touch view that supervises depth
//! only.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, Intrinsics, ProjectionModel};
use crate::fisher::{compute_hessian_diag, score_view, HessianDiagonal};
use crate::gradients::FisherChannel;
use crate::grid::{DepthImage, Grid, MaskImage};
use crate::math::{logit, RigidTransform};
use crate::raycast::GroundTruth;
use crate::render::render;
use crate::scene::{Gaussian3D, SceneModel};
use crate::{Error, Result};

/// Geometry and filters of the simulated tactile sensor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TouchSensorSpec {
    pub width: usize,
    pub height: usize,
    /// Equidistant focal length, pixels per radian.
    pub focal: f64,
    /// Rays beyond this angle from the axis read nothing.
    pub max_theta: f64,
    /// Maximum contact distance along a ray (meters).
    pub max_range: f64,
    /// Depth noise sigma (meters).
    pub noise_sigma: f64,
    /// Radial pixel filter applied during backprojection.
    pub r_max: f64,
    /// Camera-frame z window of accepted contact points (meters).
    pub z_window: (f64, f64),
}

impl Default for TouchSensorSpec {
    fn default() -> Self {
        TouchSensorSpec {
            width: 32,
            height: 32,
            focal: 24.0,
            max_theta: 0.6,
            max_range: 0.03,
            noise_sigma: 2e-4,
            r_max: 14.0,
            z_window: (5e-4, 0.03),
        }
    }
}

impl TouchSensorSpec {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    fn fisheye_camera(&self, pose: RigidTransform) -> CameraView {
        let (cx, cy) = self.center();
        let mut cam = CameraView::new(
            usize::MAX,
            pose,
            Intrinsics {
                fx: self.focal,
                fy: self.focal,
                cx,
                cy,
                width: self.width,
                height: self.height,
            },
        );
        cam.projection = ProjectionModel::EquidistantFisheye;
        cam
    }

    /// Pinhole intrinsics of the depth-only training view derived from a
    /// touch (similar footprint, rasterizer-compatible projection).
    pub fn view_intrinsics(&self) -> Intrinsics {
        let (cx, cy) = self.center();
        Intrinsics {
            fx: 28.0 / 32.0 * self.width as f64,
            fy: 28.0 / 32.0 * self.height as f64,
            cx,
            cy,
            width: self.width,
            height: self.height,
        }
    }
}

/// One tactile reading: sensor pose and per-pixel contact distance along
/// the ray (NaN where nothing was touched).
#[derive(Clone, Debug)]
pub struct TouchSample {
    /// World-to-sensor transform; +z points into the surface.
    pub pose: RigidTransform,
    pub fisheye_depth: DepthImage,
    pub spec: TouchSensorSpec,
}

/// Cast the fisheye sensor against ground truth and add depth noise.
pub fn simulate_touch(
    gt: &GroundTruth,
    pose: RigidTransform,
    spec: &TouchSensorSpec,
    seed: u64,
) -> Result<TouchSample> {
    let cam = spec.fisheye_camera(pose);
    let cam_to_world = pose.inverse();
    let origin = cam_to_world.translation;
    let (cx, cy) = spec.center();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).expect("valid sigma");

    let mut depth = Grid::filled(spec.width, spec.height, f64::NAN);
    let mut hits = 0usize;
    for y in 0..spec.height {
        for x in 0..spec.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let theta = (dx * dx + dy * dy).sqrt() / spec.focal;
            if theta > spec.max_theta {
                continue;
            }
            let dir_world = cam_to_world.transform_vector(&cam.pixel_ray(x as f64, y as f64));
            let Some(hit) = gt.cast_ray(&origin, &dir_world) else {
                continue;
            };
            if hit.t > spec.max_range {
                continue;
            }
            let noisy = if spec.noise_sigma > 0.0 {
                hit.t + noise.sample(&mut rng)
            } else {
                hit.t
            };
            depth.set(x, y, noisy.max(0.0));
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(Error::EmptyTouch(
            "no ray contacted a surface within range".into(),
        ));
    }
    Ok(TouchSample {
        pose,
        fisheye_depth: depth,
        spec: *spec,
    })
}

/// A contact point in the sensor's camera frame, tagged with its pixel.
#[derive(Clone, Copy, Debug)]
pub struct TouchPoint {
    pub p: Vector3<f64>,
    pub u: usize,
    pub v: usize,
}

/// Unproject contact pixels (p = d * ray) and apply the radial and z
/// filters, keeping pixel coordinates for grid connectivity.
pub fn backproject_and_filter(sample: &TouchSample) -> Vec<TouchPoint> {
    let spec = &sample.spec;
    let cam = spec.fisheye_camera(sample.pose);
    let (cx, cy) = spec.center();
    let mut out = Vec::new();
    for v in 0..spec.height {
        for u in 0..spec.width {
            let d = *sample.fisheye_depth.get(u, v);
            if !d.is_finite() {
                continue;
            }
            let dx = u as f64 - cx;
            let dy = v as f64 - cy;
            if (dx * dx + dy * dy).sqrt() > spec.r_max {
                continue;
            }
            let p = cam.pixel_ray(u as f64, v as f64) * d;
            if p.z < spec.z_window.0 || p.z > spec.z_window.1 {
                continue;
            }
            out.push(TouchPoint { p, u, v });
        }
    }
    out
}

fn project_vertex(cam: &CameraView, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    match cam.projection {
        // Touch geometry sits millimeters from the lens, well inside the
        // splat-culling near plane; only guard the division itself.
        ProjectionModel::Pinhole => (p.z > 1e-6).then(|| {
            Vector2::new(
                cam.intrinsics.fx * p.x / p.z + cam.intrinsics.cx,
                cam.intrinsics.fy * p.y / p.z + cam.intrinsics.cy,
            )
        }),
        ProjectionModel::EquidistantFisheye => {
            let r_xy = (p.x * p.x + p.y * p.y).sqrt();
            let theta = r_xy.atan2(p.z);
            if theta > std::f64::consts::FRAC_PI_2 {
                return None;
            }
            let r = cam.intrinsics.fx * theta;
            if r_xy < 1e-15 {
                return Some(Vector2::new(cam.intrinsics.cx, cam.intrinsics.cy));
            }
            Some(Vector2::new(
                cam.intrinsics.cx + r * p.x / r_xy,
                cam.intrinsics.cy + r * p.y / r_xy,
            ))
        }
    }
}

/// Triangulate the surviving grid points (two triangles per quad, triangles
/// with a missing vertex dropped) and rasterize them into `target` with a
/// z-buffer and barycentric depth interpolation.
///
/// The interpolated quantity is camera-frame z for pinhole targets and
/// along-ray distance for fisheye targets.
pub fn triangulate_and_rasterize(
    points: &[TouchPoint],
    sample: &TouchSample,
    target: &CameraView,
) -> Result<(DepthImage, MaskImage)> {
    let spec = &sample.spec;
    let mut index: Vec<Option<usize>> = vec![None; spec.width * spec.height];
    for (i, pt) in points.iter().enumerate() {
        index[pt.v * spec.width + pt.u] = Some(i);
    }

    let sensor_to_world = sample.pose.inverse();
    let world_to_target = target.apply_pose_delta();
    let in_target = |i: usize| -> Vector3<f64> {
        let p_world = sensor_to_world.transform_point(&points[i].p);
        world_to_target.transform_point(&p_world)
    };

    let mut depth = Grid::filled(target.intrinsics.width, target.intrinsics.height, f64::NAN);
    let mut valid = Grid::filled(target.intrinsics.width, target.intrinsics.height, false);
    let mut triangles = 0usize;

    let mut raster_triangle = |ia: usize, ib: usize, ic: usize| {
        let (pa, pb, pc) = (in_target(ia), in_target(ib), in_target(ic));
        let (Some(a), Some(b), Some(c)) = (
            project_vertex(target, &pa),
            project_vertex(target, &pb),
            project_vertex(target, &pc),
        ) else {
            return;
        };
        let za = match target.projection {
            ProjectionModel::Pinhole => pa.z,
            ProjectionModel::EquidistantFisheye => pa.norm(),
        };
        let zb = match target.projection {
            ProjectionModel::Pinhole => pb.z,
            ProjectionModel::EquidistantFisheye => pb.norm(),
        };
        let zc = match target.projection {
            ProjectionModel::Pinhole => pc.z,
            ProjectionModel::EquidistantFisheye => pc.norm(),
        };
        let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
        if area.abs() < 1e-12 {
            return;
        }
        triangles += 1;
        let x0 = a.x.min(b.x).min(c.x).floor().max(0.0) as usize;
        let y0 = a.y.min(b.y).min(c.y).floor().max(0.0) as usize;
        let x1 = (a.x.max(b.x).max(c.x).ceil() as usize).min(depth.width.saturating_sub(1));
        let y1 = (a.y.max(b.y).max(c.y).ceil() as usize).min(depth.height.saturating_sub(1));
        for py in y0..=y1 {
            for px in x0..=x1 {
                let p = Vector2::new(px as f64, py as f64);
                let w_a = ((b.x - p.x) * (c.y - p.y) - (b.y - p.y) * (c.x - p.x)) / area;
                let w_b = ((c.x - p.x) * (a.y - p.y) - (c.y - p.y) * (a.x - p.x)) / area;
                let w_c = 1.0 - w_a - w_b;
                let eps = -1e-12;
                if w_a < eps || w_b < eps || w_c < eps {
                    continue;
                }
                let z = w_a * za + w_b * zb + w_c * zc;
                let cur = *depth.get(px, py);
                if !cur.is_finite() || z < cur {
                    depth.set(px, py, z);
                    valid.set(px, py, true);
                }
            }
        }
    };

    for v in 0..spec.height.saturating_sub(1) {
        for u in 0..spec.width.saturating_sub(1) {
            let i00 = index[v * spec.width + u];
            let i10 = index[v * spec.width + u + 1];
            let i01 = index[(v + 1) * spec.width + u];
            let i11 = index[(v + 1) * spec.width + u + 1];
            if let (Some(a), Some(b), Some(c)) = (i00, i10, i01) {
                raster_triangle(a, b, c);
            }
            if let (Some(a), Some(b), Some(c)) = (i10, i11, i01) {
                raster_triangle(a, b, c);
            }
        }
    }
    if triangles == 0 {
        return Err(Error::EmptyTouch("no grid triangle survived".into()));
    }
    Ok((depth, valid))
}

/// Retreat increment (meters) and maximum step count.
pub const RETREAT_STEP: f64 = 5e-3;
pub const RETREAT_MAX_STEPS: usize = 40;
/// Mean rendered alpha that counts as "seeing a surface".
pub const RETREAT_ALPHA: f64 = 0.1;

/// Pull a touch-view camera back along its own -z axis (5 mm steps) until
/// the splat renders with mean alpha above the threshold.
pub fn retreat_touch_view(cam: &CameraView, scene: &SceneModel) -> Result<CameraView> {
    let mut view = cam.clone();
    for step in 0..=RETREAT_MAX_STEPS {
        let out = render(scene, &view);
        let mean_alpha = out.alpha.data.iter().sum::<f64>() / out.alpha.data.len() as f64;
        if mean_alpha > RETREAT_ALPHA {
            return Ok(view);
        }
        if step == RETREAT_MAX_STEPS {
            break;
        }
        // Camera backs away: points move deeper along +z in its frame.
        view.pose = RigidTransform::new(
            view.pose.rotation,
            view.pose.translation + Vector3::new(0.0, 0.0, RETREAT_STEP),
        );
    }
    Err(Error::RetreatFailed(format!(
        "mean alpha stayed below {RETREAT_ALPHA} after {RETREAT_MAX_STEPS} steps"
    )))
}

/// Outcome of next-best-touch selection.
pub struct TouchSelection {
    /// Index into the candidate list.
    pub index: usize,
    /// The retreated camera for the chosen candidate.
    pub retreated: CameraView,
    /// (candidate index, depth information score) for every viable candidate.
    pub scores: Vec<(usize, f64)>,
}

/// Pick the touch pose whose retreated view carries the most depth
/// information about the *object* Gaussians (mask value > 0.5); candidates
/// whose retreat fails are skipped.
pub fn select_next_touch(
    candidates: &[RigidTransform],
    scene: &SceneModel,
    h_train_depth: &HessianDiagonal,
    spec: &TouchSensorSpec,
) -> Result<TouchSelection> {
    let object: Vec<bool> = scene.gaussians.iter().map(|g| g.mask_value() > 0.5).collect();
    if !object.iter().any(|&b| b) {
        return Err(Error::NoFeasibleTouch);
    }
    let intr = spec.view_intrinsics();
    let mut best: Option<(usize, f64, CameraView)> = None;
    let mut scores = Vec::new();
    for (i, pose) in candidates.iter().enumerate() {
        let cam = CameraView::new(usize::MAX - i, *pose, intr);
        let Ok(retreated) = retreat_touch_view(&cam, scene) else {
            continue;
        };
        let mut h_acq = compute_hessian_diag(scene, &retreated, FisherChannel::Depth);
        h_acq.mask_gaussians(&object);
        let score = score_view(&h_acq, h_train_depth)?;
        scores.push((i, score));
        let better = match &best {
            None => true,
            Some((_, s, _)) => score > *s,
        };
        if better {
            best = Some((i, score, retreated));
        }
    }
    let (index, _, retreated) = best.ok_or(Error::NoFeasibleTouch)?;
    Ok(TouchSelection {
        index,
        retreated,
        scores,
    })
}

/// Spacing of the grid downsample that seeds Gaussians at touch points.
const TOUCH_DOWNSAMPLE: usize = 4;

/// Convert a touch into supervision: appends Gaussians at (downsampled)
/// contact points and returns the depth-only training view with its
/// rasterized target attached.
pub fn add_touch_view(
    scene: &mut SceneModel,
    sample: &TouchSample,
    view_cam: &CameraView,
    seed: u64,
) -> Result<(CameraView, usize)> {
    let points = backproject_and_filter(sample);
    if points.is_empty() {
        return Err(Error::EmptyTouch("no contact point survived filtering".into()));
    }
    let (target, valid) = triangulate_and_rasterize(&points, sample, view_cam)?;

    let sensor_to_world = sample.pose.inverse();
    let kept: Vec<&TouchPoint> = points
        .iter()
        .filter(|pt| pt.u % TOUCH_DOWNSAMPLE == 0 && pt.v % TOUCH_DOWNSAMPLE == 0)
        .collect();
    let spacing_fallback =
        TOUCH_DOWNSAMPLE as f64 / sample.spec.focal * sample.spec.z_window.1.max(1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let mut added = 0usize;
    for pt in &kept {
        // Local spacing: nearest kept grid neighbor, else the angular pitch.
        let mut spacing = f64::INFINITY;
        for other in &kept {
            if (other.u, other.v) == (pt.u, pt.v) {
                continue;
            }
            let du = pt.u.abs_diff(other.u);
            let dv = pt.v.abs_diff(other.v);
            if du + dv <= TOUCH_DOWNSAMPLE && (du == 0 || dv == 0) {
                spacing = spacing.min((pt.p - other.p).norm());
            }
        }
        if !spacing.is_finite() {
            spacing = TOUCH_DOWNSAMPLE as f64 / sample.spec.focal * pt.p.norm().max(1e-4);
        }
        let spacing = spacing.max(spacing_fallback * 0.05).max(1e-6);
        let world = sensor_to_world.transform_point(&pt.p);
        scene.gaussians.push(Gaussian3D {
            mean: [world.x, world.y, world.z],
            log_scale: [spacing.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()],
            mask_logit: logit(0.99),
        });
        added += 1;
    }

    let mut view = view_cam.clone();
    view.depth_only = true;
    view.supervision.touch_depth = Some((target, valid));
    Ok((view, added))
}
