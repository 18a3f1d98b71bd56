//! Analytic ground-truth geometry and first-hit raycasting.
//!
//! These primitives stand in for real captured scenes: sensor depth is
//! raycast from them, object masks come from first-hit object ids, and the
//! touch simulator contacts them directly.

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraView, ProjectionModel};
use crate::grid::{ColorImage, DepthImage, Grid, MaskImage};

const T_MIN: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned solid box.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// Torus around the z axis through `center`.
    Torus {
        center: [f64; 3],
        major_radius: f64,
        minor_radius: f64,
    },
    /// Sphere with a recessed crater: within the cone around `dent_dir` the
    /// surface drops to `inner_radius`. The annular gap between the rims is
    /// open, so the crater reads as a hole with a visible floor.
    DentedSphere {
        center: [f64; 3],
        radius: f64,
        inner_radius: f64,
        dent_dir: [f64; 3],
        dent_half_angle: f64,
    },
    /// Union of spheres treated as one solid (composite object proxies).
    SphereUnion {
        /// (center, radius) pairs.
        spheres: Vec<([f64; 3], f64)>,
    },
    /// Axis-aligned box seen from the inside (room walls / floor / ceiling).
    RoomBox {
        center: [f64; 3],
        half_extents: [f64; 3],
    },
    /// One-sided infinite plane through `point` with outward `normal`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Primitive,
    pub color: [f64; 3],
    #[serde(default)]
    pub is_object_of_interest: bool,
}

/// The analytic world: a list of shaded objects, exactly one of which may be
/// flagged as the object of interest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub objects: Vec<SceneObject>,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Distance along the (unit) ray direction.
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub object: usize,
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Real roots of t^4 + b t^3 + c t^2 + d t + e via companion-matrix
/// eigenvalues, Newton-polished.
fn quartic_real_roots(b: f64, c: f64, d: f64, e: f64) -> Vec<f64> {
    let companion = Matrix4::new(
        0.0, 0.0, 0.0, -e, //
        1.0, 0.0, 0.0, -d, //
        0.0, 1.0, 0.0, -c, //
        0.0, 0.0, 1.0, -b,
    );
    let eig = companion.complex_eigenvalues();
    let mut roots = Vec::new();
    for i in 0..4 {
        let z = eig[i];
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        // Newton polish on the quartic.
        let mut t = z.re;
        for _ in 0..3 {
            let f = (((t + b) * t + c) * t + d) * t + e;
            let fp = ((4.0 * t + 3.0 * b) * t + 2.0 * c) * t + d;
            if fp.abs() < 1e-300 {
                break;
            }
            t -= f / fp;
        }
        roots.push(t);
    }
    roots
}

impl Primitive {
    /// Nearest intersection with the ray `origin + t * dir` for t > T_MIN.
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius } => {
                sphere_hit(origin, dir, &v3(center), *radius).map(|t| {
                    let p = origin + dir * t;
                    (t, (p - v3(center)).normalize())
                })
            }
            Primitive::Box {
                center,
                half_extents,
            } => {
                let (t_entry, t_exit, n_entry, n_exit) =
                    box_slabs(origin, dir, &v3(center), &v3(half_extents))?;
                if t_entry > T_MIN {
                    Some((t_entry, n_entry))
                } else if t_exit > T_MIN {
                    // Origin inside the box: report the exit face.
                    Some((t_exit, n_exit))
                } else {
                    None
                }
            }
            Primitive::SphereUnion { spheres } => {
                // First entry into the union: nearest hit whose entry point
                // is not inside a sibling sphere.
                let mut best: Option<(f64, Vector3<f64>)> = None;
                for (c, r) in spheres {
                    let c = v3(c);
                    let Some(t) = sphere_hit(origin, dir, &c, *r) else {
                        continue;
                    };
                    let p = origin + dir * t;
                    let covered = spheres.iter().any(|(c2, r2)| {
                        let d = p - v3(c2);
                        d.norm_squared() < r2 * r2 - 1e-12
                    });
                    if covered {
                        continue;
                    }
                    if best.map_or(true, |(bt, _)| t < bt) {
                        best = Some((t, (p - c).normalize()));
                    }
                }
                best
            }
            Primitive::RoomBox {
                center,
                half_extents,
            } => {
                let (_, t_exit, _, n_exit) =
                    box_slabs(origin, dir, &v3(center), &v3(half_extents))?;
                if t_exit > T_MIN {
                    // Inward-facing surface.
                    Some((t_exit, -n_exit))
                } else {
                    None
                }
            }
            Primitive::Torus {
                center,
                major_radius,
                minor_radius,
            } => torus_hit(origin, dir, &v3(center), *major_radius, *minor_radius),
            Primitive::DentedSphere {
                center,
                radius,
                inner_radius,
                dent_dir,
                dent_half_angle,
            } => {
                let c = v3(center);
                let axis = v3(dent_dir).normalize();
                let cos_cone = dent_half_angle.cos();
                let in_cone = |p: &Vector3<f64>| (p - c).normalize().dot(&axis) > cos_cone;
                let mut best: Option<(f64, Vector3<f64>)> = None;
                for (r, want_inside) in [(*radius, false), (*inner_radius, true)] {
                    for t in sphere_hits(origin, dir, &c, r) {
                        if t <= T_MIN {
                            continue;
                        }
                        let p = origin + dir * t;
                        if in_cone(&p) != want_inside {
                            continue;
                        }
                        if best.map_or(true, |(bt, _)| t < bt) {
                            best = Some((t, (p - c).normalize()));
                        }
                    }
                }
                best
            }
            Primitive::Plane { point, normal } => {
                let n = v3(normal).normalize();
                let denom = dir.dot(&n);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (v3(point) - origin).dot(&n) / denom;
                if t > T_MIN {
                    Some((t, n))
                } else {
                    None
                }
            }
        }
    }
}

fn sphere_hits(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Vec<f64> {
    let oc = origin - center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return Vec::new();
    }
    let s = disc.sqrt();
    vec![-b - s, -b + s]
}

fn sphere_hit(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<f64> {
    sphere_hits(origin, dir, center, radius)
        .into_iter()
        .find(|&t| t > T_MIN)
}

/// Slab intersection; returns (t_entry, t_exit, entry normal, exit normal).
#[allow(clippy::type_complexity)]
fn box_slabs(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    half: &Vector3<f64>,
) -> Option<(f64, f64, Vector3<f64>, Vector3<f64>)> {
    let mut t_entry = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut n_entry = Vector3::zeros();
    let mut n_exit = Vector3::zeros();
    for axis in 0..3 {
        let o = origin[axis] - center[axis];
        let d = dir[axis];
        let h = half[axis];
        if d.abs() < 1e-15 {
            if o.abs() > h {
                return None;
            }
            continue;
        }
        let mut t0 = (-h - o) / d;
        let mut t1 = (h - o) / d;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        // Entering against the ray direction, exiting along it.
        if t0 > t_entry {
            t_entry = t0;
            n_entry = Vector3::ith(axis, -d.signum());
        }
        if t1 < t_exit {
            t_exit = t1;
            n_exit = Vector3::ith(axis, d.signum());
        }
    }
    if t_entry > t_exit {
        None
    } else {
        Some((t_entry, t_exit, n_entry, n_exit))
    }
}

fn torus_hit(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    center: &Vector3<f64>,
    major: f64,
    minor: f64,
) -> Option<(f64, Vector3<f64>)> {
    let o = origin - center;
    // (|p|^2 + R^2 - r^2)^2 = 4 R^2 (p_x^2 + p_y^2) with p = o + t d, |d| = 1.
    let beta = 2.0 * o.dot(dir);
    let gamma = o.norm_squared() + major * major - minor * minor;
    let r2 = major * major;
    let b = 2.0 * beta;
    let c = beta * beta + 2.0 * gamma - 4.0 * r2 * (dir.x * dir.x + dir.y * dir.y);
    let d = 2.0 * beta * gamma - 8.0 * r2 * (o.x * dir.x + o.y * dir.y);
    let e = gamma * gamma - 4.0 * r2 * (o.x * o.x + o.y * o.y);
    let t = quartic_real_roots(b, c, d, e)
        .into_iter()
        .filter(|&t| t > T_MIN)
        .fold(f64::INFINITY, f64::min);
    if !t.is_finite() {
        return None;
    }
    let p = o + dir * t;
    // Gradient of the implicit function gives the normal.
    let k = p.norm_squared() + r2 - minor * minor;
    let normal = Vector3::new(
        4.0 * p.x * k - 8.0 * r2 * p.x,
        4.0 * p.y * k - 8.0 * r2 * p.y,
        4.0 * p.z * k,
    );
    if normal.norm() < 1e-300 {
        return None;
    }
    Some((t, normal.normalize()))
}

impl GroundTruth {
    /// Index of the object flagged as the object of interest, if any.
    pub fn object_of_interest(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.is_object_of_interest)
    }

    /// First hit along a world-space ray, or None.
    pub fn cast_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, normal)) = obj.shape.intersect(origin, dir) {
                if best.as_ref().map_or(true, |h| t < h.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal,
                        object: i,
                    });
                }
            }
        }
        best
    }
}

/// What a raycast render pass records per pixel.
pub struct RaycastRender {
    /// Pinhole: camera-frame z; fisheye: distance along the ray. NaN = miss.
    pub depth: DepthImage,
    /// First-hit object index, or None on miss.
    pub object_ids: Grid<Option<usize>>,
    /// Lambertian-shaded albedo (lit by a fixed directional light).
    pub color: ColorImage,
}

/// Light direction used for the synthetic shaded renders (world frame).
pub const LIGHT_DIR: [f64; 3] = [-0.35, 0.25, -0.9];

/// Raycast every pixel of `cam` against the ground truth.
pub fn raycast_camera(gt: &GroundTruth, cam: &CameraView) -> RaycastRender {
    let width = cam.intrinsics.width;
    let height = cam.intrinsics.height;
    let cam_to_world = cam.pose.inverse();
    let origin = cam_to_world.translation;
    let light = -v3(&LIGHT_DIR).normalize();

    let mut depth = Grid::filled(width, height, f64::NAN);
    let mut object_ids = Grid::filled(width, height, None);
    let mut color = Grid::filled(width, height, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let dir_cam = cam.pixel_ray(x as f64, y as f64);
            let dir_world = cam_to_world.transform_vector(&dir_cam);
            let Some(hit) = gt.cast_ray(&origin, &dir_world) else {
                continue;
            };
            let d = match cam.projection {
                ProjectionModel::Pinhole => hit.t * dir_cam.z,
                ProjectionModel::EquidistantFisheye => hit.t,
            };
            depth.set(x, y, d);
            object_ids.set(x, y, Some(hit.object));
            // Two-sided Lambertian shading with a small ambient floor.
            let albedo = gt.objects[hit.object].color;
            let shade = 0.3 + 0.7 * hit.normal.dot(&light).abs();
            color.set(
                x,
                y,
                [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade],
            );
        }
    }
    RaycastRender {
        depth,
        object_ids,
        color,
    }
}

/// Per-pixel first-hit depth (NaN on miss) — the ground-truth depth sensor
/// before noise.
pub fn render_depth_raycast(gt: &GroundTruth, cam: &CameraView) -> DepthImage {
    raycast_camera(gt, cam).depth
}

/// Binary mask of pixels whose first hit belongs to the object of interest.
pub fn raycast_object_mask(gt: &GroundTruth, cam: &CameraView) -> MaskImage {
    let interest = gt.object_of_interest();
    let ids = raycast_camera(gt, cam).object_ids;
    Grid {
        width: ids.width,
        height: ids.height,
        data: ids
            .data
            .iter()
            .map(|id| id.is_some() && *id == interest)
            .collect(),
    }
}
