//! Mask-aware affine alignment of relative monocular depth to metric sensor
//! depth, and lifting of aligned depth into initial Gaussians.
//!
//! Each segmentation mask gets its own least-squares (scale, offset) fit of
//! mono depth against the sensor; pixels outside every mask fall back to a
//! global fit. Aligning per segment keeps metrically different objects from
//! fighting over a single global scale.

use std::path::PathBuf;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::CameraView;
use crate::grid::{DepthImage, Grid, MaskImage};
use crate::math::logit;
use crate::raycast::{raycast_object_mask, GroundTruth};
use crate::scene::Gaussian3D;
use crate::{Error, Result};

/// Sensor + monocular depth with segmentation masks for one frame.
#[derive(Clone, Debug)]
pub struct MaskedDepthFrame {
    /// Metric sensor depth, NaN = invalid.
    pub sensor_depth: DepthImage,
    /// Relative monocular depth, finite everywhere.
    pub mono_depth: DepthImage,
    /// Segment masks; overlap allowed, smallest area wins.
    pub masks: Vec<MaskImage>,
    /// Index into `masks` of the user-designated object mask, if any.
    pub object_mask_index: Option<usize>,
}

/// Fitted per-mask affines plus the global fallback; applied as s*mono + t.
#[derive(Clone, Debug)]
pub struct AffineAlignment {
    /// One entry per mask; None when the mask was degenerate.
    pub per_mask: Vec<Option<(f64, f64)>>,
    pub global: (f64, f64),
}

/// Closed-form least squares of sensor = s*mono + t over masked pixels with
/// finite sensor depth: s = cov(mono, sensor)/var(mono), t = mean residual.
pub fn align_mask(
    sensor: &DepthImage,
    mono: &DepthImage,
    mask: &MaskImage,
) -> Result<(f64, f64)> {
    if !sensor.same_shape(mono) || !sensor.same_shape(mask) {
        return Err(Error::DimensionMismatch(
            "sensor/mono/mask shapes differ".into(),
        ));
    }
    let mut n = 0.0f64;
    let mut sum_m = 0.0;
    let mut sum_s = 0.0;
    let mut sum_mm = 0.0;
    let mut sum_ms = 0.0;
    for i in 0..sensor.data.len() {
        if !mask.data[i] {
            continue;
        }
        let s = sensor.data[i];
        let m = mono.data[i];
        if !s.is_finite() || !m.is_finite() {
            continue;
        }
        n += 1.0;
        sum_m += m;
        sum_s += s;
        sum_mm += m * m;
        sum_ms += m * s;
    }
    if n < 2.0 {
        return Err(Error::DegenerateMask(format!(
            "{} valid pixels (need at least 2)",
            n as usize
        )));
    }
    let mean_m = sum_m / n;
    let mean_s = sum_s / n;
    let var_m = sum_mm / n - mean_m * mean_m;
    if var_m < 1e-12 {
        return Err(Error::DegenerateMask("mono depth has no variance".into()));
    }
    let cov = sum_ms / n - mean_m * mean_s;
    let s = cov / var_m;
    let t = mean_s - s * mean_m;
    Ok((s, t))
}

/// Fit all masks plus the global fallback.
pub fn fit_frame(frame: &MaskedDepthFrame) -> Result<AffineAlignment> {
    let all = Grid::filled(frame.sensor_depth.width, frame.sensor_depth.height, true);
    let global = align_mask(&frame.sensor_depth, &frame.mono_depth, &all).map_err(|e| match e {
        Error::DegenerateMask(_) => {
            Error::InvalidInput("no usable sensor depth for global alignment".into())
        }
        other => other,
    })?;
    let per_mask = frame
        .masks
        .iter()
        .map(
            |m| match align_mask(&frame.sensor_depth, &frame.mono_depth, m) {
                Ok(st) => Some(st),
                Err(Error::DegenerateMask(_)) => None,
                Err(_) => None,
            },
        )
        .collect();
    Ok(AffineAlignment { per_mask, global })
}

/// Align a whole frame: per-mask affines where masks apply (smallest-area
/// mask wins on overlap, degenerate masks fall back to the global fit),
/// global fit elsewhere. Output is metric depth, NaN where mono is not
/// finite.
pub fn align_frame(frame: &MaskedDepthFrame) -> Result<DepthImage> {
    let fits = fit_frame(frame)?;
    let areas: Vec<usize> = frame.masks.iter().map(|m| m.count_true()).collect();

    let w = frame.mono_depth.width;
    let h = frame.mono_depth.height;
    let mut out = Grid::filled(w, h, f64::NAN);
    for i in 0..frame.mono_depth.data.len() {
        let m = frame.mono_depth.data[i];
        if !m.is_finite() {
            continue;
        }
        // Smallest-area mask containing this pixel decides the affine.
        let mut chosen: Option<usize> = None;
        for (k, mask) in frame.masks.iter().enumerate() {
            if mask.data[i] && chosen.map_or(true, |c| areas[k] < areas[c]) {
                chosen = Some(k);
            }
        }
        let (s, t) = chosen
            .and_then(|k| fits.per_mask[k])
            .unwrap_or(fits.global);
        out.data[i] = s * m + t;
    }
    Ok(out)
}

/// Backproject a seeded random fraction of finite aligned-depth pixels into
/// world-space Gaussians.
///
/// Each lifted pixel becomes an isotropic Gaussian sized to its pixel
/// footprint at depth (1.5 px), with half opacity, a random color, and a
/// mask logit taken from the object mask (0.99 inside / 0.01 outside).
pub fn lift_depth(
    aligned: &DepthImage,
    cam: &CameraView,
    fraction: f64,
    seed: u64,
    object_mask: Option<&MaskImage>,
) -> Result<Vec<Gaussian3D>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "lift fraction {fraction} outside (0, 1]"
        )));
    }
    let valid: Vec<usize> = (0..aligned.data.len())
        .filter(|&i| aligned.data[i].is_finite() && aligned.data[i] > 0.0)
        .collect();
    let n_take = ((valid.len() as f64) * fraction).round() as usize;
    let n_take = n_take.min(valid.len());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample_indices(&mut rng, valid.len(), n_take)
        .into_iter()
        .map(|k| valid[k])
        .collect();
    picked.sort_unstable();

    let cam_to_world = cam.pose.inverse();
    let fx = cam.intrinsics.fx;
    let mut out = Vec::with_capacity(picked.len());
    for i in picked {
        let x = (i % aligned.width) as f64;
        let y = (i / aligned.width) as f64;
        let d = aligned.data[i];
        let p_cam = cam.backproject_pinhole(x, y, d);
        let p_world = cam_to_world.transform_point(&p_cam);
        let sigma = (1.5 * d / fx).max(1e-9);
        let in_object = object_mask.is_some_and(|m| m.data[i]);
        out.push(Gaussian3D {
            mean: [p_world.x, p_world.y, p_world.z],
            log_scale: [sigma.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            color: [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()],
            mask_logit: if in_object { logit(0.99) } else { logit(0.01) },
        });
    }
    Ok(out)
}

/// Where per-frame object masks come from.
pub enum MaskSource<'a> {
    /// Ground-truth geometry is available: the mask is the set of pixels
    /// whose first hit belongs to the designated object.
    Simulated(&'a GroundTruth),
    /// Masks supplied as PGM files (nonzero = inside), one per view.
    External(Vec<PathBuf>),
}

/// Object masks for a sequence of views. No learned segmentation runs here:
/// simulation raycasts ground truth, external mode reads mask files.
pub fn propagate_object_mask(
    views: &[CameraView],
    source: &MaskSource,
) -> Result<Vec<MaskImage>> {
    match source {
        MaskSource::Simulated(gt) => {
            Ok(views.iter().map(|v| raycast_object_mask(gt, v)).collect())
        }
        MaskSource::External(paths) => {
            if paths.len() != views.len() {
                return Err(Error::InvalidInput(format!(
                    "{} mask files for {} views",
                    paths.len(),
                    views.len()
                )));
            }
            paths.iter().map(|p| crate::io::read_pgm_mask(p)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::math::RigidTransform;
    use approx::assert_relative_eq;

    fn full_mask(w: usize, h: usize) -> MaskImage {
        Grid::filled(w, h, true)
    }

    fn ramp(w: usize, h: usize) -> DepthImage {
        Grid::from_fn(w, h, |x, y| 1.0 + 0.05 * x as f64 + 0.02 * y as f64)
    }

    #[test]
    fn exact_affine_relation_is_recovered() {
        let mono = ramp(20, 15);
        let sensor = Grid {
            width: 20,
            height: 15,
            data: mono.data.iter().map(|m| 2.0 * m + 1.0).collect(),
        };
        let (s, t) = align_mask(&sensor, &mono, &full_mask(20, 15)).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-9);
        assert_relative_eq!(t, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_mono_is_degenerate() {
        let mono = Grid::filled(8, 8, 1.0f64);
        let sensor = Grid::filled(8, 8, 3.0f64);
        assert!(matches!(
            align_mask(&sensor, &mono, &full_mask(8, 8)),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn too_few_valid_pixels_is_degenerate() {
        let mono = ramp(8, 8);
        let mut sensor = Grid::filled(8, 8, f64::NAN);
        sensor.set(3, 3, 1.5);
        assert!(matches!(
            align_mask(&sensor, &mono, &full_mask(8, 8)),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn noisy_fit_beats_grid_search_neighborhood() {
        // The closed form must sit at (or below) the SSE of every point on a
        // coarse grid around it.
        let mono = ramp(25, 20);
        let mut rng_state = 123456789u64;
        let mut noise = || {
            // xorshift, uniform in [-0.01, 0.01]
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state % 10000) as f64 / 10000.0 * 0.02 - 0.01
        };
        let sensor = Grid {
            width: 25,
            height: 20,
            data: mono.data.iter().map(|m| 1.5 * m + 0.2 + noise()).collect(),
        };
        let mask = full_mask(25, 20);
        let (s, t) = align_mask(&sensor, &mono, &mask).unwrap();
        let sse = |s: f64, t: f64| {
            mono.data
                .iter()
                .zip(&sensor.data)
                .map(|(m, d)| (d - (s * m + t)).powi(2))
                .sum::<f64>()
        };
        let best = sse(s, t);
        for i in -5..=5 {
            for j in -5..=5 {
                let cand = sse(s + i as f64 * 0.01, t + j as f64 * 0.01);
                assert!(best <= cand + 1e-12);
            }
        }
        assert_relative_eq!(s, 1.5, epsilon = 0.05);
        assert_relative_eq!(t, 0.2, epsilon = 0.05);
    }

    #[test]
    fn piecewise_affine_frame_recovers_per_region() {
        // Two regions with different true affines: per-mask alignment is
        // exact while one global fit must leave residual.
        let w = 16;
        let h = 16;
        let mono = ramp(w, h);
        let left = Grid::from_fn(w, h, |x, _| x < w / 2);
        let right = Grid::from_fn(w, h, |x, _| x >= w / 2);
        let sensor = Grid::from_fn(w, h, |x, y| {
            let m = *mono.get(x, y);
            if x < w / 2 {
                2.0 * m + 0.5
            } else {
                0.7 * m + 1.3
            }
        });
        let frame = MaskedDepthFrame {
            sensor_depth: sensor.clone(),
            mono_depth: mono,
            masks: vec![left, right],
            object_mask_index: None,
        };
        let aligned = align_frame(&frame).unwrap();
        let per_mask_err: f64 = aligned
            .data
            .iter()
            .zip(&sensor.data)
            .map(|(a, s)| (a - s).abs())
            .sum();
        assert!(per_mask_err < 1e-9, "per-mask alignment should be exact");

        let global_only = align_frame(&MaskedDepthFrame {
            sensor_depth: sensor.clone(),
            mono_depth: frame.mono_depth.clone(),
            masks: vec![],
            object_mask_index: None,
        })
        .unwrap();
        let global_err: f64 = global_only
            .data
            .iter()
            .zip(&sensor.data)
            .map(|(a, s)| (a - s).abs())
            .sum();
        assert!(global_err > 1.0, "single global fit cannot be exact here");
    }

    #[test]
    fn identity_affine_on_metric_mono() {
        let mono = ramp(10, 10);
        let frame = MaskedDepthFrame {
            sensor_depth: mono.clone(),
            mono_depth: mono.clone(),
            masks: vec![],
            object_mask_index: None,
        };
        let fits = fit_frame(&frame).unwrap();
        assert_relative_eq!(fits.global.0, 1.0, epsilon = 1e-9);
        assert_relative_eq!(fits.global.1, 0.0, epsilon = 1e-9);
        let aligned = align_frame(&frame).unwrap();
        for (a, m) in aligned.data.iter().zip(&mono.data) {
            assert_relative_eq!(a, m, epsilon = 1e-9);
        }
    }

    #[test]
    fn all_invalid_sensor_frame_errors() {
        let frame = MaskedDepthFrame {
            sensor_depth: Grid::filled(4, 4, f64::NAN),
            mono_depth: ramp(4, 4),
            masks: vec![],
            object_mask_index: None,
        };
        assert!(align_frame(&frame).is_err());
    }

    fn lift_camera() -> CameraView {
        CameraView::new(
            0,
            RigidTransform::identity(),
            Intrinsics {
                fx: 40.0,
                fy: 40.0,
                cx: 19.5,
                cy: 19.5,
                width: 40,
                height: 40,
            },
        )
    }

    #[test]
    fn lifted_plane_is_coplanar() {
        let depth = Grid::filled(40, 40, 2.0f64);
        let gs = lift_depth(&depth, &lift_camera(), 1.0, 7, None).unwrap();
        assert_eq!(gs.len(), 1600);
        for g in &gs {
            assert_relative_eq!(g.mean[2], 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn lift_takes_exact_fraction_and_is_deterministic() {
        let depth = Grid::filled(40, 40, 1.5f64);
        let a = lift_depth(&depth, &lift_camera(), 0.25, 42, None).unwrap();
        let b = lift_depth(&depth, &lift_camera(), 0.25, 42, None).unwrap();
        assert_eq!(a.len(), 400);
        assert_eq!(a, b);
        let c = lift_depth(&depth, &lift_camera(), 0.25, 43, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lift_mask_logits_follow_object_mask() {
        let depth = Grid::filled(4, 4, 1.0f64);
        let mask = Grid::from_fn(4, 4, |x, _| x < 2);
        let gs = lift_depth(&depth, &lift_camera_small(), 1.0, 3, Some(&mask)).unwrap();
        let inside = gs.iter().filter(|g| g.mask_logit > 0.0).count();
        assert_eq!(inside, 8);
    }

    fn lift_camera_small() -> CameraView {
        CameraView::new(
            0,
            RigidTransform::identity(),
            Intrinsics {
                fx: 4.0,
                fy: 4.0,
                cx: 1.5,
                cy: 1.5,
                width: 4,
                height: 4,
            },
        )
    }
}
