//! Synthetic ground-truth worlds, sensor simulation, candidate-pose
//! generation, evaluation metrics, and A/B experiment orchestration
//! (random vs. information-guided selection).
//!
//! Every random stream is derived from the experiment seed plus a salt, so
//! runs are reproducible and — critically for A/B fairness — candidate sets
//! and supervision payloads depend only on (seed, event index, candidate id),
//! never on the selection mode or the evolving scene.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{align_frame, lift_depth, MaskedDepthFrame};
use crate::camera::{CameraView, Intrinsics};
use crate::fisher::{CandidateView, SelectionMode};
use crate::gradients::{ssim, DepthMode, LossConfig};
use crate::grid::{ColorImage, DepthImage, Grid, MaskImage};
use crate::math::RigidTransform;
use crate::raycast::{raycast_camera, GroundTruth, Primitive, SceneObject};
use crate::render::render;
use crate::scene::SceneModel;
use crate::touch::{
    add_touch_view, select_next_touch, simulate_touch, TouchSensorSpec,
};
use crate::trainer::{LogEvent, Trainer, TrainConfig, ViewProvider};
use crate::{Error, Result};

const SALT_START: u64 = 0x5354_4152;
const SALT_HELDOUT: u64 = 0x4845_4c44;
const SALT_CANDIDATES: u64 = 0x4341_4e44;
const SALT_PAYLOAD: u64 = 0x5041_594c;
const SALT_LIFT: u64 = 0x4c49_4654;
const SALT_TOUCH: u64 = 0x544f_5543;

fn mix(seed: u64, salt: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .rotate_left(17)
        .wrapping_add(salt)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(index)
}

/// A synthetic world plus the viewing geometry around its object of
/// interest.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub name: String,
    pub gt: GroundTruth,
    /// Where cameras look (roughly the object of interest).
    pub center: Vector3<f64>,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
}

/// Build one of the shipped scenarios by name.
///
/// - `bunny-proxy`: a union-of-spheres stand-in on a cluttered tabletop
///   inside a room box.
/// - `dented-sphere`: a sphere with a recessed crater, for touch tests.
pub fn build_scene(name: &str, seed: u64) -> Result<SyntheticScene> {
    let room = SceneObject {
        shape: Primitive::RoomBox {
            center: [0.0, 0.0, 0.75],
            half_extents: [1.5, 1.5, 0.75],
        },
        color: [0.55, 0.52, 0.48],
        is_object_of_interest: false,
    };
    match name {
        "bunny-proxy" => {
            let bunny = SceneObject {
                shape: Primitive::SphereUnion {
                    spheres: vec![
                        ([0.0, 0.0, 0.05], 0.05),       // body
                        ([0.035, 0.0, 0.115], 0.032),   // head
                        ([0.045, 0.016, 0.158], 0.013), // ears
                        ([0.045, -0.016, 0.158], 0.013),
                    ],
                },
                color: [0.82, 0.56, 0.62],
                is_object_of_interest: true,
            };
            let crate_box = SceneObject {
                shape: Primitive::Box {
                    center: [0.22, 0.14, 0.04],
                    half_extents: [0.04, 0.06, 0.04],
                },
                color: [0.25, 0.62, 0.3],
                is_object_of_interest: false,
            };
            let ring = SceneObject {
                shape: Primitive::Torus {
                    center: [-0.2, -0.16, 0.02],
                    major_radius: 0.05,
                    minor_radius: 0.018,
                },
                color: [0.85, 0.55, 0.2],
                is_object_of_interest: false,
            };
            Ok(SyntheticScene {
                name: name.into(),
                gt: GroundTruth {
                    objects: vec![room, bunny, crate_box, ring],
                },
                center: Vector3::new(0.0, 0.0, 0.08),
                r_min: 0.35,
                r_max: 0.55,
                seed,
            })
        }
        "dented-sphere" => {
            let dented = SceneObject {
                shape: Primitive::DentedSphere {
                    center: [0.0, 0.0, 0.06],
                    radius: 0.06,
                    inner_radius: 0.042,
                    dent_dir: [0.55, 0.25, 0.8],
                    dent_half_angle: 40f64.to_radians(),
                },
                color: [0.65, 0.68, 0.75],
                is_object_of_interest: true,
            };
            Ok(SyntheticScene {
                name: name.into(),
                gt: GroundTruth {
                    objects: vec![room, dented],
                },
                center: Vector3::new(0.0, 0.0, 0.06),
                r_min: 0.3,
                r_max: 0.45,
                seed,
            })
        }
        other => Err(Error::InvalidInput(format!(
            "unknown scenario '{other}' (bunny-proxy|dented-sphere)"
        ))),
    }
}

/// Sample `n` look-at poses on a sphere shell around `center`: radius
/// uniform in [r_min, r_max], azimuth uniform, elevation uniform in
/// [10, 80] degrees (reachable manipulator band). Deterministic per seed.
pub fn sample_view_sphere(
    center: &Vector3<f64>,
    r_min: f64,
    r_max: f64,
    n: usize,
    seed: u64,
    intrinsics: Intrinsics,
) -> Vec<CameraView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let radius = rng.gen_range(r_min..=r_max);
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let elevation = rng.gen_range(10f64.to_radians()..=80f64.to_radians());
            let eye = center
                + Vector3::new(
                    radius * elevation.cos() * azimuth.cos(),
                    radius * elevation.cos() * azimuth.sin(),
                    radius * elevation.sin(),
                );
            CameraView::new(i, RigidTransform::look_at(&eye, center, &Vector3::z()), intrinsics)
        })
        .collect()
}

/// Depth-camera noise model: sigma grows quadratically with distance, plus
/// a 2% dropout to NaN. `a` is the base sigma, `b` the quadratic gain.
pub fn simulate_sensor_depth(gt_depth: &DepthImage, a: f64, b: f64, seed: u64) -> DepthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = gt_depth.clone();
    for v in out.data.iter_mut() {
        if !v.is_finite() {
            continue;
        }
        let sigma = a + b * *v * *v;
        let eps: f64 = unit.sample(&mut rng) * sigma;
        let drop: f64 = rng.gen();
        *v = if drop < 0.02 { f64::NAN } else { *v + eps };
    }
    out
}

/// Stand-in for a monocular depth model: per segment an affine distortion
/// of true depth (scale U(0.5,2), offset U(-0.5,0.5)), optionally warped by
/// a smooth low-frequency multiplicative field of relative amplitude
/// `distortion`. Dense and noise-free wherever ground truth is finite.
pub fn simulate_mono_depth(
    gt_depth: &DepthImage,
    segments: &[MaskImage],
    seed: u64,
    distortion: f64,
) -> DepthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One affine per segment plus one for unsegmented pixels.
    let affines: Vec<(f64, f64)> = (0..=segments.len())
        .map(|_| (rng.gen_range(0.5..2.0), rng.gen_range(-0.5..0.5)))
        .collect();
    let k1: f64 = rng.gen_range(0.5..2.0);
    let k2: f64 = rng.gen_range(0.5..2.0);
    let phase1: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let w = gt_depth.width as f64;
    let h = gt_depth.height as f64;
    let mut out = gt_depth.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let x = (i % gt_depth.width) as f64;
        let y = (i / gt_depth.width) as f64;
        let seg = segments
            .iter()
            .position(|m| m.data[i])
            .unwrap_or(segments.len());
        let (s, t) = affines[seg];
        let field = (std::f64::consts::TAU * (k1 * x / w) + phase1).sin()
            * (std::f64::consts::TAU * (k2 * y / h) + phase2).cos();
        *v = (s * *v + t) * (1.0 + distortion * field);
    }
    out
}

/// Novel-view metrics: PSNR (dB, capped at 99), SSIM, and mean absolute
/// depth error over the whole view (D-ABS) and over the object mask only
/// (D-ABS-O), averaged over views.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub d_abs: f64,
    pub d_abs_o: f64,
}

/// One evaluation view with its ground-truth renders.
#[derive(Clone, Debug)]
pub struct HeldoutView {
    pub cam: CameraView,
    pub gt_color: ColorImage,
    pub gt_depth: DepthImage,
    pub gt_object_mask: MaskImage,
}

pub fn compute_metrics(scene: &SceneModel, heldout: &[HeldoutView]) -> Metrics {
    assert!(!heldout.is_empty(), "held-out set must be nonempty");
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut dabs_sum = 0.0;
    let mut dabs_views = 0usize;
    let mut dabso_sum = 0.0;
    let mut dabso_views = 0usize;
    for hv in heldout {
        let out = render(scene, &hv.cam);
        let mut mse = 0.0;
        for (r, g) in out.color.data.iter().zip(&hv.gt_color.data) {
            for c in 0..3 {
                let d = r[c] - g[c];
                mse += d * d;
            }
        }
        mse /= (out.color.data.len() * 3) as f64;
        psnr_sum += if mse <= 1e-10 {
            99.0
        } else {
            (10.0 * (1.0 / mse).log10()).min(99.0)
        };

        let mut s = 0.0;
        for c in 0..3 {
            let xc = Grid {
                width: out.color.width,
                height: out.color.height,
                data: out.color.data.iter().map(|p| p[c]).collect(),
            };
            let yc = Grid {
                width: hv.gt_color.width,
                height: hv.gt_color.height,
                data: hv.gt_color.data.iter().map(|p| p[c]).collect(),
            };
            s += ssim::ssim(&xc, &yc) / 3.0;
        }
        ssim_sum += s;

        let mut dabs = 0.0;
        let mut n = 0usize;
        let mut dabso = 0.0;
        let mut no = 0usize;
        for i in 0..out.depth.data.len() {
            let gt = hv.gt_depth.data[i];
            if !gt.is_finite() {
                continue;
            }
            let err = (out.depth.data[i] - gt).abs();
            dabs += err;
            n += 1;
            if hv.gt_object_mask.data[i] {
                dabso += err;
                no += 1;
            }
        }
        if n > 0 {
            dabs_sum += dabs / n as f64;
            dabs_views += 1;
        }
        if no > 0 {
            dabso_sum += dabso / no as f64;
            dabso_views += 1;
        }
    }
    let nv = heldout.len() as f64;
    Metrics {
        psnr: psnr_sum / nv,
        ssim: ssim_sum / nv,
        d_abs: if dabs_views > 0 {
            dabs_sum / dabs_views as f64
        } else {
            0.0
        },
        d_abs_o: if dabso_views > 0 {
            dabso_sum / dabso_views as f64
        } else {
            0.0
        },
    }
}

/// Full experiment description (JSON on disk).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scene: String,
    pub modes: Vec<SelectionMode>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub view_add_interval: usize,
    pub n_start_views: usize,
    pub n_candidates: usize,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_heldout")]
    pub n_heldout: usize,
    #[serde(default = "default_lift_fraction")]
    pub lift_fraction: f64,
    #[serde(default = "default_max_gaussians")]
    pub max_gaussians: usize,
    #[serde(default = "default_infeasible_rate")]
    pub infeasible_rate: f64,
    #[serde(default)]
    pub depth_mode: Option<DepthMode>,
    #[serde(default)]
    pub optimize_poses: bool,
}

fn default_image_size() -> usize {
    64
}
fn default_heldout() -> usize {
    30
}
fn default_lift_fraction() -> f64 {
    0.06
}
fn default_max_gaussians() -> usize {
    5000
}
fn default_infeasible_rate() -> f64 {
    0.2
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_start_views == 0 || self.n_start_views >= 9 {
            return Err(Error::InvalidInput(
                "n_start_views must lie in 1..=8".into(),
            ));
        }
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidInput("need at least one mode and seed".into()));
        }
        if self.n_heldout == 0 {
            return Err(Error::InvalidInput("n_heldout must be positive".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let s = self.image_size;
        Intrinsics {
            fx: 0.94 * s as f64,
            fy: 0.94 * s as f64,
            cx: (s as f64 - 1.0) / 2.0,
            cy: (s as f64 - 1.0) / 2.0,
            width: s,
            height: s,
        }
    }
}

/// Per-object segment masks (in object order) from a raycast id image.
fn segment_masks(ids: &Grid<Option<usize>>, n_objects: usize) -> Vec<MaskImage> {
    (0..n_objects)
        .map(|k| Grid {
            width: ids.width,
            height: ids.height,
            data: ids.data.iter().map(|id| *id == Some(k)).collect(),
        })
        .collect()
}

/// Render ground truth and attach the full supervision payload (color,
/// noisy sensor depth, simulated mono depth, per-mask aligned depth, object
/// mask) to the view.
pub fn attach_payload(world: &SyntheticScene, cam: &mut CameraView, payload_seed: u64) {
    let rc = raycast_camera(&world.gt, cam);
    let sensor = simulate_sensor_depth(&rc.depth, 0.001, 0.005, mix(payload_seed, 1, 0));
    let segments = segment_masks(&rc.object_ids, world.gt.objects.len());
    let mono = simulate_mono_depth(&rc.depth, &segments, mix(payload_seed, 2, 0), 0.03);
    let interest = world.gt.object_of_interest();
    let frame = MaskedDepthFrame {
        sensor_depth: sensor.clone(),
        mono_depth: mono.clone(),
        masks: segments,
        object_mask_index: interest,
    };
    let aligned = align_frame(&frame).ok();
    cam.supervision.color = Some(rc.color);
    cam.supervision.sensor_depth = Some(sensor);
    cam.supervision.aligned_depth = aligned;
    cam.supervision.mono_depth = Some(mono);
    cam.supervision.object_mask = interest.map(|k| Grid {
        width: rc.object_ids.width,
        height: rc.object_ids.height,
        data: rc.object_ids.data.iter().map(|id| *id == Some(k)).collect(),
    });
}

/// Ground-truth data for one held-out view.
fn heldout_view(world: &SyntheticScene, cam: CameraView) -> HeldoutView {
    let rc = raycast_camera(&world.gt, &cam);
    let interest = world.gt.object_of_interest();
    HeldoutView {
        gt_object_mask: Grid {
            width: rc.object_ids.width,
            height: rc.object_ids.height,
            data: rc.object_ids.data.iter().map(|id| *id == Some(k_or(interest))).collect(),
        },
        gt_color: rc.color,
        gt_depth: rc.depth,
        cam,
    }
}

fn k_or(i: Option<usize>) -> usize {
    i.unwrap_or(usize::MAX)
}

/// Build the initial scene by lifting aligned depth from the starting views.
pub fn initial_scene_from_views(
    views: &[CameraView],
    lift_fraction: f64,
    max_gaussians: usize,
    seed: u64,
) -> Result<SceneModel> {
    let mut scene = SceneModel::new([0.3, 0.3, 0.3]);
    for (k, v) in views.iter().enumerate() {
        let Some(aligned) = &v.supervision.aligned_depth else {
            continue;
        };
        let lifted = lift_depth(
            aligned,
            v,
            lift_fraction,
            mix(seed, SALT_LIFT, k as u64),
            v.supervision.object_mask.as_ref(),
        )?;
        scene.gaussians.extend(lifted);
    }
    if scene.gaussians.len() > max_gaussians {
        // Deterministic thinning: keep a uniform stride.
        let stride = scene.gaussians.len() as f64 / max_gaussians as f64;
        let mut kept = Vec::with_capacity(max_gaussians);
        for i in 0..max_gaussians {
            kept.push(scene.gaussians[(i as f64 * stride) as usize].clone());
        }
        scene.gaussians = kept;
    }
    if scene.gaussians.is_empty() {
        return Err(Error::InvalidInput(
            "no Gaussians lifted; check alignment inputs".into(),
        ));
    }
    Ok(scene)
}

/// Candidate/payload provider backed by the synthetic world.
struct SimProvider {
    world: SyntheticScene,
    spec: ExperimentSpec,
    run_seed: u64,
    /// sha256 of each event's candidate set, for cross-mode parity audits.
    digests: Vec<String>,
}

impl SimProvider {
    fn make_candidates(&self, event_index: usize) -> Vec<CandidateView> {
        let seed = mix(self.run_seed, SALT_CANDIDATES, event_index as u64);
        let poses = sample_view_sphere(
            &self.world.center,
            self.world.r_min,
            self.world.r_max,
            self.spec.n_candidates,
            seed,
            self.spec.intrinsics(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 7, 0));
        poses
            .into_iter()
            .enumerate()
            .map(|(i, mut cam)| {
                cam.id = 2000 + event_index * 100 + i;
                let feasible = rng.gen::<f64>() >= self.spec.infeasible_rate;
                CandidateView {
                    cam,
                    feasible,
                    id: i,
                }
            })
            .collect()
    }
}

impl ViewProvider for SimProvider {
    fn candidates(&mut self, event_index: usize) -> Vec<CandidateView> {
        let set = self.make_candidates(event_index);
        let mut hasher = Sha256::new();
        for c in &set {
            hasher.update(format!(
                "{};{:?};{:?};{}",
                c.id, c.cam.pose.rotation, c.cam.pose.translation, c.feasible
            ));
        }
        self.digests.push(format!("{:x}", hasher.finalize()));
        set
    }

    fn supervised_view(&mut self, event_index: usize, chosen: &CandidateView) -> CameraView {
        let mut cam = chosen.cam.clone();
        let payload_seed = mix(
            self.run_seed,
            SALT_PAYLOAD,
            (event_index as u64) << 16 | chosen.id as u64,
        );
        attach_payload(&self.world, &mut cam, payload_seed);
        cam
    }
}

/// Result of one (mode, seed) run.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub mode: SelectionMode,
    pub seed: u64,
    pub metrics: Metrics,
    pub n_views: usize,
    pub n_gaussians: usize,
    /// Candidate-set digests per selection event (parity audit).
    pub candidate_digests: Vec<String>,
    #[serde(skip)]
    pub event_log: String,
    #[serde(skip)]
    pub final_scene: SceneModel,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeAggregate {
    pub mode: SelectionMode,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub mean_d_abs: f64,
    pub std_d_abs: f64,
    pub mean_d_abs_o: f64,
    pub std_d_abs_o: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunResult>,
    pub aggregates: Vec<ModeAggregate>,
}

/// Starting views, initial scene, and held-out set for one seed; shared
/// verbatim across modes.
pub struct SeedSetup {
    pub world: SyntheticScene,
    pub start_views: Vec<CameraView>,
    pub initial_scene: SceneModel,
    pub heldout: Vec<HeldoutView>,
}

pub fn prepare_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedSetup> {
    let world = build_scene(&spec.scene, seed)?;
    let intr = spec.intrinsics();
    let mut start_views = sample_view_sphere(
        &world.center,
        world.r_min,
        world.r_max,
        spec.n_start_views,
        mix(seed, SALT_START, 0),
        intr,
    );
    for (k, v) in start_views.iter_mut().enumerate() {
        v.id = k;
        attach_payload(&world, v, mix(seed, SALT_PAYLOAD, k as u64));
    }
    let initial_scene =
        initial_scene_from_views(&start_views, spec.lift_fraction, spec.max_gaussians, seed)?;
    let heldout: Vec<HeldoutView> = sample_view_sphere(
        &world.center,
        world.r_min,
        world.r_max,
        spec.n_heldout,
        mix(seed, SALT_HELDOUT, 0),
        intr,
    )
    .into_iter()
    .enumerate()
    .map(|(k, mut cam)| {
        cam.id = 1000 + k;
        heldout_view(&world, cam)
    })
    .collect();

    // Held-out ids must never appear among training ids.
    for hv in &heldout {
        assert!(
            start_views.iter().all(|v| v.id != hv.cam.id),
            "held-out view id {} collides with a training view",
            hv.cam.id
        );
    }
    Ok(SeedSetup {
        world,
        start_views,
        initial_scene,
        heldout,
    })
}

fn train_config(spec: &ExperimentSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        total_steps: spec.steps,
        view_add_interval: spec.view_add_interval,
        optimize_poses: spec.optimize_poses,
        seed,
        alpha: spec.alpha,
        beta: spec.beta,
        ..Default::default()
    }
}

fn loss_config(spec: &ExperimentSpec) -> LossConfig {
    LossConfig {
        depth_mode: spec.depth_mode.unwrap_or(DepthMode::Mse),
        ..Default::default()
    }
}

/// One training run for (mode, seed) on a prepared setup.
pub fn run_single(
    spec: &ExperimentSpec,
    setup: &SeedSetup,
    mode: SelectionMode,
    seed: u64,
) -> Result<RunResult> {
    let mut trainer = Trainer::new(
        setup.initial_scene.clone(),
        setup.start_views.clone(),
        train_config(spec, seed),
        loss_config(spec),
    )?;
    let mut provider = SimProvider {
        world: setup.world.clone(),
        spec: spec.clone(),
        run_seed: seed,
        digests: Vec::new(),
    };
    trainer.run_training(mode, &mut provider)?;
    let metrics = compute_metrics(&trainer.scene, &setup.heldout);
    Ok(RunResult {
        mode,
        seed,
        metrics,
        n_views: trainer.views.len(),
        n_gaussians: trainer.scene.gaussians.len(),
        candidate_digests: provider.digests,
        event_log: trainer.event_log(),
        final_scene: trainer.scene,
    })
}

fn aggregate(mode: SelectionMode, runs: &[&RunResult]) -> ModeAggregate {
    let stats = |f: &dyn Fn(&Metrics) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = runs.iter().map(|r| f(&r.metrics)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    };
    let (mean_psnr, std_psnr) = stats(&|m| m.psnr);
    let (mean_ssim, std_ssim) = stats(&|m| m.ssim);
    let (mean_d_abs, std_d_abs) = stats(&|m| m.d_abs);
    let (mean_d_abs_o, std_d_abs_o) = stats(&|m| m.d_abs_o);
    ModeAggregate {
        mode,
        mean_psnr,
        std_psnr,
        mean_ssim,
        std_ssim,
        mean_d_abs,
        std_d_abs,
        mean_d_abs_o,
        std_d_abs_o,
    }
}

/// Run the full A/B protocol: per seed, identical starting views, initial
/// scene, candidate schedule, and held-out set across all modes.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut runs = Vec::new();
    for &seed in &spec.seeds {
        let setup = prepare_seed(spec, seed)?;
        for &mode in &spec.modes {
            runs.push(run_single(spec, &setup, mode, seed)?);
        }
    }
    let aggregates = spec
        .modes
        .iter()
        .map(|&mode| {
            let mode_runs: Vec<&RunResult> = runs.iter().filter(|r| r.mode == mode).collect();
            aggregate(mode, &mode_runs)
        })
        .collect();
    Ok(ExperimentReport { runs, aggregates })
}

/// CSV rows for per-run metrics: mode,seed,psnr,ssim,d_abs,d_abs_o.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("mode,seed,psnr,ssim,d_abs,d_abs_o\n");
    for r in &report.runs {
        out.push_str(&format!(
            "{:?},{},{},{},{},{}\n",
            r.mode, r.seed, r.metrics.psnr, r.metrics.ssim, r.metrics.d_abs, r.metrics.d_abs_o
        ));
    }
    out
}

/// A touch pose candidate on the object surface.
#[derive(Clone, Debug)]
pub struct TouchCandidate {
    /// World-to-sensor transform, z axis pointing into the surface.
    pub pose: RigidTransform,
    /// Outward direction from the object center to the touched point.
    pub surface_dir: Vector3<f64>,
}

/// Sample touch candidates on the object of interest: cast rays inward from
/// directions on the upper sphere, stand the sensor off the hit point.
pub fn sample_touch_candidates(
    world: &SyntheticScene,
    n: usize,
    seed: u64,
) -> Vec<TouchCandidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, SALT_TOUCH, 0));
    let interest = world.gt.object_of_interest();
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < n && attempts < n * 20 {
        attempts += 1;
        let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let elevation = rng.gen_range(5f64.to_radians()..=85f64.to_radians());
        let dir = Vector3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        );
        let origin = world.center + dir * 0.3;
        let Some(hit) = world.gt.cast_ray(&origin, &-dir) else {
            continue;
        };
        if interest.is_some() && Some(hit.object) != interest {
            continue;
        }
        // Sensor 5 mm off the surface, looking along the inward ray.
        let eye = hit.point + dir * 0.005;
        let target = hit.point;
        let pose = RigidTransform::look_at(&eye, &target, &Vector3::z());
        out.push(TouchCandidate {
            pose,
            surface_dir: dir,
        });
    }
    out
}

/// Configuration of the touch-refinement phase that follows vision training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TouchPhaseConfig {
    pub n_touches: usize,
    pub interval: usize,
    pub n_candidates: usize,
    /// Extra optimization steps after the last touch lands.
    pub settle_steps: usize,
}

impl Default for TouchPhaseConfig {
    fn default() -> Self {
        TouchPhaseConfig {
            n_touches: 10,
            interval: 100,
            n_candidates: 10,
            settle_steps: 200,
        }
    }
}

/// Outcome of the touch phase: the directions actually touched, in order.
pub struct TouchPhaseOutcome {
    pub touched_dirs: Vec<Vector3<f64>>,
    pub skipped: usize,
}

/// Alternate training with Fisher-guided touch insertion: every `interval`
/// steps, pick the most depth-informative touch among fresh candidates,
/// simulate it on ground truth, and append the resulting depth-only view
/// (plus Gaussians seeded at the contact points).
pub fn run_touch_phase(
    trainer: &mut Trainer,
    world: &SyntheticScene,
    sensor: &TouchSensorSpec,
    cfg: &TouchPhaseConfig,
    seed: u64,
) -> Result<TouchPhaseOutcome> {
    let mut touched_dirs = Vec::new();
    let mut skipped = 0usize;
    let mut event = 0usize;
    while touched_dirs.len() < cfg.n_touches {
        for _ in 0..cfg.interval {
            trainer.train_step()?;
        }
        let candidates = sample_touch_candidates(world, cfg.n_candidates, mix(seed, 0xd00d, event as u64));
        event += 1;
        if candidates.is_empty() {
            skipped += 1;
            continue;
        }
        let poses: Vec<RigidTransform> = candidates.iter().map(|c| c.pose).collect();
        let h_train = crate::fisher::accumulate_train_hessian(
            &trainer.scene,
            &trainer.views,
            crate::gradients::FisherChannel::Depth,
        )?;
        let selection = match select_next_touch(&poses, &trainer.scene, &h_train, sensor) {
            Ok(s) => s,
            Err(Error::NoFeasibleTouch) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let sample = match simulate_touch(
            &world.gt,
            poses[selection.index],
            sensor,
            mix(seed, 0x7075, event as u64),
        ) {
            Ok(s) => s,
            Err(Error::EmptyTouch(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let view_id = 5000 + touched_dirs.len();
        let mut view_cam = selection.retreated.clone();
        view_cam.id = view_id;
        let (view, added) = match add_touch_view(
            &mut trainer.scene,
            &sample,
            &view_cam,
            mix(seed, 0xadd0, event as u64),
        ) {
            Ok(v) => v,
            Err(Error::EmptyTouch(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        trainer.sync_param_state();
        let score = selection
            .scores
            .iter()
            .find(|(i, _)| *i == selection.index)
            .map(|(_, s)| *s)
            .unwrap_or(0.0);
        trainer.events.push(LogEvent::TouchAdd {
            step: trainer.step_count(),
            candidate: selection.index,
            added_gaussians: added,
            view_id,
            score,
        });
        trainer.append_view(view);
        touched_dirs.push(candidates[selection.index].surface_dir);
    }
    for _ in 0..cfg.settle_steps {
        trainer.train_step()?;
    }
    Ok(TouchPhaseOutcome {
        touched_dirs,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn view_sphere_respects_bounds_and_seed() {
        let center = Vector3::new(0.1, -0.2, 0.05);
        let intr = Intrinsics {
            fx: 30.0,
            fy: 30.0,
            cx: 15.5,
            cy: 15.5,
            width: 32,
            height: 32,
        };
        let views = sample_view_sphere(&center, 0.3, 0.5, 100, 42, intr);
        for v in &views {
            let p = v.pose.transform_point(&center);
            assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9, "center off axis");
            let r = p.z;
            assert!((0.3..=0.5).contains(&r), "radius {r} out of range");
            let eye = v.pose.inverse().translation;
            let elevation = ((eye.z - center.z) / r).asin().to_degrees();
            assert!((10.0 - 1e-9..=80.0 + 1e-9).contains(&elevation));
        }
        let again = sample_view_sphere(&center, 0.3, 0.5, 100, 42, intr);
        assert_eq!(views[7].pose, again[7].pose);
    }

    #[test]
    fn single_view_at_fixed_radius_looks_at_center() {
        let center = Vector3::zeros();
        let intr = Intrinsics {
            fx: 30.0,
            fy: 30.0,
            cx: 15.5,
            cy: 15.5,
            width: 32,
            height: 32,
        };
        let views = sample_view_sphere(&center, 2.0, 2.0, 1, 7, intr);
        let p = views[0].pose.transform_point(&center);
        assert_relative_eq!(p.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(p.z, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn sensor_noise_zero_params_is_identity_except_dropout() {
        let gt = Grid::filled(20, 20, 1.5f64);
        let noisy = simulate_sensor_depth(&gt, 0.0, 0.0, 3);
        let mut dropped = 0;
        for v in &noisy.data {
            if v.is_nan() {
                dropped += 1;
            } else {
                assert_eq!(*v, 1.5);
            }
        }
        // 2% dropout over 400 pixels: expect a few, not many.
        assert!(dropped < 30, "dropout too aggressive: {dropped}");
    }

    #[test]
    fn sensor_noise_grows_quadratically() {
        let n = 200_000;
        let near = Grid::filled(n, 1, 1.0f64);
        let far = Grid::filled(n, 1, 2.0f64);
        let a = 0.001;
        let b = 0.005;
        let sig = |img: &DepthImage, d: f64| {
            let vals: Vec<f64> = img.data.iter().filter(|v| v.is_finite()).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(mean, d, epsilon = 3e-4);
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        let s1 = sig(&simulate_sensor_depth(&near, a, b, 1), 1.0);
        let s2 = sig(&simulate_sensor_depth(&far, a, b, 2), 2.0);
        let expected_ratio = (a + b * 4.0) / (a + b);
        assert!(
            (s2 / s1 - expected_ratio).abs() / expected_ratio < 0.1,
            "sigma ratio {} vs expected {}",
            s2 / s1,
            expected_ratio
        );
    }

    #[test]
    fn mono_depth_is_affine_per_segment_without_distortion() {
        let gt = Grid::from_fn(16, 16, |x, y| 1.0 + 0.01 * (x + 2 * y) as f64);
        let left = Grid::from_fn(16, 16, |x, _| x < 8);
        let mono = simulate_mono_depth(&gt, &[left.clone()], 5, 0.0);
        // Inside the mask the relation is exactly affine: fit it on two
        // pixels and verify on the rest.
        let i0 = 0;
        let i1 = 17;
        let s = (mono.data[i1] - mono.data[i0]) / (gt.data[i1] - gt.data[i0]);
        let t = mono.data[i0] - s * gt.data[i0];
        for i in 0..gt.data.len() {
            if left.data[i] {
                assert_relative_eq!(mono.data[i], s * gt.data[i] + t, epsilon = 1e-9);
            }
        }
        let same = simulate_mono_depth(&gt, &[left], 5, 0.0);
        assert_eq!(mono.data, same.data);
    }

    #[test]
    fn mono_depth_segments_get_different_affines() {
        let gt = Grid::from_fn(16, 16, |x, y| 1.0 + 0.01 * (x + y) as f64);
        let left = Grid::from_fn(16, 16, |x, _| x < 8);
        let right = Grid::from_fn(16, 16, |x, _| x >= 8);
        let mono = simulate_mono_depth(&gt, &[left, right], 9, 0.0);
        let fit = |xs: &[usize]| {
            let (i0, i1) = (xs[0], xs[1]);
            let s = (mono.data[i1] - mono.data[i0]) / (gt.data[i1] - gt.data[i0]);
            (s, mono.data[i0] - s * gt.data[i0])
        };
        let (sl, tl) = fit(&[0, 1]);
        let (sr, tr) = fit(&[8, 9]);
        assert!((sl - sr).abs() > 1e-6 || (tl - tr).abs() > 1e-6);
    }

    #[test]
    fn metrics_on_perfect_reconstruction() {
        // Render a tiny splat scene and feed its own output as ground truth:
        // PSNR capped at 99, SSIM 1, zero depth error.
        let mut scene = SceneModel::new([0.2, 0.3, 0.4]);
        scene.gaussians.push(crate::scene::Gaussian3D {
            mean: [0.0, 0.0, 0.5],
            log_scale: [-3.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 1.0,
            color: [0.8, 0.4, 0.1],
            mask_logit: 2.0,
        });
        let intr = Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: 7.5,
            cy: 7.5,
            width: 16,
            height: 16,
        };
        let cam = CameraView::new(1000, RigidTransform::identity(), intr);
        let out = render(&scene, &cam);
        let hv = HeldoutView {
            cam,
            gt_color: out.color.clone(),
            gt_depth: out.depth.clone(),
            gt_object_mask: Grid::from_fn(16, 16, |x, y| out.mask.get(x, y) > &0.5),
        };
        let m = compute_metrics(&scene, &[hv]);
        assert_eq!(m.psnr, 99.0);
        assert_relative_eq!(m.ssim, 1.0, epsilon = 1e-12);
        assert_eq!(m.d_abs, 0.0);
        assert_eq!(m.d_abs_o, 0.0);
    }

    #[test]
    fn psnr_of_uniform_error() {
        let mut scene = SceneModel::new([0.5, 0.5, 0.5]);
        scene.gaussians.clear();
        let intr = Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: 7.5,
            cy: 7.5,
            width: 16,
            height: 16,
        };
        let cam = CameraView::new(1000, RigidTransform::identity(), intr);
        // Uniform 0.1 color error in every channel: PSNR = 20 dB.
        let hv = HeldoutView {
            cam,
            gt_color: Grid::filled(16, 16, [0.6, 0.6, 0.6]),
            gt_depth: Grid::filled(16, 16, f64::NAN),
            gt_object_mask: Grid::filled(16, 16, false),
        };
        let m = compute_metrics(&scene, &[hv]);
        assert_relative_eq!(m.psnr, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn metrics_recomputation_is_bitwise_stable() {
        let setup = prepare_seed(&small_spec(), 3).unwrap();
        let m1 = compute_metrics(&setup.initial_scene, &setup.heldout);
        let m2 = compute_metrics(&setup.initial_scene, &setup.heldout);
        assert_eq!(m1.psnr.to_bits(), m2.psnr.to_bits());
        assert_eq!(m1.ssim.to_bits(), m2.ssim.to_bits());
        assert_eq!(m1.d_abs.to_bits(), m2.d_abs.to_bits());
        assert_eq!(m1.d_abs_o.to_bits(), m2.d_abs_o.to_bits());
    }

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            scene: "bunny-proxy".into(),
            modes: vec![SelectionMode::Random],
            seeds: vec![3],
            steps: 30,
            view_add_interval: 15,
            n_start_views: 3,
            n_candidates: 4,
            alpha: 0.1,
            beta: 1.0,
            image_size: 24,
            n_heldout: 3,
            lift_fraction: 0.05,
            max_gaussians: 400,
            infeasible_rate: 0.2,
            depth_mode: None,
            optimize_poses: false,
        }
    }

    #[test]
    fn tiny_experiment_runs_end_to_end() {
        let spec = small_spec();
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.runs.len(), 1);
        let run = &report.runs[0];
        assert!(run.metrics.psnr > 0.0);
        assert!(!run.candidate_digests.is_empty());
        assert!(run.n_views >= spec.n_start_views);
        let csv = report_csv(&report);
        assert!(csv.starts_with("mode,seed,psnr"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn candidate_sets_have_parity_across_modes() {
        let mut spec = small_spec();
        spec.modes = vec![SelectionMode::Random, SelectionMode::Depth];
        let report = run_experiment(&spec).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert_eq!(
            report.runs[0].candidate_digests, report.runs[1].candidate_digests,
            "modes must consume identical candidate sets"
        );
    }
}
