//! Batch command-line interface.
//!
//! Thin dispatch over the library: every subcommand reads JSON/PPM/PGM/raw
//! float inputs, runs one pipeline stage, and writes artifacts plus a
//! `manifest.json` (config hash, seed, file-format versions) into the output
//! directory. Exit codes: 0 success, 1 invalid invocation or inputs, 2
//! runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::CameraView;
use crate::fisher::{
    score_candidates, select_next_view, CandidateView, HessianDiagonal, SelectionMode,
    TrainHessians,
};
use crate::gradients::FisherChannel;
use crate::grid::Grid;
use crate::harness::{
    attach_payload, build_scene, compute_metrics, prepare_seed, report_csv, run_experiment,
    run_single, sample_view_sphere, ExperimentSpec,
};
use crate::io;
use crate::math::RigidTransform;
use crate::touch::{select_next_touch, TouchSensorSpec};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "desksplat",
    about = "Desk-scale Gaussian splatting with Fisher-guided view and touch selection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Output directory for artifacts and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene JSON from a camera JSON (color, depth, alpha, mask).
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Mask-aware affine alignment of monocular depth to sensor depth.
    Align {
        /// JSON: {"sensor_depth", "mono_depth", "masks": [...], "object_mask_index"}
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a synthetic scenario (one mode, one seed) and save the scene.
    Train {
        /// Experiment-spec JSON; the first mode/seed apply unless overridden.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score candidate views against a scene and pick the best.
    SelectView {
        #[arg(long)]
        scene: PathBuf,
        /// Candidate poses JSON.
        #[arg(long)]
        candidates: PathBuf,
        /// Optional JSON array of training cameras for the trained-state
        /// denominator; without it scores are prior-regularized.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "depth")]
        mode: String,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Score candidate touch poses (depth information on object Gaussians).
    SelectTouch {
        #[arg(long)]
        scene: PathBuf,
        /// Touch poses JSON (array of rigid transforms).
        #[arg(long)]
        candidates: PathBuf,
        /// Optional JSON array of training cameras (as in select-view).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate synthetic views with full supervision payloads to files.
    Simulate {
        /// JSON: {"scene", "n_views", "image_size", "seed"}
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full A/B experiment protocol from a spec JSON.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a scene JSON on a scenario's held-out views.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// JSON: {"scene", "n_heldout", "image_size", "seed"}
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Entry point; returns the process exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successes; anything else is a
            // validation failure with usage on stderr.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidInput(_)
                | Error::Json(_)
                | Error::DimensionMismatch(_)
                | Error::DegenerateMask(_) => 1,
                // A missing input file is a bad invocation, not a runtime failure.
                Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            }
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    formats: FormatVersions,
}

#[derive(Serialize)]
struct FormatVersions {
    depth: &'static str,
    scene: &'static str,
    candidates: &'static str,
}

fn write_manifest(out: &Path, command: &str, config_repr: &str, seed: u64) -> Result<()> {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update(config_repr.as_bytes());
    hasher.update(seed.to_le_bytes());
    let manifest = Manifest {
        command,
        config_hash: format!("{:x}", hasher.finalize()),
        seed,
        formats: FormatVersions {
            depth: io::DEPTH_FORMAT_VERSION,
            scene: io::SCENE_FORMAT_VERSION,
            candidates: io::CANDIDATES_FORMAT_VERSION,
        },
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("--out is required for this subcommand".into()))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Render {
            scene,
            camera,
            common,
        } => {
            let out = require_out(&common)?.to_path_buf();
            let scene_model = io::read_scene(&scene)?;
            let cam_record = io::read_camera(&camera)?;
            let cam = cam_record.to_view(0);
            cam.intrinsics.validate()?;
            let rendered = crate::render::render(&scene_model, &cam);
            std::fs::create_dir_all(&out)?;
            io::write_ppm(&out.join("color.ppm"), &rendered.color)?;
            io::write_depth(&out.join("depth.f32"), &rendered.depth)?;
            io::write_pgm(&out.join("alpha.pgm"), &rendered.alpha)?;
            let mask_rgb = Grid {
                width: rendered.mask.width,
                height: rendered.mask.height,
                data: rendered.mask.data.iter().map(|v| [*v; 3]).collect(),
            };
            io::write_ppm(&out.join("mask.ppm"), &mask_rgb)?;
            let repr = format!("{}:{}", scene.display(), camera.display());
            write_manifest(&out, "render", &repr, common.seed.unwrap_or(0))?;
            if !common.quiet {
                println!(
                    "rendered {}x{} to {}",
                    rendered.color.width,
                    rendered.color.height,
                    out.display()
                );
            }
            Ok(())
        }
        Command::Align { config, common } => {
            #[derive(Deserialize)]
            struct AlignConfig {
                sensor_depth: PathBuf,
                mono_depth: PathBuf,
                #[serde(default)]
                masks: Vec<PathBuf>,
                #[serde(default)]
                object_mask_index: Option<usize>,
            }
            let out = require_out(&common)?.to_path_buf();
            let raw = read_to_string(&config)?;
            let cfg: AlignConfig = serde_json::from_str(&raw)?;
            let frame = crate::align::MaskedDepthFrame {
                sensor_depth: io::read_depth(&cfg.sensor_depth)?,
                mono_depth: io::read_depth(&cfg.mono_depth)?,
                masks: cfg
                    .masks
                    .iter()
                    .map(|p| io::read_pgm_mask(p))
                    .collect::<Result<Vec<_>>>()?,
                object_mask_index: cfg.object_mask_index,
            };
            let fits = crate::align::fit_frame(&frame)?;
            let aligned = crate::align::align_frame(&frame)?;
            std::fs::create_dir_all(&out)?;
            io::write_depth(&out.join("aligned.f32"), &aligned)?;
            #[derive(Serialize)]
            struct FitReport {
                global: (f64, f64),
                per_mask: Vec<Option<(f64, f64)>>,
            }
            std::fs::write(
                out.join("alignment.json"),
                serde_json::to_string_pretty(&FitReport {
                    global: fits.global,
                    per_mask: fits.per_mask,
                })?,
            )?;
            write_manifest(&out, "align", &raw, common.seed.unwrap_or(0))?;
            Ok(())
        }
        Command::Train {
            config,
            mode,
            steps,
            common,
        } => {
            let out = require_out(&common)?.to_path_buf();
            let raw = read_to_string(&config)?;
            let mut spec: ExperimentSpec = serde_json::from_str(&raw)?;
            if let Some(s) = steps {
                spec.steps = s;
            }
            spec.validate()?;
            let mode = match mode {
                Some(m) => m.parse::<SelectionMode>()?,
                None => spec.modes.first().copied().unwrap_or(SelectionMode::Depth),
            };
            let seed = common.seed.unwrap_or(spec.seeds[0]);
            let setup = prepare_seed(&spec, seed)?;
            let result = run_single(&spec, &setup, mode, seed)?;
            std::fs::create_dir_all(&out)?;
            io::write_scene(&out.join("scene.json"), &result.final_scene)?;
            std::fs::write(out.join("events.jsonl"), &result.event_log)?;
            std::fs::write(
                out.join("metrics.json"),
                serde_json::to_string_pretty(&result.metrics)?,
            )?;
            write_manifest(
                &out,
                "train",
                &format!("{raw}|mode={mode:?}|steps={}", spec.steps),
                seed,
            )?;
            if !common.quiet {
                println!(
                    "trained {:?} seed {} | psnr {:.2} ssim {:.3} d_abs {:.4} d_abs_o {:.4}",
                    mode,
                    seed,
                    result.metrics.psnr,
                    result.metrics.ssim,
                    result.metrics.d_abs,
                    result.metrics.d_abs_o
                );
            }
            Ok(())
        }
        Command::SelectView {
            scene,
            candidates,
            config,
            mode,
            alpha,
            beta,
            common,
        } => {
            let scene_model = io::read_scene(&scene)?;
            let records = io::read_candidates(&candidates)?;
            let cands: Vec<CandidateView> = records
                .iter()
                .map(|r| CandidateView {
                    cam: CameraView::new(r.id, (&r.pose).into(), default_select_intrinsics()),
                    feasible: r.feasible,
                    id: r.id,
                })
                .collect();
            let trains = train_hessians_from_config(&scene_model, config.as_deref())?;
            let mode: SelectionMode = mode.parse()?;
            let (chosen, scores) = select_next_view(
                &cands,
                &scene_model,
                &trains,
                mode,
                alpha,
                beta,
                common.seed.unwrap_or(0),
            )?;
            // Random mode skips scoring; recompute rows for the CSV.
            let rows = if scores.is_empty() {
                score_candidates(&cands, &scene_model, &trains, alpha, beta)?
            } else {
                scores
            };
            let mut csv = String::from("id,color_score,depth_score,combined_score,feasible\n");
            for s in &rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.id, s.color_score, s.depth_score, s.combined_score, s.feasible
                ));
            }
            print!("{csv}");
            println!("chosen,{chosen}");
            if let Some(out) = common.out.as_deref() {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("scores.csv"), &csv)?;
                std::fs::write(out.join("chosen.txt"), format!("{chosen}\n"))?;
                write_manifest(
                    out,
                    "select-view",
                    &format!("{mode:?}:{alpha}:{beta}"),
                    common.seed.unwrap_or(0),
                )?;
            }
            Ok(())
        }
        Command::SelectTouch {
            scene,
            candidates,
            config,
            common,
        } => {
            let scene_model = io::read_scene(&scene)?;
            let raw = read_to_string(&candidates)?;
            let poses: Vec<crate::camera::PoseRecord> = serde_json::from_str(&raw)?;
            let poses: Vec<RigidTransform> = poses.iter().map(|p| p.into()).collect();
            let trains = train_hessians_from_config(&scene_model, config.as_deref())?;
            let sensor = TouchSensorSpec::default();
            let sel = select_next_touch(&poses, &scene_model, &trains.depth, &sensor)?;
            let mut csv = String::from("index,depth_score\n");
            for (i, s) in &sel.scores {
                csv.push_str(&format!("{i},{s}\n"));
            }
            print!("{csv}");
            println!("chosen,{}", sel.index);
            if let Some(out) = common.out.as_deref() {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("touch_scores.csv"), &csv)?;
                write_manifest(out, "select-touch", &raw, common.seed.unwrap_or(0))?;
            }
            Ok(())
        }
        Command::Simulate { config, common } => {
            #[derive(Deserialize)]
            struct SimulateConfig {
                scene: String,
                #[serde(default = "default_n_views")]
                n_views: usize,
                #[serde(default = "default_sim_size")]
                image_size: usize,
                #[serde(default)]
                seed: u64,
            }
            fn default_n_views() -> usize {
                8
            }
            fn default_sim_size() -> usize {
                64
            }
            let out = require_out(&common)?.to_path_buf();
            let raw = read_to_string(&config)?;
            let cfg: SimulateConfig = serde_json::from_str(&raw)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let world = build_scene(&cfg.scene, seed)?;
            let intr = crate::camera::Intrinsics {
                fx: 0.94 * cfg.image_size as f64,
                fy: 0.94 * cfg.image_size as f64,
                cx: (cfg.image_size as f64 - 1.0) / 2.0,
                cy: (cfg.image_size as f64 - 1.0) / 2.0,
                width: cfg.image_size,
                height: cfg.image_size,
            };
            let mut views = sample_view_sphere(
                &world.center,
                world.r_min,
                world.r_max,
                cfg.n_views,
                seed,
                intr,
            );
            std::fs::create_dir_all(&out)?;
            for (k, v) in views.iter_mut().enumerate() {
                v.id = k;
                attach_payload(&world, v, seed.wrapping_add(k as u64));
                let sup = &v.supervision;
                io::write_ppm(
                    &out.join(format!("color_{k:03}.ppm")),
                    sup.color.as_ref().expect("payload color"),
                )?;
                io::write_depth(
                    &out.join(format!("sensor_{k:03}.f32")),
                    sup.sensor_depth.as_ref().expect("payload sensor depth"),
                )?;
                io::write_depth(
                    &out.join(format!("mono_{k:03}.f32")),
                    sup.mono_depth.as_ref().expect("payload mono depth"),
                )?;
                if let Some(aligned) = &sup.aligned_depth {
                    io::write_depth(&out.join(format!("aligned_{k:03}.f32")), aligned)?;
                }
                if let Some(mask) = &sup.object_mask {
                    let gray = Grid {
                        width: mask.width,
                        height: mask.height,
                        data: mask
                            .data
                            .iter()
                            .map(|&b| if b { 1.0 } else { 0.0 })
                            .collect(),
                    };
                    io::write_pgm(&out.join(format!("mask_{k:03}.pgm")), &gray)?;
                }
                io::write_camera(
                    &out.join(format!("camera_{k:03}.json")),
                    &io::CameraRecord::from_view(v),
                )?;
            }
            write_manifest(&out, "simulate", &raw, seed)?;
            if !common.quiet {
                println!("wrote {} views to {}", cfg.n_views, out.display());
            }
            Ok(())
        }
        Command::Experiment { config, common } => {
            let out = require_out(&common)?.to_path_buf();
            let raw = read_to_string(&config)?;
            let mut spec: ExperimentSpec = serde_json::from_str(&raw)?;
            if let Some(seed) = common.seed {
                spec.seeds = vec![seed];
            }
            spec.validate()?;
            let report = run_experiment(&spec)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("report.csv"), report_csv(&report))?;
            std::fs::write(
                out.join("report.json"),
                serde_json::to_string_pretty(&report.aggregates)?,
            )?;
            for run in &report.runs {
                let stem = format!("{:?}_{}", run.mode, run.seed).to_lowercase();
                std::fs::write(out.join(format!("events_{stem}.jsonl")), &run.event_log)?;
                io::write_scene(&out.join(format!("scene_{stem}.json")), &run.final_scene)?;
            }
            write_manifest(&out, "experiment", &raw, spec.seeds[0])?;
            if !common.quiet {
                for agg in &report.aggregates {
                    println!(
                        "{:?}: psnr {:.2}±{:.2} ssim {:.3}±{:.3} d_abs {:.4}±{:.4} d_abs_o {:.4}±{:.4}",
                        agg.mode,
                        agg.mean_psnr,
                        agg.std_psnr,
                        agg.mean_ssim,
                        agg.std_ssim,
                        agg.mean_d_abs,
                        agg.std_d_abs,
                        agg.mean_d_abs_o,
                        agg.std_d_abs_o
                    );
                }
            }
            Ok(())
        }
        Command::Eval {
            scene,
            config,
            common,
        } => {
            #[derive(Deserialize)]
            struct EvalConfig {
                scene: String,
                #[serde(default = "default_eval_heldout")]
                n_heldout: usize,
                #[serde(default = "default_eval_size")]
                image_size: usize,
                #[serde(default)]
                seed: u64,
            }
            fn default_eval_heldout() -> usize {
                30
            }
            fn default_eval_size() -> usize {
                64
            }
            let raw = read_to_string(&config)?;
            let cfg: EvalConfig = serde_json::from_str(&raw)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let spec = ExperimentSpec {
                scene: cfg.scene,
                modes: vec![SelectionMode::Random],
                seeds: vec![seed],
                steps: 0,
                view_add_interval: 1,
                n_start_views: 1,
                n_candidates: 1,
                alpha: 0.1,
                beta: 1.0,
                image_size: cfg.image_size,
                n_heldout: cfg.n_heldout,
                lift_fraction: 0.05,
                max_gaussians: 10,
                infeasible_rate: 0.0,
                depth_mode: None,
                optimize_poses: false,
            };
            let setup = prepare_seed(&spec, seed)?;
            let scene_model = io::read_scene(&scene)?;
            let metrics = compute_metrics(&scene_model, &setup.heldout);
            let json = serde_json::to_string_pretty(&metrics)?;
            println!("{json}");
            if let Some(out) = common.out.as_deref() {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("metrics.json"), &json)?;
                write_manifest(out, "eval", &raw, seed)?;
            }
            Ok(())
        }
    }
}

fn default_select_intrinsics() -> crate::camera::Intrinsics {
    crate::camera::Intrinsics {
        fx: 60.0,
        fy: 60.0,
        cx: 31.5,
        cy: 31.5,
        width: 64,
        height: 64,
    }
}

/// Training-state denominators for selection: accumulated over the cameras
/// listed in the config file, or zero (prior-only) when absent.
fn train_hessians_from_config(
    scene: &crate::scene::SceneModel,
    config: Option<&Path>,
) -> Result<TrainHessians> {
    match config {
        Some(path) => {
            let raw = read_to_string(path)?;
            let records: Vec<io::CameraRecord> = serde_json::from_str(&raw)?;
            let views: Vec<CameraView> = records
                .iter()
                .enumerate()
                .map(|(i, r)| r.to_view(i))
                .collect();
            TrainHessians::accumulate(scene, &views)
        }
        None => Ok(TrainHessians {
            color: HessianDiagonal::zeros(scene.param_count(), FisherChannel::Color),
            depth: HessianDiagonal::zeros(scene.param_count(), FisherChannel::Depth),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("desksplat".to_string())
            .chain(list.iter().map(|s| s.to_string()))
            .collect()
    }

    #[test]
    fn unknown_subcommand_exits_one() {
        assert_eq!(run(args(&["frobnicate"])), 1);
    }

    #[test]
    fn missing_required_flag_exits_one() {
        assert_eq!(run(args(&["render", "--scene", "nope.json"])), 1);
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(run(args(&["render", "--bogus", "1"])), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(args(&["--help"])), 0);
    }

    #[test]
    fn missing_input_file_exits_one() {
        let dir = std::env::temp_dir().join("desksplat-cli-missing");
        std::fs::create_dir_all(&dir).unwrap();
        assert_eq!(
            run(args(&[
                "render",
                "--scene",
                "/nonexistent/scene.json",
                "--camera",
                "/nonexistent/camera.json",
                "--out",
                dir.to_str().unwrap(),
            ])),
            1
        );
    }
}
