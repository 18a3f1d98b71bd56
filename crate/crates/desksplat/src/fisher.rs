//! Fisher-information scoring of candidate views and greedy next-best-view
//! selection.
//!
//! The information a candidate view carries about the scene parameters is
//! approximated by the diagonal of its Gauss-Newton Hessian (per-parameter
//! sums of squared rendering Jacobians), and a candidate's score is the
//! trace of its diagonal against the regularized inverse of the training
//! set's accumulated diagonal: sum_i h_acq_i / (h_train_i + lambda). No
//! ground-truth images are involved anywhere.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::gradients::{accumulate_squared_jacobian, FisherChannel};
use crate::render::prepare;
use crate::scene::{SceneModel, PARAMS_PER_GAUSSIAN};
use crate::{Error, Result};

/// Regularizer added to the training diagonal's denominator.
pub const DEFAULT_LAMBDA_PRIOR: f64 = 1e-6;

/// Diagonal Gauss-Newton Hessian of one rasterizer head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HessianDiagonal {
    /// One non-negative entry per flat scene parameter.
    pub values: Vec<f64>,
    pub lambda_prior: f64,
    pub channel: FisherChannel,
}

impl HessianDiagonal {
    pub fn zeros(param_count: usize, channel: FisherChannel) -> Self {
        HessianDiagonal {
            values: vec![0.0; param_count],
            lambda_prior: DEFAULT_LAMBDA_PRIOR,
            channel,
        }
    }

    /// Elementwise sum; lengths and channels must match.
    pub fn add(&mut self, other: &HessianDiagonal) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::DimensionMismatch(format!(
                "hessian diagonals of length {} vs {}",
                self.values.len(),
                other.values.len()
            )));
        }
        if self.channel != other.channel {
            return Err(Error::InvalidInput(
                "cannot add hessian diagonals of different channels".into(),
            ));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Zero every entry whose per-Gaussian slot is not kept (e.g. restrict
    /// the information measure to geometry parameters).
    pub fn mask_slots(&mut self, keep: &[bool; PARAMS_PER_GAUSSIAN]) {
        for (i, v) in self.values.iter_mut().enumerate() {
            if !keep[i % PARAMS_PER_GAUSSIAN] {
                *v = 0.0;
            }
        }
    }

    /// Zero whole per-Gaussian blocks (e.g. restrict to object Gaussians).
    pub fn mask_gaussians(&mut self, keep: &[bool]) {
        for (gi, keep_g) in keep.iter().enumerate() {
            if !keep_g {
                let base = gi * PARAMS_PER_GAUSSIAN;
                for v in &mut self.values[base..base + PARAMS_PER_GAUSSIAN] {
                    *v = 0.0;
                }
            }
        }
    }
}

/// A candidate pose for acquisition; carries no supervision payload.
#[derive(Clone, Debug)]
pub struct CandidateView {
    pub cam: CameraView,
    /// Simulated kinematic feasibility of reaching this pose.
    pub feasible: bool,
    pub id: usize,
}

/// Squared-Jacobian diagonal of one view's chosen rasterizer head.
pub fn compute_hessian_diag(
    scene: &SceneModel,
    cam: &CameraView,
    channel: FisherChannel,
) -> HessianDiagonal {
    let prep = prepare(scene, cam);
    let mut out = HessianDiagonal::zeros(scene.param_count(), channel);
    accumulate_squared_jacobian(scene, cam, &prep, channel, &mut out.values);
    out
}

/// Elementwise sum of per-view diagonals over the training set.
pub fn accumulate_train_hessian(
    scene: &SceneModel,
    views: &[CameraView],
    channel: FisherChannel,
) -> Result<HessianDiagonal> {
    if views.is_empty() {
        return Err(Error::InvalidInput(
            "training hessian needs at least one view".into(),
        ));
    }
    let mut total = HessianDiagonal::zeros(scene.param_count(), channel);
    for v in views {
        total.add(&compute_hessian_diag(scene, v, channel))?;
    }
    Ok(total)
}

/// Trace objective: sum_i h_acq_i / (h_train_i + lambda).
pub fn score_view(h_acq: &HessianDiagonal, h_train: &HessianDiagonal) -> Result<f64> {
    if h_acq.values.len() != h_train.values.len() {
        return Err(Error::DimensionMismatch(format!(
            "acquisition diagonal length {} vs training {}",
            h_acq.values.len(),
            h_train.values.len()
        )));
    }
    let lambda = h_train.lambda_prior;
    Ok(h_acq
        .values
        .iter()
        .zip(&h_train.values)
        .map(|(a, t)| a / (t + lambda))
        .sum())
}

/// Training-set diagonals for both information channels.
pub struct TrainHessians {
    pub color: HessianDiagonal,
    pub depth: HessianDiagonal,
}

impl TrainHessians {
    pub fn accumulate(scene: &SceneModel, views: &[CameraView]) -> Result<Self> {
        Ok(TrainHessians {
            color: accumulate_train_hessian(scene, views, FisherChannel::Color)?,
            depth: accumulate_train_hessian(scene, views, FisherChannel::Depth)?,
        })
    }
}

/// Linear combination alpha * I_color + beta * I_depth for one candidate.
pub fn combined_gain(
    candidate: &CandidateView,
    scene: &SceneModel,
    h_train_color: &HessianDiagonal,
    h_train_depth: &HessianDiagonal,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let hc = compute_hessian_diag(scene, &candidate.cam, FisherChannel::Color);
    let hd = compute_hessian_diag(scene, &candidate.cam, FisherChannel::Depth);
    Ok(alpha * score_view(&hc, h_train_color)? + beta * score_view(&hd, h_train_depth)?)
}

/// How the next view is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Random,
    Color,
    Depth,
    Combined,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SelectionMode::Random),
            "color" => Ok(SelectionMode::Color),
            "depth" => Ok(SelectionMode::Depth),
            "combined" => Ok(SelectionMode::Combined),
            other => Err(Error::InvalidInput(format!(
                "unknown selection mode '{other}' (random|color|depth|combined)"
            ))),
        }
    }
}

/// Scores for one candidate, as emitted to logs and CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CandidateScore {
    pub id: usize,
    pub color_score: f64,
    pub depth_score: f64,
    pub combined_score: f64,
    pub feasible: bool,
}

/// Score every candidate on both channels.
pub fn score_candidates(
    candidates: &[CandidateView],
    scene: &SceneModel,
    trains: &TrainHessians,
    alpha: f64,
    beta: f64,
) -> Result<Vec<CandidateScore>> {
    candidates
        .iter()
        .map(|c| {
            let hc = compute_hessian_diag(scene, &c.cam, FisherChannel::Color);
            let hd = compute_hessian_diag(scene, &c.cam, FisherChannel::Depth);
            let color_score = score_view(&hc, &trains.color)?;
            let depth_score = score_view(&hd, &trains.depth)?;
            Ok(CandidateScore {
                id: c.id,
                color_score,
                depth_score,
                combined_score: alpha * color_score + beta * depth_score,
                feasible: c.feasible,
            })
        })
        .collect()
}

/// Pick the next view: uniform over feasible candidates in random mode,
/// otherwise the highest-scoring feasible candidate (ties to the lower id).
///
/// Returns the chosen candidate id and the scores of all candidates (empty
/// in random mode).
pub fn select_next_view(
    candidates: &[CandidateView],
    scene: &SceneModel,
    trains: &TrainHessians,
    mode: SelectionMode,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<(usize, Vec<CandidateScore>)> {
    let feasible: Vec<&CandidateView> = candidates.iter().filter(|c| c.feasible).collect();
    if feasible.is_empty() {
        return Err(Error::NoFeasibleView);
    }
    if mode == SelectionMode::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = rng.gen_range(0..feasible.len());
        return Ok((feasible[pick].id, Vec::new()));
    }
    let scores = score_candidates(candidates, scene, trains, alpha, beta)?;
    let key = |s: &CandidateScore| match mode {
        SelectionMode::Color => s.color_score,
        SelectionMode::Depth => s.depth_score,
        SelectionMode::Combined => s.combined_score,
        SelectionMode::Random => unreachable!(),
    };
    let mut ranked: Vec<&CandidateScore> = scores.iter().collect();
    ranked.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.id.cmp(&b.id)));
    let chosen = ranked
        .iter()
        .find(|s| s.feasible)
        .map(|s| s.id)
        .ok_or(Error::NoFeasibleView)?;
    Ok((chosen, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::math::RigidTransform;
    use crate::scene::Gaussian3D;
    use approx::assert_relative_eq;

    fn diag(values: Vec<f64>, lambda: f64) -> HessianDiagonal {
        HessianDiagonal {
            values,
            lambda_prior: lambda,
            channel: FisherChannel::Depth,
        }
    }

    #[test]
    fn score_of_zero_acquisition_is_zero() {
        let acq = diag(vec![0.0; 30], 1e-6);
        let train = diag(vec![1.0; 30], 1e-6);
        assert_eq!(score_view(&acq, &train).unwrap(), 0.0);
    }

    #[test]
    fn score_of_equal_diagonals_approaches_param_count() {
        let acq = diag(vec![2.5; 45], 1e-12);
        let mut train = diag(vec![2.5; 45], 1e-12);
        train.lambda_prior = 1e-12;
        let s = score_view(&acq, &train).unwrap();
        assert_relative_eq!(s, 45.0, epsilon = 1e-9);
    }

    #[test]
    fn score_two_parameter_example() {
        let acq = diag(vec![4.0, 1.0], 1.0);
        let train = diag(vec![1.0, 3.0], 1.0);
        assert_relative_eq!(score_view(&acq, &train).unwrap(), 2.25, epsilon = 1e-12);
    }

    #[test]
    fn score_length_mismatch_errors() {
        let acq = diag(vec![1.0; 4], 1e-6);
        let train = diag(vec![1.0; 5], 1e-6);
        assert!(score_view(&acq, &train).is_err());
    }

    #[test]
    fn score_monotone_in_acquisition() {
        let train = diag(vec![0.5, 2.0, 0.1], 1e-6);
        let base = diag(vec![1.0, 1.0, 1.0], 1e-6);
        let s0 = score_view(&base, &train).unwrap();
        for i in 0..3 {
            let mut bumped = base.clone();
            bumped.values[i] += 0.7;
            assert!(score_view(&bumped, &train).unwrap() > s0);
        }
    }

    #[test]
    fn growing_train_hessian_never_raises_scores() {
        let acq = diag(vec![1.0, 2.0, 3.0], 1e-6);
        let train = diag(vec![0.5, 0.5, 0.5], 1e-6);
        let s0 = score_view(&acq, &train).unwrap();
        let mut grown = train.clone();
        grown.values[1] += 1.0;
        assert!(score_view(&acq, &grown).unwrap() <= s0);
    }

    fn tiny_scene_and_views() -> (SceneModel, Vec<CameraView>) {
        let mut scene = SceneModel::new([0.1; 3]);
        scene.gaussians.push(Gaussian3D {
            mean: [0.0, 0.0, 1.0],
            log_scale: [-2.5; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.4,
            color: [0.8, 0.2, 0.4],
            mask_logit: 0.5,
        });
        let intr = Intrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: 5.5,
            cy: 5.5,
            width: 12,
            height: 12,
        };
        let views = (0..3)
            .map(|i| {
                let eye = nalgebra::Vector3::new(0.3 * i as f64, -0.2, -0.5 - 0.3 * i as f64);
                CameraView::new(
                    i,
                    RigidTransform::look_at(
                        &eye,
                        &nalgebra::Vector3::new(0.0, 0.0, 1.0),
                        &nalgebra::Vector3::z(),
                    ),
                    intr,
                )
            })
            .collect();
        (scene, views)
    }

    #[test]
    fn duplicated_view_doubles_the_diagonal() {
        let (scene, views) = tiny_scene_and_views();
        let single = accumulate_train_hessian(&scene, &views[..1], FisherChannel::Color).unwrap();
        let double = accumulate_train_hessian(
            &scene,
            &[views[0].clone(), views[0].clone()],
            FisherChannel::Color,
        )
        .unwrap();
        for (d, s) in double.values.iter().zip(&single.values) {
            assert_relative_eq!(*d, 2.0 * s, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn culled_scene_has_zero_diagonal() {
        let (mut scene, views) = tiny_scene_and_views();
        // Put the Gaussian far behind every camera.
        scene.gaussians[0].mean = [0.0, 0.0, -100.0];
        let h = compute_hessian_diag(&scene, &views[0], FisherChannel::Depth);
        assert!(h.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combined_gain_degenerate_weights() {
        let (scene, views) = tiny_scene_and_views();
        let trains = TrainHessians::accumulate(&scene, &views[..2]).unwrap();
        let cand = CandidateView {
            cam: views[2].clone(),
            feasible: true,
            id: 9,
        };
        let c = combined_gain(&cand, &scene, &trains.color, &trains.depth, 1.0, 0.0).unwrap();
        let d = combined_gain(&cand, &scene, &trains.color, &trains.depth, 0.0, 1.0).unwrap();
        let both = combined_gain(&cand, &scene, &trains.color, &trains.depth, 0.1, 1.0).unwrap();
        assert_relative_eq!(both, 0.1 * c + d, epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn selection_respects_feasibility_and_ties() {
        let (scene, views) = tiny_scene_and_views();
        let trains = TrainHessians::accumulate(&scene, &views[..1]).unwrap();
        // Two identical candidate poses: scores tie, lower id wins.
        let mk = |id, feasible| CandidateView {
            cam: views[2].clone(),
            feasible,
            id,
        };
        let (chosen, scores) = select_next_view(
            &[mk(7, true), mk(3, true)],
            &scene,
            &trains,
            SelectionMode::Depth,
            0.1,
            1.0,
            0,
        )
        .unwrap();
        assert_eq!(chosen, 3);
        assert_eq!(scores.len(), 2);

        // Best-scoring candidate infeasible: next feasible one returned.
        let (chosen, _) = select_next_view(
            &[mk(1, false), mk(2, true)],
            &scene,
            &trains,
            SelectionMode::Depth,
            0.1,
            1.0,
            0,
        )
        .unwrap();
        assert_eq!(chosen, 2);

        // All infeasible.
        assert!(matches!(
            select_next_view(
                &[mk(1, false)],
                &scene,
                &trains,
                SelectionMode::Depth,
                0.1,
                1.0,
                0
            ),
            Err(Error::NoFeasibleView)
        ));
    }

    #[test]
    fn random_selection_is_seeded_and_feasible() {
        let (scene, views) = tiny_scene_and_views();
        let trains = TrainHessians::accumulate(&scene, &views[..1]).unwrap();
        let candidates: Vec<CandidateView> = (0..5)
            .map(|id| CandidateView {
                cam: views[2].clone(),
                feasible: id != 2,
                id,
            })
            .collect();
        let (a, _) =
            select_next_view(&candidates, &scene, &trains, SelectionMode::Random, 0.1, 1.0, 11)
                .unwrap();
        let (b, _) =
            select_next_view(&candidates, &scene, &trains, SelectionMode::Random, 0.1, 1.0, 11)
                .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, 2, "infeasible candidate must never be chosen");
    }

    #[test]
    fn scores_invariant_under_candidate_reordering() {
        let (scene, views) = tiny_scene_and_views();
        let trains = TrainHessians::accumulate(&scene, &views[..1]).unwrap();
        let mk = |id: usize, k: usize| CandidateView {
            cam: views[k].clone(),
            feasible: true,
            id,
        };
        let fwd =
            score_candidates(&[mk(0, 1), mk(1, 2)], &scene, &trains, 0.1, 1.0).unwrap();
        let rev =
            score_candidates(&[mk(1, 2), mk(0, 1)], &scene, &trains, 0.1, 1.0).unwrap();
        for s in &fwd {
            let other = rev.iter().find(|r| r.id == s.id).unwrap();
            assert_eq!(s.depth_score, other.depth_score);
            assert_eq!(s.color_score, other.color_score);
        }
    }
}
