//! Optimization loop: per-step loss assembly, Adam-style moment updates per
//! parameter group, camera-pose optimization, opacity pruning, and scheduled
//! view insertion.
//!
//! Everything is deterministic given the config seed: views are visited
//! round-robin, pixel kernels reduce in fixed order, and selection RNG is
//! seeded per event.

use serde::{Deserialize, Serialize};

use crate::camera::CameraView;
use crate::fisher::{select_next_view, CandidateScore, CandidateView, SelectionMode, TrainHessians};
use crate::gradients::{backward, LossBreakdown, LossConfig};
use crate::scene::{slots, SceneModel, PARAMS_PER_GAUSSIAN};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// A view-selection event fires after every this many steps.
    pub view_add_interval: usize,
    /// Cadence of touch insertion during the touch-refinement phase.
    pub touch_add_interval: usize,
    /// Position learning rate per unit scene extent (scaled at startup).
    pub lr_mean_base: f64,
    pub lr_log_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_mask: f64,
    pub lr_pose: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub prune_opacity_threshold: f64,
    /// 0 disables pruning.
    pub prune_interval: usize,
    pub optimize_poses: bool,
    pub seed: u64,
    /// Weights for Fisher-combined selection.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 6000,
            view_add_interval: 2000,
            touch_add_interval: 100,
            lr_mean_base: 1.6e-4,
            lr_log_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_mask: 2.5e-3,
            lr_pose: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            prune_opacity_threshold: 0.005,
            prune_interval: 500,
            optimize_poses: false,
            seed: 0,
            alpha: 0.1,
            beta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_add_interval == 0 || self.touch_add_interval == 0 {
            return Err(Error::InvalidInput("intervals must be positive".into()));
        }
        let rates = [
            self.lr_mean_base,
            self.lr_log_scale,
            self.lr_rotation,
            self.lr_opacity,
            self.lr_color,
            self.lr_mask,
            self.lr_pose,
        ];
        if rates.iter().any(|r| *r < 0.0) {
            return Err(Error::InvalidInput("learning rates must be >= 0".into()));
        }
        Ok(())
    }
}

/// One line of the training event log (serialized as line-delimited JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum LogEvent {
    Step {
        step: usize,
        view_id: usize,
        losses: LossBreakdown,
    },
    Select {
        step: usize,
        mode: SelectionMode,
        chosen: Option<usize>,
        scores: Vec<CandidateScore>,
        error: Option<String>,
    },
    Prune {
        step: usize,
        removed: usize,
    },
    TouchAdd {
        step: usize,
        candidate: usize,
        added_gaussians: usize,
        view_id: usize,
        score: f64,
    },
}

/// Remove Gaussians whose opacity falls below `threshold`; returns the
/// number removed and the kept indices (for optimizer-state compaction).
pub fn prune_scene(scene: &mut SceneModel, threshold: f64) -> (usize, Vec<usize>) {
    let kept: Vec<usize> = (0..scene.gaussians.len())
        .filter(|&i| scene.gaussians[i].opacity() >= threshold)
        .collect();
    let removed = scene.gaussians.len() - kept.len();
    if removed > 0 {
        scene.gaussians = kept.iter().map(|&i| scene.gaussians[i].clone()).collect();
    }
    (removed, kept)
}

/// Supplies candidate sets and supervision payloads during training.
///
/// Candidate sets must depend only on the event index (never on the scene or
/// the selection mode) so that A/B runs consume identical candidates.
pub trait ViewProvider {
    fn candidates(&mut self, event_index: usize) -> Vec<CandidateView>;
    /// Full supervision payload for the chosen candidate.
    fn supervised_view(&mut self, event_index: usize, chosen: &CandidateView) -> CameraView;
}

pub struct Trainer {
    pub scene: SceneModel,
    pub views: Vec<CameraView>,
    pub config: TrainConfig,
    pub loss_config: LossConfig,
    pub events: Vec<LogEvent>,
    /// Position learning rate after extent scaling (decays during training).
    lr_mean0: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    pose_m: Vec<[f64; 6]>,
    pose_v: Vec<[f64; 6]>,
}

impl Trainer {
    pub fn new(
        scene: SceneModel,
        views: Vec<CameraView>,
        config: TrainConfig,
        loss_config: LossConfig,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::InvalidInput("training needs at least one view".into()));
        }
        config.validate()?;
        loss_config.validate()?;
        let extent = scene.extent();
        let lr_mean0 = config.lr_mean_base * if extent > 1e-9 { extent } else { 1.0 };
        let n = scene.param_count();
        let n_views = views.len();
        Ok(Trainer {
            scene,
            views,
            config,
            loss_config,
            events: Vec::new(),
            lr_mean0,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            pose_m: vec![[0.0; 6]; n_views],
            pose_v: vec![[0.0; 6]; n_views],
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Grow optimizer state after Gaussians were appended to the scene.
    pub fn sync_param_state(&mut self) {
        let n = self.scene.param_count();
        if self.m.len() < n {
            self.m.resize(n, 0.0);
            self.v.resize(n, 0.0);
        }
    }

    pub fn append_view(&mut self, view: CameraView) {
        self.views.push(view);
        self.pose_m.push([0.0; 6]);
        self.pose_v.push([0.0; 6]);
    }

    fn slot_lr(&self, slot: usize) -> f64 {
        let c = &self.config;
        match slot {
            s if s < slots::LOG_SCALE => {
                // Exponential decay on positions to 1% over the full run.
                let t = self.step as f64 / self.config.total_steps.max(1) as f64;
                self.lr_mean0 * 0.01f64.powf(t.min(1.0))
            }
            s if s < slots::ROTATION => c.lr_log_scale,
            s if s < slots::OPACITY => c.lr_rotation,
            s if s == slots::OPACITY => c.lr_opacity,
            s if s < slots::MASK => c.lr_color,
            _ => c.lr_mask,
        }
    }

    /// One optimization step on the next round-robin view.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let view_index = self.step % self.views.len();
        let res = backward(&self.scene, &self.views[view_index], &self.loss_config)?;
        if !res.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!(
                    "view {} losses {:?}",
                    self.views[view_index].id, res.breakdown
                ),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);

        let mut params = self.scene.flatten();
        for (i, g) in res.param_grads.iter().enumerate() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let lr = self.slot_lr(i % PARAMS_PER_GAUSSIAN);
            params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        self.scene.unflatten(&params);
        for g in &mut self.scene.gaussians {
            g.normalize_rotation();
        }

        if self.config.optimize_poses && !self.views[view_index].depth_only {
            let c = &self.config;
            let m = &mut self.pose_m[view_index];
            let v = &mut self.pose_v[view_index];
            let delta = &mut self.views[view_index].pose_delta;
            for k in 0..6 {
                let g = res.pose_grad[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
                delta[k] -= c.lr_pose * (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
            }
        }

        self.events.push(LogEvent::Step {
            step: self.step,
            view_id: self.views[view_index].id,
            losses: res.breakdown,
        });
        Ok(res.breakdown)
    }

    /// Prune low-opacity Gaussians, keeping optimizer rows aligned.
    pub fn prune(&mut self) -> usize {
        let (removed, kept) = prune_scene(&mut self.scene, self.config.prune_opacity_threshold);
        if removed > 0 {
            let take = |buf: &Vec<f64>| -> Vec<f64> {
                let mut out = Vec::with_capacity(kept.len() * PARAMS_PER_GAUSSIAN);
                for &gi in &kept {
                    let base = gi * PARAMS_PER_GAUSSIAN;
                    out.extend_from_slice(&buf[base..base + PARAMS_PER_GAUSSIAN]);
                }
                out
            };
            self.m = take(&self.m);
            self.v = take(&self.v);
            self.events.push(LogEvent::Prune {
                step: self.step,
                removed,
            });
        }
        removed
    }

    /// Train to `total_steps`, selecting and inserting a new view at every
    /// `view_add_interval` via the provider. Selection failures are logged
    /// and training continues.
    pub fn run_training(
        &mut self,
        mode: SelectionMode,
        provider: &mut dyn ViewProvider,
    ) -> Result<()> {
        let total = self.config.total_steps;
        let mut event_index = 0usize;
        while self.step < total {
            self.train_step()?;
            if self.config.prune_interval > 0 && self.step % self.config.prune_interval == 0 {
                self.prune();
            }
            if self.step % self.config.view_add_interval == 0 && self.step < total {
                self.run_selection_event(mode, provider, event_index)?;
                event_index += 1;
            }
        }
        Ok(())
    }

    fn run_selection_event(
        &mut self,
        mode: SelectionMode,
        provider: &mut dyn ViewProvider,
        event_index: usize,
    ) -> Result<()> {
        let candidates = provider.candidates(event_index);
        let selection = (|| -> Result<(usize, Vec<CandidateScore>)> {
            let trains = TrainHessians::accumulate(&self.scene, &self.views)?;
            select_next_view(
                &candidates,
                &self.scene,
                &trains,
                mode,
                self.config.alpha,
                self.config.beta,
                self.config.seed ^ (event_index as u64).wrapping_mul(0x9e3779b97f4a7c15),
            )
        })();
        match selection {
            Ok((chosen_id, scores)) => {
                let chosen = candidates
                    .iter()
                    .find(|c| c.id == chosen_id)
                    .expect("selected id comes from the candidate set");
                let view = provider.supervised_view(event_index, chosen);
                self.events.push(LogEvent::Select {
                    step: self.step,
                    mode,
                    chosen: Some(view.id),
                    scores,
                    error: None,
                });
                self.append_view(view);
            }
            Err(Error::NoFeasibleView) => {
                self.events.push(LogEvent::Select {
                    step: self.step,
                    mode,
                    chosen: None,
                    scores: Vec::new(),
                    error: Some("no feasible view".into()),
                });
            }
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Serialize the event log as line-delimited JSON.
    pub fn event_log(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("log events serialize"));
            out.push('\n');
        }
        out
    }
}
