//! Reverse-mode gradients of the rendered channels with respect to every
//! scene parameter and the view's pose delta, plus the squared-Jacobian
//! accumulation used for Fisher information.
//!
//! The math follows the forward chain exactly:
//!
//!   p_cam = R_e(phi) p0 + J_l(phi) rho,      p0 = pose * mean
//!   mean2d = pi(p_cam),  J = d pi / d p_cam
//!   Sigma = R(q) D R(q)^T,  D = diag(exp(2 s))
//!   V = W Sigma W^T,        W = R_e R_pose
//!   C = J V J^T + dilation, Lambda = C^{-1}
//!   alpha = sigmoid(o) exp(-1/2 d^T Lambda d)
//!
//! Per pixel, the blend is differentiated with the usual back-to-front
//! suffix trick; per Gaussian, the screen-space adjoints are pulled back
//! through C, Sigma, J and p_cam. Gradients accumulate per fixed-size row
//! chunk and reduce in chunk order, so results are bit-stable regardless of
//! the thread schedule.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{projection_jacobian, CameraView};
use crate::grid::{ColorImage, Grid, ScalarImage};
use crate::math::{quat_rotation_backward, se3_exp_with_derivatives, RigidTransform, Se3ExpDerivatives};
use crate::render::{PreparedGaussian, PreparedScene, TRANSMITTANCE_CUTOFF};
use crate::scene::{covariance, slots, SceneModel, PARAMS_PER_GAUSSIAN};

const CHUNK_ROWS: usize = 8;

/// Per-pixel upstream gradients for each rendered channel.
pub struct ChannelAdjoints {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub mask: ScalarImage,
    pub alpha: ScalarImage,
}

impl ChannelAdjoints {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Grid::filled(width, height, [0.0; 3]),
            depth: Grid::filled(width, height, 0.0),
            mask: Grid::filled(width, height, 0.0),
            alpha: Grid::filled(width, height, 0.0),
        }
    }
}

/// Gradients of a scalar loss with respect to the flat scene parameters and
/// one view's pose delta.
pub struct RenderGrads {
    pub params: Vec<f64>,
    pub pose: [f64; 6],
}

#[derive(Clone, Copy)]
struct Contribution {
    item: u32,
    alpha: f64,
    falloff: f64,
    /// Transmittance before this Gaussian.
    trans: f64,
}

fn collect_contributions(
    prep: &PreparedScene,
    x: usize,
    y: usize,
    out: &mut Vec<Contribution>,
) -> f64 {
    out.clear();
    let px = x as f64;
    let py = y as f64;
    let mut trans = 1.0;
    for &i in &prep.rows[y] {
        if trans < TRANSMITTANCE_CUTOFF {
            break;
        }
        let it = &prep.items[i as usize];
        if x < it.x0 || x > it.x1 {
            continue;
        }
        let Some(falloff) = it.falloff(px, py, prep.max_d2) else {
            continue;
        };
        let alpha = it.opacity * falloff;
        out.push(Contribution {
            item: i,
            alpha,
            falloff,
            trans,
        });
        trans *= 1.0 - alpha;
    }
    trans
}

/// Screen-space adjoints accumulated per prepared Gaussian.
#[derive(Clone, Copy, Default)]
struct ItemAdjoint {
    mean2d: [f64; 2],
    /// dL/dLambda as the symmetric triple (xx, xy, yy).
    conic: [f64; 3],
    depth: f64,
    color: [f64; 3],
    opacity_sig: f64,
    mask_val: f64,
}

/// Per-view context shared by all per-item chains.
struct ViewChain {
    world_to_cam: RigidTransform,
    exp_d: Se3ExpDerivatives,
    base: RigidTransform,
    fx: f64,
    fy: f64,
}

impl ViewChain {
    fn new(cam: &CameraView) -> Self {
        ViewChain {
            world_to_cam: cam.apply_pose_delta(),
            exp_d: se3_exp_with_derivatives(&cam.pose_delta),
            base: cam.pose,
            fx: cam.intrinsics.fx,
            fy: cam.intrinsics.fy,
        }
    }
}

/// Parameter-space result of pulling one item's screen-space adjoints back.
#[derive(Clone, Copy, Default)]
struct ItemParamGrads {
    mean: [f64; 3],
    log_scale: [f64; 3],
    quat: [f64; 4],
    opacity_logit: f64,
    color: [f64; 3],
    mask_logit: f64,
    pose: [f64; 6],
}

/// Pull screen-space adjoints back to the Gaussian's parameters (and, when
/// `want_pose`, the view's pose delta).
fn chain_item(
    ctx: &ViewChain,
    scene: &SceneModel,
    item: &PreparedGaussian,
    acc: &ItemAdjoint,
    want_pose: bool,
) -> ItemParamGrads {
    let g = &scene.gaussians[item.index];
    let mut out = ItemParamGrads::default();

    // Direct channel entries.
    let sig = item.opacity;
    out.opacity_logit = acc.opacity_sig * sig * (1.0 - sig);
    let msig = item.mask;
    out.mask_logit = acc.mask_val * msig * (1.0 - msig);
    out.color = acc.color;

    // dL/dC from dL/dLambda: Lambda = C^{-1} so dC = -Lambda dLambda Lambda.
    let d_lambda = Matrix2::new(acc.conic[0], acc.conic[1], acc.conic[1], acc.conic[2]);
    let d_cov = -(item.conic * d_lambda * item.conic);

    let p = item.p_cam;
    let j = projection_jacobian(ctx.fx, ctx.fy, &p);
    let w_rot = ctx.world_to_cam.rotation;
    let sigma = covariance(g);
    let v_cam = w_rot * sigma * w_rot.transpose();

    let d_v = j.transpose() * d_cov * j;
    let d_sigma = w_rot.transpose() * d_v * w_rot;
    let d_j = d_cov * j * v_cam * 2.0;
    let d_w = d_v * w_rot * sigma * 2.0;

    // Sigma = R D R^T.
    let r = g.rotation_matrix();
    let m = r.transpose() * d_sigma * r;
    for k in 0..3 {
        out.log_scale[k] = m[(k, k)] * 2.0 * (2.0 * g.log_scale[k]).exp();
    }
    let dmat = Matrix3::from_diagonal(&Vector3::new(
        (2.0 * g.log_scale[0]).exp(),
        (2.0 * g.log_scale[1]).exp(),
        (2.0 * g.log_scale[2]).exp(),
    ));
    let d_r = d_sigma * r * dmat * 2.0;
    out.quat = quat_rotation_backward(&g.rotation, &d_r);

    // Camera-point adjoint: projection of the mean, composited depth, and
    // the dependence of J on p_cam.
    let g_mean2d = Vector2::new(acc.mean2d[0], acc.mean2d[1]);
    let mut d_pcam = j.transpose() * g_mean2d;
    d_pcam.z += acc.depth;
    let z2 = p.z * p.z;
    let z3 = z2 * p.z;
    d_pcam.x += d_j[(0, 2)] * (-ctx.fx / z2);
    d_pcam.y += d_j[(1, 2)] * (-ctx.fy / z2);
    d_pcam.z += d_j[(0, 0)] * (-ctx.fx / z2)
        + d_j[(1, 1)] * (-ctx.fy / z2)
        + d_j[(0, 2)] * (2.0 * ctx.fx * p.x / z3)
        + d_j[(1, 2)] * (2.0 * ctx.fy * p.y / z3);

    let d_mean = w_rot.transpose() * d_pcam;
    out.mean = [d_mean.x, d_mean.y, d_mean.z];

    if want_pose {
        // p_cam = R_e p0 + J_l rho with p0 the base-pose camera point;
        // W = R_e R_pose carries the covariance path.
        let p0 = ctx.base.transform_point(&g.mean_vec());
        for k in 0..6 {
            let dp = if k < 3 {
                ctx.exp_d.d_translation[k]
            } else {
                ctx.exp_d.d_rotation[k - 3] * p0 + ctx.exp_d.d_translation[k]
            };
            out.pose[k] = d_pcam.dot(&dp);
        }
        for i in 0..3 {
            let dw = ctx.exp_d.d_rotation[i] * ctx.base.rotation;
            out.pose[3 + i] += d_w.component_mul(&dw).sum();
        }
    }
    out
}

fn scatter(out: &mut [f64], index: usize, g: &ItemParamGrads) {
    let base = index * PARAMS_PER_GAUSSIAN;
    for k in 0..3 {
        out[base + slots::MEAN + k] += g.mean[k];
        out[base + slots::LOG_SCALE + k] += g.log_scale[k];
        out[base + slots::COLOR + k] += g.color[k];
    }
    for k in 0..4 {
        out[base + slots::ROTATION + k] += g.quat[k];
    }
    out[base + slots::OPACITY] += g.opacity_logit;
    out[base + slots::MASK] += g.mask_logit;
}

/// Backpropagate per-pixel channel adjoints to scene parameters and the
/// view's pose delta.
pub fn render_backward(
    scene: &SceneModel,
    cam: &CameraView,
    prep: &PreparedScene,
    adj: &ChannelAdjoints,
) -> RenderGrads {
    let n_items = prep.items.len();
    let height = prep.height;
    let n_chunks = height.div_ceil(CHUNK_ROWS);

    let partials: Vec<Vec<ItemAdjoint>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![ItemAdjoint::default(); n_items];
            let mut contribs = Vec::with_capacity(64);
            let y0 = chunk * CHUNK_ROWS;
            let y1 = ((chunk + 1) * CHUNK_ROWS).min(height);
            for y in y0..y1 {
                for x in 0..prep.width {
                    let pi = y * prep.width + x;
                    let gc = adj.color.data[pi];
                    let gd = adj.depth.data[pi];
                    let gm = adj.mask.data[pi];
                    let ga = adj.alpha.data[pi];
                    if gc == [0.0; 3] && gd == 0.0 && gm == 0.0 && ga == 0.0 {
                        continue;
                    }
                    let t_final = collect_contributions(prep, x, y, &mut contribs);
                    if contribs.is_empty() {
                        continue;
                    }
                    let bg_dot = gc[0] * prep.background[0]
                        + gc[1] * prep.background[1]
                        + gc[2] * prep.background[2];
                    let mut suffix = bg_dot * t_final;
                    let px = x as f64;
                    let py = y as f64;
                    for c in contribs.iter().rev() {
                        let it = &prep.items[c.item as usize];
                        let u = gc[0] * it.color[0]
                            + gc[1] * it.color[1]
                            + gc[2] * it.color[2]
                            + gd * it.depth
                            + gm * it.mask
                            + ga;
                        let w = c.alpha * c.trans;
                        let d_alpha = u * c.trans - suffix / (1.0 - c.alpha);
                        suffix += u * w;

                        let a = &mut acc[c.item as usize];
                        for k in 0..3 {
                            a.color[k] += w * gc[k];
                        }
                        a.depth += w * gd;
                        a.mask_val += w * gm;
                        a.opacity_sig += d_alpha * c.falloff;

                        let d_falloff = d_alpha * it.opacity;
                        let dx = px - it.mean2d.x;
                        let dy = py - it.mean2d.y;
                        let lx = it.conic[(0, 0)] * dx + it.conic[(0, 1)] * dy;
                        let ly = it.conic[(1, 0)] * dx + it.conic[(1, 1)] * dy;
                        let s = d_falloff * c.falloff;
                        a.mean2d[0] += s * lx;
                        a.mean2d[1] += s * ly;
                        a.conic[0] += s * (-0.5) * dx * dx;
                        a.conic[1] += s * (-0.5) * dx * dy;
                        a.conic[2] += s * (-0.5) * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![ItemAdjoint::default(); n_items];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            for k in 0..2 {
                t.mean2d[k] += p.mean2d[k];
            }
            for k in 0..3 {
                t.conic[k] += p.conic[k];
                t.color[k] += p.color[k];
            }
            t.depth += p.depth;
            t.opacity_sig += p.opacity_sig;
            t.mask_val += p.mask_val;
        }
    }

    let ctx = ViewChain::new(cam);
    let mut params = vec![0.0; scene.param_count()];
    let mut pose = [0.0; 6];
    for (item, acc) in prep.items.iter().zip(&total) {
        let g = chain_item(&ctx, scene, item, acc, true);
        scatter(&mut params, item.index, &g);
        for k in 0..6 {
            pose[k] += g.pose[k];
        }
    }
    RenderGrads { params, pose }
}

/// Rasterizer output head used for Fisher information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherChannel {
    Color,
    Depth,
    Mask,
}

/// Accumulate sum over output pixel-channels of (d output / d w_i)^2 into
/// `out` (length = scene parameter count). No ground truth is involved.
pub fn accumulate_squared_jacobian(
    scene: &SceneModel,
    cam: &CameraView,
    prep: &PreparedScene,
    channel: FisherChannel,
    out: &mut [f64],
) {
    assert_eq!(out.len(), scene.param_count());
    let n_items = prep.items.len();
    if n_items == 0 {
        return;
    }
    let ctx = ViewChain::new(cam);

    // The map (mean2d adj, conic adj, depth adj) -> 10 geometry parameters is
    // linear per item; build its 6 basis responses once.
    let chains: Vec<[[f64; 10]; 6]> = prep
        .items
        .iter()
        .map(|item| {
            let mut basis = [[0.0; 10]; 6];
            for (k, row) in basis.iter_mut().enumerate() {
                let mut acc = ItemAdjoint::default();
                match k {
                    0 => acc.mean2d[0] = 1.0,
                    1 => acc.mean2d[1] = 1.0,
                    2 => acc.conic[0] = 1.0,
                    3 => acc.conic[1] = 1.0,
                    4 => acc.conic[2] = 1.0,
                    _ => acc.depth = 1.0,
                }
                let g = chain_item(&ctx, scene, item, &acc, false);
                row[..3].copy_from_slice(&g.mean);
                row[3..6].copy_from_slice(&g.log_scale);
                row[6..10].copy_from_slice(&g.quat);
            }
            basis
        })
        .collect();

    let n_outputs = match channel {
        FisherChannel::Color => 3,
        _ => 1,
    };
    let height = prep.height;
    let n_chunks = height.div_ceil(CHUNK_ROWS);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut h = vec![0.0f64; out.len()];
            let mut contribs = Vec::with_capacity(64);
            let y0 = chunk * CHUNK_ROWS;
            let y1 = ((chunk + 1) * CHUNK_ROWS).min(height);
            for y in y0..y1 {
                for x in 0..prep.width {
                    let t_final = collect_contributions(prep, x, y, &mut contribs);
                    if contribs.is_empty() {
                        continue;
                    }
                    let px = x as f64;
                    let py = y as f64;
                    for o in 0..n_outputs {
                        // Suffix state for this single output.
                        let mut suffix = match channel {
                            FisherChannel::Color => prep.background[o] * t_final,
                            _ => 0.0,
                        };
                        for c in contribs.iter().rev() {
                            let it = &prep.items[c.item as usize];
                            let v = match channel {
                                FisherChannel::Color => it.color[o],
                                FisherChannel::Depth => it.depth,
                                FisherChannel::Mask => it.mask,
                            };
                            let w = c.alpha * c.trans;
                            let d_alpha = v * c.trans - suffix / (1.0 - c.alpha);
                            suffix += v * w;

                            let base = it.index * PARAMS_PER_GAUSSIAN;
                            // Direct (non-geometry) entries.
                            match channel {
                                FisherChannel::Color => {
                                    let d = w;
                                    h[base + slots::COLOR + o] += d * d;
                                }
                                FisherChannel::Mask => {
                                    let d = w * it.mask * (1.0 - it.mask);
                                    h[base + slots::MASK] += d * d;
                                }
                                FisherChannel::Depth => {}
                            }
                            let d_op = d_alpha * c.falloff * it.opacity * (1.0 - it.opacity);
                            h[base + slots::OPACITY] += d_op * d_op;

                            // Geometry via the precomputed linear chain.
                            let d_falloff = d_alpha * it.opacity;
                            let s = d_falloff * c.falloff;
                            let dx = px - it.mean2d.x;
                            let dy = py - it.mean2d.y;
                            let lx = it.conic[(0, 0)] * dx + it.conic[(0, 1)] * dy;
                            let ly = it.conic[(1, 0)] * dx + it.conic[(1, 1)] * dy;
                            let input = [
                                s * lx,
                                s * ly,
                                s * (-0.5) * dx * dx,
                                s * (-0.5) * dx * dy,
                                s * (-0.5) * dy * dy,
                                if matches!(channel, FisherChannel::Depth) {
                                    w
                                } else {
                                    0.0
                                },
                            ];
                            let chain = &chains[c.item as usize];
                            for p in 0..10 {
                                let mut v = 0.0;
                                for (k, inp) in input.iter().enumerate() {
                                    v += inp * chain[k][p];
                                }
                                h[base + p] += v * v;
                            }
                        }
                    }
                }
            }
            h
        })
        .collect();

    for part in partials {
        for (o, p) in out.iter_mut().zip(part) {
            *o += p;
        }
    }
}
