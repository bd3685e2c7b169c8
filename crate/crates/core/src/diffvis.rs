//! Differentiable visibility scoring.
//!
//! A sampled target point gets a per-sensor score in [0, 1]: the product of
//! three smooth windows over the image width, image height and depth range.
//! With occlusion awareness, an in-frustum point whose depth disagrees with the
//! rendered depth buffer by more than `kappa` scores exactly zero. Scores from
//! several sensors combine as `1 - prod(1 - score)`, and the objective is the
//! mean combined score over all sampled points, averaged over frames.
//!
//! Gradients are analytic with respect to each sensor's rail parameters
//! `(t, alpha, beta)`. The depth buffer, the occlusion gate and the sampled
//! points are constants of the differentiation.

use std::f64::consts::{PI, TAU};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{
    camera_to_world, camera_to_world_d_pitch, camera_to_world_d_yaw, in_frustum, CameraMatrices,
    ImagePoint, Intrinsics, DEGENERATE_DEPTH,
};
use crate::error::{Error, Result};
use crate::raster::{depth_lookup, render_frame, DepthBuffer};
use crate::scene::{
    rail_to_canonical, sample_surface_points, sigmoid, sigmoid_grad, RailPose, Scenario, Vec3,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffParams {
    /// Window transition rate.
    pub gamma: f64,
    /// Occlusion disparity threshold, meters.
    pub kappa: f64,
}

impl Default for DiffParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            kappa: 0.5,
        }
    }
}

impl DiffParams {
    pub fn validate(&self) -> Result<()> {
        if self.gamma > 0.0 && self.kappa > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "gamma and kappa must be positive, got {self:?}"
            )))
        }
    }
}

/// Smooth indicator of `z` in `[z0, z1]`.
pub fn window(z: f64, gamma: f64, z0: f64, z1: f64) -> f64 {
    let (a, b) = (gamma * (z - z0), gamma * (z - z1));
    if b > 0.0 {
        // Both terms near 1: use the complementary form to avoid cancellation.
        sigmoid(-b) - sigmoid(-a)
    } else {
        sigmoid(a) - sigmoid(b)
    }
}

/// d/dz of [`window`].
pub fn window_grad(z: f64, gamma: f64, z0: f64, z1: f64) -> f64 {
    gamma * (sigmoid_grad(gamma * (z - z0)) - sigmoid_grad(gamma * (z - z1)))
}

/// Frustum-only visibility score of a projected point.
pub fn vis_score(ip: &ImagePoint, intr: &Intrinsics, params: &DiffParams) -> f64 {
    let g = params.gamma;
    window(ip.u, g, 0.0, f64::from(intr.width))
        * window(ip.v, g, 0.0, f64::from(intr.height))
        * window(ip.d, g, intr.near, intr.far)
}

/// Depth-buffer disparity test. A background pixel means nothing was rendered
/// in front of the point, so it is not occluded.
pub fn occluded(ip: &ImagePoint, db: &DepthBuffer, kappa: f64) -> bool {
    depth_lookup(db, ip.u, ip.v).is_some_and(|z| (ip.d - z).abs() > kappa)
}

/// Occlusion-aware score. The gate only applies inside the frustum; outside
/// it the frustum score is returned unchanged.
pub fn vis_score_occ(
    p: &Vec3,
    cams: &CameraMatrices,
    db: &DepthBuffer,
    intr: &Intrinsics,
    params: &DiffParams,
) -> f64 {
    let Some(ip) = cams.project(p) else {
        return 0.0;
    };
    if in_frustum(&ip, intr) && occluded(&ip, db, params.kappa) {
        0.0
    } else {
        vis_score(&ip, intr, params)
    }
}

/// Combined visibility of one point across sensors.
pub fn vis_score_all(scores: &[f64]) -> f64 {
    1.0 - scores.iter().map(|s| 1.0 - s).product::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub points_per_object: usize,
    pub params: DiffParams,
    /// Apply the depth-buffer occlusion gate. Off reproduces the frustum-only model.
    pub occlusion_aware: bool,
    pub intrinsics: Intrinsics,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            points_per_object: 400,
            params: DiffParams::default(),
            occlusion_aware: true,
            intrinsics: Intrinsics::default(),
        }
    }
}

/// Scores of one frame. Per-sensor arrays are point-major: entry
/// `i * n_sensors + s` belongs to point `i` and sensor `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores {
    pub frame_id: u32,
    pub points: Vec<Vec3>,
    pub per_sensor: Vec<f64>,
    /// `false` where the occlusion gate zeroed the score.
    pub gate_open: Vec<bool>,
    pub combined: Vec<f64>,
    pub mean: f64,
    /// Integer visibility of each frame object (frame order), summed over sensors.
    pub object_visibility: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    pub sensors: usize,
    pub frames: Vec<FrameScores>,
    pub objective: f64,
}

impl ScoreBundle {
    /// Smallest integer visibility over every object of every frame.
    pub fn min_visibility(&self) -> u64 {
        self.frames
            .iter()
            .flat_map(|f| f.object_visibility.iter().copied())
            .min()
            .unwrap_or(0)
    }
}

/// d objective / d (t, alpha, beta), one triple per sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub per_sensor: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub bundle: ScoreBundle,
    pub gradient: GradientVector,
}

/// A sensor's pose together with the pose derivatives w.r.t. its rail
/// parameters.
struct SensorGeometry {
    cams: CameraMatrices,
    position: Vec3,
    /// Camera-to-world rotation.
    rotation: Matrix3<f64>,
    d_position_dt: Vec3,
    d_rotation_dalpha: Matrix3<f64>,
    d_rotation_dbeta: Matrix3<f64>,
}

impl SensorGeometry {
    fn new(scenario: &Scenario, pose: &RailPose, intr: &Intrinsics) -> Result<Self> {
        let rail = scenario.rails.get(pose.rail_index).ok_or_else(|| {
            Error::InvalidInput(format!("rail index {} out of range", pose.rail_index))
        })?;
        let canonical = rail_to_canonical(rail, pose);
        let (yaw, pitch) = (canonical.yaw, canonical.pitch);
        Ok(Self {
            cams: CameraMatrices::new(intr, &canonical),
            position: canonical.position,
            rotation: camera_to_world(yaw, pitch),
            d_position_dt: (rail.p2 - rail.p1) * sigmoid_grad(pose.t),
            d_rotation_dalpha: camera_to_world_d_yaw(yaw, pitch) * (TAU * sigmoid_grad(pose.alpha)),
            d_rotation_dbeta: camera_to_world_d_pitch(yaw, pitch) * (PI * sigmoid_grad(pose.beta)),
        })
    }
}

struct PointScore {
    score: f64,
    grad: [f64; 3],
    gate_open: bool,
}

fn score_point(
    p: &Vec3,
    geom: &SensorGeometry,
    db: &DepthBuffer,
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> PointScore {
    let intr = &cfg.intrinsics;
    let rel = p - geom.position;
    let q = geom.rotation.transpose() * rel;
    if q.z.abs() < DEGENERATE_DEPTH {
        return PointScore {
            score: 0.0,
            grad: [0.0; 3],
            gate_open: true,
        };
    }
    let f = geom.cams.focal();
    let (cx, cy) = geom.cams.principal_point();
    let ip = ImagePoint {
        u: cx + f * q.x / q.z,
        v: cy + f * q.y / q.z,
        d: q.z,
    };
    if cfg.occlusion_aware && in_frustum(&ip, intr) && occluded(&ip, db, cfg.params.kappa) {
        return PointScore {
            score: 0.0,
            grad: [0.0; 3],
            gate_open: false,
        };
    }

    let g = cfg.params.gamma;
    let (w, h) = (f64::from(intr.width), f64::from(intr.height));
    let (wu, wv, wd) = (
        window(ip.u, g, 0.0, w),
        window(ip.v, g, 0.0, h),
        window(ip.d, g, intr.near, intr.far),
    );
    let score = wu * wv * wd;
    if !want_grad {
        return PointScore {
            score,
            grad: [0.0; 3],
            gate_open: true,
        };
    }

    let (du, dv, dd) = (
        window_grad(ip.u, g, 0.0, w) * wv * wd,
        wu * window_grad(ip.v, g, 0.0, h) * wd,
        wu * wv * window_grad(ip.d, g, intr.near, intr.far),
    );
    let inv_z = 1.0 / q.z;
    // d score / d q through u = cx + f qx/qz, v = cy + f qy/qz, d = qz.
    let d_score_dq = Vec3::new(
        du * f * inv_z,
        dv * f * inv_z,
        -du * f * q.x * inv_z * inv_z - dv * f * q.y * inv_z * inv_z + dd,
    );
    let dq_dt = -(geom.rotation.transpose() * geom.d_position_dt);
    let dq_dalpha = geom.d_rotation_dalpha.transpose() * rel;
    let dq_dbeta = geom.d_rotation_dbeta.transpose() * rel;
    PointScore {
        score,
        grad: [
            d_score_dq.dot(&dq_dt),
            d_score_dq.dot(&dq_dalpha),
            d_score_dq.dot(&dq_dbeta),
        ],
        gate_open: true,
    }
}

struct FrameEval {
    scores: FrameScores,
    grad: Vec<[f64; 3]>,
}

fn evaluate_frame(
    scenario: &Scenario,
    frame_index: usize,
    sensors: &[SensorGeometry],
    poses: &[crate::scene::CanonicalPose],
    cfg: &ObjectiveConfig,
    seed: u64,
    want_grad: bool,
) -> FrameEval {
    let frame = &scenario.frames[frame_index];
    let frame_seed = derive_seed(seed, &[frame_index as u64]);
    let points: Vec<Vec3> = frame
        .objects
        .iter()
        .flat_map(|o| sample_surface_points(o, cfg.points_per_object, frame_seed))
        .collect();

    let n = sensors.len();
    let mut object_visibility = vec![0u64; frame.objects.len()];
    let buffers: Vec<DepthBuffer> = poses
        .iter()
        .map(|pose| {
            let (db, _, counts) =
                render_frame(frame, &scenario.environment, pose, &cfg.intrinsics);
            for (total, c) in object_visibility.iter_mut().zip(counts) {
                *total += c;
            }
            db
        })
        .collect();

    let mut per_sensor = Vec::with_capacity(points.len() * n);
    let mut gate_open = Vec::with_capacity(points.len() * n);
    let mut combined = Vec::with_capacity(points.len());
    let mut grad = vec![[0.0; 3]; n];
    let mut point_grads = vec![[0.0; 3]; n];
    for p in &points {
        let start = per_sensor.len();
        for (s, geom) in sensors.iter().enumerate() {
            let ps = score_point(p, geom, &buffers[s], cfg, want_grad);
            per_sensor.push(ps.score);
            gate_open.push(ps.gate_open);
            point_grads[s] = ps.grad;
        }
        let scores = &per_sensor[start..];
        combined.push(vis_score_all(scores));
        if want_grad {
            for s in 0..n {
                let others: f64 = scores
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != s)
                    .map(|(_, x)| 1.0 - x)
                    .product();
                for (acc, g) in grad[s].iter_mut().zip(point_grads[s]) {
                    *acc += others * g;
                }
            }
        }
    }
    let count = points.len().max(1) as f64;
    let mean = combined.iter().sum::<f64>() / count;
    for g in grad.iter_mut().flatten() {
        *g /= count;
    }
    FrameEval {
        scores: FrameScores {
            frame_id: frame.id,
            points,
            per_sensor,
            gate_open,
            combined,
            mean,
            object_visibility,
        },
        grad,
    }
}

/// Objective value, per-point scores and (optionally) the analytic gradient.
/// Surface points are resampled from `seed`; every frame is rendered on its own.
pub fn evaluate(
    scenario: &Scenario,
    sensors: &[RailPose],
    cfg: &ObjectiveConfig,
    seed: u64,
    want_grad: bool,
) -> Result<Evaluation> {
    if sensors.is_empty() {
        return Err(Error::InvalidInput("objective needs at least one sensor".into()));
    }
    if scenario.frames.is_empty() {
        return Err(Error::InvalidInput("objective needs at least one frame".into()));
    }
    cfg.params.validate()?;
    let geoms = sensors
        .iter()
        .map(|p| SensorGeometry::new(scenario, p, &cfg.intrinsics))
        .collect::<Result<Vec<_>>>()?;
    let poses = scenario.canonical_all(sensors)?;

    let frames: Vec<FrameEval> = (0..scenario.frames.len())
        .into_par_iter()
        .map(|fi| evaluate_frame(scenario, fi, &geoms, &poses, cfg, seed, want_grad))
        .collect();

    // Ordered reduction keeps results independent of the thread count.
    let l = frames.len() as f64;
    let mut objective = 0.0;
    let mut per_sensor = vec![[0.0; 3]; sensors.len()];
    for fe in &frames {
        objective += fe.scores.mean;
        for (acc, g) in per_sensor.iter_mut().zip(&fe.grad) {
            for k in 0..3 {
                acc[k] += g[k];
            }
        }
    }
    objective /= l;
    for g in per_sensor.iter_mut().flatten() {
        *g /= l;
    }
    Ok(Evaluation {
        bundle: ScoreBundle {
            sensors: sensors.len(),
            frames: frames.into_iter().map(|f| f.scores).collect(),
            objective,
        },
        gradient: GradientVector { per_sensor },
    })
}

pub fn objective(
    scenario: &Scenario,
    sensors: &[RailPose],
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<(f64, ScoreBundle)> {
    let e = evaluate(scenario, sensors, cfg, seed, false)?;
    Ok((e.bundle.objective, e.bundle))
}

pub fn gradient(
    scenario: &Scenario,
    sensors: &[RailPose],
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<GradientVector> {
    Ok(evaluate(scenario, sensors, cfg, seed, true)?.gradient)
}

/// One coordinate of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub sensor: usize,
    /// 0 = t, 1 = alpha, 2 = beta.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Points whose occlusion gate differs between the base and a perturbed
    /// pose. The analytic gradient is not comparable when this is non-zero.
    pub gate_flips: usize,
}

impl FdEntry {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

fn gate_flips(a: &ScoreBundle, b: &ScoreBundle) -> usize {
    a.frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| {
            x.gate_open
                .iter()
                .zip(&y.gate_open)
                .filter(|(g, h)| g != h)
                .count()
        })
        .sum()
}

/// Diagnostic mode: compares the analytic gradient to central differences
/// with step `h`, re-rendering the depth buffers at each perturbed pose.
pub fn finite_difference_check(
    scenario: &Scenario,
    sensors: &[RailPose],
    cfg: &ObjectiveConfig,
    seed: u64,
    h: f64,
) -> Result<Vec<FdEntry>> {
    let base = evaluate(scenario, sensors, cfg, seed, true)?;
    let mut entries = Vec::with_capacity(sensors.len() * 3);
    for s in 0..sensors.len() {
        for coord in 0..3 {
            let shifted = |delta: f64| {
                let mut poses = sensors.to_vec();
                let p = &mut poses[s];
                match coord {
                    0 => p.t += delta,
                    1 => p.alpha += delta,
                    _ => p.beta += delta,
                }
                evaluate(scenario, &poses, cfg, seed, false)
            };
            let plus = shifted(h)?.bundle;
            let minus = shifted(-h)?.bundle;
            entries.push(FdEntry {
                sensor: s,
                coord,
                analytic: base.gradient.per_sensor[s][coord],
                numeric: (plus.objective - minus.objective) / (2.0 * h),
                gate_flips: gate_flips(&base.bundle, &plus) + gate_flips(&base.bundle, &minus),
            });
        }
    }
    Ok(entries)
}
