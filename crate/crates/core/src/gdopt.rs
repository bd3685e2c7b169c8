//! Gradient-ascent sensor pose optimization.
//!
//! Each run freezes a random sensor-to-rail assignment and optimizes the
//! continuous rail parameters of every sensor with Adam, maximizing the mean
//! visibility score. After every epoch the integer minimum visibility over all
//! objects is measured from the same renders, and the best poses by that
//! metric are kept. Several runs with different assignments explore the
//! discrete part of the problem.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffvis::{evaluate, ObjectiveConfig};
use crate::error::{Error, Result};
use crate::raster::frame_visibility;
use crate::scene::{logit, CanonicalPose, RailPose, Scenario, Vec3, VirtualRail};
use crate::seed::{derive_seed, rng_for};

/// Adam optimizer state for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Bias-corrected Adam step moving `params` along `+grads`.
    pub fn ascent_step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdHyper {
    pub lr: f64,
    pub epochs: usize,
    pub objective: ObjectiveConfig,
    /// Aim sensors at the scenario's focus point on initialization.
    pub use_focus: bool,
}

impl Default for GdHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 20,
            objective: ObjectiveConfig::default(),
            use_focus: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub rail_assignment: Vec<usize>,
    pub initial_poses: Vec<RailPose>,
    pub initial_min_visibility: u64,
    pub best_poses: Vec<RailPose>,
    pub best_min_visibility: u64,
    /// Objective value at each epoch, before that epoch's update.
    pub objective_trace: Vec<f64>,
    /// Minimum visibility at each epoch, before that epoch's update.
    pub min_visibility_trace: Vec<u64>,
    pub final_poses: Vec<RailPose>,
    pub final_min_visibility: u64,
    pub final_objective: f64,
}

const INIT_RANGE: f64 = 2.0;
const ANGLE_MARGIN: f64 = 1e-6;

/// Initial rail poses: uniform rail assignment, `t ~ U(-2, 2)`, and angles
/// either aimed at `focus_point` or drawn from `U(-2, 2)`.
pub fn init_poses(
    rails: &[VirtualRail],
    n: usize,
    seed: u64,
    focus_point: Option<Vec3>,
) -> Vec<RailPose> {
    let mut rng = rng_for(seed, &[0x1a17]);
    (0..n)
        .map(|_| {
            let rail_index = rng.gen_range(0..rails.len());
            let t = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            // Always drawn so the stream does not depend on the focus branch.
            let random_alpha = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            let random_beta = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
            let position = rails[rail_index].point_at(crate::scene::sigmoid(t));
            let (alpha, beta) = focus_point
                .and_then(|f| CanonicalPose::looking_at(position, f))
                .map(|pose| {
                    let frac = |x: f64| x.clamp(ANGLE_MARGIN, 1.0 - ANGLE_MARGIN);
                    (
                        logit(frac(pose.yaw / std::f64::consts::TAU)),
                        logit(frac(pose.pitch / std::f64::consts::PI)),
                    )
                })
                .unwrap_or((random_alpha, random_beta));
            RailPose {
                rail_index,
                t,
                alpha,
                beta,
            }
        })
        .collect()
}

fn flatten(poses: &[RailPose]) -> Vec<f64> {
    poses.iter().flat_map(|p| [p.t, p.alpha, p.beta]).collect()
}

fn unflatten(poses: &mut [RailPose], params: &[f64]) {
    for (p, chunk) in poses.iter_mut().zip(params.chunks_exact(3)) {
        p.t = chunk[0];
        p.alpha = chunk[1];
        p.beta = chunk[2];
    }
}

/// Minimum integer visibility over every object of every frame.
pub fn min_visibility(scenario: &Scenario, poses: &[CanonicalPose], hyper: &GdHyper) -> u64 {
    scenario
        .frames
        .par_iter()
        .map(|frame| {
            frame_visibility(frame, &scenario.environment, poses, &hyper.objective.intrinsics)
                .into_iter()
                .min()
                .unwrap_or(0)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .min()
        .unwrap_or(0)
}

/// One gradient-ascent run with `n` sensors.
pub fn optimize_run(scenario: &Scenario, n: usize, hyper: &GdHyper, seed: u64) -> Result<RunResult> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sensor".into()));
    }
    scenario.validate()?;
    let focus = if hyper.use_focus {
        scenario.focus_point
    } else {
        None
    };
    let initial_poses = init_poses(&scenario.rails, n, seed, focus);
    let mut poses = initial_poses.clone();
    let mut params = flatten(&poses);
    let mut adam = AdamState::new(params.len(), hyper.lr);

    let mut objective_trace = Vec::with_capacity(hyper.epochs);
    let mut min_visibility_trace = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(u64, Vec<RailPose>)> = None;
    let mut initial_min_visibility = None;

    for epoch in 0..hyper.epochs {
        let eval = evaluate(
            scenario,
            &poses,
            &hyper.objective,
            derive_seed(seed, &[epoch as u64]),
            true,
        )?;
        let metric = eval.bundle.min_visibility();
        initial_min_visibility.get_or_insert(metric);
        objective_trace.push(eval.bundle.objective);
        min_visibility_trace.push(metric);
        if best.as_ref().is_none_or(|(b, _)| metric > *b) {
            best = Some((metric, poses.clone()));
        }
        let grads: Vec<f64> = eval.gradient.per_sensor.iter().flatten().copied().collect();
        adam.ascent_step(&mut params, &grads);
        unflatten(&mut poses, &params);
    }

    // The last update has not been measured yet.
    let final_min_visibility = min_visibility(scenario, &scenario.canonical_all(&poses)?, hyper);
    let initial_min_visibility = match initial_min_visibility {
        Some(m) => m,
        None => final_min_visibility,
    };
    if best.as_ref().is_none_or(|(b, _)| final_min_visibility > *b) {
        best = Some((final_min_visibility, poses.clone()));
    }
    let (best_min_visibility, best_poses) = best.expect("at least one measurement");
    Ok(RunResult {
        seed,
        rail_assignment: initial_poses.iter().map(|p| p.rail_index).collect(),
        initial_poses,
        initial_min_visibility,
        best_poses,
        best_min_visibility,
        final_objective: objective_trace.last().copied().unwrap_or(0.0),
        objective_trace,
        min_visibility_trace,
        final_poses: poses,
        final_min_visibility,
    })
}

/// Run `k` uses seed `master_seed + k`, so a single run reproduces
/// [`optimize_run`] with `master_seed`.
pub fn run_seeds(master_seed: u64, runs: usize) -> Vec<u64> {
    (0..runs as u64).map(|k| master_seed.wrapping_add(k)).collect()
}

/// Best of `runs` independent runs by minimum visibility, then final
/// objective, then lower seed.
pub fn optimize_multirun(
    scenario: &Scenario,
    n: usize,
    runs: usize,
    hyper: &GdHyper,
    master_seed: u64,
) -> Result<(RunResult, Vec<RunResult>)> {
    if runs == 0 {
        return Err(Error::InvalidInput("need at least one run".into()));
    }
    let results = run_seeds(master_seed, runs)
        .into_par_iter()
        .map(|seed| optimize_run(scenario, n, hyper, seed))
        .collect::<Result<Vec<_>>>()?;
    let best = results
        .iter()
        .max_by(|a, b| {
            a.best_min_visibility
                .cmp(&b.best_min_visibility)
                .then(a.final_objective.total_cmp(&b.final_objective))
                .then(b.seed.cmp(&a.seed))
        })
        .cloned()
        .expect("runs >= 1");
    Ok((best, results))
}
