//! Evaluation of pose sets: per-object visibility reports, ECDFs, ground
//! coverage, the coverage-greedy baseline, and the comparison and ablation
//! experiments built on them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{in_frustum, CameraMatrices, Intrinsics};
use crate::error::{Error, Result};
use crate::gdopt::{optimize_multirun, GdHyper};
use crate::ipopt::{
    build_candidates, build_vismatrix, solve_exhaustive, solve_mcmc, GridSpec, IPSolution, StopRule,
};
use crate::raster::{depth_lookup, environment_meshes, frame_visibility, rasterize};
use crate::scene::{CanonicalPose, Environment, Ground, Scenario, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectVisibility {
    pub frame_id: u32,
    pub object_id: u32,
    pub visibility: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Frame order, then object order within each frame.
    pub objects: Vec<ObjectVisibility>,
    pub min_visibility: u64,
    pub mean_visibility: f64,
    pub ecdf: Vec<(u64, f64)>,
    pub poses: Vec<CanonicalPose>,
    pub config_hash: String,
}

/// Sorted distinct values with the fraction of samples at or below each.
pub fn ecdf(values: &[u64]) -> Vec<(u64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<(u64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

/// SHA-256 of the compact JSON of `value`.
pub fn json_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

pub fn evaluate(poses: &[CanonicalPose], scenario: &Scenario, intr: &Intrinsics) -> Result<EvalReport> {
    if poses.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one pose".into()));
    }
    scenario.validate()?;
    intr.validate()?;
    let per_frame: Vec<Vec<u64>> = scenario
        .frames
        .par_iter()
        .map(|f| frame_visibility(f, &scenario.environment, poses, intr))
        .collect();
    let objects: Vec<ObjectVisibility> = scenario
        .frames
        .iter()
        .zip(&per_frame)
        .flat_map(|(f, counts)| {
            f.objects.iter().zip(counts).map(|(o, &c)| ObjectVisibility {
                frame_id: f.id,
                object_id: o.id,
                visibility: c,
            })
        })
        .collect();
    let values: Vec<u64> = objects.iter().map(|o| o.visibility).collect();
    Ok(EvalReport {
        min_visibility: values.iter().copied().min().unwrap_or(0),
        mean_visibility: values.iter().sum::<u64>() as f64 / values.len() as f64,
        ecdf: ecdf(&values),
        poses: poses.to_vec(),
        config_hash: json_hash(&(scenario, poses, intr)),
        objects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundGridConfig {
    pub spacing: f64,
    /// Height above the ground plane at which points are tested.
    pub lift: f64,
    /// Depth disparity beyond which nearer geometry occludes a point.
    pub kappa: f64,
}

impl Default for GroundGridConfig {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            lift: 0.1,
            kappa: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundGrid {
    pub points: Vec<Vec3>,
    pub spacing: f64,
}

impl GroundGrid {
    /// Cell centres of a regular grid over the ground rectangle.
    pub fn new(ground: &Ground, spacing: f64, lift: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {spacing}")));
        }
        let nx = ((ground.max_x - ground.min_x) / spacing).floor().max(1.0) as usize;
        let nz = ((ground.max_z - ground.min_z) / spacing).floor().max(1.0) as usize;
        // Centre the lattice inside the rectangle.
        let ox = ground.min_x + 0.5 * ((ground.max_x - ground.min_x) - (nx - 1) as f64 * spacing);
        let oz = ground.min_z + 0.5 * ((ground.max_z - ground.min_z) - (nz - 1) as f64 * spacing);
        let mut points = Vec::with_capacity(nx * nz);
        for i in 0..nx {
            for k in 0..nz {
                points.push(Vec3::new(
                    ox + i as f64 * spacing,
                    ground.y + lift,
                    oz + k as f64 * spacing,
                ));
            }
        }
        Ok(Self { points, spacing })
    }
}

/// Which grid points each pose sees: inside its frustum with no
/// environment geometry more than `kappa` in front.
pub fn coverage_sets(
    poses: &[CanonicalPose],
    points: &[Vec3],
    env: &Environment,
    intr: &Intrinsics,
    kappa: f64,
) -> Vec<Vec<bool>> {
    let meshes = environment_meshes(env);
    poses
        .par_iter()
        .map(|pose| {
            let cams = CameraMatrices::new(intr, pose);
            let (db, _) = rasterize(&meshes, &cams, intr);
            points
                .iter()
                .map(|p| {
                    cams.project(p).is_some_and(|ip| {
                        in_frustum(&ip, intr)
                            && !depth_lookup(&db, ip.u, ip.v).is_some_and(|z| ip.d - z > kappa)
                    })
                })
                .collect()
        })
        .collect()
}

fn union_fraction(sets: &[Vec<bool>], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let covered = (0..total).filter(|&k| sets.iter().any(|s| s[k])).count();
    covered as f64 / total as f64
}

/// Fraction of grid points seen by at least one pose.
pub fn ground_coverage(
    poses: &[CanonicalPose],
    grid: &GroundGrid,
    env: &Environment,
    intr: &Intrinsics,
    kappa: f64,
) -> Result<f64> {
    if grid.points.is_empty() {
        return Err(Error::InvalidInput("empty ground grid".into()));
    }
    let sets = coverage_sets(poses, &grid.points, env, intr, kappa);
    Ok(union_fraction(&sets, grid.points.len()))
}

/// Greedy maximum coverage: repeatedly take the set adding the most new
/// elements, lowest index on ties. Always returns `min(n, sets.len())` indices.
pub fn greedy_max_coverage(sets: &[Vec<bool>], n: usize) -> Vec<usize> {
    let len = sets.first().map_or(0, Vec::len);
    let mut covered = vec![false; len];
    let mut taken = vec![false; sets.len()];
    let mut chosen = Vec::new();
    for _ in 0..n.min(sets.len()) {
        let best = (0..sets.len())
            .filter(|&i| !taken[i])
            .map(|i| {
                let gain = sets[i]
                    .iter()
                    .zip(&covered)
                    .filter(|(s, c)| **s && !**c)
                    .count();
                (gain, i)
            })
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .expect("untaken set remains");
        taken[best.1] = true;
        for (c, &s) in covered.iter_mut().zip(&sets[best.1]) {
            *c |= s;
        }
        chosen.push(best.1);
    }
    chosen
}

/// Candidate indices chosen by greedy ground coverage.
pub fn solve_coverage_baseline(
    grid: &GroundGrid,
    candidates: &[CanonicalPose],
    n: usize,
    env: &Environment,
    intr: &Intrinsics,
    kappa: f64,
) -> Result<Vec<usize>> {
    if n == 0 || n > candidates.len() {
        return Err(Error::InvalidInput(format!(
            "cannot choose {n} of {} candidates",
            candidates.len()
        )));
    }
    let sets = coverage_sets(candidates, &grid.points, env, intr, kappa);
    Ok(greedy_max_coverage(&sets, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub grid: GridSpec,
    pub ground: GroundGridConfig,
    pub budget: u128,
    /// Used when exhaustive search exceeds the budget.
    pub stop: StopRule,
    pub gd: GdHyper,
    pub gd_runs: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            ground: GroundGridConfig::default(),
            budget: crate::ipopt::DEFAULT_BUDGET,
            stop: StopRule::default(),
            gd: GdHyper::default(),
            gd_runs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub n: usize,
    pub coverage_pct: f64,
    pub min_visibility: u64,
    pub poses: Vec<CanonicalPose>,
}

/// Exhaustive search when affordable, MCMC otherwise.
pub fn solve_ip(v: &crate::ipopt::VisibilityMatrix, n: usize, cfg: &CompareConfig, seed: u64) -> Result<IPSolution> {
    match solve_exhaustive(v, n, cfg.budget) {
        Err(Error::BudgetExceeded { .. }) => solve_mcmc(v, n, &cfg.stop, seed),
        other => other,
    }
}

/// Ground coverage and minimum object visibility of the coverage-greedy
/// baseline, the integer program and gradient ascent, all with `n` sensors.
pub fn compare_baseline(
    scenario: &Scenario,
    n: usize,
    cfg: &CompareConfig,
    seed: u64,
) -> Result<Vec<CompareRow>> {
    scenario.validate()?;
    let intr = cfg.gd.objective.intrinsics;
    let env = &scenario.environment;
    let grid = build_candidates(&scenario.rails, &cfg.grid)?;
    let candidates = grid.poses();
    let ground = GroundGrid::new(&env.ground, cfg.ground.spacing, cfg.ground.lift)?;

    let greedy = solve_coverage_baseline(&ground, &candidates, n, env, &intr, cfg.ground.kappa)?;
    let v = build_vismatrix(&grid, scenario, &intr)?;
    let ip = solve_ip(&v, n, cfg, seed)?;
    let (gd, _) = optimize_multirun(scenario, n, cfg.gd_runs, &cfg.gd, seed)?;

    let pose_sets = [
        ("coverage-greedy", greedy.iter().map(|&i| candidates[i]).collect::<Vec<_>>()),
        ("ip", ip.chosen.iter().map(|&i| candidates[i]).collect()),
        ("gd", scenario.canonical_all(&gd.best_poses)?),
    ];
    pose_sets
        .into_iter()
        .map(|(method, poses)| {
            let coverage = ground_coverage(&poses, &ground, env, &intr, cfg.ground.kappa)?;
            let report = evaluate(&poses, scenario, &intr)?;
            Ok(CompareRow {
                method: method.into(),
                n,
                coverage_pct: 100.0 * coverage,
                min_visibility: report.min_visibility,
                poses,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub occlusion_aware: u64,
    pub frustum_only: u64,
}

/// Best minimum visibility reached by gradient ascent with and without the
/// occlusion gate, one pair of multi-run optimizations per seed.
pub fn ablation(
    scenario: &Scenario,
    n: usize,
    runs: usize,
    hyper: &GdHyper,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut with = *hyper;
            with.objective.occlusion_aware = true;
            let mut without = *hyper;
            without.objective.occlusion_aware = false;
            let (a, _) = optimize_multirun(scenario, n, runs, &with, seed)?;
            let (b, _) = optimize_multirun(scenario, n, runs, &without, seed)?;
            Ok(AblationRow {
                seed,
                occlusion_aware: a.best_min_visibility,
                frustum_only: b.best_min_visibility,
            })
        })
        .collect()
}
