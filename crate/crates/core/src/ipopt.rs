//! Integer-programming sensor selection.
//!
//! A finite grid of candidate poses is rendered once per frame to build a
//! candidate-by-object visibility matrix. Because visibility is additive over
//! sensors, choosing `N` sensors reduces to picking `N` rows whose column sums
//! have the largest minimum.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::raster::render_frame;
use crate::scene::{CanonicalPose, Scenario, VirtualRail};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Positions per rail at fractions `1/n, 2/n, ..., 1`.
    pub positions: usize,
    /// Yaws at `360/n, 2*360/n, ..., 360` degrees.
    pub yaws: usize,
    /// Pitch angles in degrees (0 looks straight down).
    pub pitches_deg: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            positions: 10,
            yaws: 10,
            pitches_deg: vec![18.0, 36.0, 54.0],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.positions == 0 || self.yaws == 0 || self.pitches_deg.is_empty() {
            return Err(Error::InvalidInput(
                "candidate grid needs at least one position, yaw and pitch".into(),
            ));
        }
        if self
            .pitches_deg
            .iter()
            .any(|p| !p.is_finite() || !(0.0..=180.0).contains(p))
        {
            return Err(Error::InvalidInput("pitch angles must lie in [0, 180] degrees".into()));
        }
        Ok(())
    }

    pub fn per_rail(&self) -> usize {
        self.positions * self.yaws * self.pitches_deg.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub rail_index: usize,
    pub position_index: usize,
    pub yaw_index: usize,
    pub pitch_index: usize,
    pub fraction: f64,
    pub pose: CanonicalPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub spec: GridSpec,
    pub candidates: Vec<Candidate>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn poses(&self) -> Vec<CanonicalPose> {
        self.candidates.iter().map(|c| c.pose).collect()
    }
}

/// Candidates ordered by rail, then position, then yaw, then pitch.
pub fn build_candidates(rails: &[VirtualRail], spec: &GridSpec) -> Result<CandidateGrid> {
    spec.validate()?;
    if rails.is_empty() {
        return Err(Error::InvalidInput("no rails".into()));
    }
    let mut candidates = Vec::with_capacity(rails.len() * spec.per_rail());
    for (rail_index, rail) in rails.iter().enumerate() {
        for position_index in 0..spec.positions {
            let fraction = (position_index + 1) as f64 / spec.positions as f64;
            let position = if position_index + 1 == spec.positions {
                rail.p2
            } else {
                rail.point_at(fraction)
            };
            for yaw_index in 0..spec.yaws {
                let yaw = std::f64::consts::TAU * (yaw_index + 1) as f64 / spec.yaws as f64;
                for (pitch_index, pitch_deg) in spec.pitches_deg.iter().enumerate() {
                    candidates.push(Candidate {
                        rail_index,
                        position_index,
                        yaw_index,
                        pitch_index,
                        fraction,
                        pose: CanonicalPose {
                            position,
                            yaw,
                            pitch: pitch_deg.to_radians(),
                        },
                    });
                }
            }
        }
    }
    Ok(CandidateGrid {
        spec: spec.clone(),
        candidates,
    })
}

/// Identifies a matrix column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ColumnKey {
    pub frame_id: u32,
    pub object_id: u32,
}

/// Row-major candidate-by-object visibility counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMatrix {
    pub rows: usize,
    pub columns: Vec<ColumnKey>,
    pub counts: Vec<u32>,
}

impl VisibilityMatrix {
    pub fn from_rows(rows: Vec<Vec<u32>>, columns: Vec<ColumnKey>) -> Result<Self> {
        let n = columns.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidInput("ragged visibility matrix".into()));
        }
        Ok(Self {
            rows: rows.len(),
            columns,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    /// Anonymous columns, for matrices that do not come from a scenario.
    pub fn from_counts(rows: Vec<Vec<u32>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let columns = (0..n as u32)
            .map(|j| ColumnKey {
                frame_id: 0,
                object_id: j,
            })
            .collect();
        Self::from_rows(rows, columns)
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        let n = self.cols();
        &self.counts[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.counts[i * self.cols() + j]
    }
}

/// Columns of a scenario, frame by frame in frame order.
pub fn column_map(scenario: &Scenario) -> Vec<ColumnKey> {
    scenario
        .frames
        .iter()
        .flat_map(|f| {
            f.objects.iter().map(move |o| ColumnKey {
                frame_id: f.id,
                object_id: o.id,
            })
        })
        .collect()
}

/// Visibility row of one candidate: each frame rendered alone with the
/// environment.
pub fn candidate_row(pose: &CanonicalPose, scenario: &Scenario, intr: &Intrinsics) -> Vec<u32> {
    scenario
        .frames
        .par_iter()
        .map(|frame| {
            let (_, _, counts) = render_frame(frame, &scenario.environment, pose, intr);
            counts
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .map(|c| u32::try_from(c).expect("count bounded by pixel count"))
        .collect()
}

/// Builds rows `start..grid.len()` in order, handing each finished row to
/// `sink` so callers can checkpoint.
pub fn build_rows<F>(
    grid: &CandidateGrid,
    scenario: &Scenario,
    intr: &Intrinsics,
    start: usize,
    mut sink: F,
) -> Result<()>
where
    F: FnMut(usize, Vec<u32>) -> Result<()>,
{
    scenario.validate()?;
    intr.validate()?;
    let chunk = rayon::current_num_threads().max(1) * 2;
    let mut i = start;
    while i < grid.len() {
        let end = (i + chunk).min(grid.len());
        let rows: Vec<Vec<u32>> = grid.candidates[i..end]
            .par_iter()
            .map(|c| candidate_row(&c.pose, scenario, intr))
            .collect();
        for (k, row) in rows.into_iter().enumerate() {
            sink(i + k, row)?;
        }
        i = end;
    }
    Ok(())
}

pub fn build_vismatrix(
    grid: &CandidateGrid,
    scenario: &Scenario,
    intr: &Intrinsics,
) -> Result<VisibilityMatrix> {
    let mut rows = Vec::with_capacity(grid.len());
    build_rows(grid, scenario, intr, 0, |_, row| {
        rows.push(row);
        Ok(())
    })?;
    VisibilityMatrix::from_rows(rows, column_map(scenario))
}

fn column_sums(v: &VisibilityMatrix, chosen: &[usize]) -> Vec<u64> {
    let mut sums = vec![0u64; v.cols()];
    for &i in chosen {
        for (s, &c) in sums.iter_mut().zip(v.row(i)) {
            *s += u64::from(c);
        }
    }
    sums
}

/// Smallest column sum over the chosen rows; 0 for an empty choice.
pub fn ip_objective(v: &VisibilityMatrix, chosen: &[usize]) -> u64 {
    if chosen.is_empty() {
        return 0;
    }
    column_sums(v, chosen).into_iter().min().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IPSolution {
    pub solver: String,
    /// Sorted candidate indices.
    pub chosen: Vec<usize>,
    pub z: u64,
    /// Iterations (or combinations, for exhaustive search) performed.
    pub iterations: u64,
    pub best_iteration: u64,
    /// Wall-clock time; not deterministic.
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

pub const DEFAULT_BUDGET: u128 = 10_000_000;

/// `n choose k`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = match acc.checked_mul((n - i) as u128) {
            Some(x) => x / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Exact optimum by enumerating every `n`-subset in lexicographic order. The
/// first optimal subset found is kept.
pub fn solve_exhaustive(v: &VisibilityMatrix, n: usize, budget: u128) -> Result<IPSolution> {
    let start = Instant::now();
    let rows = v.rows;
    if n >= rows {
        let chosen: Vec<usize> = (0..rows).collect();
        return Ok(IPSolution {
            solver: "exhaustive".into(),
            z: ip_objective(v, &chosen),
            chosen,
            iterations: 1,
            best_iteration: 0,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
    }
    if n == 0 {
        return Ok(IPSolution {
            solver: "exhaustive".into(),
            chosen: vec![],
            z: 0,
            iterations: 0,
            best_iteration: 0,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let combinations = binomial(rows, n);
    if combinations > budget {
        return Err(Error::BudgetExceeded {
            combinations,
            budget,
        });
    }

    let cols = v.cols();
    // partial[d] holds the column sums of the first d chosen rows.
    let mut partial = vec![vec![0u64; cols]; n + 1];
    let mut idx: Vec<usize> = (0..n).collect();
    for d in 0..n {
        let (lo, hi) = partial.split_at_mut(d + 1);
        add_row(&lo[d], v.row(idx[d]), &mut hi[0]);
    }
    let mut best: Option<(u64, Vec<usize>, u64)> = None;
    let mut count: u64 = 0;
    loop {
        let z = partial[n].iter().copied().min().unwrap_or(0);
        if best.as_ref().is_none_or(|(b, _, _)| z > *b) {
            best = Some((z, idx.clone(), count));
        }
        count += 1;
        // Advance to the next combination.
        let Some(d) = (0..n).rev().find(|&d| idx[d] < rows - n + d) else {
            break;
        };
        idx[d] += 1;
        for k in d + 1..n {
            idx[k] = idx[k - 1] + 1;
        }
        for k in d..n {
            let (lo, hi) = partial.split_at_mut(k + 1);
            add_row(&lo[k], v.row(idx[k]), &mut hi[0]);
        }
    }
    let (z, chosen, best_iteration) = best.expect("at least one combination");
    Ok(IPSolution {
        solver: "exhaustive".into(),
        chosen,
        z,
        iterations: count,
        best_iteration,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

fn add_row(base: &[u64], row: &[u32], out: &mut [u64]) {
    for ((o, &b), &r) in out.iter_mut().zip(base).zip(row) {
        *o = b + u64::from(r);
    }
}

/// Stop when either limit is reached. A limit of `None` is not checked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_iterations: Option<u64>,
    pub max_seconds_since_improvement: Option<f64>,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            max_iterations: Some(100_000),
            max_seconds_since_improvement: Some(60.0),
        }
    }
}

impl StopRule {
    pub fn iterations(n: u64) -> Self {
        Self {
            max_iterations: Some(n),
            max_seconds_since_improvement: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_iterations.is_none() && self.max_seconds_since_improvement.is_none() {
            return Err(Error::InvalidInput("stop rule needs an iteration or time limit".into()));
        }
        Ok(())
    }

    fn done(&self, iteration: u64, last_improvement: Instant) -> bool {
        self.max_iterations.is_some_and(|m| iteration >= m)
            || self
                .max_seconds_since_improvement
                .is_some_and(|s| last_improvement.elapsed().as_secs_f64() > s)
    }
}

fn check_n(v: &VisibilityMatrix, n: usize) -> Result<()> {
    if n == 0 || n > v.rows {
        return Err(Error::InvalidInput(format!(
            "cannot choose {n} of {} candidates",
            v.rows
        )));
    }
    Ok(())
}

fn sorted(mut s: Vec<usize>) -> Vec<usize> {
    s.sort_unstable();
    s
}

/// Repeated uniform sampling of `n` rows, keeping the best. Ties replace the
/// incumbent and reset the improvement timer.
pub fn solve_naive(v: &VisibilityMatrix, n: usize, stop: &StopRule, seed: u64) -> Result<IPSolution> {
    check_n(v, n)?;
    stop.validate()?;
    let start = Instant::now();
    let mut rng = rng_for(seed, &[0x4a1e]);
    let mut best: Option<(u64, Vec<usize>, u64)> = None;
    let mut last_improvement = start;
    let mut iteration = 0;
    while !stop.done(iteration, last_improvement) {
        let s = sample(&mut rng, v.rows, n).into_vec();
        let z = ip_objective(v, &s);
        if best.as_ref().is_none_or(|(b, _, _)| z >= *b) {
            best = Some((z, s, iteration));
            last_improvement = Instant::now();
        }
        iteration += 1;
    }
    let (z, chosen, best_iteration) = best.unwrap_or((0, vec![], 0));
    Ok(IPSolution {
        solver: "naive".into(),
        chosen: sorted(chosen),
        z,
        iterations: iteration,
        best_iteration,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

const MCMC_EPS: f64 = 1e-9;

/// Metropolis-Hastings over `n`-subsets. Each proposal swaps one chosen row
/// for an unchosen one and is accepted with probability
/// `min(1, z_proposal / (z_current + eps))`.
pub fn solve_mcmc(v: &VisibilityMatrix, n: usize, stop: &StopRule, seed: u64) -> Result<IPSolution> {
    check_n(v, n)?;
    if n == v.rows {
        return Err(Error::InvalidInput(
            "mcmc needs at least one unchosen candidate".into(),
        ));
    }
    stop.validate()?;
    let start = Instant::now();
    let mut rng = rng_for(seed, &[0x3c3c]);
    let mut current = sample(&mut rng, v.rows, n).into_vec();
    let mut in_set = vec![false; v.rows];
    for &i in &current {
        in_set[i] = true;
    }
    let mut sums = column_sums(v, &current);
    let mut z = sums.iter().copied().min().unwrap_or(0);
    let mut best = (z, current.clone(), 0u64);
    let mut last_improvement = start;
    let mut proposal_sums = vec![0u64; v.cols()];
    let mut iteration = 0;
    while !stop.done(iteration, last_improvement) {
        iteration += 1;
        let out_slot = rng.gen_range(0..n);
        // k-th unchosen row, uniformly.
        let k = rng.gen_range(0..v.rows - n);
        let incoming = (0..v.rows)
            .filter(|&i| !in_set[i])
            .nth(k)
            .expect("k < number of unchosen rows");
        let outgoing = current[out_slot];
        for ((p, &s), (&a, &b)) in proposal_sums
            .iter_mut()
            .zip(&sums)
            .zip(v.row(incoming).iter().zip(v.row(outgoing)))
        {
            *p = s + u64::from(a) - u64::from(b);
        }
        let z_new = proposal_sums.iter().copied().min().unwrap_or(0);
        let ratio = z_new as f64 / (z as f64 + MCMC_EPS);
        let u: f64 = rng.gen();
        if u <= ratio.min(1.0) {
            current[out_slot] = incoming;
            in_set[outgoing] = false;
            in_set[incoming] = true;
            std::mem::swap(&mut sums, &mut proposal_sums);
            z = z_new;
            if z > best.0 {
                best = (z, current.clone(), iteration);
                last_improvement = Instant::now();
            }
        }
    }
    Ok(IPSolution {
        solver: "mcmc".into(),
        chosen: sorted(best.1),
        z: best.0,
        iterations: iteration,
        best_iteration: best.2,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exhaustive,
    Naive,
    Mcmc,
}

pub fn solve(
    v: &VisibilityMatrix,
    n: usize,
    solver: Solver,
    stop: &StopRule,
    budget: u128,
    seed: u64,
) -> Result<IPSolution> {
    match solver {
        Solver::Exhaustive => solve_exhaustive(v, n, budget),
        Solver::Naive => solve_naive(v, n, stop, seed),
        Solver::Mcmc => solve_mcmc(v, n, stop, seed),
    }
}
