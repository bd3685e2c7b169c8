//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraMatrices, Intrinsics};
use crate::diffvis::{objective, DiffParams, ObjectiveConfig};
use crate::error::{Error, Result};
use crate::eval::{ablation, compare_baseline, evaluate, CompareConfig, GroundGridConfig};
use crate::gdopt::{optimize_multirun, GdHyper, RunResult};
use crate::io::{
    ablation_csv, build_vismatrix_checkpointed, cloud_ply, compare_csv, depth_dump, ecdf_csv,
    fragment_dump, read_json, read_scenario, read_vismatrix, report_csv, scores_csv, write_atomic,
    write_json, PoseFile, VisHeader,
};
use crate::ipopt::{build_candidates, build_vismatrix, solve, GridSpec, IPSolution, Solver, StopRule};
use crate::raster::{frame_meshes, rasterize, reproject, PointCloud};
use crate::scene::{CanonicalPose, Scenario, ScenarioConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_INVALID: i32 = 4;
pub const EXIT_IO: i32 = 5;
pub const EXIT_BUDGET: i32 = 6;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Format { .. } => EXIT_PARSE,
        Error::InvalidInput(_) | Error::PlacementInfeasible { .. } => EXIT_INVALID,
        Error::Io { .. } => EXIT_IO,
        Error::BudgetExceeded { .. } => EXIT_BUDGET,
    }
}

/// Settings shared by the subcommands, loaded with `--config`. Command-line
/// flags override them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub intrinsics: Intrinsics,
    pub diff: DiffParams,
    pub points_per_object: usize,
    pub occlusion_aware: bool,
    pub use_focus: bool,
    pub lr: f64,
    pub epochs: usize,
    pub runs: usize,
    pub sensors: usize,
    pub grid: GridSpec,
    pub ground: GroundGridConfig,
    pub stop: StopRule,
    pub budget: u64,
    pub ablation_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let gd = GdHyper::default();
        Self {
            intrinsics: Intrinsics::default(),
            diff: DiffParams::default(),
            points_per_object: gd.objective.points_per_object,
            occlusion_aware: true,
            use_focus: gd.use_focus,
            lr: gd.lr,
            epochs: gd.epochs,
            runs: 10,
            sensors: 3,
            grid: GridSpec::default(),
            ground: GroundGridConfig::default(),
            stop: StopRule::default(),
            budget: crate::ipopt::DEFAULT_BUDGET as u64,
            ablation_seeds: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn hyper(&self) -> GdHyper {
        GdHyper {
            lr: self.lr,
            epochs: self.epochs,
            use_focus: self.use_focus,
            objective: ObjectiveConfig {
                points_per_object: self.points_per_object,
                params: self.diff,
                occlusion_aware: self.occlusion_aware,
                intrinsics: self.intrinsics,
            },
        }
    }

    pub fn compare(&self) -> CompareConfig {
        CompareConfig {
            grid: self.grid.clone(),
            ground: self.ground,
            budget: u128::from(self.budget),
            stop: self.stop,
            gd: self.hyper(),
            gd_runs: self.runs,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vispose", version, about = "Sensor pose optimization for object visibility")]
pub struct Cli {
    /// Experiment settings (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for relative output paths.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a scenario from a generator description.
    GenerateFrames {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value = "scenario.json")]
        out: PathBuf,
    },
    /// Precompute the candidate-by-object visibility matrix (resumable).
    BuildVismatrix {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "vismatrix.bin")]
        out: PathBuf,
    },
    /// Gradient-ascent optimization of rail poses.
    OptimizeGd(GdArgs),
    /// Select sensors from the candidate grid by integer programming.
    OptimizeIp(IpArgs),
    /// Per-object visibility report of a pose set.
    Evaluate {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Prefix of report.csv, ecdf.csv and report.json.
        #[arg(long, default_value = "")]
        prefix: String,
    },
    /// Ground-coverage baseline against the object-centric optimizers.
    CompareBaseline {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        sensors: Option<usize>,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// Reprojected point cloud and buffers of one frame.
    ExportCloud {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Frame index (position in the scenario).
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, default_value = "cloud.ply")]
        out: PathBuf,
        /// Also write per-sensor depth and fragment buffers.
        #[arg(long)]
        buffers: bool,
    },
    /// Gradient optimization with and without the occlusion gate.
    AblateVisibility {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        sensors: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
        /// Number of seeds, starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct GdArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub sensors: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Score with the frustum-only model.
    #[arg(long)]
    pub no_occlusion: bool,
    /// Random initial angles instead of aiming at the focus point.
    #[arg(long)]
    pub no_focus: bool,
    #[arg(long, default_value = "gd_report.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "gd_poses.json")]
    pub poses_out: PathBuf,
    /// Write the per-point scores at the best poses to this CSV.
    #[arg(long)]
    pub dump_scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IpArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Precomputed matrix; built in memory when absent.
    #[arg(long)]
    pub vismatrix: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Solver::Exhaustive)]
    pub solver: Solver,
    #[arg(long)]
    pub sensors: Option<usize>,
    #[arg(long)]
    pub stop_seconds: Option<f64>,
    #[arg(long)]
    pub stop_iters: Option<u64>,
    /// Maximum number of combinations for exhaustive search.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, default_value = "ip_solution.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "ip_poses.json")]
    pub poses_out: PathBuf,
}

#[derive(Debug, Serialize)]
struct GdReport<'a> {
    sensors: usize,
    seed: u64,
    best: &'a RunResult,
    best_canonical: Vec<CanonicalPose>,
    runs: &'a [RunResult],
}

#[derive(Debug, Serialize)]
struct IpReport<'a> {
    sensors: usize,
    solution: &'a IPSolution,
    poses: Vec<CanonicalPose>,
}

struct Ctx {
    seed: u64,
    out_dir: PathBuf,
    config: ExperimentConfig,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        self.out_dir.join(p)
    }
}

fn timed<T>(label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let r = f();
    eprintln!("{label}: {:.2}s", start.elapsed().as_secs_f64());
    r
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        // Fails only if the pool already exists, e.g. on a second in-process call.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let config = match &cli.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
        config,
    };
    match cli.command {
        Command::GenerateFrames { generator, out } => {
            let gen: ScenarioConfig = read_json(&generator)?;
            let scenario = gen.generate(ctx.seed)?;
            write_json(&ctx.out(&out), &scenario)
        }
        Command::BuildVismatrix { scenario, out } => {
            let s = read_scenario(&scenario)?;
            let grid = build_candidates(&s.rails, &ctx.config.grid)?;
            timed("build-vismatrix", || {
                build_vismatrix_checkpointed(&ctx.out(&out), &grid, &s, &ctx.config.intrinsics)
            })?;
            Ok(())
        }
        Command::OptimizeGd(args) => optimize_gd(&ctx, args),
        Command::OptimizeIp(args) => optimize_ip(&ctx, args),
        Command::Evaluate {
            poses,
            scenario,
            prefix,
        } => {
            let s = read_scenario(&scenario)?;
            let pf: PoseFile = read_json(&poses)?;
            let report = evaluate(&pf.resolve(&s)?, &s, &ctx.config.intrinsics)?;
            write_atomic(&ctx.out(Path::new(&format!("{prefix}report.csv"))), report_csv(&report).as_bytes())?;
            write_atomic(&ctx.out(Path::new(&format!("{prefix}ecdf.csv"))), ecdf_csv(&report).as_bytes())?;
            write_json(&ctx.out(Path::new(&format!("{prefix}report.json"))), &report)
        }
        Command::CompareBaseline {
            scenario,
            sensors,
            out,
        } => {
            let s = read_scenario(&scenario)?;
            let n = sensors.unwrap_or(ctx.config.sensors);
            let rows = timed("compare-baseline", || {
                compare_baseline(&s, n, &ctx.config.compare(), ctx.seed)
            })?;
            write_atomic(&ctx.out(&out), compare_csv(&rows).as_bytes())?;
            write_json(&ctx.out(&out).with_extension("json"), &rows)
        }
        Command::ExportCloud {
            scenario,
            poses,
            frame,
            out,
            buffers,
        } => export_cloud(&ctx, &scenario, &poses, frame, &out, buffers),
        Command::AblateVisibility {
            scenario,
            sensors,
            runs,
            seeds,
            out,
        } => {
            let s = read_scenario(&scenario)?;
            let n = sensors.unwrap_or(ctx.config.sensors);
            let runs = runs.unwrap_or(ctx.config.runs);
            let k = seeds.unwrap_or(ctx.config.ablation_seeds) as u64;
            let seed_list: Vec<u64> = (0..k).map(|i| ctx.seed.wrapping_add(1000 * i)).collect();
            let rows = timed("ablate-visibility", || {
                ablation(&s, n, runs, &ctx.config.hyper(), &seed_list)
            })?;
            write_atomic(&ctx.out(&out), ablation_csv(&rows).as_bytes())
        }
    }
}

fn optimize_gd(ctx: &Ctx, args: GdArgs) -> Result<()> {
    let s = read_scenario(&args.scenario)?;
    let mut cfg = ctx.config.clone();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.runs {
        cfg.runs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.gamma {
        cfg.diff.gamma = v;
    }
    if let Some(v) = args.kappa {
        cfg.diff.kappa = v;
    }
    cfg.occlusion_aware &= !args.no_occlusion;
    cfg.use_focus &= !args.no_focus;
    cfg.diff.validate()?;
    let n = args.sensors.unwrap_or(cfg.sensors);
    let hyper = cfg.hyper();
    let (best, runs) = timed("optimize-gd", || {
        optimize_multirun(&s, n, cfg.runs, &hyper, ctx.seed)
    })?;
    let best_canonical = s.canonical_all(&best.best_poses)?;
    write_json(
        &ctx.out(&args.out),
        &GdReport {
            sensors: n,
            seed: ctx.seed,
            best: &best,
            best_canonical,
            runs: &runs,
        },
    )?;
    write_json(
        &ctx.out(&args.poses_out),
        &PoseFile {
            rail_poses: best.best_poses.clone(),
            canonical_poses: vec![],
        },
    )?;
    if let Some(path) = args.dump_scores {
        let (_, bundle) = objective(&s, &best.best_poses, &hyper.objective, ctx.seed)?;
        write_atomic(&ctx.out(&path), scores_csv(&bundle).as_bytes())?;
    }
    Ok(())
}

fn optimize_ip(ctx: &Ctx, args: IpArgs) -> Result<()> {
    let s = read_scenario(&args.scenario)?;
    let intr = ctx.config.intrinsics;
    let (grid, v) = match &args.vismatrix {
        Some(path) => {
            let (header, v) = read_vismatrix(path)?;
            let expected = VisHeader::new(&header.grid, &s, &intr);
            if expected.scenario_hash != header.scenario_hash {
                return Err(Error::InvalidInput(format!(
                    "{} was built for a different scenario or camera",
                    path.display()
                )));
            }
            (header.grid, v)
        }
        None => {
            let grid = build_candidates(&s.rails, &ctx.config.grid)?;
            let v = build_vismatrix(&grid, &s, &intr)?;
            (grid, v)
        }
    };
    let mut stop = ctx.config.stop;
    if args.stop_iters.is_some() || args.stop_seconds.is_some() {
        stop = StopRule {
            max_iterations: args.stop_iters,
            max_seconds_since_improvement: args.stop_seconds,
        };
    }
    let n = args.sensors.unwrap_or(ctx.config.sensors);
    let budget = u128::from(args.budget.unwrap_or(ctx.config.budget));
    let solution = solve(&v, n, args.solver, &stop, budget, ctx.seed)?;
    eprintln!(
        "optimize-ip: z = {} after {} iterations in {:.2}s",
        solution.z, solution.iterations, solution.elapsed_seconds
    );
    let poses: Vec<CanonicalPose> = solution.chosen.iter().map(|&i| grid.candidates[i].pose).collect();
    write_json(
        &ctx.out(&args.out),
        &IpReport {
            sensors: n,
            solution: &solution,
            poses: poses.clone(),
        },
    )?;
    write_json(
        &ctx.out(&args.poses_out),
        &PoseFile {
            rail_poses: vec![],
            canonical_poses: poses,
        },
    )
}

fn export_cloud(
    ctx: &Ctx,
    scenario: &Path,
    poses: &Path,
    frame: usize,
    out: &Path,
    buffers: bool,
) -> Result<()> {
    let s: Scenario = read_scenario(scenario)?;
    let pf: PoseFile = read_json(poses)?;
    let poses = pf.resolve(&s)?;
    if poses.is_empty() {
        return Err(Error::InvalidInput("pose file has no poses".into()));
    }
    let f = s.frames.get(frame).ok_or_else(|| {
        Error::InvalidInput(format!("frame index {frame} out of range ({} frames)", s.frames.len()))
    })?;
    let intr = ctx.config.intrinsics;
    let meshes = frame_meshes(f, &s.environment);
    let mut cloud = PointCloud::default();
    for (k, pose) in poses.iter().enumerate() {
        let cams = CameraMatrices::new(&intr, pose);
        let (db, fb) = rasterize(&meshes, &cams, &intr);
        cloud.extend(reproject(&db, &fb, &cams, k as u32));
        if buffers {
            write_atomic(&ctx.out(Path::new(&format!("depth_{k}.bin"))), &depth_dump(&db))?;
            write_atomic(
                &ctx.out(Path::new(&format!("fragments_{k}.bin"))),
                &fragment_dump(&fb),
            )?;
        }
    }
    write_atomic(&ctx.out(out), cloud_ply(&cloud).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["vispose", "evaluate", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        let code = run([
            OsString::from("vispose"),
            "build-vismatrix".into(),
            "--scenario".into(),
            missing.into_os_string(),
        ]);
        assert_eq!(code, EXIT_IO);
    }

    #[test]
    fn config_defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str("{\"epochs\": 3}").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.runs, 10);
    }
}
