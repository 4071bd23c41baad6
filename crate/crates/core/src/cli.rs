//! Command-line driver. Every stage reads its inputs from the project
//! directory and writes its outputs back, so `run` is the same as calling
//! `masks`, `solve` and `filter` one after another.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::io::{read_params, write_f32_array, write_params, ConfigOverrides, PipelineConfig, ProjectLayout};
use crate::losses::LITERAL_FOCAL_PRIOR;
use crate::par::Exec;
use crate::pipeline::{consistency_masks, deformed_depths, evaluate_result, filter_project, solve_project, synthesize, GroundTruth};
use crate::solver::{CameraParamBlock, FrameParams, SolveReport};
use crate::synthgen::{CorruptionSpec, DynamicBox, GeometryKind, SceneSpec, TrajectoryKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "flexdepth",
    version,
    about = "Consistent video depth by joint pose and depth-deformation optimization"
)]
pub struct Cli {
    /// Worker threads (default: all cores). `--threads 1` runs every stage
    /// sequentially and is bitwise reproducible.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Use the literal focal prior 0.35 instead of a 40 degree field of view.
    #[arg(long, global = true)]
    pub paper_focal_prior: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic project with ground truth.
    Synth(SynthArgs),
    /// Forward-backward consistency masks from the stored flows.
    Masks(StageArgs),
    /// Coarse-to-fine joint optimization.
    Solve(StageArgs),
    /// Flow-guided depth filtering of the solved depths.
    Filter(StageArgs),
    /// Metrics against the ground truth under gt/.
    Eval(StageArgs),
    /// masks, solve and filter in sequence.
    Run(StageArgs),
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Project directory.
    pub project: PathBuf,

    /// Configuration file (default: PROJECT/config.txt when it exists).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output project directory.
    #[arg(long)]
    pub out: PathBuf,

    /// Camera trajectory: orbit, arc, forward or handheld.
    #[arg(long, default_value = "orbit", value_parser = parse_trajectory_kind)]
    pub scene: TrajectoryKind,

    /// Scene geometry: multi-plane, heightfield or point-cloud.
    #[arg(long, default_value = "multi-plane", value_parser = parse_geometry_kind)]
    pub geometry: GeometryKind,

    #[arg(long, default_value_t = 12)]
    pub frames: usize,

    #[arg(long, default_value_t = 160)]
    pub width: usize,

    #[arg(long, default_value_t = 96)]
    pub height: usize,

    /// Amplitude of the smooth multiplicative depth corruption.
    #[arg(long, default_value_t = 0.2)]
    pub amplitude: f64,

    /// Relative per-pixel depth noise.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,

    /// Per-frame global scale drift.
    #[arg(long, default_value_t = 0.0)]
    pub drift: f64,

    /// Add a moving box and write its masks under masks/.
    #[arg(long)]
    pub dynamic: bool,

    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

fn parse_trajectory_kind(s: &str) -> std::result::Result<TrajectoryKind, String> {
    TrajectoryKind::parse(s).ok_or_else(|| format!("unknown scene {s:?}"))
}

fn parse_geometry_kind(s: &str) -> std::result::Result<GeometryKind, String> {
    GeometryKind::parse(s).ok_or_else(|| format!("unknown geometry {s:?}"))
}

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_INPUT,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match with_threads(cli.threads, |exec| execute(&cli, exec)) {
        Ok((summary, code)) => {
            println!("{summary}");
            code
        }
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(feature = "parallel")]
fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce(Exec) -> Result<R> + Send) -> Result<R> {
    match threads {
        Some(0) => Err(Error::InvalidArgument("--threads must be >= 1".into())),
        Some(1) => f(Exec::Sequential),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(|| f(Exec::Parallel)),
        None => f(Exec::Parallel),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_threads<R>(threads: Option<usize>, f: impl FnOnce(Exec) -> Result<R>) -> Result<R> {
    if threads == Some(0) {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    f(Exec::Sequential)
}

fn execute(cli: &Cli, exec: Exec) -> Result<(Value, i32)> {
    let ok = |v: Value| Ok((v, EXIT_OK));
    match &cli.command {
        Command::Synth(a) => ok(synth(a, cli.paper_focal_prior, exec)?),
        Command::Masks(a) => {
            let (layout, cfg) = open(a, cli.paper_focal_prior)?;
            ok(masks_stage(&layout, &cfg, exec)?)
        }
        Command::Solve(a) => {
            let (layout, cfg) = open(a, cli.paper_focal_prior)?;
            let (summary, converged) = solve_stage(&layout, &cfg, exec)?;
            Ok((summary, if converged { EXIT_OK } else { EXIT_NOT_CONVERGED }))
        }
        Command::Filter(a) => {
            let (layout, cfg) = open(a, cli.paper_focal_prior)?;
            ok(filter_stage(&layout, &cfg, exec)?)
        }
        Command::Eval(a) => {
            let (layout, cfg) = open(a, cli.paper_focal_prior)?;
            ok(eval_stage(&layout, &cfg)?)
        }
        Command::Run(a) => {
            let (layout, cfg) = open(a, cli.paper_focal_prior)?;
            let masks = masks_stage(&layout, &cfg, exec)?;
            let (solve, converged) = solve_stage(&layout, &cfg, exec)?;
            let filter = filter_stage(&layout, &cfg, exec)?;
            let summary = json!({ "stage": "run", "masks": masks, "solve": solve, "filter": filter });
            Ok((summary, if converged { EXIT_OK } else { EXIT_NOT_CONVERGED }))
        }
    }
}

/// Defaults, then the config file, then the focal switch, then flags.
pub fn resolve_config(file: Option<&Path>, paper_focal_prior: bool, overrides: &ConfigOverrides) -> Result<PipelineConfig> {
    let mut cfg = match file {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if paper_focal_prior {
        cfg.focal_prior = LITERAL_FOCAL_PRIOR;
    }
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn open(args: &StageArgs, paper_focal_prior: bool) -> Result<(ProjectLayout, PipelineConfig)> {
    let layout = ProjectLayout::new(&args.project);
    if !layout.root.is_dir() {
        return Err(Error::MissingPath(layout.root));
    }
    let default_file = layout.config_path();
    let file = match &args.config {
        Some(p) => Some(p.clone()),
        None => default_file.exists().then_some(default_file),
    };
    let cfg = resolve_config(file.as_deref(), paper_focal_prior, &args.overrides)?;
    Ok((layout, cfg))
}

fn synth(args: &SynthArgs, paper_focal_prior: bool, exec: Exec) -> Result<Value> {
    let cfg = resolve_config(None, paper_focal_prior, &args.overrides)?;
    let scene = SceneSpec {
        geometry: args.geometry,
        trajectory: args.scene,
        n_frames: args.frames,
        width: args.width,
        height: args.height,
        seed: cfg.seed,
        dynamic: args.dynamic.then_some(DynamicBox {
            center: Vector3::new(0.0, 0.5, 0.0),
            half_size: Vector3::new(0.3, 0.3, 0.3),
            velocity: Vector3::new(0.05, 0.0, 0.0),
        }),
        ..SceneSpec::default()
    };
    let corruption = CorruptionSpec {
        amplitude: args.amplitude,
        noise_sigma: args.noise,
        drift: args.drift,
        ..CorruptionSpec::default()
    };
    log::info!(
        "rendering {} {} frames at {}x{}",
        args.frames,
        args.scene.name(),
        args.width,
        args.height
    );
    let out = synthesize(&scene, &corruption, exec)?;
    let layout = ProjectLayout::new(&args.out);
    layout.save_inputs(&out.inputs)?;
    let gt = CameraParamBlock {
        frames: out
            .gt
            .poses
            .iter()
            .zip(&out.corruption_grids)
            .map(|(pose, grid)| FrameParams {
                pose: *pose,
                focal: out.gt.focal,
                grid: grid.clone(),
            })
            .collect(),
    };
    write_params(&layout.gt_dir(), &gt)?;
    layout.write_depths(&layout.gt_dir().join("depth"), &out.gt.depths)?;
    crate::io::write_bytes(&layout.config_path(), cfg.to_text().as_bytes())?;
    Ok(json!({
        "stage": "synth",
        "frames": args.frames,
        "width": args.width,
        "height": args.height,
        "flows": out.inputs.flows.flows.len(),
        "dynamic": args.dynamic,
    }))
}

fn masks_stage(layout: &ProjectLayout, cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    let n = layout.frame_count()?;
    let mut bank = layout.read_flows(n)?;
    consistency_masks(&mut bank, cfg, exec)?;
    layout.write_fb_masks(&bank)?;
    let total: usize = bank.masks.values().map(|m| m.values.len()).sum();
    let valid: usize = bank.masks.values().map(|m| m.count()).sum();
    log::info!("{} consistency masks, {valid} of {total} pixels valid", bank.masks.len());
    Ok(json!({
        "stage": "masks",
        "masks": bank.masks.len(),
        "valid_fraction": valid as f64 / total.max(1) as f64,
    }))
}

fn load_with_masks(layout: &ProjectLayout) -> Result<crate::io::ProjectData> {
    let mut data = layout.load_inputs()?;
    layout.read_fb_masks(&mut data.flows)?;
    Ok(data)
}

#[derive(Serialize)]
struct SolveSummary<'a> {
    stage: &'static str,
    frames: usize,
    matches: usize,
    converged: bool,
    final_cost: f64,
    residuals_dropped: usize,
    report: &'a SolveReport,
}

fn solve_stage(layout: &ProjectLayout, cfg: &PipelineConfig, exec: Exec) -> Result<(Value, bool)> {
    let data = load_with_masks(layout)?;
    let out = solve_project(&data, cfg, exec)?;
    let converged = out.report.converged();
    if !converged {
        log::warn!("solver did not converge; results are written but flagged");
    }
    let summary = SolveSummary {
        stage: "solve",
        frames: out.params.len(),
        matches: out.matches,
        converged,
        final_cost: out.report.final_cost(),
        residuals_dropped: out.report.residuals_dropped(),
        report: &out.report,
    };
    crate::io::write_result_bundle(&layout.out_dir(), &out.params, None, &summary)?;
    let mut v = serde_json::to_value(&summary).map_err(|e| Error::InvalidInput(e.to_string()))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("report");
    }
    Ok((v, converged))
}

fn read_solution(layout: &ProjectLayout, like: &DepthMap) -> Result<CameraParamBlock> {
    let out = layout.out_dir();
    if !out.join("trajectory.txt").exists() {
        return Err(Error::MissingPath(out.join("trajectory.txt")));
    }
    read_params(&out, like.width, like.height)
}

fn filter_stage(layout: &ProjectLayout, cfg: &PipelineConfig, exec: Exec) -> Result<Value> {
    let data = load_with_masks(layout)?;
    let params = read_solution(layout, &data.depths[0])?;
    if params.len() != data.depths.len() {
        return Err(Error::InvalidInput(format!(
            "{} solved frames for {} depth maps",
            params.len(),
            data.depths.len()
        )));
    }
    let filtered = filter_project(&data, &params, cfg, exec)?;
    let depths: Vec<DepthMap> = filtered.iter().map(|f| f.depth.clone()).collect();
    layout.write_depths(&layout.out_dir().join("depth"), &depths)?;
    let fallback: Vec<usize> = filtered.iter().map(|f| f.fallback_pixels).collect();
    let summary = json!({
        "stage": "filter",
        "frames": depths.len(),
        "fallback_pixels": fallback,
    });
    crate::io::write_json(&layout.out_dir().join("filter_report.json"), &summary)?;
    Ok(summary)
}

fn eval_stage(layout: &ProjectLayout, cfg: &PipelineConfig) -> Result<Value> {
    let n = layout.frame_count()?;
    let inputs = layout.read_depths(&layout.depth_dir(), n)?;
    let (w, h) = (inputs[0].width, inputs[0].height);
    let gt_dir = layout.gt_dir();
    if !gt_dir.is_dir() {
        return Err(Error::MissingPath(gt_dir));
    }
    let gt_params = read_params(&gt_dir, w, h)?;
    let gt = GroundTruth {
        poses: gt_params.poses(),
        focal: gt_params.frames[0].focal,
        depths: layout.read_depths(&gt_dir.join("depth"), n)?,
    };
    let params = read_solution(layout, &inputs[0])?;
    let filtered_dir = layout.out_dir().join("depth");
    let (depths, source) = if filtered_dir.is_dir() {
        (layout.read_depths(&filtered_dir, n)?, "filtered")
    } else {
        (deformed_depths(&inputs, &params)?, "deformed")
    };
    let out = evaluate_result(&params, &depths, &gt, cfg)?;
    let report = json!({ "stage": "eval", "depth_source": source, "ate_relative": out.ate_relative, "metrics": out.metrics });
    crate::io::write_json(&layout.out_dir().join("metrics.json"), &report)?;
    if let Some(d) = &out.metrics.depth {
        write_f32_array(&layout.out_dir().join("sorted_abs_rel.f32"), &d.sorted_abs_rel)?;
    }
    Ok(json!({
        "stage": "eval",
        "ate": out.metrics.ate,
        "ate_relative": out.ate_relative,
        "rpe_rotation_mean_deg": out.metrics.rpe_rotation_mean_deg,
        "abs_rel": out.metrics.depth.as_ref().map(|d| d.abs_rel),
    }))
}
