//! Joint Levenberg-Marquardt optimization of camera poses, focal lengths and
//! per-frame deformation grids, run coarse to fine over grid resolutions.

mod layout;
mod linear;
mod lm;

pub use layout::{LayoutOptions, ParamLayout};
pub use linear::{pcg_solve, LinearSolver, LinearSolverKind, LowerPattern, DENSE_THRESHOLD};
pub use lm::{evaluate_cost, normal_equation_pattern, solve_level};

use std::time::Instant;

use serde::Serialize;

use crate::correspondence::{BinaryMask, MatchSet};
use crate::deformation::{DeformationGrid, GridSchedule, DEFAULT_LONG_SIDES};
use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};
use crate::losses::{LossKind, RegWeights, ReproTerm};
use crate::par::Exec;

/// Parameters of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    pub pose: Pose,
    pub focal: f64,
    pub grid: DeformationGrid,
}

/// All optimization variables of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraParamBlock {
    pub frames: Vec<FrameParams>,
}

impl CameraParamBlock {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.grid.resolution()).unwrap_or((1, 1))
    }

    /// Refines every grid to `(cols, rows)`.
    pub fn subdivide(&self, cols: usize, rows: usize) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Ok(FrameParams {
                    pose: f.pose,
                    focal: f.focal,
                    grid: f.grid.subdivide(cols, rows)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { frames })
    }
}

/// How frame poses are initialized before the first level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoseInit {
    /// All poses start at identity.
    Identity,
    /// Frames are added one at a time, each starting from its predecessor's
    /// solved pose, with a 1x1 grid solve over the frames added so far.
    #[default]
    Incremental,
}

impl PoseInit {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Self::Identity),
            "incremental" => Some(Self::Incremental),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Incremental => "incremental",
        }
    }
}

/// Solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub gradient_tolerance: f64,
    pub parameter_tolerance: f64,
    pub damping_init: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub damping_min: f64,
    pub damping_max: f64,
    pub linear_solver: LinearSolverKind,
    pub loss: LossKind,
    pub shared_focal: bool,
    pub optimize_focal: bool,
    /// Hold one handle of frame 0 fixed to pin the global scale.
    pub freeze_scale_handle: bool,
    pub pose_init: PoseInit,
    /// Long-side handle counts of the coarse-to-fine schedule.
    pub grid_long_sides: Vec<usize>,
    pub exec: Exec,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            function_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            parameter_tolerance: 1e-10,
            damping_init: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            damping_min: 1e-12,
            damping_max: 1e16,
            linear_solver: LinearSolverKind::SparseCholesky,
            loss: LossKind::SpatialRatio,
            shared_focal: false,
            optimize_focal: true,
            freeze_scale_handle: true,
            pose_init: PoseInit::Incremental,
            grid_long_sides: DEFAULT_LONG_SIDES.to_vec(),
            exec: Exec::default(),
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("function_tolerance", self.function_tolerance),
            ("gradient_tolerance", self.gradient_tolerance),
            ("parameter_tolerance", self.parameter_tolerance),
            ("damping_init", self.damping_init),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.damping_increase > 1.0) || !(self.damping_decrease > 0.0 && self.damping_decrease < 1.0) {
            return Err(Error::InvalidArgument(
                "damping factors must satisfy increase > 1 > decrease > 0".into(),
            ));
        }
        if self.grid_long_sides.is_empty() || self.grid_long_sides.contains(&0) {
            return Err(Error::InvalidArgument("grid schedule needs positive handle counts".into()));
        }
        if self.grid_long_sides.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("grid schedule must be non-decreasing".into()));
        }
        Ok(())
    }
}

/// Why a level stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    FunctionTolerance,
    GradientTolerance,
    ParameterTolerance,
    /// Damping saturated without finding a decreasing step.
    NoProgress,
    MaxIterations,
    LinearSolverFailure,
}

impl Termination {
    /// True when the result should be flagged as not converged.
    pub fn is_failure(self) -> bool {
        matches!(self, Termination::MaxIterations | Termination::LinearSolverFailure)
    }
}

/// Statistics of one solve_level call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub grid: (usize, usize),
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub residuals_used: usize,
    pub residuals_dropped: usize,
    pub termination: Termination,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Concatenated statistics of a full solve.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct SolveReport {
    pub bootstrap_iterations: usize,
    pub levels: Vec<LevelReport>,
    /// Not serialized, so reports of identical runs are identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl SolveReport {
    pub fn final_cost(&self) -> f64 {
        self.levels.last().map(|l| l.final_cost).unwrap_or(f64::NAN)
    }

    pub fn converged(&self) -> bool {
        self.levels.iter().all(|l| !l.termination.is_failure())
    }

    pub fn residuals_dropped(&self) -> usize {
        self.levels.last().map(|l| l.residuals_dropped).unwrap_or(0)
    }
}

/// Solver inputs: correspondences with sampled depths and dynamic masks.
#[derive(Debug, Clone)]
pub struct Problem {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub terms: Vec<ReproTerm>,
    pub dyn_masks: Vec<Option<BinaryMask>>,
}

impl Problem {
    /// Samples depths for every match. Matches whose endpoints fall outside
    /// the rasters are skipped. Fails when nothing usable remains.
    pub fn new(matches: &MatchSet, depths: &[DepthMap], dyn_masks: Vec<Option<BinaryMask>>) -> Result<Self> {
        let first = depths.first().ok_or_else(|| Error::InvalidInput("no depth maps".into()))?;
        let (width, height) = (first.width, first.height);
        for d in depths {
            if d.width != width || d.height != height {
                return Err(Error::DimensionMismatch {
                    expected: (width, height),
                    got: (d.width, d.height),
                });
            }
        }
        let mut terms = Vec::with_capacity(matches.len());
        for m in &matches.matches {
            if m.src >= depths.len() || m.dst >= depths.len() {
                return Err(Error::InvalidInput(format!("match references frame outside 0..{}", depths.len())));
            }
            if let Some(t) = ReproTerm::new(m.src, m.dst, m.p, m.q, &depths[m.src], &depths[m.dst]) {
                terms.push(t);
            }
        }
        if terms.is_empty() {
            return Err(Error::EmptyMatches);
        }
        let mut dyn_masks = dyn_masks;
        dyn_masks.resize(depths.len(), None);
        Ok(Self {
            width,
            height,
            n_frames: depths.len(),
            terms,
            dyn_masks,
        })
    }

    /// The sub-problem over frames `0..n` with the terms among them.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            width: self.width,
            height: self.height,
            n_frames: n,
            terms: self.terms.iter().filter(|t| t.src < n && t.dst < n).copied().collect(),
            dyn_masks: self.dyn_masks[..n].to_vec(),
        }
    }
}

/// Identity poses, focal lengths at the prior, and 1x1 grids scaling frame 0
/// to unit median depth.
pub fn init_params(depths: &[DepthMap], focal_prior: f64) -> Result<CameraParamBlock> {
    let d0 = depths.first().ok_or_else(|| Error::InvalidInput("no depth maps".into()))?;
    if d0.values.is_empty() {
        return Err(Error::InvalidInput("frame 0 has no depth pixels".into()));
    }
    let scale = 1.0 / d0.median();
    let frames = depths
        .iter()
        .map(|d| {
            Ok(FrameParams {
                pose: Pose::identity(),
                focal: focal_prior,
                grid: DeformationGrid::constant(1, 1, d.width, d.height, scale)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CameraParamBlock { frames })
}

/// Grows the solution one frame at a time at the current grid resolution.
/// Returns the total number of iterations spent.
pub fn incremental_init(problem: &Problem, params: &mut CameraParamBlock, opts: &SolveOptions, reg: &RegWeights) -> Result<usize> {
    let mut total = 0;
    let sub_opts = SolveOptions {
        max_iterations: opts.max_iterations.min(50),
        ..opts.clone()
    };
    for k in 1..problem.n_frames {
        params.frames[k] = params.frames[k - 1].clone();
        let sub = problem.prefix(k + 1);
        if sub.terms.is_empty() {
            continue;
        }
        let block = CameraParamBlock {
            frames: params.frames[..=k].to_vec(),
        };
        let (solved, report) = solve_level(&sub, &block, &sub_opts, reg)?;
        total += report.iterations;
        params.frames[..=k].clone_from_slice(&solved.frames);
        log::debug!("bootstrap frame {k}: cost {:.3e}", report.final_cost);
    }
    Ok(total)
}

/// Runs `solve_level` at every schedule resolution, subdividing the grids in
/// between. `params` must be at the first schedule resolution.
pub fn coarse_to_fine_solve(
    problem: &Problem,
    params: &CameraParamBlock,
    opts: &SolveOptions,
    reg: &RegWeights,
) -> Result<(CameraParamBlock, SolveReport)> {
    opts.validate()?;
    reg.validate()?;
    let start = Instant::now();
    let schedule = GridSchedule::with_long_sides(problem.width, problem.height, &opts.grid_long_sides);
    let mut current = params.clone();
    let mut report = SolveReport::default();
    for (level, &(cols, rows)) in schedule.levels.iter().enumerate() {
        if current.resolution() != (cols, rows) {
            current = current.subdivide(cols, rows)?;
        }
        if level == 0 && opts.pose_init == PoseInit::Incremental {
            report.bootstrap_iterations = incremental_init(problem, &mut current, opts, reg)?;
        }
        let (next, lr) = solve_level(problem, &current, opts, reg)?;
        log::info!(
            "level {cols}x{rows}: cost {:.6e} -> {:.6e} in {} iterations ({:?})",
            lr.initial_cost,
            lr.final_cost,
            lr.iterations,
            lr.termination
        );
        current = next;
        report.levels.push(lr);
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((current, report))
}
