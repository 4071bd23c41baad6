//! In-memory pipeline stages: synthetic project generation, consistency
//! masks, the joint solve, depth filtering and evaluation.

use serde::Serialize;

use crate::correspondence::{build_pair_set, sample_all_matches, FlowBank};
use crate::deformation::{apply_deformation, DeformationGrid};
use crate::depthfilter::{filter_video, FilterInputs, FilteredFrame};
use crate::error::Result;
use crate::evaluation::{depth_metrics, evaluate, MetricReport, Trajectory};
use crate::geometry::{DepthMap, Pose};
use crate::io::{PipelineConfig, ProjectData, UNKNOWN_FLOW};
use crate::par::Exec;
use crate::solver::{coarse_to_fine_solve, init_params, CameraParamBlock, Problem, SolveReport};
use crate::synthgen::{corrupt_depth, gen_scene, CorruptionSpec, RenderedVideo, SceneSpec};

/// Ground truth of a synthetic project.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub poses: Vec<Pose>,
    pub focal: f64,
    pub depths: Vec<DepthMap>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub inputs: ProjectData,
    pub gt: GroundTruth,
    /// Per frame, the grid whose reciprocal multiplied the true depth.
    pub corruption_grids: Vec<DeformationGrid>,
}

/// Renders a scene and builds solver inputs from it: corrupted depths,
/// exact flows for every solver pair and consecutive frames (unknown where
/// the surface is not visible in the target frame) and dynamic masks.
pub fn synthesize(scene: &SceneSpec, corruption: &CorruptionSpec, exec: Exec) -> Result<SynthOutput> {
    let video = RenderedVideo::new(gen_scene(scene)?, exec);
    let n = video.n_frames();
    let gt_depths = video.depths()?;
    let pairs = build_pair_set(n)?;
    let visible = video.flow_bank(&pairs, exec);
    let mut flows = FlowBank::default();
    for ((i, j), f) in &visible.flows {
        let mut f = f.clone();
        let vis = &visible.masks[&(*i, *j)];
        for (v, ok) in f.values.iter_mut().zip(&vis.values) {
            if !ok {
                v.x = UNKNOWN_FLOW;
                v.y = UNKNOWN_FLOW;
            }
        }
        flows.insert(f);
    }
    let mut depths = Vec::with_capacity(n);
    let mut grids = Vec::with_capacity(n);
    for d in &gt_depths {
        let c = corrupt_depth(d, corruption, scene.seed)?;
        depths.push(c.depth);
        grids.push(c.reciprocal);
    }
    Ok(SynthOutput {
        inputs: ProjectData {
            depths,
            flows,
            dyn_masks: video.dynamic_masks(),
        },
        gt: GroundTruth {
            poses: video.bundle.poses.clone(),
            focal: scene.focal,
            depths: gt_depths,
        },
        corruption_grids: grids,
    })
}

/// Replaces the bank's masks with forward-backward consistency masks.
pub fn consistency_masks(flows: &mut FlowBank, cfg: &PipelineConfig, exec: Exec) -> Result<()> {
    flows.masks.clear();
    flows.compute_masks(cfg.fb_threshold, exec)
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub params: CameraParamBlock,
    pub report: SolveReport,
    pub matches: usize,
}

/// Builds the problem from sampled matches and runs the coarse-to-fine
/// solve from the default initialization. Uses the masks stored in
/// `data.flows`.
pub fn solve_project(data: &ProjectData, cfg: &PipelineConfig, exec: Exec) -> Result<SolveOutput> {
    cfg.validate()?;
    let n = data.depths.len();
    let pairs = build_pair_set(n)?;
    let matches = sample_all_matches(&data.flows, &pairs, &data.dyn_masks, cfg.min_match_dist, cfg.seed, exec)?;
    let problem = Problem::new(&matches, &data.depths, data.dyn_masks.clone())?;
    log::info!("{} frames, {} matches, {} usable terms", n, matches.len(), problem.terms.len());
    let params = init_params(&data.depths, cfg.focal_prior)?;
    let (params, report) = coarse_to_fine_solve(&problem, &params, &cfg.solve_options(exec), &cfg.reg_weights())?;
    Ok(SolveOutput {
        params,
        report,
        matches: matches.len(),
    })
}

/// `phi_i * d_i` for every frame.
pub fn deformed_depths(depths: &[DepthMap], params: &CameraParamBlock) -> Result<Vec<DepthMap>> {
    depths
        .iter()
        .zip(&params.frames)
        .map(|(d, f)| apply_deformation(d, &f.grid))
        .collect()
}

/// Filters the deformed depths along the stored flows.
pub fn filter_project(data: &ProjectData, params: &CameraParamBlock, cfg: &PipelineConfig, exec: Exec) -> Result<Vec<FilteredFrame>> {
    let deformed = deformed_depths(&data.depths, params)?;
    let inputs = FilterInputs {
        depths: &deformed,
        params,
        flows: &data.flows,
    };
    filter_video(&inputs, &cfg.filter_config(), exec)
}

/// Metrics of a solved video against ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub metrics: MetricReport,
    pub ate_relative: f64,
}

pub fn evaluate_result(params: &CameraParamBlock, depths: &[DepthMap], gt: &GroundTruth, cfg: &PipelineConfig) -> Result<EvalOutput> {
    let pred = Trajectory::new(params.poses());
    let truth = Trajectory::new(gt.poses.clone());
    let mut metrics = evaluate(&pred, &truth, cfg.rpe_delta, None)?;
    metrics.depth = Some(depth_metrics(depths, &gt.depths, cfg.depth_cap)?);
    let ate_relative = metrics.ate / metrics.trajectory_diameter.max(f64::MIN_POSITIVE);
    Ok(EvalOutput { metrics, ate_relative })
}
