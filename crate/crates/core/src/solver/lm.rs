//! Levenberg-Marquardt over one grid resolution.

use nalgebra::Vector6;

use super::layout::{LayoutOptions, ParamLayout};
use super::linear::{LinearSolver, LowerPattern};
use super::{CameraParamBlock, LevelReport, Problem, SolveOptions, Termination};
use crate::error::{Error, Result};
use crate::losses::{
    handle_weights, residual_focal, residual_repro, residuals_deform, FrameView, ParamRef, RegWeights, Residual, SLOT_FOCAL, SLOT_HANDLE,
};
use crate::par::map_slice;

fn layout_for(problem: &Problem, params: &CameraParamBlock, opts: &SolveOptions) -> ParamLayout {
    let grid = &params.frames[0].grid;
    ParamLayout::new(
        problem.n_frames,
        grid.len(),
        LayoutOptions {
            fix_first_pose: true,
            frozen_handle: opts.freeze_scale_handle.then(|| grid.center_handle()),
            shared_focal: opts.shared_focal,
            optimize_focal: opts.optimize_focal,
        },
    )
}

fn frame_view(params: &CameraParamBlock, f: usize) -> FrameView<'_> {
    let fp = &params.frames[f];
    FrameView {
        pose: &fp.pose,
        focal: fp.focal,
        grid: &fp.grid,
    }
}

/// Local parameters touched by a reprojection term at the current resolution.
fn repro_columns(problem: &Problem, params: &CameraParamBlock, t: usize) -> Vec<ParamRef> {
    let term = &problem.terms[t];
    let mut cols = Vec::with_capacity(24);
    for (frame, p) in [(term.src, term.p), (term.dst, term.q)] {
        for slot in 0..SLOT_HANDLE {
            cols.push(ParamRef { frame, slot });
        }
        for (k, _) in params.frames[frame].grid.basis(p).iter() {
            cols.push(ParamRef::handle(frame, k));
        }
    }
    cols
}

/// Lower-triangular sparsity pattern of the normal equations.
pub fn normal_equation_pattern(problem: &Problem, params: &CameraParamBlock, layout: &ParamLayout) -> LowerPattern {
    let mut entries = Vec::new();
    let mut push_all = |cols: &[ParamRef]| {
        let g: Vec<usize> = cols.iter().filter_map(|c| layout.index(*c)).collect();
        for &a in &g {
            for &b in &g {
                if a >= b {
                    entries.push((a, b));
                }
            }
        }
    };
    for t in 0..problem.terms.len() {
        push_all(&repro_columns(problem, params, t));
    }
    for (f, fp) in params.frames.iter().enumerate() {
        for (k, r) in fp.grid.neighbor_pairs() {
            push_all(&[ParamRef::handle(f, k), ParamRef::handle(f, r)]);
        }
        push_all(&[ParamRef {
            frame: f,
            slot: SLOT_FOCAL,
        }]);
    }
    LowerPattern::from_entries(layout.len(), entries)
}

fn level_weights(problem: &Problem, params: &CameraParamBlock, reg: &RegWeights) -> Result<Vec<Vec<f64>>> {
    params
        .frames
        .iter()
        .enumerate()
        .map(|(f, fp)| match &problem.dyn_masks[f] {
            Some(mask) => handle_weights(mask, &fp.grid, reg),
            None => Ok(vec![reg.lambda1; fp.grid.len()]),
        })
        .collect()
}

struct Evaluation {
    residuals: Vec<Residual>,
    used: usize,
    dropped: usize,
    cost: f64,
}

fn evaluate(problem: &Problem, params: &CameraParamBlock, opts: &SolveOptions, reg: &RegWeights, weights: &[Vec<f64>]) -> Evaluation {
    let repro = map_slice(opts.exec, &problem.terms, |term| {
        residual_repro(term, frame_view(params, term.src), frame_view(params, term.dst), opts.loss)
            .ok()
            .filter(|r| r.is_finite())
    });
    let mut residuals = Vec::with_capacity(repro.len() + params.len() * 8);
    let mut dropped = 0;
    for r in repro {
        match r {
            Some(mut r) => {
                if let Some(h) = reg.huber {
                    r.huberize(h);
                }
                residuals.push(r);
            }
            None => dropped += 1,
        }
    }
    let used = residuals.len();
    for (f, fp) in params.frames.iter().enumerate() {
        if reg.lambda_deform > 0.0 {
            residuals.extend(residuals_deform(f, &fp.grid, &weights[f], reg));
        }
        if reg.lambda_focal > 0.0 && opts.optimize_focal {
            residuals.push(residual_focal(f, fp.focal, reg));
        }
    }
    let cost = residuals.iter().map(|r| r.squared_norm()).sum();
    Evaluation {
        residuals,
        used,
        dropped,
        cost,
    }
}

/// Total objective at `params` with the number of used and dropped
/// reprojection residuals.
pub fn evaluate_cost(problem: &Problem, params: &CameraParamBlock, opts: &SolveOptions, reg: &RegWeights) -> Result<(f64, usize, usize)> {
    let weights = level_weights(problem, params, reg)?;
    let e = evaluate(problem, params, opts, reg, &weights);
    Ok((e.cost, e.used, e.dropped))
}

/// Accumulates `J^T J` (lower triangle) and `J^T r` in residual order.
/// Handle columns are scaled by the handle value, since handles are
/// optimized in log space.
fn assemble(eval: &Evaluation, params: &CameraParamBlock, layout: &ParamLayout, pattern: &LowerPattern) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut h = vec![0.0; pattern.nnz()];
    let mut g = vec![0.0; layout.len()];
    let mut idx: Vec<(usize, usize)> = Vec::with_capacity(32);
    for r in &eval.residuals {
        idx.clear();
        let mut scales = [1.0f64; 32];
        for (c, col) in r.columns.iter().enumerate() {
            if let Some(gi) = layout.index(*col) {
                if col.slot >= SLOT_HANDLE {
                    scales[idx.len()] = params.frames[col.frame].grid.handles[col.slot - SLOT_HANDLE];
                }
                idx.push((c, gi));
            }
        }
        let rows = r.values.len();
        for (a, &(ca, ga)) in idx.iter().enumerate() {
            let sa = scales[a];
            let mut grad = 0.0;
            for row in 0..rows {
                grad += r.jacobian[(row, ca)] * r.values[row];
            }
            g[ga] += sa * grad;
            for (b, &(cb, gb)) in idx.iter().enumerate() {
                if ga < gb {
                    continue;
                }
                let mut acc = 0.0;
                for row in 0..rows {
                    acc += r.jacobian[(row, ca)] * r.jacobian[(row, cb)];
                }
                let pos = pattern
                    .position(ga, gb)
                    .ok_or_else(|| Error::InvalidInput(format!("normal-equation entry ({ga}, {gb}) outside the pattern")))?;
                h[pos] += sa * scales[b] * acc;
            }
        }
    }
    Ok((h, g))
}

fn apply_step(params: &CameraParamBlock, layout: &ParamLayout, delta: &[f64]) -> Option<CameraParamBlock> {
    let mut out = params.clone();
    for (f, fp) in out.frames.iter_mut().enumerate() {
        let slots = layout.frame_slots(f);
        let mut d6 = Vector6::zeros();
        let mut moved = false;
        for s in 0..6 {
            if let Some(i) = slots[s] {
                d6[s] = delta[i];
                moved = true;
            }
        }
        if moved {
            fp.pose = fp.pose.retract(&d6);
        }
        if let Some(i) = slots[SLOT_FOCAL] {
            fp.focal += delta[i];
            if !(fp.focal > 0.0 && fp.focal.is_finite()) {
                return None;
            }
        }
        for (k, h) in fp.grid.handles.iter_mut().enumerate() {
            if let Some(i) = slots[SLOT_HANDLE + k] {
                *h *= delta[i].exp();
                if !(*h > 0.0 && h.is_finite()) {
                    return None;
                }
            }
        }
    }
    Some(out)
}

fn parameter_norm(params: &CameraParamBlock) -> f64 {
    params
        .frames
        .iter()
        .map(|f| f.pose.translation.norm_squared() + f.focal * f.focal + f.grid.handles.iter().map(|h| h.ln().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Levenberg-Marquardt at the grid resolution of `params`.
///
/// Accepted steps never increase the cost. Frame 0's pose is held fixed and,
/// when `freeze_scale_handle` is set, so is frame 0's center handle.
pub fn solve_level(
    problem: &Problem,
    params: &CameraParamBlock,
    opts: &SolveOptions,
    reg: &RegWeights,
) -> Result<(CameraParamBlock, LevelReport)> {
    if problem.terms.is_empty() {
        return Err(Error::EmptyMatches);
    }
    if params.len() != problem.n_frames {
        return Err(Error::InvalidInput(format!(
            "parameter block has {} frames, problem has {}",
            params.len(),
            problem.n_frames
        )));
    }
    let res = params.resolution();
    if params.frames.iter().any(|f| f.grid.resolution() != res) {
        return Err(Error::InvalidInput("grids must share one resolution".into()));
    }
    let layout = layout_for(problem, params, opts);
    let pattern = normal_equation_pattern(problem, params, &layout);
    let weights = level_weights(problem, params, reg)?;
    let mut solver = LinearSolver::new(opts.linear_solver);

    let mut current = params.clone();
    let mut eval = evaluate(problem, &current, opts, reg, &weights);
    let initial_cost = eval.cost;
    let mut history = vec![eval.cost];
    let mut lambda = opts.damping_init;
    let mut iterations = 0;
    let mut normal = assemble(&eval, &current, &layout, &pattern)?;
    let termination = loop {
        let (h, g) = &normal;
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.gradient_tolerance {
            break Termination::GradientTolerance;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        let mut damped = h.clone();
        for i in 0..layout.len() {
            let pos = pattern.diagonal_position(i);
            damped[pos] += lambda * h[pos].max(1e-8);
        }
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let Some(delta) = solver.solve(&pattern, &damped, &rhs) else {
            lambda *= opts.damping_increase;
            if lambda > opts.damping_max {
                break Termination::LinearSolverFailure;
            }
            continue;
        };
        let step_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if step_norm <= opts.parameter_tolerance * (parameter_norm(&current) + opts.parameter_tolerance) {
            break Termination::ParameterTolerance;
        }
        let candidate = apply_step(&current, &layout, &delta);
        let trial = candidate.as_ref().map(|c| evaluate(problem, c, opts, reg, &weights));
        match (candidate, trial) {
            (Some(c), Some(t)) if t.cost.is_finite() && t.cost < eval.cost => {
                let rel = (eval.cost - t.cost) / eval.cost;
                current = c;
                eval = t;
                history.push(eval.cost);
                lambda = (lambda * opts.damping_decrease).max(opts.damping_min);
                normal = assemble(&eval, &current, &layout, &pattern)?;
                if rel < opts.function_tolerance {
                    break Termination::FunctionTolerance;
                }
            }
            (_, t) => {
                if let Some(t) = t {
                    if t.cost.is_finite() && (t.cost - eval.cost).abs() <= opts.function_tolerance * eval.cost {
                        break Termination::FunctionTolerance;
                    }
                }
                lambda *= opts.damping_increase;
                if lambda > opts.damping_max {
                    break Termination::NoProgress;
                }
            }
        }
    };
    let report = LevelReport {
        grid: res,
        iterations,
        initial_cost,
        final_cost: eval.cost,
        residuals_used: eval.used,
        residuals_dropped: eval.dropped,
        termination,
        cost_history: history,
    };
    Ok((current, report))
}
