//! Trajectory and depth accuracy metrics.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{median, rotation_angle, DepthMap, Pose};

/// Default depth cap in scene units.
pub const DEPTH_CAP: f64 = 80.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Largest distance between any two camera positions.
    pub fn diameter(&self) -> f64 {
        let pos = self.positions();
        let mut d: f64 = 0.0;
        for (k, a) in pos.iter().enumerate() {
            for b in &pos[k + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }

    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * p.rotation,
            translation: self.apply_point(&p.translation),
        }
    }

    pub fn apply(&self, t: &Trajectory) -> Trajectory {
        Trajectory::new(t.poses.iter().map(|p| self.apply_pose(p)).collect())
    }
}

fn check_lengths(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!("trajectories have {} and {} poses", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    Ok(())
}

fn centroid(xs: &[Vector3<f64>]) -> Vector3<f64> {
    xs.iter().sum::<Vector3<f64>>() / xs.len() as f64
}

/// Closed-form similarity minimizing `sum |s R x_pred + t - x_gt|^2`
/// (Umeyama). With fewer than three frames only scale and translation are
/// estimated.
pub fn align_trajectory(pred: &Trajectory, gt: &Trajectory) -> Result<(Similarity, Trajectory)> {
    check_lengths(pred, gt)?;
    let x = pred.positions();
    let y = gt.positions();
    let n = x.len() as f64;
    let (mx, my) = (centroid(&x), centroid(&y));
    let var_x = x.iter().map(|v| (v - mx).norm_squared()).sum::<f64>() / n;
    let sim = if x.len() < 3 {
        log::warn!(
            "aligning {} frames: rotation is not observable, estimating scale and translation only",
            x.len()
        );
        let var_y = y.iter().map(|v| (v - my).norm_squared()).sum::<f64>() / n;
        let scale = if var_x > 0.0 { (var_y / var_x).sqrt() } else { 1.0 };
        Similarity {
            scale,
            rotation: Matrix3::identity(),
            translation: my - scale * mx,
        }
    } else {
        let mut cov = Matrix3::zeros();
        for (a, b) in x.iter().zip(&y) {
            cov += (b - my) * (a - mx).transpose();
        }
        cov /= n;
        let svd = cov.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut s = Matrix3::identity();
        if (u.determinant() * v_t.determinant()) < 0.0 {
            s[(2, 2)] = -1.0;
        }
        let rotation = u * s * v_t;
        let trace: f64 = (0..3).map(|k| svd.singular_values[k] * s[(k, k)]).sum();
        let scale = if var_x > 0.0 { trace / var_x } else { 1.0 };
        Similarity {
            scale,
            rotation,
            translation: my - scale * rotation * mx,
        }
    };
    Ok((sim, sim.apply(pred)))
}

/// RMSE of camera positions.
pub fn ate(aligned: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_lengths(aligned, gt)?;
    let s: f64 = aligned
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(a, b)| (a.translation - b.translation).norm_squared())
        .sum();
    Ok((s / aligned.len() as f64).sqrt())
}

/// Per-pair relative pose errors; rotations in degrees.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RpeErrors {
    pub translation: Vec<f64>,
    pub rotation_deg: Vec<f64>,
}

impl RpeErrors {
    pub fn mean_translation(&self) -> f64 {
        mean(&self.translation)
    }

    pub fn mean_rotation_deg(&self) -> f64 {
        mean(&self.rotation_deg)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Relative pose error `E = (Q_i^-1 Q_{i+d})^-1 (P_i^-1 P_{i+d})` for every
/// `i`, with `Q` the ground truth and `P` the prediction.
pub fn rpe(pred: &Trajectory, gt: &Trajectory, delta: usize) -> Result<RpeErrors> {
    check_lengths(pred, gt)?;
    if delta == 0 || pred.len() <= delta {
        return Err(Error::InvalidArgument(format!(
            "rpe delta {delta} needs more than {} frames",
            pred.len()
        )));
    }
    let mut out = RpeErrors {
        translation: Vec::new(),
        rotation_deg: Vec::new(),
    };
    for i in 0..pred.len() - delta {
        let q = gt.poses[i].inverse().compose(&gt.poses[i + delta]);
        let p = pred.poses[i].inverse().compose(&pred.poses[i + delta]);
        let e = q.inverse().compose(&p);
        out.translation.push(e.translation.norm());
        out.rotation_deg.push(rotation_angle(&e.rotation).to_degrees());
    }
    Ok(out)
}

/// Depth accuracy after per-sequence median scaling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Factor applied to every prediction.
    pub scale: f64,
    pub valid_pixels: usize,
    /// Per-pixel absolute relative errors in ascending order.
    #[serde(skip)]
    pub sorted_abs_rel: Vec<f64>,
}

/// Pixels with ground truth above `cap`, or non-positive/non-finite values
/// on either side, are excluded before scaling and accumulation.
pub fn depth_metrics(pred: &[DepthMap], gt: &[DepthMap], cap: f64) -> Result<DepthMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted and {} ground-truth depth maps",
            pred.len(),
            gt.len()
        )));
    }
    let mut pairs = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        if (p.width, p.height) != (g.width, g.height) {
            return Err(Error::DimensionMismatch {
                expected: (g.width, g.height),
                got: (p.width, p.height),
            });
        }
        for (&a, &b) in p.values.iter().zip(&g.values) {
            let ok = |v: f64| v > 0.0 && v.is_finite();
            if ok(a) && ok(b) && b <= cap {
                pairs.push((a, b));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no valid pixels for depth metrics".into()));
    }
    let mp = median(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let mg = median(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let scale = mg / mp;
    let n = pairs.len() as f64;
    let mut rel = Vec::with_capacity(pairs.len());
    let mut sq = 0.0;
    let mut within = [0usize; 3];
    for &(p, g) in &pairs {
        let s = scale * p;
        rel.push((s - g).abs() / g);
        sq += (s - g).powi(2);
        let ratio = (s / g).max(g / s);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
    }
    let abs_rel = rel.iter().sum::<f64>() / n;
    rel.sort_by(f64::total_cmp);
    Ok(DepthMetrics {
        abs_rel,
        rmse: (sq / n).sqrt(),
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
        scale,
        valid_pixels: pairs.len(),
        sorted_abs_rel: rel,
    })
}

/// All metrics of one evaluated sequence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub ate: f64,
    pub trajectory_diameter: f64,
    pub alignment_scale: f64,
    pub rpe_translation_mean: f64,
    pub rpe_rotation_mean_deg: f64,
    pub rpe: RpeErrors,
    pub depth: Option<DepthMetrics>,
}

/// Aligns `pred` to `gt`, then measures ATE, RPE (on the aligned
/// trajectory, gap `delta`) and, when depths are given, depth metrics.
pub fn evaluate(pred: &Trajectory, gt: &Trajectory, delta: usize, depths: Option<(&[DepthMap], &[DepthMap])>) -> Result<MetricReport> {
    let (sim, aligned) = align_trajectory(pred, gt)?;
    let ate = ate(&aligned, gt)?;
    let rpe = if gt.len() > delta {
        rpe(&aligned, gt, delta)?
    } else {
        RpeErrors {
            translation: vec![],
            rotation_deg: vec![],
        }
    };
    let depth = depths.map(|(p, g)| depth_metrics(p, g, DEPTH_CAP)).transpose()?;
    Ok(MetricReport {
        ate,
        trajectory_diameter: gt.diameter(),
        alignment_scale: sim.scale,
        rpe_translation_mean: rpe.mean_translation(),
        rpe_rotation_mean_deg: rpe.mean_rotation_deg(),
        rpe,
        depth,
    })
}
