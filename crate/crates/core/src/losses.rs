//! Residuals and regularizers of the joint objective with analytic Jacobians.
//!
//! The solver works with signed residual vectors whose squared norm is the
//! corresponding loss. Per-frame local parameters are addressed by slot:
//! `0..3` rotation increment, `3..6` translation, `6` focal, `7 + k` handle k.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use crate::correspondence::BinaryMask;
use crate::deformation::DeformationGrid;
use crate::error::{Error, Result};
use crate::geometry::{skew, CameraPoint, ImagePlane, PixelCoord, Pose};

pub const SLOT_ROTATION: usize = 0;
pub const SLOT_TRANSLATION: usize = 3;
pub const SLOT_FOCAL: usize = 6;
pub const SLOT_HANDLE: usize = 7;

/// A per-frame local parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamRef {
    pub frame: usize,
    pub slot: usize,
}

impl ParamRef {
    pub fn handle(frame: usize, k: usize) -> Self {
        Self {
            frame,
            slot: SLOT_HANDLE + k,
        }
    }
}

/// Residual components with their dense Jacobian over `columns`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub values: Vec<f64>,
    pub columns: Vec<ParamRef>,
    /// `values.len() x columns.len()`.
    pub jacobian: DMatrix<f64>,
}

impl Residual {
    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Scales residual and Jacobian by `w`.
    pub fn scale(&mut self, w: f64) {
        self.values.iter_mut().for_each(|v| *v *= w);
        self.jacobian *= w;
    }

    /// Huber reweighting: residuals with norm above `delta` are scaled so
    /// their squared norm equals the Huber cost `2 delta |r| - delta^2`.
    pub fn huberize(&mut self, delta: f64) {
        let n = self.squared_norm().sqrt();
        if n > delta {
            self.scale(((2.0 * delta * n - delta * delta) / (n * n)).sqrt());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite()) && self.jacobian.iter().all(|v| v.is_finite())
    }
}

/// Which similarity loss the reprojection residual measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    Euclidean,
    SpatialDisparity,
    #[default]
    SpatialRatio,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Euclidean => "euclidean",
            LossKind::SpatialDisparity => "spatial+disparity",
            LossKind::SpatialRatio => "spatial+ratio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euclidean" => Some(LossKind::Euclidean),
            "spatial+disparity" | "disparity" => Some(LossKind::SpatialDisparity),
            "spatial+ratio" | "ratio" => Some(LossKind::SpatialRatio),
            _ => None,
        }
    }
}

/// Regularizer weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_deform: f64,
    pub lambda_focal: f64,
    pub focal_prior: f64,
    /// Divide the dynamic coverage by `sum_p b_k(p)`.
    pub normalize_dynamic: bool,
    /// Count each unordered neighbor pair once (otherwise twice).
    pub pairs_once: bool,
    /// Huber threshold applied to reprojection residuals.
    pub huber: Option<f64>,
}

/// Focal length, in half-long-side units, of a 40 degree field of view.
pub fn default_focal_prior() -> f64 {
    1.0 / 20f64.to_radians().tan()
}

/// The literal prior constant 0.35.
pub const LITERAL_FOCAL_PRIOR: f64 = 0.35;

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 10.0,
            lambda_deform: 1.0,
            lambda_focal: 1.0,
            focal_prior: default_focal_prior(),
            normalize_dynamic: true,
            pairs_once: true,
            huber: None,
        }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_deform", self.lambda_deform),
            ("lambda_focal", self.lambda_focal),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.focal_prior > 0.0 && self.focal_prior.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal prior must be positive, got {}",
                self.focal_prior
            )));
        }
        if let Some(h) = self.huber {
            if !(h > 0.0) {
                return Err(Error::InvalidArgument(format!("huber threshold must be positive, got {h}")));
            }
        }
        Ok(())
    }
}

fn check_z(a: &CameraPoint, b: &CameraPoint) -> Result<()> {
    for z in [a.z, b.z] {
        if !(z > 0.0) {
            return Err(Error::InvalidInput(format!("depth must be positive, got z = {z}")));
        }
    }
    Ok(())
}

/// `|a - b|^2`.
pub fn loss_euclidean(a: &CameraPoint, b: &CameraPoint) -> f64 {
    (a - b).norm_squared()
}

/// `|a_xy / a_z - b_xy / b_z|^2`.
pub fn loss_spatial(a: &CameraPoint, b: &CameraPoint) -> Result<f64> {
    check_z(a, b)?;
    let d = Vector2::new(a.x / a.z - b.x / b.z, a.y / a.z - b.y / b.z);
    Ok(d.norm_squared())
}

/// `(1/a_z - 1/b_z)^2`.
pub fn loss_disparity(a: &CameraPoint, b: &CameraPoint) -> Result<f64> {
    check_z(a, b)?;
    Ok((1.0 / a.z - 1.0 / b.z).powi(2))
}

/// `max(a_z, b_z) / min(a_z, b_z) - 1`.
pub fn loss_ratio(a: &CameraPoint, b: &CameraPoint) -> Result<f64> {
    check_z(a, b)?;
    Ok(a.z.max(b.z) / a.z.min(b.z) - 1.0)
}

/// `loss_spatial + loss_ratio`.
pub fn loss_sim(a: &CameraPoint, b: &CameraPoint) -> Result<f64> {
    Ok(loss_spatial(a, b)? + loss_ratio(a, b)?)
}

/// Scalar loss of the given kind; equals the squared norm of the residual
/// built by [`residual_repro`], except for the ratio term which enters the
/// residual as `max/min - 1` itself.
pub fn loss_of_kind(kind: LossKind, a: &CameraPoint, b: &CameraPoint) -> Result<f64> {
    match kind {
        LossKind::Euclidean => {
            check_z(a, b)?;
            Ok(loss_euclidean(a, b))
        }
        LossKind::SpatialDisparity => Ok(loss_spatial(a, b)? + loss_disparity(a, b)?),
        LossKind::SpatialRatio => Ok(loss_spatial(a, b)? + loss_ratio(a, b)?.powi(2)),
    }
}

/// A correspondence ready for residual evaluation: pixel `p` in frame `src`
/// matched to `q` in frame `dst`, with both depths sampled once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReproTerm {
    pub src: usize,
    pub dst: usize,
    pub p: PixelCoord,
    pub q: PixelCoord,
    pub plane_p: Vector2<f64>,
    pub plane_q: Vector2<f64>,
    pub depth_p: f64,
    pub depth_q: f64,
}

impl ReproTerm {
    /// Samples depths at `p` and `q`; `None` if either falls outside the raster.
    pub fn new(
        src: usize,
        dst: usize,
        p: PixelCoord,
        q: PixelCoord,
        depth_src: &crate::geometry::DepthMap,
        depth_dst: &crate::geometry::DepthMap,
    ) -> Option<Self> {
        let depth_p = depth_src.sample(p)?;
        let depth_q = depth_dst.sample(q)?;
        let plane = depth_src.plane();
        Some(Self {
            src,
            dst,
            p,
            q,
            plane_p: plane.to_plane(p),
            plane_q: plane.to_plane(q),
            depth_p,
            depth_q,
        })
    }
}

/// Read-only view of one frame's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub pose: &'a Pose,
    pub focal: f64,
    pub grid: &'a DeformationGrid,
}

/// The two camera points compared by the reprojection residual: `a` is the
/// source point reprojected into the destination camera, `b` the destination
/// point lifted from the flow target.
pub fn repro_points(term: &ReproTerm, fi: FrameView, fj: FrameView) -> (CameraPoint, CameraPoint) {
    let phi_i = fi.grid.eval(term.p);
    let phi_j = fj.grid.eval(term.q);
    let z = phi_i * term.depth_p;
    let x = Vector3::new(z * term.plane_p.x / fi.focal, z * term.plane_p.y / fi.focal, z);
    let w = fi.pose.rotation * x + fi.pose.translation;
    let y = fj.pose.rotation.transpose() * (w - fj.pose.translation);
    let a = Vector3::new(fj.focal * y.x, fj.focal * y.y, y.z);
    let zb = phi_j * term.depth_q;
    let b = Vector3::new(zb * term.plane_q.x, zb * term.plane_q.y, zb);
    (a, b)
}

/// Reprojection residual with its Jacobian over both frames' local
/// parameters. Fails with [`Error::BehindCamera`] when the reprojected point
/// is not in front of the destination camera.
pub fn residual_repro(term: &ReproTerm, fi: FrameView, fj: FrameView, kind: LossKind) -> Result<Residual> {
    let basis_i = fi.grid.basis(term.p);
    let basis_j = fj.grid.basis(term.q);
    let phi_i: f64 = basis_i.iter().map(|(k, w)| w * fi.grid.handles[k]).sum();
    let phi_j: f64 = basis_j.iter().map(|(k, w)| w * fj.grid.handles[k]).sum();

    // Metric point in camera i and its derivative directions.
    let ray_i = Vector3::new(term.plane_p.x / fi.focal, term.plane_p.y / fi.focal, 1.0);
    let x = phi_i * term.depth_p * ray_i;
    let ri = &fi.pose.rotation;
    let rjt = fj.pose.rotation.transpose();
    let w = ri * x + fi.pose.translation;
    let y = rjt * (w - fj.pose.translation);
    let uj = fj.focal;
    let a = Vector3::new(uj * y.x, uj * y.y, y.z);
    if !(a.z > 0.0) {
        return Err(Error::BehindCamera { z: a.z });
    }
    let ray_j = Vector3::new(term.plane_q.x, term.plane_q.y, 1.0);
    let b = phi_j * term.depth_q * ray_j;
    if !(b.z > 0.0) {
        return Err(Error::BehindCamera { z: b.z });
    }

    // dr/da and dr/db for the chosen loss.
    let (values, dr_da, dr_db): (Vec<f64>, Vec<Vector3<f64>>, Vec<Vector3<f64>>) = match kind {
        LossKind::Euclidean => {
            let d = a - b;
            (
                vec![d.x, d.y, d.z],
                vec![Vector3::x(), Vector3::y(), Vector3::z()],
                vec![-Vector3::x(), -Vector3::y(), -Vector3::z()],
            )
        }
        LossKind::SpatialDisparity | LossKind::SpatialRatio => {
            let sx = a.x / a.z - b.x / b.z;
            let sy = a.y / a.z - b.y / b.z;
            let gax = Vector3::new(1.0 / a.z, 0.0, -a.x / (a.z * a.z));
            let gay = Vector3::new(0.0, 1.0 / a.z, -a.y / (a.z * a.z));
            let gbx = -Vector3::new(1.0 / b.z, 0.0, -b.x / (b.z * b.z));
            let gby = -Vector3::new(0.0, 1.0 / b.z, -b.y / (b.z * b.z));
            let (dv, gaz, gbz) = if kind == LossKind::SpatialDisparity {
                (
                    1.0 / a.z - 1.0 / b.z,
                    Vector3::new(0.0, 0.0, -1.0 / (a.z * a.z)),
                    Vector3::new(0.0, 0.0, 1.0 / (b.z * b.z)),
                )
            } else if a.z >= b.z {
                (
                    a.z / b.z - 1.0,
                    Vector3::new(0.0, 0.0, 1.0 / b.z),
                    Vector3::new(0.0, 0.0, -a.z / (b.z * b.z)),
                )
            } else {
                (
                    b.z / a.z - 1.0,
                    Vector3::new(0.0, 0.0, -b.z / (a.z * a.z)),
                    Vector3::new(0.0, 0.0, 1.0 / a.z),
                )
            };
            (vec![sx, sy, dv], vec![gax, gay, gaz], vec![gbx, gby, gbz])
        }
    };

    // Columns: frame i (pose, focal, handles) then frame j.
    let mut columns = Vec::with_capacity(2 * SLOT_HANDLE + basis_i.len() + basis_j.len());
    let mut da: Vec<Vector3<f64>> = Vec::with_capacity(columns.capacity());
    let mut db: Vec<Vector3<f64>> = Vec::with_capacity(columns.capacity());
    let k_j = Matrix3::from_diagonal(&Vector3::new(uj, uj, 1.0));
    let da_dw = k_j * rjt;
    let zero = Vector3::zeros();

    // Frame i rotation: dW/dw_i = -R_i [X]x.
    let dw_rot = -(ri * skew(&x));
    for c in 0..3 {
        columns.push(ParamRef {
            frame: term.src,
            slot: SLOT_ROTATION + c,
        });
        da.push(da_dw * dw_rot.column(c));
        db.push(zero);
    }
    for c in 0..3 {
        columns.push(ParamRef {
            frame: term.src,
            slot: SLOT_TRANSLATION + c,
        });
        da.push(da_dw.column(c).into());
        db.push(zero);
    }
    // Frame i focal: dX/du_i = phi d [-p/u^2, 0].
    let dx_du = phi_i
        * term.depth_p
        * Vector3::new(
            -term.plane_p.x / (fi.focal * fi.focal),
            -term.plane_p.y / (fi.focal * fi.focal),
            0.0,
        );
    columns.push(ParamRef {
        frame: term.src,
        slot: SLOT_FOCAL,
    });
    da.push(da_dw * (ri * dx_du));
    db.push(zero);
    let dadx = da_dw * ri;
    for (k, bk) in basis_i.iter() {
        columns.push(ParamRef::handle(term.src, k));
        da.push(dadx * (bk * term.depth_p * ray_i));
        db.push(zero);
    }

    // Frame j rotation: dY/dw_j = [Y]x.
    let dy_rot = skew(&y);
    for c in 0..3 {
        columns.push(ParamRef {
            frame: term.dst,
            slot: SLOT_ROTATION + c,
        });
        da.push(k_j * dy_rot.column(c));
        db.push(zero);
    }
    for c in 0..3 {
        columns.push(ParamRef {
            frame: term.dst,
            slot: SLOT_TRANSLATION + c,
        });
        da.push(-(k_j * rjt.column(c)));
        db.push(zero);
    }
    columns.push(ParamRef {
        frame: term.dst,
        slot: SLOT_FOCAL,
    });
    da.push(Vector3::new(y.x, y.y, 0.0));
    db.push(zero);
    for (k, bk) in basis_j.iter() {
        columns.push(ParamRef::handle(term.dst, k));
        da.push(zero);
        db.push(bk * term.depth_q * ray_j);
    }

    let rows = values.len();
    let mut jacobian = DMatrix::zeros(rows, columns.len());
    for (c, (va, vb)) in da.iter().zip(&db).enumerate() {
        for r in 0..rows {
            jacobian[(r, c)] = dr_da[r].dot(va) + dr_db[r].dot(vb);
        }
    }
    Ok(Residual { values, columns, jacobian })
}

/// Per-handle regularizer weights `lambda1 + lambda2 * coverage_k`, where the
/// dynamic coverage is `sum_p m(p) b_k(p)`, divided by `sum_p b_k(p)` when
/// `normalize_dynamic` is set.
pub fn handle_weights(mask: &BinaryMask, grid: &DeformationGrid, w: &RegWeights) -> Result<Vec<f64>> {
    if mask.width != grid.width || mask.height != grid.height {
        return Err(Error::DimensionMismatch {
            expected: (grid.width, grid.height),
            got: (mask.width, mask.height),
        });
    }
    let mut dynamic = vec![0.0; grid.len()];
    let mut support = vec![0.0; grid.len()];
    for y in 0..mask.height {
        for x in 0..mask.width {
            let set = mask.get(x, y);
            for (k, b) in grid.basis(PixelCoord::new(x as f64, y as f64)).iter() {
                support[k] += b;
                if set {
                    dynamic[k] += b;
                }
            }
        }
    }
    Ok(dynamic
        .iter()
        .zip(&support)
        .map(|(&m, &s)| {
            let frac = if w.normalize_dynamic {
                if s > 0.0 {
                    m / s
                } else {
                    0.0
                }
            } else {
                m
            };
            w.lambda1 + w.lambda2 * frac
        })
        .collect())
}

/// `sum_i sum_(k,r) (s_k - s_r)^2 max(w_k, w_r)` over adjacent handle pairs,
/// with its gradient per frame and handle.
pub fn loss_deform(grids: &[DeformationGrid], weights: &[Vec<f64>], pairs_once: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    if grids.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} grids but {} weight vectors",
            grids.len(),
            weights.len()
        )));
    }
    let mult = if pairs_once { 1.0 } else { 2.0 };
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(grids.len());
    for (g, w) in grids.iter().zip(weights) {
        if w.len() != g.len() {
            return Err(Error::InvalidArgument(format!(
                "grid has {} handles but {} weights",
                g.len(),
                w.len()
            )));
        }
        let mut gr = vec![0.0; g.len()];
        for (k, r) in g.neighbor_pairs() {
            let c = mult * w[k].max(w[r]);
            let d = g.handles[k] - g.handles[r];
            total += c * d * d;
            gr[k] += 2.0 * c * d;
            gr[r] -= 2.0 * c * d;
        }
        grad.push(gr);
    }
    Ok((total, grad))
}

/// Smoothness residuals of one frame's grid, scaled by `sqrt(lambda_deform)`.
pub fn residuals_deform(frame: usize, grid: &DeformationGrid, weights: &[f64], reg: &RegWeights) -> Vec<Residual> {
    let mult = if reg.pairs_once { 1.0 } else { 2.0 };
    grid.neighbor_pairs()
        .into_iter()
        .map(|(k, r)| {
            let c = (mult * reg.lambda_deform * weights[k].max(weights[r])).sqrt();
            Residual {
                values: vec![c * (grid.handles[k] - grid.handles[r])],
                columns: vec![ParamRef::handle(frame, k), ParamRef::handle(frame, r)],
                jacobian: DMatrix::from_row_slice(1, 2, &[c, -c]),
            }
        })
        .collect()
}

/// `sum_i (u_i - prior)^2` with gradient `2 (u_i - prior)`.
pub fn loss_focal(focals: &[f64], prior: f64) -> (f64, Vec<f64>) {
    let loss = focals.iter().map(|u| (u - prior).powi(2)).sum();
    let grad = focals.iter().map(|u| 2.0 * (u - prior)).collect();
    (loss, grad)
}

/// Focal prior residual of one frame, scaled by `sqrt(lambda_focal)`.
pub fn residual_focal(frame: usize, focal: f64, reg: &RegWeights) -> Residual {
    let c = reg.lambda_focal.sqrt();
    Residual {
        values: vec![c * (focal - reg.focal_prior)],
        columns: vec![ParamRef { frame, slot: SLOT_FOCAL }],
        jacobian: DMatrix::from_element(1, 1, c),
    }
}

/// Image-plane helper shared with the filter: the camera point of pixel `p`
/// with depth `z`.
pub fn camera_point(plane: &ImagePlane, p: PixelCoord, z: f64) -> CameraPoint {
    let v = plane.to_plane(p);
    Vector3::new(z * v.x, z * v.y, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{so3_exp, DepthMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(x: f64, y: f64, z: f64) -> CameraPoint {
        Vector3::new(x, y, z)
    }

    #[test]
    fn scalar_loss_examples() {
        assert_eq!(loss_euclidean(&pt(1.0, 2.0, 3.0), &pt(1.0, 2.0, 3.0)), 0.0);
        assert_eq!(loss_euclidean(&pt(0.0, 0.0, 0.0), &pt(1.0, 2.0, 2.0)), 9.0);
        assert_eq!(loss_spatial(&pt(2.0, 0.0, 2.0), &pt(0.0, 0.0, 2.0)).unwrap(), 1.0);
        assert_eq!(loss_spatial(&pt(1.0, 2.0, 4.0), &pt(2.0, 4.0, 8.0)).unwrap(), 0.0);
        assert_eq!(loss_disparity(&pt(0.0, 0.0, 1.0), &pt(0.0, 0.0, 2.0)).unwrap(), 0.25);
        assert_eq!(loss_ratio(&pt(0.0, 0.0, 5.0), &pt(1.0, 0.0, 5.0)).unwrap(), 0.0);
        assert_eq!(loss_ratio(&pt(0.0, 0.0, 2.0), &pt(0.0, 0.0, 1.0)).unwrap(), 1.0);
        assert_eq!(loss_ratio(&pt(0.0, 0.0, 1.0), &pt(0.0, 0.0, 2.0)).unwrap(), 1.0);
        assert_eq!(
            loss_ratio(&pt(0.0, 0.0, 20.0), &pt(0.0, 0.0, 10.0)).unwrap(),
            loss_ratio(&pt(0.0, 0.0, 2.0), &pt(0.0, 0.0, 1.0)).unwrap()
        );
        assert_eq!(loss_sim(&pt(1.0, 1.0, 1.0), &pt(1.0, 1.0, 1.0)).unwrap(), 0.0);
        assert_eq!(loss_sim(&pt(2.0, 4.0, 2.0), &pt(1.0, 2.0, 1.0)).unwrap(), 1.0);
        assert!(loss_spatial(&pt(0.0, 0.0, 0.0), &pt(0.0, 0.0, 1.0)).is_err());
        assert!(loss_disparity(&pt(0.0, 0.0, 1.0), &pt(0.0, 0.0, -1.0)).is_err());
        assert!(loss_ratio(&pt(0.0, 0.0, -1.0), &pt(0.0, 0.0, 1.0)).is_err());
    }

    fn rand_pair(rng: &mut ChaCha8Rng) -> (CameraPoint, CameraPoint) {
        let a = pt(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.2..5.0));
        let b = pt(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.2..5.0));
        (a, b)
    }

    #[test]
    fn homogeneity_exponents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (a, b) = rand_pair(&mut rng);
            for s in [0.1, 10.0] {
                let (sa, sb) = (a * s, b * s);
                let e = loss_euclidean(&sa, &sb) / loss_euclidean(&a, &b);
                let d = loss_disparity(&sa, &sb).unwrap() / loss_disparity(&a, &b).unwrap();
                assert!((e / (s * s) - 1.0).abs() < 1e-12);
                assert!((d * s * s - 1.0).abs() < 1e-12);
                let r0 = loss_ratio(&a, &b).unwrap();
                assert!((loss_ratio(&sa, &sb).unwrap() - r0).abs() <= 1e-12 * r0.max(1.0));
                let sp = loss_spatial(&a, &b).unwrap();
                assert!((loss_spatial(&sa, &sb).unwrap() - sp).abs() <= 1e-12 * sp.max(1.0));
            }
            let s = 1.7;
            assert!(loss_disparity(&(a * s), &(b * s)).unwrap() <= loss_disparity(&a, &b).unwrap());
        }
    }

    #[test]
    fn sim_is_sum_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (a, b) = rand_pair(&mut rng);
            let s = loss_sim(&a, &b).unwrap();
            assert_eq!(s, loss_spatial(&a, &b).unwrap() + loss_ratio(&a, &b).unwrap());
            assert_eq!(s, loss_sim(&b, &a).unwrap());
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative(ax in -3.0f64..3.0, ay in -3.0f64..3.0, az in 0.1f64..10.0,
                              bx in -3.0f64..3.0, by in -3.0f64..3.0, bz in 0.1f64..10.0) {
            let (a, b) = (pt(ax, ay, az), pt(bx, by, bz));
            prop_assert!(loss_euclidean(&a, &b) >= 0.0);
            prop_assert!(loss_spatial(&a, &b).unwrap() >= 0.0);
            prop_assert!(loss_disparity(&a, &b).unwrap() >= 0.0);
            prop_assert!(loss_ratio(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(loss_ratio(&a, &b).unwrap() == 0.0, az == bz);
            let same_ray = pt(ax * 2.0, ay * 2.0, az * 2.0);
            prop_assert!(loss_spatial(&a, &same_ray).unwrap() < 1e-24);
        }
    }

    struct Frame {
        pose: Pose,
        focal: f64,
        grid: DeformationGrid,
    }

    impl Frame {
        fn view(&self) -> FrameView<'_> {
            FrameView {
                pose: &self.pose,
                focal: self.focal,
                grid: &self.grid,
            }
        }

        fn perturbed(&self, slot: usize, h: f64) -> Frame {
            let mut f = Frame {
                pose: self.pose,
                focal: self.focal,
                grid: self.grid.clone(),
            };
            if slot < 3 {
                let mut w = Vector3::zeros();
                w[slot] = h;
                f.pose.rotation = self.pose.rotation * so3_exp(&w);
            } else if slot < 6 {
                f.pose.translation[slot - 3] += h;
            } else if slot == SLOT_FOCAL {
                f.focal += h;
            } else {
                f.grid.handles[slot - SLOT_HANDLE] += h;
            }
            f
        }
    }

    fn random_setup(rng: &mut ChaCha8Rng) -> (ReproTerm, Frame, Frame) {
        let (w, h) = (40usize, 30usize);
        let plane = ImagePlane::new(w, h);
        let grid = |rng: &mut ChaCha8Rng| DeformationGrid::new(3, 2, w, h, (0..6).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap();
        let fi = Frame {
            pose: Pose {
                rotation: so3_exp(&Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                )),
                translation: Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            },
            focal: rng.gen_range(1.5..3.5),
            grid: grid(rng),
        };
        let fj = Frame {
            pose: Pose {
                rotation: fi.pose.rotation
                    * so3_exp(&Vector3::new(
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                    )),
                translation: fi.pose.translation
                    + Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)),
            },
            focal: rng.gen_range(1.5..3.5),
            grid: grid(rng),
        };
        let p = PixelCoord::new(rng.gen_range(0.0..39.0), rng.gen_range(0.0..29.0));
        let q = PixelCoord::new(rng.gen_range(0.0..39.0), rng.gen_range(0.0..29.0));
        let term = ReproTerm {
            src: 0,
            dst: 1,
            p,
            q,
            plane_p: plane.to_plane(p),
            plane_q: plane.to_plane(q),
            depth_p: rng.gen_range(2.0..6.0),
            depth_q: rng.gen_range(2.0..6.0),
        };
        (term, fi, fj)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn repro_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-6;
        for kind in [LossKind::Euclidean, LossKind::SpatialDisparity, LossKind::SpatialRatio] {
            let mut checked = 0;
            let mut worst: f64 = 0.0;
            while checked < 1000 {
                let (term, fi, fj) = random_setup(&mut rng);
                let (a, b) = repro_points(&term, fi.view(), fj.view());
                if a.z <= 0.1 || (kind == LossKind::SpatialRatio && (a.z / b.z - 1.0).abs() < 1e-3) {
                    continue;
                }
                let res = residual_repro(&term, fi.view(), fj.view(), kind).unwrap();
                for (c, col) in res.columns.iter().enumerate() {
                    let (plus, minus) = if col.frame == term.src {
                        let (fp, fm) = (fi.perturbed(col.slot, h), fi.perturbed(col.slot, -h));
                        (
                            residual_repro(&term, fp.view(), fj.view(), kind).unwrap(),
                            residual_repro(&term, fm.view(), fj.view(), kind).unwrap(),
                        )
                    } else {
                        let (fp, fm) = (fj.perturbed(col.slot, h), fj.perturbed(col.slot, -h));
                        (
                            residual_repro(&term, fi.view(), fp.view(), kind).unwrap(),
                            residual_repro(&term, fi.view(), fm.view(), kind).unwrap(),
                        )
                    };
                    for r in 0..res.values.len() {
                        let fd = (plus.values[r] - minus.values[r]) / (2.0 * h);
                        worst = worst.max(rel_err(res.jacobian[(r, c)], fd));
                    }
                }
                checked += 1;
            }
            assert!(worst < 1e-4, "{kind:?}: {worst}");
        }
    }

    #[test]
    fn residual_matches_scalar_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let (term, fi, fj) = random_setup(&mut rng);
            let (a, b) = repro_points(&term, fi.view(), fj.view());
            if a.z <= 0.0 {
                continue;
            }
            for kind in [LossKind::Euclidean, LossKind::SpatialDisparity, LossKind::SpatialRatio] {
                let r = residual_repro(&term, fi.view(), fj.view(), kind).unwrap();
                let l = loss_of_kind(kind, &a, &b).unwrap();
                assert!((r.squared_norm() - l).abs() < 1e-10 * l.max(1.0));
            }
        }
    }

    #[test]
    fn translation_perturbation_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (term, fi, fj) = random_setup(&mut rng);
        let r0 = residual_repro(&term, fi.view(), fj.view(), LossKind::SpatialRatio).unwrap();
        let col = r0
            .columns
            .iter()
            .position(|c| c.frame == 1 && c.slot == SLOT_TRANSLATION + 2)
            .unwrap();
        let mut errs = Vec::new();
        for eps in [1e-3, 1e-4] {
            let fp = fj.perturbed(SLOT_TRANSLATION + 2, eps);
            let r1 = residual_repro(&term, fi.view(), fp.view(), LossKind::SpatialRatio).unwrap();
            let mut e: f64 = 0.0;
            for r in 0..3 {
                let predicted = r0.values[r] + eps * r0.jacobian[(r, col)];
                e = e.max((r1.values[r] - predicted).abs());
            }
            errs.push(e);
        }
        // Taylor remainder is quadratic: shrinking eps by 10 shrinks it ~100x.
        assert!(errs[1] < errs[0] / 50.0, "{errs:?}");
    }

    #[test]
    fn behind_camera_is_reported() {
        let (w, h) = (8usize, 6usize);
        let plane = ImagePlane::new(w, h);
        let grid = DeformationGrid::constant(1, 1, w, h, 1.0).unwrap();
        let pi = Pose::identity();
        let pj = Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 10.0),
        };
        let p = PixelCoord::new(3.5, 2.5);
        let term = ReproTerm {
            src: 0,
            dst: 1,
            p,
            q: p,
            plane_p: plane.to_plane(p),
            plane_q: plane.to_plane(p),
            depth_p: 2.0,
            depth_q: 2.0,
        };
        let fi = FrameView {
            pose: &pi,
            focal: 2.0,
            grid: &grid,
        };
        let fj = FrameView {
            pose: &pj,
            focal: 2.0,
            grid: &grid,
        };
        assert!(matches!(
            residual_repro(&term, fi, fj, LossKind::SpatialRatio),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn repro_term_samples_depth() {
        let d = DepthMap::constant(5, 4, 0, 3.0).unwrap();
        let t = ReproTerm::new(0, 1, PixelCoord::new(1.0, 1.0), PixelCoord::new(2.5, 1.5), &d, &d).unwrap();
        assert_eq!(t.depth_p, 3.0);
        assert!((t.depth_q - 3.0).abs() < 1e-15);
        assert!(ReproTerm::new(0, 1, PixelCoord::new(1.0, 1.0), PixelCoord::new(9.0, 1.0), &d, &d).is_none());
    }

    #[test]
    fn handle_weight_examples() {
        let w = RegWeights::default();
        let grid = DeformationGrid::constant(3, 3, 20, 20, 1.0).unwrap();
        let empty = BinaryMask::new(20, 20, vec![false; 400]).unwrap();
        assert!(handle_weights(&empty, &grid, &w).unwrap().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let full = BinaryMask::new(20, 20, vec![true; 400]).unwrap();
        assert!(handle_weights(&full, &grid, &w).unwrap().iter().all(|&v| (v - 10.1).abs() < 1e-12));

        // Left half dynamic on a 2x1 grid spanning 20 pixels: by the symmetry of
        // the tent functions each handle sees half its support only if the
        // split is at the middle; compare against brute force instead.
        let grid = DeformationGrid::constant(2, 1, 20, 4, 1.0).unwrap();
        let mask = BinaryMask::new(20, 4, (0..80).map(|i| i % 20 < 10).collect()).unwrap();
        let got = handle_weights(&mask, &grid, &w).unwrap();
        for k in 0..2 {
            let (mut m, mut s) = (0.0, 0.0);
            for _ in 0..4 {
                for x in 0..20 {
                    let bk = if k == 0 { 1.0 - x as f64 / 19.0 } else { x as f64 / 19.0 };
                    s += bk;
                    if x < 10 {
                        m += bk;
                    }
                }
            }
            assert!((got[k] - (0.1 + 10.0 * m / s)).abs() < 1e-12);
        }

        // A mask covering exactly half of a 1x1 grid's region.
        let grid = DeformationGrid::constant(1, 1, 20, 4, 1.0).unwrap();
        let got = handle_weights(&mask, &grid, &w).unwrap();
        assert!((got[0] - 5.1).abs() < 1e-12);

        let bad = BinaryMask::new(10, 4, vec![false; 40]).unwrap();
        assert!(handle_weights(&bad, &grid, &w).is_err());

        let raw = RegWeights {
            normalize_dynamic: false,
            ..w
        };
        let got = handle_weights(&mask, &grid, &raw).unwrap();
        assert!((got[0] - (0.1 + 10.0 * 40.0)).abs() < 1e-9);
    }

    #[test]
    fn deform_loss_examples() {
        let g = DeformationGrid::constant(4, 3, 30, 20, 2.0).unwrap();
        assert_eq!(loss_deform(std::slice::from_ref(&g), &[vec![1.0; 12]], true).unwrap().0, 0.0);

        let g = DeformationGrid::new(2, 1, 30, 20, vec![1.0, 3.0]).unwrap();
        let (l, _) = loss_deform(&[g], &[vec![0.1, 0.1]], true).unwrap();
        assert!((l - 0.4).abs() < 1e-15);
    }

    #[test]
    fn deform_loss_matches_pair_enumeration_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (cols, rows) = (5usize, 4usize);
        let g = DeformationGrid::new(cols, rows, 50, 40, (0..20).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap();
        let w: Vec<f64> = (0..20).map(|_| rng.gen_range(0.1..10.1)).collect();

        // Brute force over every ordered pair of handles at grid distance one.
        let mut brute = 0.0;
        for a in 0..20 {
            for b in (a + 1)..20 {
                let (ca, ra) = (a % cols, a / cols);
                let (cb, rb) = (b % cols, b / cols);
                if ca.abs_diff(cb) + ra.abs_diff(rb) == 1 {
                    brute += (g.handles[a] - g.handles[b]).powi(2) * w[a].max(w[b]);
                }
            }
        }
        let (l, grad) = loss_deform(std::slice::from_ref(&g), std::slice::from_ref(&w), true).unwrap();
        assert!((l - brute).abs() < 1e-12);
        let (l2, _) = loss_deform(std::slice::from_ref(&g), std::slice::from_ref(&w), false).unwrap();
        assert!((l2 - 2.0 * brute).abs() < 1e-12);

        let h = 1e-6;
        for k in 0..20 {
            let mut gp = g.clone();
            gp.handles[k] += h;
            let mut gm = g.clone();
            gm.handles[k] -= h;
            let fd = (loss_deform(&[gp], std::slice::from_ref(&w), true).unwrap().0
                - loss_deform(&[gm], std::slice::from_ref(&w), true).unwrap().0)
                / (2.0 * h);
            assert!(rel_err(grad[0][k], fd) < 1e-4);
        }

        // Residual form reproduces the weighted loss.
        let reg = RegWeights {
            lambda_deform: 1.0,
            ..RegWeights::default()
        };
        let rs = residuals_deform(0, &g, &w, &reg);
        let sum: f64 = rs.iter().map(|r| r.squared_norm()).sum();
        assert!((sum - brute).abs() < 1e-12);
    }

    #[test]
    fn deform_residual_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reg = RegWeights::default();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let g = DeformationGrid::new(3, 2, 30, 20, (0..6).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap();
            let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..10.1)).collect();
            let rs = residuals_deform(0, &g, &w, &reg);
            let h = 1e-6;
            for (idx, r) in rs.iter().enumerate() {
                for (c, col) in r.columns.iter().enumerate() {
                    let k = col.slot - SLOT_HANDLE;
                    let mut gp = g.clone();
                    gp.handles[k] += h;
                    let mut gm = g.clone();
                    gm.handles[k] -= h;
                    let fd =
                        (residuals_deform(0, &gp, &w, &reg)[idx].values[0] - residuals_deform(0, &gm, &w, &reg)[idx].values[0]) / (2.0 * h);
                    worst = worst.max(rel_err(r.jacobian[(0, c)], fd));
                }
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn focal_loss_examples_and_gradient() {
        let prior = default_focal_prior();
        assert_eq!(loss_focal(&[prior, prior], prior).0, 0.0);
        assert!((loss_focal(&[prior + 1.0], prior).0 - 1.0).abs() < 1e-12);
        assert!((prior - 2.7474774194546216).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let f: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..5.0)).collect();
            let (_, grad) = loss_focal(&f, prior);
            for i in 0..4 {
                let mut fp = f.clone();
                fp[i] += h;
                let mut fm = f.clone();
                fm[i] -= h;
                let fd = (loss_focal(&fp, prior).0 - loss_focal(&fm, prior).0) / (2.0 * h);
                worst = worst.max(rel_err(grad[i], fd));
            }
            let reg = RegWeights::default();
            let r = residual_focal(0, f[0], &reg);
            let fd = (residual_focal(0, f[0] + h, &reg).values[0] - residual_focal(0, f[0] - h, &reg).values[0]) / (2.0 * h);
            worst = worst.max(rel_err(r.jacobian[(0, 0)], fd));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn huber_caps_growth() {
        let mut r = Residual {
            values: vec![3.0, 4.0],
            columns: vec![],
            jacobian: DMatrix::zeros(2, 0),
        };
        r.huberize(1.0);
        assert!((r.squared_norm() - (2.0 * 5.0 - 1.0)).abs() < 1e-12);
        let mut small = Residual {
            values: vec![0.3],
            columns: vec![],
            jacobian: DMatrix::zeros(1, 0),
        };
        small.huberize(1.0);
        assert_eq!(small.values[0], 0.3);
    }

    #[test]
    fn reg_weights_validation() {
        assert!(RegWeights::default().validate().is_ok());
        assert!(RegWeights {
            lambda1: -1.0,
            ..RegWeights::default()
        }
        .validate()
        .is_err());
        assert!(LossKind::parse("ratio") == Some(LossKind::SpatialRatio));
    }
}
